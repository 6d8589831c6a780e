#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "lcanet/ctc.hpp"
#include "lcanet/gradcheck.hpp"
#include "lcanet/rng.hpp"

using namespace lcanet;

namespace {

using TensorD = Tensor<double>;

TensorD random_rows(std::int64_t t, std::int64_t v, Rng& rng) {
    TensorD probs({t, v});
    for (std::int64_t i = 0; i < t; ++i) {
        double sum = 0.0;
        for (std::int64_t j = 0; j < v; ++j) {
            probs.at(i, j) = 0.05 + rng.uniform();
            sum += probs.at(i, j);
        }
        for (std::int64_t j = 0; j < v; ++j) probs.at(i, j) /= sum;
    }
    return probs;
}

std::vector<int> random_target(std::int64_t max_len, std::int64_t v, Rng& rng) {
    const auto len = 1 + rng.uniform_int(static_cast<std::uint64_t>(max_len));
    std::vector<int> out;
    for (std::uint64_t i = 0; i < len; ++i)
        out.push_back(1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(v - 1))));
    return out;
}

// Sums exp(-loss) over every transcript of length 0..T (including the empty
// one) for a V-symbol vocabulary.
double total_transcript_probability(const TensorD& probs) {
    const std::int64_t T = probs.rows();
    const std::int64_t V = probs.cols();
    double total = 0.0;
    std::vector<int> labels;
    auto visit = [&](auto&& self) -> void {
        const double logp = ctc_log_prob(probs, labels);
        if (std::isfinite(logp)) total += std::exp(logp);
        if (static_cast<std::int64_t>(labels.size()) == T) return;
        for (int k = 1; k < V; ++k) {
            labels.push_back(k);
            self(self);
            labels.pop_back();
        }
    };
    visit(visit);
    return total;
}

}  // namespace

TEST_CASE("collapse merges repeats then removes blanks", "[ctc]") {
    // (x, -, -, y, -, z) -> xyz
    CHECK(collapse(std::vector<int>{1, 0, 0, 2, 0, 3}) == std::vector<int>{1, 2, 3});
    // x x - - y -> x y
    CHECK(collapse(std::vector<int>{1, 1, 0, 0, 2}) == std::vector<int>{1, 2});
    // - a b - b -> a b b
    CHECK(collapse(std::vector<int>{0, 1, 2, 0, 2}) == std::vector<int>{1, 2, 2});
}

TEST_CASE("collapse output never contains blank and survives blank insertion", "[ctc][property]") {
    Rng rng(77);
    for (int rep = 0; rep < 200; ++rep) {
        const std::int64_t T = 2 + static_cast<std::int64_t>(rng.uniform_int(6));
        std::vector<int> path;
        for (std::int64_t i = 0; i < T; ++i)
            path.push_back(static_cast<int>(rng.uniform_int(4)));
        auto base = collapse(path);
        for (int b : base) CHECK(b != 0);
        // Inserting a blank between two distinct symbols leaves the result
        // unchanged.
        for (std::size_t i = 1; i < path.size(); ++i) {
            if (path[i] == path[i - 1]) continue;
            auto with_blank = path;
            with_blank.insert(with_blank.begin() + static_cast<std::ptrdiff_t>(i), 0);
            CHECK(collapse(with_blank) == base);
        }
    }
}

TEST_CASE("vocabulary basics", "[ctc]") {
    auto vocab = Vocabulary::grid();
    CHECK(vocab.size() == 28);
    CHECK(vocab.index_of(' ') == 1);
    CHECK(vocab.index_of('a') == 2);
    CHECK(vocab.encode("ab") == std::vector<int>{2, 3});
    CHECK_THROWS_AS(vocab.index_of('#'), VocabError);
    CHECK_THROWS_AS(vocab.decode(std::vector<int>{0, 2}), VocabError);
}

TEST_CASE("ctc loss on single-frame and two-frame instances", "[ctc]") {
    // T=1, V={blank, a}, probs (0.5, 0.5), target "a": only the path (a).
    {
        TensorD probs({1, 2}, {0.5, 0.5});
        const std::vector<int> target{1};
        CHECK_THAT(-ctc_log_prob(probs, target), Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
    }
    // T=2, uniform rows, target "a": paths a-, -a, aa of total mass 0.75.
    {
        TensorD probs({2, 2}, {0.5, 0.5, 0.5, 0.5});
        const std::vector<int> target{1};
        const double loss = -ctc_log_prob(probs, target);
        CHECK_THAT(loss, Catch::Matchers::WithinAbs(-std::log(0.75), 1e-12));
        CHECK_THAT(loss, Catch::Matchers::WithinAbs(ctc_bruteforce(probs, target), 1e-12));
    }
}

TEST_CASE("ctc dynamic program equals brute force on random instances", "[ctc][oracle]") {
    Rng rng(101);
    int tested = 0;
    while (tested < 60) {
        const std::int64_t T = 1 + static_cast<std::int64_t>(rng.uniform_int(8));
        const std::int64_t V = 2 + static_cast<std::int64_t>(rng.uniform_int(3));
        auto probs = random_rows(T, V, rng);
        auto target = random_target(4, V, rng);
        if (!ctc_feasible(target, T)) continue;
        const double dp = -ctc_log_prob(probs, target);
        const double bf = ctc_bruteforce(probs, target);
        REQUIRE(std::isfinite(dp));
        CHECK_THAT(dp, Catch::Matchers::WithinAbs(bf, 1e-9));
        ++tested;
    }
}

TEST_CASE("brute force flags unproducible targets as infinite loss", "[ctc]") {
    TensorD probs({2, 3}, {0.2, 0.4, 0.4, 0.2, 0.4, 0.4});
    const std::vector<int> too_long{1, 2, 1};
    CHECK(std::isinf(ctc_bruteforce(probs, too_long)));
}

TEST_CASE("deterministic one-hot rows give zero loss", "[ctc]") {
    // Rows spell a, -, b with certainty; target "ab" has probability 1.
    TensorD probs({3, 3}, {0, 1, 0, 1, 0, 0, 0, 0, 1});
    const std::vector<int> target{1, 2};
    CHECK_THAT(ctc_bruteforce(probs, target), Catch::Matchers::WithinAbs(0.0, 1e-12));
    CHECK_THAT(-ctc_log_prob(probs, target), Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("total probability over all transcripts is one", "[ctc][property]") {
    Rng rng(211);
    for (int rep = 0; rep < 10; ++rep) {
        const std::int64_t T = 2 + static_cast<std::int64_t>(rng.uniform_int(4));
        const std::int64_t V = 2 + static_cast<std::int64_t>(rng.uniform_int(2));
        auto probs = random_rows(T, V, rng);
        CHECK_THAT(total_transcript_probability(probs), Catch::Matchers::WithinAbs(1.0, 1e-8));
    }
}

TEST_CASE("ctc loss feasibility and vocabulary errors", "[ctc]") {
    Tape<double> tape;
    auto probs = tape.leaf(TensorD({2, 3}, {0.2, 0.4, 0.4, 0.2, 0.4, 0.4}));
    const std::vector<int> too_long{1, 2, 1};
    CHECK_THROWS_AS(ctc_loss(probs, too_long), FeasibilityError);
    // Adjacent repeats need a separating blank frame.
    const std::vector<int> repeat{1, 1};
    CHECK_THROWS_AS(ctc_loss(probs, repeat), FeasibilityError);
    const std::vector<int> empty{};
    CHECK_THROWS_AS(ctc_loss(probs, empty), FeasibilityError);
    const std::vector<int> bad{1, 7};
    CHECK_THROWS_AS(ctc_loss(probs, bad), VocabError);
}

TEST_CASE("ctc loss gradient passes finite differences", "[ctc][gradcheck]") {
    Rng rng(303);
    const std::vector<int> target{1, 2, 1};
    auto probs = random_rows(6, 3, rng);

    auto eval = [&](const std::vector<TensorD>& params, std::vector<TensorD>* grads) {
        Tape<double> tape;
        auto p = tape.leaf(params[0]);
        auto loss = ctc_loss(p, target);
        if (grads) {
            tape.backward(loss);
            *grads = {tape.grad(p.id)};
        }
        return loss.value()[0];
    };
    std::vector<TensorD> analytic;
    eval({probs}, &analytic);
    auto f = [&](const std::vector<TensorD>& p) { return eval(p, nullptr); };
    const auto report = gradcheck(f, {probs}, analytic, 100, 1e-6, 31);
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("greedy decode", "[ctc]") {
    auto vocab = Vocabulary::grid();
    const int a = vocab.index_of('a');
    const int b = vocab.index_of('b');
    const std::int64_t V = vocab.size();

    auto one_hot_rows = [&](const std::vector<int>& path) {
        TensorD probs({static_cast<std::int64_t>(path.size()), V});
        for (std::size_t t = 0; t < path.size(); ++t) probs.at(static_cast<std::int64_t>(t), path[t]) = 1.0;
        return probs;
    };

    // Argmax sequence - - a - a b - collapses to "aab".
    CHECK(greedy_decode(one_hot_rows({0, 0, a, 0, a, b, 0}), vocab) == "aab");
    // One-hot frames spelling the target give the target back.
    CHECK(greedy_decode(one_hot_rows({b, 0, a}), vocab) == "ba");
    // All blank rows give an empty transcript.
    CHECK(greedy_decode(one_hot_rows({0, 0, 0}), vocab) == "");
}

TEST_CASE("prefix beam search on the two-frame instance", "[ctc]") {
    Vocabulary vocab("a");
    TensorD probs({2, 2}, {0.6, 0.4, 0.6, 0.4});
    auto hyps = prefix_beam_decode(probs, vocab, 2, 2);
    REQUIRE(hyps.size() == 2);
    CHECK(hyps[0].text == "a");
    CHECK_THAT(std::exp(hyps[0].log_prob), Catch::Matchers::WithinAbs(0.64, 1e-12));
    CHECK(hyps[1].text == "");
    CHECK_THAT(std::exp(hyps[1].log_prob), Catch::Matchers::WithinAbs(0.36, 1e-12));
}

TEST_CASE("wide prefix beam matches exhaustive marginalization", "[ctc][oracle]") {
    Rng rng(407);
    Vocabulary vocab("ab");
    for (int rep = 0; rep < 20; ++rep) {
        const std::int64_t T = 2 + static_cast<std::int64_t>(rng.uniform_int(3));
        auto probs = random_rows(T, 3, rng);

        // Oracle: evaluate every transcript exactly.
        std::string best_text;
        double best_logp = -std::numeric_limits<double>::infinity();
        std::vector<int> labels;
        auto visit = [&](auto&& self) -> void {
            const double logp = ctc_log_prob(probs, labels);
            if (logp > best_logp) {
                best_logp = logp;
                best_text = vocab.decode(labels);
            }
            if (static_cast<std::int64_t>(labels.size()) == T) return;
            for (int k = 1; k < 3; ++k) {
                labels.push_back(k);
                self(self);
                labels.pop_back();
            }
        };
        visit(visit);

        auto hyps = prefix_beam_decode(probs, vocab, 4000, 1);
        REQUIRE(!hyps.empty());
        CHECK(hyps[0].text == best_text);
        CHECK_THAT(hyps[0].log_prob, Catch::Matchers::WithinAbs(best_logp, 1e-9));
    }
}

TEST_CASE("beam width one follows the greedy path on peaked rows", "[ctc]") {
    Rng rng(509);
    Vocabulary vocab("ab");
    for (int rep = 0; rep < 20; ++rep) {
        const std::int64_t T = 3 + static_cast<std::int64_t>(rng.uniform_int(4));
        TensorD probs({T, 3});
        for (std::int64_t t = 0; t < T; ++t) {
            const auto peak = rng.uniform_int(3);
            for (std::int64_t k = 0; k < 3; ++k)
                probs.at(t, k) = (static_cast<std::uint64_t>(k) == peak) ? 0.96 : 0.02;
        }
        auto hyps = prefix_beam_decode(probs, vocab, 1, 1);
        REQUIRE(!hyps.empty());
        CHECK(hyps[0].text == greedy_decode(probs, vocab));
    }
}

TEST_CASE("beam total probability is non-decreasing in width", "[ctc][property]") {
    Rng rng(613);
    Vocabulary vocab("ab");
    for (int rep = 0; rep < 10; ++rep) {
        auto probs = random_rows(6, 3, rng);
        double prev = -std::numeric_limits<double>::infinity();
        for (int width : {1, 2, 4, 8, 16}) {
            auto hyps = prefix_beam_decode(probs, vocab, width, 1);
            REQUIRE(!hyps.empty());
            CHECK(hyps[0].log_prob >= prev - 1e-12);
            prev = hyps[0].log_prob;
        }
    }
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "lcanet/metrics.hpp"
#include "lcanet/rng.hpp"

using namespace lcanet;

TEST_CASE("levenshtein basics", "[metrics]") {
    CHECK(levenshtein(std::string(""), std::string("")) == 0);
    CHECK(levenshtein(std::string("abc"), std::string("")) == 3);
    CHECK(levenshtein(std::string("kitten"), std::string("sitting")) == 3);
    CHECK(levenshtein(std::string("flaw"), std::string("lawn")) == 2);
}

TEST_CASE("levenshtein is a metric", "[metrics][property]") {
    Rng rng(67);
    auto random_string = [&]() {
        std::string s;
        const auto len = rng.uniform_int(8);
        for (std::uint64_t i = 0; i < len; ++i)
            s.push_back(static_cast<char>('a' + rng.uniform_int(3)));
        return s;
    };
    for (int rep = 0; rep < 200; ++rep) {
        const auto a = random_string();
        const auto b = random_string();
        const auto c = random_string();
        CHECK(levenshtein(a, a) == 0);
        CHECK(levenshtein(a, b) == levenshtein(b, a));
        CHECK(levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c));
        if (a != b) CHECK(levenshtein(a, b) > 0);
    }
}

TEST_CASE("cer and wer", "[metrics]") {
    CHECK(cer("set blue at h seven again", "set blue at h seven again") == 0.0);
    CHECK(wer("set blue at h seven again", "set blue at h seven again") == 0.0);

    // One substituted word out of six.
    CHECK_THAT(wer("set blue at h seven again", "set blue with h seven again"),
               Catch::Matchers::WithinAbs(1.0 / 6.0, 1e-15));

    // Insertions can push the rate above one.
    CHECK_THAT(cer("aaaa", "a"), Catch::Matchers::WithinAbs(3.0, 1e-15));

    CHECK_THROWS_AS(cer("x", ""), Error);
    CHECK_THROWS_AS(wer("x", "   "), Error);
}

TEST_CASE("appending matched suffixes never increases the rate", "[metrics][property]") {
    Rng rng(71);
    auto random_string = [&]() {
        std::string s;
        const auto len = 1 + rng.uniform_int(6);
        for (std::uint64_t i = 0; i < len; ++i)
            s.push_back(static_cast<char>('a' + rng.uniform_int(3)));
        return s;
    };
    for (int rep = 0; rep < 100; ++rep) {
        const auto pred = random_string();
        const auto ref = random_string();
        const auto suffix = random_string();
        const double base = cer(pred, ref);
        const double extended = cer(pred + suffix, ref + suffix);
        CHECK(extended <= base + 1e-12);
    }
}

TEST_CASE("corpus-level rates divide summed distances by summed lengths", "[metrics]") {
    const std::vector<std::string> preds{"ab", "xyz"};
    const std::vector<std::string> refs{"ac", "xyz"};
    // Distances 1 + 0 over lengths 2 + 3.
    CHECK_THAT(corpus_cer(preds, refs), Catch::Matchers::WithinAbs(1.0 / 5.0, 1e-15));
}

TEST_CASE("positional word accuracy", "[metrics]") {
    const std::vector<std::string> preds{"set blue at h seven again"};
    const std::vector<std::string> refs{"set blue with h seven again"};
    CHECK_THAT(positional_word_accuracy(preds, refs), Catch::Matchers::WithinAbs(5.0 / 6.0, 1e-15));
}

TEST_CASE("bleu of identical corpora is exactly one", "[metrics]") {
    const std::vector<std::string> refs{"set blue with h seven again", "bin red at q two now"};
    CHECK(bleu(refs, refs) == 1.0);
}

TEST_CASE("bleu on a single-word corpus uses only the unigram order", "[metrics]") {
    const std::vector<std::string> preds{"now"};
    const std::vector<std::string> refs{"now"};
    // Orders 2..4 have no candidate n-grams and are skipped entirely.
    CHECK(bleu(preds, refs) == 1.0);
    const std::vector<std::string> wrong{"soon"};
    CHECK(bleu(wrong, refs) < 1e-8);
}

TEST_CASE("bleu matches hand-counted n-gram precisions", "[metrics][oracle]") {
    const std::vector<std::string> preds{"set blue at h seven again"};
    const std::vector<std::string> refs{"set blue with h seven again"};
    // Hand enumeration: p1 = 5/6, p2 = 3/5, p3 = 1/4, p4 = 0/3 (smoothed to
    // eps/3); candidate and reference lengths match, so no brevity penalty.
    const double eps = 1e-9;
    const double expected =
        std::exp((std::log(5.0 / 6.0) + std::log(3.0 / 5.0) + std::log(1.0 / 4.0) +
                  std::log(eps / 3.0)) /
                 4.0);
    CHECK_THAT(bleu(preds, refs), Catch::Matchers::WithinAbs(expected, 1e-15));
}

TEST_CASE("bleu is one only for token-identical corpora", "[metrics][property]") {
    Rng rng(73);
    const std::vector<std::string> lexicon{"set", "bin", "blue", "red", "at", "with",
                                           "h",   "q",   "two",  "ten", "now", "soon"};
    for (int rep = 0; rep < 100; ++rep) {
        auto sentence = [&]() {
            std::string s;
            const auto len = 1 + rng.uniform_int(6);
            for (std::uint64_t i = 0; i < len; ++i) {
                if (i) s.push_back(' ');
                s += lexicon[rng.uniform_int(lexicon.size())];
            }
            return s;
        };
        std::vector<std::string> preds{sentence(), sentence()};
        std::vector<std::string> refs{sentence(), sentence()};
        const double score = bleu(preds, refs);
        if (preds == refs)
            CHECK(score == 1.0);
        else
            CHECK(score < 1.0);
        CHECK(score >= 0.0);
    }
    CHECK_THROWS_AS(bleu(std::vector<std::string>{"a"}, std::vector<std::string>{}), Error);
}

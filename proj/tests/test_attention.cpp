#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "lcanet/attention.hpp"
#include "lcanet/gradcheck.hpp"
#include "lcanet/model.hpp"

using namespace lcanet;

namespace {

using D = double;
using TensorD = Tensor<double>;
using ValD = Val<double>;

TensorD random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    TensorD t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(-scale, scale);
    return t;
}

AttentionVals<D> attn_leaves(Tape<D>& tape, const TensorD& v_a, const TensorD& w_a,
                             const TensorD& u_a) {
    return {tape.leaf(v_a), tape.leaf(w_a), tape.leaf(u_a)};
}

DecoderVals<D> random_decoder(Tape<D>& tape, Rng& rng, std::int64_t v, std::int64_t d_e,
                              std::int64_t d_s, std::int64_t d_enc, std::int64_t d_a,
                              double scale = 1.0) {
    DecoderVals<D> dec;
    dec.attn = {tape.leaf(random_tensor({d_a, 1}, rng, scale)),
                tape.leaf(random_tensor({d_a, d_s}, rng, scale)),
                tape.leaf(random_tensor({d_a, d_enc}, rng, scale))};
    dec.cell.w_z = tape.leaf(random_tensor({d_s, d_e}, rng, scale));
    dec.cell.u_z = tape.leaf(random_tensor({d_s, d_s}, rng, scale));
    dec.cell.b_z = tape.leaf(random_tensor({d_s}, rng, scale));
    dec.cell.w_r = tape.leaf(random_tensor({d_s, d_e}, rng, scale));
    dec.cell.u_r = tape.leaf(random_tensor({d_s, d_s}, rng, scale));
    dec.cell.b_r = tape.leaf(random_tensor({d_s}, rng, scale));
    dec.cell.w_h = tape.leaf(random_tensor({d_s, d_e}, rng, scale));
    dec.cell.u_h = tape.leaf(random_tensor({d_s, d_s}, rng, scale));
    dec.cell.c_z = tape.leaf(random_tensor({d_s, d_enc}, rng, scale));
    dec.cell.c_r = tape.leaf(random_tensor({d_s, d_enc}, rng, scale));
    dec.cell.c_p = tape.leaf(random_tensor({d_s, d_enc}, rng, scale));
    dec.cell.has_context = true;
    dec.w_o = tape.leaf(random_tensor({v, d_e}, rng, scale));
    dec.u_o = tape.leaf(random_tensor({v, d_s}, rng, scale));
    dec.c_o = tape.leaf(random_tensor({v, d_enc}, rng, scale));
    dec.embedding = tape.leaf(random_tensor({v, d_e}, rng, scale));
    return dec;
}

}  // namespace

TEST_CASE("attention weights degenerate cases", "[attention]") {
    Rng rng(3);
    const std::int64_t T = 6, d_enc = 4, d_s = 3, d_a = 5;

    // V_a = 0 makes every energy zero, so the weights are uniform.
    {
        Tape<D> tape;
        auto p = attn_leaves(tape, TensorD::zeros({d_a, 1}), random_tensor({d_a, d_s}, rng),
                             random_tensor({d_a, d_enc}, rng));
        auto alpha = attention_weights(tape.leaf(random_tensor({1, d_s}, rng)),
                                       tape.leaf(random_tensor({T, d_enc}, rng)), p);
        REQUIRE(alpha.value().shape == Shape{1, T});
        for (std::int64_t j = 0; j < T; ++j)
            CHECK_THAT(alpha.value()[j], Catch::Matchers::WithinAbs(1.0 / T, 1e-12));
    }
    // Identical encoder rows give uniform weights regardless of parameters.
    {
        Tape<D> tape;
        auto p = attn_leaves(tape, random_tensor({d_a, 1}, rng), random_tensor({d_a, d_s}, rng),
                             random_tensor({d_a, d_enc}, rng));
        auto row = random_tensor({1, d_enc}, rng);
        TensorD h({T, d_enc});
        for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t j = 0; j < d_enc; ++j) h.at(t, j) = row[j];
        auto alpha =
            attention_weights(tape.leaf(random_tensor({1, d_s}, rng)), tape.leaf(h), p);
        for (std::int64_t j = 0; j < T; ++j)
            CHECK_THAT(alpha.value()[j], Catch::Matchers::WithinAbs(1.0 / T, 1e-12));
    }
    // T = 1 collapses to a single weight of 1.
    {
        Tape<D> tape;
        auto p = attn_leaves(tape, random_tensor({d_a, 1}, rng), random_tensor({d_a, d_s}, rng),
                             random_tensor({d_a, d_enc}, rng));
        auto alpha = attention_weights(tape.leaf(random_tensor({1, d_s}, rng)),
                                       tape.leaf(random_tensor({1, d_enc}, rng)), p);
        REQUIRE(alpha.value().size() == 1);
        CHECK_THAT(alpha.value()[0], Catch::Matchers::WithinAbs(1.0, 1e-15));
    }
}

TEST_CASE("context vector is the weighted average of encoder rows", "[attention]") {
    Rng rng(7);
    const std::int64_t T = 5, d_enc = 3;
    Tape<D> tape;
    auto h_val = random_tensor({T, d_enc}, rng);
    auto h = tape.leaf(h_val);

    // Uniform weights give the row mean.
    auto uniform = tape.leaf(TensorD::full({1, T}, 1.0 / T));
    auto c = context_vector(uniform, h);
    for (std::int64_t j = 0; j < d_enc; ++j) {
        double mean = 0.0;
        for (std::int64_t t = 0; t < T; ++t) mean += h_val.at(t, j) / T;
        CHECK_THAT(c.value()[j], Catch::Matchers::WithinAbs(mean, 1e-12));
    }
    // One-hot weights pick out one row.
    TensorD one_hot({1, T});
    one_hot[3] = 1.0;
    auto c3 = context_vector(tape.leaf(one_hot), h);
    for (std::int64_t j = 0; j < d_enc; ++j)
        CHECK_THAT(c3.value()[j], Catch::Matchers::WithinAbs(h_val.at(3, j), 1e-12));

    // Any distribution keeps each coordinate inside the convex hull.
    TensorD w({1, T}, {0.1, 0.3, 0.2, 0.25, 0.15});
    auto cw = context_vector(tape.leaf(w), h);
    for (std::int64_t j = 0; j < d_enc; ++j) {
        double lo = h_val.at(0, j), hi = h_val.at(0, j);
        for (std::int64_t t = 1; t < T; ++t) {
            lo = std::min(lo, h_val.at(t, j));
            hi = std::max(hi, h_val.at(t, j));
        }
        CHECK(cw.value()[j] >= lo - 1e-12);
        CHECK(cw.value()[j] <= hi + 1e-12);
    }

    CHECK_THROWS_AS(context_vector(tape.leaf(TensorD({1, 4}, {1, 0, 0, 0})), h), ShapeError);
}

TEST_CASE("decoder step output distribution", "[attention]") {
    Rng rng(11);
    const std::int64_t V = 4, d_e = 3, d_s = 3, d_enc = 4, d_a = 3, T = 5;

    // All-zero parameters: logits are zero, so the output is uniform.
    {
        Tape<D> tape;
        DecoderVals<D> dec = random_decoder(tape, rng, V, d_e, d_s, d_enc, d_a, 0.0);
        auto h = tape.leaf(random_tensor({T, d_enc}, rng));
        auto s0 = tape.leaf(TensorD::zeros({1, d_s}));
        TensorD y0({1, V});
        y0[0] = 1.0;
        auto step = decoder_step(s0, tape.leaf(y0), h, dec);
        for (std::int64_t k = 0; k < V; ++k)
            CHECK_THAT(step.y.value()[k], Catch::Matchers::WithinAbs(1.0 / V, 1e-12));
    }
    // Random parameters: output rows stay normalized.
    {
        Tape<D> tape;
        DecoderVals<D> dec = random_decoder(tape, rng, V, d_e, d_s, d_enc, d_a);
        auto h = tape.leaf(random_tensor({T, d_enc}, rng));
        auto s0 = tape.leaf(random_tensor({1, d_s}, rng));
        TensorD y0({1, V});
        y0[0] = 1.0;
        auto step = decoder_step(s0, tape.leaf(y0), h, dec);
        double sum = 0.0;
        for (std::int64_t k = 0; k < V; ++k) sum += step.y.value()[k];
        CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("attention weights permute with the encoder rows", "[attention][property]") {
    Rng rng(13);
    const std::int64_t T = 6, d_enc = 3, d_s = 2, d_a = 4;
    auto v_a = random_tensor({d_a, 1}, rng);
    auto w_a = random_tensor({d_a, d_s}, rng);
    auto u_a = random_tensor({d_a, d_enc}, rng);
    auto s_val = random_tensor({1, d_s}, rng);
    auto h_val = random_tensor({T, d_enc}, rng);

    Tape<D> tape;
    auto p = attn_leaves(tape, v_a, w_a, u_a);
    auto base = attention_weights(tape.leaf(s_val), tape.leaf(h_val), p);

    // Reverse the frames; the weights must reverse identically.
    TensorD rev({T, d_enc});
    for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t j = 0; j < d_enc; ++j) rev.at(t, j) = h_val.at(T - 1 - t, j);
    auto flipped = attention_weights(tape.leaf(s_val), tape.leaf(rev), p);
    for (std::int64_t t = 0; t < T; ++t)
        CHECK_THAT(flipped.value()[t], Catch::Matchers::WithinAbs(base.value()[T - 1 - t], 1e-12));
}

TEST_CASE("decode_sequence shapes and trace invariants", "[attention]") {
    Rng rng(17);
    const std::int64_t V = 5, d_e = 3, d_s = 4, d_enc = 6, d_a = 4;

    SECTION("single input frame") {
        Tape<D> tape;
        auto dec = random_decoder(tape, rng, V, d_e, d_s, d_enc, d_a);
        auto h_val = random_tensor({1, d_enc}, rng);
        auto trace = decode_sequence(tape.leaf(h_val), dec, 1);
        REQUIRE(trace.outputs.value().shape == Shape{1, V});
        CHECK_THAT(trace.attention[0], Catch::Matchers::WithinAbs(1.0, 1e-15));
        for (std::int64_t j = 0; j < d_enc; ++j)
            CHECK_THAT(trace.contexts[j], Catch::Matchers::WithinAbs(h_val[j], 1e-12));
    }

    SECTION("toy-scale trace: rows of attention and outputs are distributions") {
        Tape<D> tape;
        auto dec = random_decoder(tape, rng, V, d_e, d_s, d_enc, d_a);
        const std::int64_t T = 20;
        auto trace = decode_sequence(tape.leaf(random_tensor({T, d_enc}, rng)), dec, T);
        REQUIRE(trace.outputs.value().shape == Shape{T, V});
        REQUIRE(trace.attention.shape == Shape{T, T});
        for (std::int64_t t = 0; t < T; ++t) {
            double asum = 0.0, ysum = 0.0;
            for (std::int64_t j = 0; j < T; ++j) asum += trace.attention.at(t, j);
            for (std::int64_t k = 0; k < V; ++k) ysum += trace.outputs.value().at(t, k);
            CHECK_THAT(asum, Catch::Matchers::WithinAbs(1.0, 1e-9));
            CHECK_THAT(ysum, Catch::Matchers::WithinAbs(1.0, 1e-9));
        }
    }

    SECTION("output length follows the requested length") {
        Tape<D> tape;
        auto dec = random_decoder(tape, rng, V, d_e, d_s, d_enc, d_a);
        auto h = tape.leaf(random_tensor({4, d_enc}, rng));
        CHECK(decode_sequence(h, dec, 7).outputs.value().rows() == 7);
        CHECK_THROWS_AS(decode_sequence(h, dec, 0), Error);
        const std::vector<int> teacher{1, 2};
        CHECK_THROWS_AS(decode_sequence(h, dec, 3, teacher), ShapeError);
    }
}

TEST_CASE("full-scale decode produces 75x28 distributions", "[attention]") {
    Rng rng(19);
    Tape<float> tape;
    DecoderVals<float> dec;
    const std::int64_t V = 28, d_e = 64, d_s = 256, d_enc = 512, d_a = 128;
    auto leaf = [&](Shape s) {
        Tensor<float> t(std::move(s));
        for (auto& v : t.data) v = static_cast<float>(rng.uniform(-0.05, 0.05));
        return tape.leaf(std::move(t));
    };
    dec.attn = {leaf({d_a, 1}), leaf({d_a, d_s}), leaf({d_a, d_enc})};
    dec.cell = {leaf({d_s, d_e}), leaf({d_s, d_s}), leaf({d_s}),
                leaf({d_s, d_e}), leaf({d_s, d_s}), leaf({d_s}),
                leaf({d_s, d_e}), leaf({d_s, d_s}),
                leaf({d_s, d_enc}), leaf({d_s, d_enc}), leaf({d_s, d_enc}), true};
    dec.w_o = leaf({V, d_e});
    dec.u_o = leaf({V, d_s});
    dec.c_o = leaf({V, d_enc});
    dec.embedding = leaf({V, d_e});

    auto trace = decode_sequence(leaf({75, d_enc}), dec, 75);
    REQUIRE(trace.outputs.value().shape == Shape{75, 28});
    for (std::int64_t t = 0; t < 75; ++t) {
        double sum = 0.0;
        for (std::int64_t k = 0; k < 28; ++k) sum += trace.outputs.value().at(t, k);
        CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
}

TEST_CASE("decoder step passes gradcheck end to end", "[attention][gradcheck]") {
    Rng rng(23);
    const std::int64_t V = 3, d_e = 2, d_s = 3, d_enc = 4, d_a = 3, T = 4;
    // Parameters in a flat list: attention (3), cell (11), out maps (3),
    // embedding (1), plus the encoder states and initial decoder state.
    std::vector<TensorD> params;
    params.push_back(random_tensor({d_a, 1}, rng));
    params.push_back(random_tensor({d_a, d_s}, rng));
    params.push_back(random_tensor({d_a, d_enc}, rng));
    params.push_back(random_tensor({d_s, d_e}, rng));
    params.push_back(random_tensor({d_s, d_s}, rng));
    params.push_back(random_tensor({d_s}, rng));
    params.push_back(random_tensor({d_s, d_e}, rng));
    params.push_back(random_tensor({d_s, d_s}, rng));
    params.push_back(random_tensor({d_s}, rng));
    params.push_back(random_tensor({d_s, d_e}, rng));
    params.push_back(random_tensor({d_s, d_s}, rng));
    params.push_back(random_tensor({d_s, d_enc}, rng));
    params.push_back(random_tensor({d_s, d_enc}, rng));
    params.push_back(random_tensor({d_s, d_enc}, rng));
    params.push_back(random_tensor({V, d_e}, rng));
    params.push_back(random_tensor({V, d_s}, rng));
    params.push_back(random_tensor({V, d_enc}, rng));
    params.push_back(random_tensor({V, d_e}, rng));  // embedding
    params.push_back(random_tensor({T, d_enc}, rng));  // encoder states
    params.push_back(random_tensor({1, d_s}, rng));    // s_prev
    auto probe = random_tensor({1, V}, rng);

    auto eval = [&](const std::vector<TensorD>& p, std::vector<TensorD>* grads) {
        Tape<D> tape;
        std::vector<ValD> l;
        for (const auto& t : p) l.push_back(tape.leaf(t));
        DecoderVals<D> dec;
        dec.attn = {l[0], l[1], l[2]};
        dec.cell = {l[3], l[4], l[5], l[6], l[7], l[8], l[9], l[10], l[11], l[12], l[13], true};
        dec.w_o = l[14];
        dec.u_o = l[15];
        dec.c_o = l[16];
        dec.embedding = l[17];
        TensorD y0({1, V});
        y0[0] = 1.0;
        auto step = decoder_step(l[19], tape.leaf(y0), l[18], dec);
        auto root = sum_all(mul(step.y, tape.leaf(probe)));
        if (grads) {
            tape.backward(root);
            grads->clear();
            for (auto& leaf : l) grads->push_back(tape.grad(leaf.id));
        }
        return root.value()[0];
    };
    std::vector<TensorD> analytic;
    eval(params, &analytic);
    auto f = [&](const std::vector<TensorD>& p) { return eval(p, nullptr); };
    CHECK(gradcheck(f, params, analytic, 40, 1e-5, 29).max_rel_err < 1e-4);
}

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lcanet/attention.hpp"
#include "lcanet/ctc.hpp"
#include "lcanet/gradcheck.hpp"
#include "lcanet/layers.hpp"
#include "lcanet/model.hpp"

namespace lcanet {

struct GradSuiteRow {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 1e-4;
    std::int64_t checked = 0;
    bool pass = false;
};

namespace detail {

using BuildFn = std::function<Val<double>(Tape<double>&, std::vector<Val<double>>&)>;

inline GradSuiteRow check_build(const std::string& name, const BuildFn& build,
                                std::vector<Tensor<double>> params, std::int64_t coords,
                                double tolerance, double fault) {
    auto eval = [&](const std::vector<Tensor<double>>& p, std::vector<Tensor<double>>* grads) {
        Tape<double> tape;
        std::vector<Val<double>> leaves;
        leaves.reserve(p.size());
        for (const auto& t : p) leaves.push_back(tape.leaf(t));
        auto root = build(tape, leaves);
        if (grads) {
            tape.backward(root);
            grads->clear();
            for (const auto& l : leaves) grads->push_back(tape.grad(l.id));
        }
        return root.value()[0];
    };
    std::vector<Tensor<double>> analytic;
    eval(params, &analytic);
    if (fault != 0.0)
        for (auto& g : analytic)
            for (auto& v : g.data) v *= 1.0 + fault;
    auto f = [&](const std::vector<Tensor<double>>& p) { return eval(p, nullptr); };
    const auto report = gradcheck(f, params, analytic, coords, 1e-5, 1234);
    GradSuiteRow row{name, report.max_rel_err, tolerance, report.checked, false};
    row.pass = report.max_rel_err <= tolerance;
    return row;
}

inline Tensor<double> rnd(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(-scale, scale);
    return t;
}

}  // namespace detail

/// Finite-difference checks for every layer operation plus one end-to-end
/// model. `fault` non-zero corrupts the analytic gradients on purpose, which
/// must make the suite fail (a sensitivity self-test of the checker).
inline std::vector<GradSuiteRow> run_gradient_suite(Variant variant, std::uint64_t seed,
                                                    std::int64_t coords = 100, double fault = 0.0) {
    using detail::rnd;
    using V = Val<double>;
    using L = std::vector<V>;
    Rng rng(seed);
    std::vector<GradSuiteRow> rows;

    {
        auto probe = rnd({2, 2, 2, 2}, rng);
        rows.push_back(detail::check_build(
            "conv3d",
            [probe](Tape<double>& t, L& l) {
                return sum_all(mul(conv3d(l[0], l[1], {2, 1, 2}, {1, 0, 1}), t.leaf(probe)));
            },
            {rnd({2, 3, 4, 4}, rng), rnd({2, 2, 2, 3, 3}, rng)}, coords, 1e-4, fault));
    }
    {
        auto probe = rnd({2, 1, 2, 2}, rng);
        rows.push_back(detail::check_build(
            "maxpool3d",
            [probe](Tape<double>& t, L& l) {
                return sum_all(mul(maxpool3d(l[0], {2, 2, 2}, {2, 2, 2}), t.leaf(probe)));
            },
            {rnd({2, 2, 4, 4}, rng)}, coords, 1e-4, fault));
    }
    {
        auto probe = rnd({3, 2, 3, 3}, rng);
        rows.push_back(detail::check_build(
            "batchnorm",
            [probe](Tape<double>& t, L& l) {
                return sum_all(mul(batchnorm_train(l[0], l[1], l[2], 1e-5), t.leaf(probe)));
            },
            {rnd({3, 2, 3, 3}, rng), rnd({3}, rng), rnd({3}, rng)}, coords, 1e-4, fault));
    }
    {
        // conv -> bn -> relu -> pool with dropout off.
        ConvBlockSpec spec{2, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {1, 2, 2}, {1, 2, 2}};
        auto probe = rnd({2, 3, 2, 2}, rng);
        rows.push_back(detail::check_build(
            "conv block (dropout off)",
            [probe, spec](Tape<double>& t, L& l) {
                ConvBlockVals<double> vals{l[1], l[2], l[3]};
                LayerMode mode{true, nullptr};
                return sum_all(mul(
                    conv_block_forward(l[0], spec, vals, BnRunning<double>{}, mode, 0.0, 1e-5),
                    t.leaf(probe)));
            },
            {rnd({1, 3, 4, 4}, rng), rnd({2, 1, 3, 3, 3}, rng), rnd({2}, rng), rnd({2}, rng)},
            coords, 1e-4, fault));
    }
    {
        auto probe = rnd({2, 3}, rng);
        rows.push_back(detail::check_build(
            "highway",
            [probe](Tape<double>& t, L& l) {
                HighwayVals<double> hw{l[0], l[1], l[2], l[3]};
                return sum_all(mul(highway_forward(l[4], hw), t.leaf(probe)));
            },
            {rnd({3, 3}, rng), rnd({3}, rng), rnd({3, 3}, rng), rnd({3}, rng), rnd({2, 3}, rng)},
            coords, 1e-4, fault));
    }
    auto gru_tensors = [&](std::int64_t in, std::int64_t hid, std::int64_t ctx) {
        std::vector<Tensor<double>> p{rnd({hid, in}, rng),  rnd({hid, hid}, rng), rnd({hid}, rng),
                                      rnd({hid, in}, rng),  rnd({hid, hid}, rng), rnd({hid}, rng),
                                      rnd({hid, in}, rng),  rnd({hid, hid}, rng)};
        if (ctx > 0) {
            p.push_back(rnd({hid, ctx}, rng));
            p.push_back(rnd({hid, ctx}, rng));
            p.push_back(rnd({hid, ctx}, rng));
        }
        return p;
    };
    auto bind_gru = [](L& l, std::size_t base, bool ctx) {
        GruVals<double> g;
        g.w_z = l[base];
        g.u_z = l[base + 1];
        g.b_z = l[base + 2];
        g.w_r = l[base + 3];
        g.u_r = l[base + 4];
        g.b_r = l[base + 5];
        g.w_h = l[base + 6];
        g.u_h = l[base + 7];
        if (ctx) {
            g.c_z = l[base + 8];
            g.c_r = l[base + 9];
            g.c_p = l[base + 10];
            g.has_context = true;
        }
        return g;
    };
    {
        auto params = gru_tensors(2, 3, 0);
        params.push_back(rnd({1, 2}, rng));
        params.push_back(rnd({1, 3}, rng));
        auto probe = rnd({1, 3}, rng);
        rows.push_back(detail::check_build(
            "gru step",
            [probe, bind_gru](Tape<double>& t, L& l) {
                auto cell = bind_gru(l, 0, false);
                return sum_all(mul(gru_step(l[8], l[9], cell), t.leaf(probe)));
            },
            params, coords, 1e-4, fault));
    }
    {
        auto params = gru_tensors(2, 3, 4);
        params.push_back(rnd({1, 2}, rng));
        params.push_back(rnd({1, 3}, rng));
        params.push_back(rnd({1, 4}, rng));
        auto probe = rnd({1, 3}, rng);
        rows.push_back(detail::check_build(
            "gru step (context)",
            [probe, bind_gru](Tape<double>& t, L& l) {
                auto cell = bind_gru(l, 0, true);
                auto c = l[13];
                return sum_all(mul(gru_step(l[11], l[12], cell, &c), t.leaf(probe)));
            },
            params, coords, 1e-4, fault));
    }
    {
        auto params = gru_tensors(2, 3, 0);
        auto bwd = gru_tensors(2, 3, 0);
        params.insert(params.end(), bwd.begin(), bwd.end());
        params.push_back(rnd({3, 2}, rng));  // sequence
        auto probe = rnd({3, 6}, rng);
        rows.push_back(detail::check_build(
            "bigru",
            [probe, bind_gru](Tape<double>& t, L& l) {
                auto fwd = bind_gru(l, 0, false);
                auto bwd2 = bind_gru(l, 8, false);
                return sum_all(mul(bigru_forward(l[16], fwd, bwd2), t.leaf(probe)));
            },
            params, coords, 1e-4, fault));
    }
    {
        auto probe = rnd({1, 3}, rng);
        rows.push_back(detail::check_build(
            "embedding",
            [probe](Tape<double>& t, L& l) {
                return sum_all(mul(embed(l[0], l[1]), t.leaf(probe)));
            },
            {rnd({1, 4}, rng), rnd({4, 3}, rng)}, coords, 1e-4, fault));
    }
    {
        // Full attention step: weights, context, GRU state update, output rule.
        const std::int64_t v = 3, d_e = 2, d_s = 3, d_enc = 4, d_a = 3, T = 4;
        std::vector<Tensor<double>> params{rnd({d_a, 1}, rng), rnd({d_a, d_s}, rng),
                                           rnd({d_a, d_enc}, rng)};
        auto cell = gru_tensors(d_e, d_s, d_enc);
        params.insert(params.end(), cell.begin(), cell.end());
        params.push_back(rnd({v, d_e}, rng));
        params.push_back(rnd({v, d_s}, rng));
        params.push_back(rnd({v, d_enc}, rng));
        params.push_back(rnd({v, d_e}, rng));   // embedding
        params.push_back(rnd({T, d_enc}, rng)); // encoder states
        params.push_back(rnd({1, d_s}, rng));   // previous state
        auto probe = rnd({1, v}, rng);
        rows.push_back(detail::check_build(
            "attention step",
            [probe, bind_gru, v](Tape<double>& t, L& l) {
                DecoderVals<double> dec;
                dec.attn = {l[0], l[1], l[2]};
                dec.cell = bind_gru(l, 3, true);
                dec.w_o = l[14];
                dec.u_o = l[15];
                dec.c_o = l[16];
                dec.embedding = l[17];
                Tensor<double> y0({1, v});
                y0[0] = 1.0;
                auto step = decoder_step(l[19], t.leaf(y0), l[18], dec);
                return sum_all(mul(step.y, t.leaf(probe)));
            },
            params, coords, 1e-4, fault));
    }
    {
        // Output rule alone: softmax(W_o e + U_o s + C_o c).
        const std::int64_t v = 4, d_e = 3, d_s = 3, d_enc = 4;
        auto probe = rnd({1, v}, rng);
        rows.push_back(detail::check_build(
            "output rule",
            [probe](Tape<double>& t, L& l) {
                auto logits = add(add(linear(l[3], l[0]), linear(l[4], l[1])), linear(l[5], l[2]));
                return sum_all(mul(softmax(logits, 1), t.leaf(probe)));
            },
            {rnd({v, d_e}, rng), rnd({v, d_s}, rng), rnd({v, d_enc}, rng), rnd({1, d_e}, rng),
             rnd({1, d_s}, rng), rnd({1, d_enc}, rng)},
            coords, 1e-4, fault));
    }
    {
        // CTC through its softmax input, tighter tolerance.
        const std::vector<int> labels{1, 2, 1};
        Tensor<double> logits = rnd({6, 3}, rng);
        rows.push_back(detail::check_build(
            "ctc loss",
            [labels](Tape<double>& t, L& l) { return ctc_loss(softmax(l[0], 1), labels); },
            {logits}, coords, 1e-5, fault));
    }
    {
        // End-to-end micro model: encoder, decoder and loss for the variant.
        ModelConfig cfg = toy_model_config(variant);
        cfg.encoder.in_h = 8;
        cfg.encoder.in_w = 8;
        cfg.encoder.blocks[0].out_channels = 2;
        cfg.encoder.blocks[1].out_channels = 3;
        cfg.encoder.blocks[2].out_channels = 4;
        cfg.encoder.gru_hidden = 3;
        cfg.encoder.dropout_rate = 0.0;
        cfg.encoder.highway_width = encoder_flat_width(cfg.encoder);
        cfg.attn_dim = 3;
        cfg.embed_dim = 2;
        cfg.dec_hidden = 3;
        cfg.vocab_size = 3;
        auto model = build_model<double>(cfg, seed + 1);
        Tensor<double> frames({1, 4, 8, 8});
        for (auto& x : frames.data) x = rng.normal();
        const std::vector<int> labels{1, 2};
        std::vector<Tensor<double>> params;
        for (const auto& [name, tensor] : model.params) params.push_back(tensor);
        rows.push_back(detail::check_build(
            "end-to-end " + variant_name(variant),
            [model, frames, labels](Tape<double>& t, L& l) {
                BoundModel<double> bound(model, l);
                LayerMode mode{true, nullptr};
                auto loss = model_loss(t, bound, frames, labels, mode);
                return loss.total;
            },
            params, std::min<std::int64_t>(coords, 6), 1e-4, fault));
    }
    return rows;
}

}  // namespace lcanet

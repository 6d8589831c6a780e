#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lcanet/autodiff.hpp"
#include "lcanet/errors.hpp"
#include "lcanet/rng.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

// ---------------------------------------------------------------------------
// Highway
// ---------------------------------------------------------------------------

/// Transform-gate and candidate affine maps; input width equals output width
/// so the carry path (1 - t) .* x is well defined.
template <typename S>
struct HighwayVals {
    Val<S> w_t, b_t;  // transform gate
    Val<S> w_h, b_h;  // candidate
};

/// t = sigmoid(W_T x + b_T); g = t .* sigmoid(W_H x + b_H) + (1 - t) .* x.
/// The candidate nonlinearity is a sigmoid. Rows of `x` are processed
/// independently, so the same call covers one frame or a whole sequence.
template <typename S>
Val<S> highway_forward(Val<S> x, const HighwayVals<S>& p) {
    const auto& wv = p.w_t.value();
    if (wv.rows() != wv.cols() || x.value().cols() != wv.cols())
        throw ShapeError("highway: width mismatch, input " + shape_str(x.value().shape) +
                         " vs gate " + shape_str(wv.shape));
    auto t = sigmoid(linear(x, p.w_t, p.b_t));
    auto cand = sigmoid(linear(x, p.w_h, p.b_h));
    return add(mul(t, cand), mul(axpb(t, S(-1), S(1)), x));
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

/// Update/reset gates and candidate maps. Context maps (C_z, C_r, C_p) exist
/// only for the decoder cell, which consumes an attention context vector.
template <typename S>
struct GruVals {
    Val<S> w_z, u_z, b_z;
    Val<S> w_r, u_r, b_r;
    Val<S> w_h, u_h;  // the candidate has no bias
    Val<S> c_z, c_r, c_p;
    bool has_context = false;
};

/// One GRU step:
///   z = sigmoid(W_z g + U_z h + [C_z c] + b_z)
///   r = sigmoid(W_r g + U_r h + [C_r c] + b_r)
///   h~ = tanh(W_h g + U_h (r .* h) + [C_p c])
///   h' = (1 - z) .* h + z .* h~
template <typename S>
Val<S> gru_step(Val<S> g, Val<S> h_prev, const GruVals<S>& p, const Val<S>* context = nullptr) {
    if (p.has_context && context == nullptr)
        throw Error("gru_step: cell expects a context vector but none was supplied");
    if (!p.has_context && context != nullptr)
        throw Error("gru_step: context vector supplied to a cell without context maps");

    auto z_pre = add(linear(g, p.w_z, p.b_z), linear(h_prev, p.u_z));
    auto r_pre = add(linear(g, p.w_r, p.b_r), linear(h_prev, p.u_r));
    if (context) {
        z_pre = add(z_pre, linear(*context, p.c_z));
        r_pre = add(r_pre, linear(*context, p.c_r));
    }
    auto z = sigmoid(z_pre);
    auto r = sigmoid(r_pre);

    auto cand_pre = add(linear(g, p.w_h), linear(mul(r, h_prev), p.u_h));
    if (context) cand_pre = add(cand_pre, linear(*context, p.c_p));
    auto h_tilde = lcanet::tanh(cand_pre);

    return add(mul(axpb(z, S(-1), S(1)), h_prev), mul(z, h_tilde));
}

/// Runs the forward cell over t = 1..T and the backward cell over t = T..1,
/// concatenating the two hidden states per step. `h0` defaults to zeros.
template <typename S>
Val<S> bigru_forward(Val<S> seq, const GruVals<S>& fwd, const GruVals<S>& bwd,
                     std::optional<Val<S>> h0 = std::nullopt) {
    const std::int64_t T = seq.value().rows();
    const std::int64_t hidden = fwd.u_z.value().rows();
    Tape<S>& tape = *seq.tape;
    Val<S> init = h0 ? *h0 : tape.leaf(Tensor<S>::zeros({1, hidden}));

    std::vector<Val<S>> fwd_states(static_cast<std::size_t>(T));
    Val<S> h = init;
    for (std::int64_t t = 0; t < T; ++t) {
        h = gru_step(slice_row(seq, t), h, fwd);
        fwd_states[static_cast<std::size_t>(t)] = h;
    }
    std::vector<Val<S>> bwd_states(static_cast<std::size_t>(T));
    h = init;
    for (std::int64_t t = T - 1; t >= 0; --t) {
        h = gru_step(slice_row(seq, t), h, bwd);
        bwd_states[static_cast<std::size_t>(t)] = h;
    }
    return concat_cols(stack_rows(fwd_states), stack_rows(bwd_states));
}

// ---------------------------------------------------------------------------
// Convolution blocks
// ---------------------------------------------------------------------------

struct ConvBlockSpec {
    std::int64_t out_channels = 0;
    Dims3 kernel, stride, pad;
    Dims3 pool_window, pool_stride;
};

template <typename S>
struct ConvBlockVals {
    Val<S> kernels;       // (Co, Ci, kt, kh, kw)
    Val<S> gamma, beta;   // per output channel
};

/// Per-channel running statistics for inference-mode batch norm.
template <typename S>
struct BnRunning {
    Tensor<S> mean, var;
};

struct LayerMode {
    bool train = false;
    Rng* rng = nullptr;  // dropout mask source, required in train mode
};

/// conv3d -> batch norm -> relu -> dropout (train only) -> max pool.
template <typename S>
Val<S> conv_block_forward(Val<S> x, const ConvBlockSpec& spec, const ConvBlockVals<S>& vals,
                          const BnRunning<S>& running, const LayerMode& mode, double dropout_rate,
                          S bn_eps, BatchMoments<S>* moments = nullptr) {
    auto y = conv3d(x, vals.kernels, spec.stride, spec.pad);
    if (mode.train)
        y = batchnorm_train(y, vals.gamma, vals.beta, bn_eps, moments);
    else
        y = batchnorm_eval(y, vals.gamma, vals.beta, running.mean, running.var, bn_eps);
    y = relu(y);
    if (mode.train && dropout_rate > 0.0) {
        if (!mode.rng) throw Error("conv_block_forward: train mode needs an rng for dropout");
        y = dropout(y, dropout_rate, *mode.rng);
    }
    return maxpool3d(y, spec.pool_window, spec.pool_stride);
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

struct EncoderConfig {
    std::int64_t in_channels = 1, in_h = 8, in_w = 16;
    std::array<ConvBlockSpec, 3> blocks;
    bool use_highway = true;
    int highway_layers = 2;
    std::int64_t highway_width = 0;  // must equal channels * H' * W' after the blocks
    std::int64_t gru_hidden = 32;    // per direction
    double dropout_rate = 0.5;
    double bn_momentum = 0.9;
    double bn_eps = 1e-5;
};

/// Spatial dims after the three conv blocks (the temporal axis is preserved
/// because every block uses temporal stride 1).
struct EncoderStage {
    std::string name;
    Shape shape;  // (C, T, H, W) for conv stages, (T, d) afterwards
};

inline std::int64_t pool_out_dim(std::int64_t in, std::int64_t w, std::int64_t s) {
    return (in - w) / s + 1;
}

/// The full shape chain for a T-frame input, computed from the floor formulas.
inline std::vector<EncoderStage> encoder_shape_chain(const EncoderConfig& cfg, std::int64_t frames) {
    std::vector<EncoderStage> out;
    std::int64_t c = cfg.in_channels, t = frames, h = cfg.in_h, w = cfg.in_w;
    out.push_back({"input", {c, t, h, w}});
    for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
        const auto& b = cfg.blocks[i];
        c = b.out_channels;
        t = conv_out_dim(t, b.kernel.t, b.stride.t, b.pad.t);
        h = conv_out_dim(h, b.kernel.h, b.stride.h, b.pad.h);
        w = conv_out_dim(w, b.kernel.w, b.stride.w, b.pad.w);
        out.push_back({"conv" + std::to_string(i + 1), {c, t, h, w}});
        t = pool_out_dim(t, b.pool_window.t, b.pool_stride.t);
        h = pool_out_dim(h, b.pool_window.h, b.pool_stride.h);
        w = pool_out_dim(w, b.pool_window.w, b.pool_stride.w);
        out.push_back({"pool" + std::to_string(i + 1), {c, t, h, w}});
    }
    out.push_back({"flatten", {t, c * h * w}});
    if (cfg.use_highway)
        for (int i = 0; i < cfg.highway_layers; ++i)
            out.push_back({"highway" + std::to_string(i + 1), {t, cfg.highway_width}});
    out.push_back({"bigru1", {t, 2 * cfg.gru_hidden}});
    out.push_back({"bigru2", {t, 2 * cfg.gru_hidden}});
    return out;
}

inline std::int64_t encoder_flat_width(const EncoderConfig& cfg) {
    std::int64_t h = cfg.in_h, w = cfg.in_w;
    for (const auto& b : cfg.blocks) {
        h = pool_out_dim(conv_out_dim(h, b.kernel.h, b.stride.h, b.pad.h), b.pool_window.h,
                         b.pool_stride.h);
        w = pool_out_dim(conv_out_dim(w, b.kernel.w, b.stride.w, b.pad.w), b.pool_window.w,
                         b.pool_stride.w);
    }
    return cfg.blocks.back().out_channels * h * w;
}

template <typename S>
struct EncoderVals {
    std::array<ConvBlockVals<S>, 3> blocks;
    std::vector<HighwayVals<S>> highway;
    GruVals<S> gru1_fwd, gru1_bwd, gru2_fwd, gru2_bwd;
};

template <typename S>
struct EncoderState {
    std::array<BnRunning<S>, 3> bn;
};

/// frames (C, T, H, W) -> hidden sequence (T, 2 * gru_hidden). The temporal
/// axis must be preserved by every block (temporal stride 1 throughout).
template <typename S>
Val<S> encoder_forward(Val<S> frames, const EncoderConfig& cfg, const EncoderVals<S>& vals,
                       const EncoderState<S>& state, const LayerMode& mode,
                       std::array<BatchMoments<S>, 3>* moments = nullptr) {
    Val<S> x = frames;
    for (std::size_t i = 0; i < cfg.blocks.size(); ++i)
        x = conv_block_forward(x, cfg.blocks[i], vals.blocks[i], state.bn[i], mode,
                               cfg.dropout_rate, static_cast<S>(cfg.bn_eps),
                               moments ? &(*moments)[i] : nullptr);
    auto rows = frames_to_rows(x);
    if (cfg.use_highway) {
        if (rows.value().cols() != cfg.highway_width)
            throw ShapeError("encoder: highway width " + std::to_string(cfg.highway_width) +
                             " does not match flattened conv output " +
                             std::to_string(rows.value().cols()));
        for (const auto& hw : vals.highway) rows = highway_forward(rows, hw);
    }
    auto h1 = bigru_forward(rows, vals.gru1_fwd, vals.gru1_bwd);
    return bigru_forward(h1, vals.gru2_fwd, vals.gru2_bwd);
}

}  // namespace lcanet

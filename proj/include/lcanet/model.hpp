#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lcanet/attention.hpp"
#include "lcanet/ctc.hpp"
#include "lcanet/layers.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

/// The four experimental structures: attention/highway toggles plus the
/// hybrid that adds a cross-entropy attention branch next to a CTC head.
enum class Variant { AhCtc, ACtc, HCtc, AhCtcCe };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::AhCtc: return "ah-ctc";
        case Variant::ACtc: return "a-ctc";
        case Variant::HCtc: return "h-ctc";
        case Variant::AhCtcCe: return "ah-ctc-ce";
    }
    return "?";
}

inline Variant parse_variant(const std::string& name) {
    if (name == "ah-ctc") return Variant::AhCtc;
    if (name == "a-ctc") return Variant::ACtc;
    if (name == "h-ctc") return Variant::HCtc;
    if (name == "ah-ctc-ce") return Variant::AhCtcCe;
    throw Error("unknown variant '" + name + "' (expected ah-ctc, a-ctc, h-ctc or ah-ctc-ce)");
}

inline bool variant_has_attention(Variant v) { return v != Variant::HCtc; }
inline bool variant_has_highway(Variant v) { return v != Variant::ACtc; }
/// H-CTC and the hybrid put a linear + softmax CTC head on the encoder.
inline bool variant_has_ctc_head(Variant v) {
    return v == Variant::HCtc || v == Variant::AhCtcCe;
}
inline bool variant_has_ce_branch(Variant v) { return v == Variant::AhCtcCe; }

struct ModelConfig {
    Variant variant = Variant::AhCtc;
    double lambda = 0.5;  // joint-loss weight, hybrid variant only
    EncoderConfig encoder;
    std::int64_t attn_dim = 32;
    std::int64_t embed_dim = 16;
    std::int64_t dec_hidden = 32;
    std::int64_t vocab_size = 28;
    bool table1 = false;
};

/// Desk-scale defaults: 1x8x16 frames, 8/16/24 channels, 32 hidden per
/// direction, 48-wide highway (= 24 channels x 1 x 2 after pooling).
inline ModelConfig toy_model_config(Variant variant = Variant::AhCtc) {
    ModelConfig cfg;
    cfg.variant = variant;
    cfg.encoder.in_channels = 1;
    cfg.encoder.in_h = 8;
    cfg.encoder.in_w = 16;
    const std::int64_t channels[3] = {8, 16, 24};
    for (std::size_t i = 0; i < 3; ++i) {
        auto& b = cfg.encoder.blocks[i];
        b.out_channels = channels[i];
        b.kernel = {3, 3, 3};
        b.stride = {1, 1, 1};
        b.pad = {1, 1, 1};
        b.pool_window = {1, 2, 2};
        b.pool_stride = {1, 2, 2};
    }
    cfg.encoder.use_highway = variant_has_highway(variant);
    cfg.encoder.highway_width = encoder_flat_width(cfg.encoder);
    cfg.encoder.gru_hidden = 32;
    cfg.encoder.dropout_rate = 0.5;
    cfg.attn_dim = 32;
    cfg.embed_dim = 16;
    cfg.dec_hidden = 32;
    cfg.vocab_size = 28;
    return cfg;
}

/// Full-scale configuration: 3x75x50x100 input, 32/64/96 channels, 1728-wide
/// highway, 256 hidden per direction, 28 output symbols. The third conv
/// uses spatial stride 1, the only stride consistent with the layer table's
/// printed output sizes.
inline ModelConfig table1_model_config(Variant variant = Variant::AhCtc) {
    ModelConfig cfg;
    cfg.variant = variant;
    cfg.table1 = true;
    cfg.encoder.in_channels = 3;
    cfg.encoder.in_h = 50;
    cfg.encoder.in_w = 100;
    const std::int64_t channels[3] = {32, 64, 96};
    for (std::size_t i = 0; i < 3; ++i) {
        auto& b = cfg.encoder.blocks[i];
        b.out_channels = channels[i];
        b.kernel = {3, 5, 5};
        b.stride = i == 0 ? Dims3{1, 2, 2} : Dims3{1, 1, 1};
        b.pad = {1, 2, 2};
        b.pool_window = {1, 2, 2};
        b.pool_stride = {1, 2, 2};
    }
    cfg.encoder.use_highway = variant_has_highway(variant);
    cfg.encoder.highway_width = encoder_flat_width(cfg.encoder);
    cfg.encoder.gru_hidden = 256;
    cfg.encoder.dropout_rate = 0.5;
    cfg.attn_dim = 128;
    cfg.embed_dim = 64;
    cfg.dec_hidden = 256;
    cfg.vocab_size = 28;
    return cfg;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Named trainable parameters plus non-trainable state (batch-norm running
/// statistics), in a fixed creation order so runs are reproducible.
template <typename S>
struct ModelParams {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor<S>>> params;
    std::vector<std::pair<std::string, Tensor<S>>> state;

    Tensor<S>& param(const std::string& name) {
        return params[param_index.at(name)].second;
    }
    const Tensor<S>& param(const std::string& name) const {
        return params[param_index.at(name)].second;
    }
    bool has_param(const std::string& name) const { return param_index.count(name) > 0; }

    Tensor<S>& state_tensor(const std::string& name) { return state[state_index.at(name)].second; }
    const Tensor<S>& state_tensor(const std::string& name) const {
        return state[state_index.at(name)].second;
    }

    void add_param(std::string name, Tensor<S> value) {
        param_index[name] = params.size();
        params.emplace_back(std::move(name), std::move(value));
    }
    void add_state(std::string name, Tensor<S> value) {
        state_index[name] = state.size();
        state.emplace_back(std::move(name), std::move(value));
    }

    std::int64_t total_param_count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : params) n += t.size();
        return n;
    }

    std::unordered_map<std::string, std::size_t> param_index;
    std::unordered_map<std::string, std::size_t> state_index;
};

namespace detail {

template <typename S>
Tensor<S> glorot(Shape shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return Tensor<S>::uniform(std::move(shape), rng, -limit, limit);
}

// Linear map (out, in).
template <typename S>
void add_map(ModelParams<S>& m, const std::string& name, std::int64_t out, std::int64_t in,
             Rng& rng) {
    m.add_param(name, glorot<S>({out, in}, in, out, rng));
}

template <typename S>
void add_gru(ModelParams<S>& m, const std::string& prefix, std::int64_t in, std::int64_t hidden,
             std::int64_t context, Rng& rng) {
    add_map(m, prefix + ".w_z", hidden, in, rng);
    add_map(m, prefix + ".u_z", hidden, hidden, rng);
    m.add_param(prefix + ".b_z", Tensor<S>::zeros({hidden}));
    add_map(m, prefix + ".w_r", hidden, in, rng);
    add_map(m, prefix + ".u_r", hidden, hidden, rng);
    m.add_param(prefix + ".b_r", Tensor<S>::zeros({hidden}));
    add_map(m, prefix + ".w_h", hidden, in, rng);
    add_map(m, prefix + ".u_h", hidden, hidden, rng);
    if (context > 0) {
        add_map(m, prefix + ".c_z", hidden, context, rng);
        add_map(m, prefix + ".c_r", hidden, context, rng);
        add_map(m, prefix + ".c_p", hidden, context, rng);
    }
}

}  // namespace detail

/// Deterministic initialization from a seed: uniform +-sqrt(6/(fan_in+fan_out))
/// for maps, zeros for biases; batch-norm scale 1, shift 0, running mean 0,
/// running variance 1.
template <typename S>
ModelParams<S> build_model(const ModelConfig& config, std::uint64_t seed) {
    ModelConfig cfg = config;
    cfg.encoder.use_highway = variant_has_highway(cfg.variant);
    if (cfg.vocab_size < 2) throw Error("build_model: vocabulary must have at least two symbols");
    if (cfg.encoder.use_highway && cfg.encoder.highway_width != encoder_flat_width(cfg.encoder))
        throw ShapeError("build_model: highway width " + std::to_string(cfg.encoder.highway_width) +
                         " does not match flattened conv output " +
                         std::to_string(encoder_flat_width(cfg.encoder)));
    if (cfg.variant == Variant::AhCtcCe && (cfg.lambda < 0.0 || cfg.lambda > 1.0))
        throw Error("build_model: lambda must lie in [0, 1]");

    ModelParams<S> m;
    m.config = cfg;
    Rng rng(seed);

    std::int64_t in_c = cfg.encoder.in_channels;
    for (std::size_t i = 0; i < cfg.encoder.blocks.size(); ++i) {
        const auto& b = cfg.encoder.blocks[i];
        const std::string prefix = "enc.conv" + std::to_string(i + 1);
        const std::int64_t k3 = b.kernel.t * b.kernel.h * b.kernel.w;
        m.add_param(prefix + ".kernels",
                    detail::glorot<S>({b.out_channels, in_c, b.kernel.t, b.kernel.h, b.kernel.w},
                                      in_c * k3, b.out_channels * k3, rng));
        m.add_param(prefix + ".gamma", Tensor<S>::ones({b.out_channels}));
        m.add_param(prefix + ".beta", Tensor<S>::zeros({b.out_channels}));
        m.add_state(prefix + ".run_mean", Tensor<S>::zeros({b.out_channels}));
        m.add_state(prefix + ".run_var", Tensor<S>::ones({b.out_channels}));
        in_c = b.out_channels;
    }

    const std::int64_t flat = encoder_flat_width(cfg.encoder);
    if (cfg.encoder.use_highway) {
        for (int i = 0; i < cfg.encoder.highway_layers; ++i) {
            const std::string prefix = "enc.highway" + std::to_string(i + 1);
            detail::add_map(m, prefix + ".w_t", flat, flat, rng);
            m.add_param(prefix + ".b_t", Tensor<S>::zeros({flat}));
            detail::add_map(m, prefix + ".w_h", flat, flat, rng);
            m.add_param(prefix + ".b_h", Tensor<S>::zeros({flat}));
        }
    }

    const std::int64_t hid = cfg.encoder.gru_hidden;
    detail::add_gru(m, "enc.gru1.fwd", flat, hid, 0, rng);
    detail::add_gru(m, "enc.gru1.bwd", flat, hid, 0, rng);
    detail::add_gru(m, "enc.gru2.fwd", 2 * hid, hid, 0, rng);
    detail::add_gru(m, "enc.gru2.bwd", 2 * hid, hid, 0, rng);

    const std::int64_t d_enc = 2 * hid;
    if (variant_has_ctc_head(cfg.variant)) {
        detail::add_map(m, "head.w", cfg.vocab_size, d_enc, rng);
        m.add_param("head.b", Tensor<S>::zeros({cfg.vocab_size}));
    }
    if (variant_has_attention(cfg.variant)) {
        m.add_param("dec.attn.v_a", detail::glorot<S>({cfg.attn_dim, 1}, cfg.attn_dim, 1, rng));
        detail::add_map(m, "dec.attn.w_a", cfg.attn_dim, cfg.dec_hidden, rng);
        detail::add_map(m, "dec.attn.u_a", cfg.attn_dim, d_enc, rng);
        m.add_param("dec.embed",
                    detail::glorot<S>({cfg.vocab_size, cfg.embed_dim}, cfg.vocab_size, cfg.embed_dim, rng));
        detail::add_gru(m, "dec.cell", cfg.embed_dim, cfg.dec_hidden, d_enc, rng);
        detail::add_map(m, "dec.out.w_o", cfg.vocab_size, cfg.embed_dim, rng);
        detail::add_map(m, "dec.out.u_o", cfg.vocab_size, cfg.dec_hidden, rng);
        detail::add_map(m, "dec.out.c_o", cfg.vocab_size, d_enc, rng);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Binding parameters onto a tape
// ---------------------------------------------------------------------------

/// One forward pass worth of leaf nodes, in parameter order, plus the typed
/// views the layer functions consume.
template <typename S>
struct BoundModel {
    BoundModel(Tape<S>& tape, const ModelParams<S>& m) : model(&m) {
        leaves.reserve(m.params.size());
        for (const auto& [name, tensor] : m.params) leaves.push_back(tape.leaf(tensor));
        bind();
    }

    /// Binds against leaves that already live on a tape (one per parameter,
    /// in parameter order).
    BoundModel(const ModelParams<S>& m, std::vector<Val<S>> existing_leaves)
        : model(&m), leaves(std::move(existing_leaves)) {
        if (leaves.size() != m.params.size())
            throw Error("BoundModel: leaf count does not match parameter count");
        bind();
    }

    void bind() {
        const auto& m = *model;
        const auto& cfg = m.config;
        for (std::size_t i = 0; i < 3; ++i) {
            const std::string prefix = "enc.conv" + std::to_string(i + 1);
            encoder.blocks[i] = {get(prefix + ".kernels"), get(prefix + ".gamma"),
                                 get(prefix + ".beta")};
            enc_state.bn[i] = {m.state_tensor(prefix + ".run_mean"),
                               m.state_tensor(prefix + ".run_var")};
        }
        if (cfg.encoder.use_highway) {
            for (int i = 0; i < cfg.encoder.highway_layers; ++i) {
                const std::string prefix = "enc.highway" + std::to_string(i + 1);
                encoder.highway.push_back({get(prefix + ".w_t"), get(prefix + ".b_t"),
                                           get(prefix + ".w_h"), get(prefix + ".b_h")});
            }
        }
        encoder.gru1_fwd = bind_gru("enc.gru1.fwd", false);
        encoder.gru1_bwd = bind_gru("enc.gru1.bwd", false);
        encoder.gru2_fwd = bind_gru("enc.gru2.fwd", false);
        encoder.gru2_bwd = bind_gru("enc.gru2.bwd", false);
        if (variant_has_ctc_head(cfg.variant)) {
            head_w = get("head.w");
            head_b = get("head.b");
        }
        if (variant_has_attention(cfg.variant)) {
            decoder.attn = {get("dec.attn.v_a"), get("dec.attn.w_a"), get("dec.attn.u_a")};
            decoder.embedding = get("dec.embed");
            decoder.cell = bind_gru("dec.cell", true);
            decoder.w_o = get("dec.out.w_o");
            decoder.u_o = get("dec.out.u_o");
            decoder.c_o = get("dec.out.c_o");
        }
    }

    Val<S> get(const std::string& name) const {
        return leaves[model->param_index.at(name)];
    }

    GruVals<S> bind_gru(const std::string& prefix, bool context) const {
        GruVals<S> g;
        g.w_z = get(prefix + ".w_z");
        g.u_z = get(prefix + ".u_z");
        g.b_z = get(prefix + ".b_z");
        g.w_r = get(prefix + ".w_r");
        g.u_r = get(prefix + ".u_r");
        g.b_r = get(prefix + ".b_r");
        g.w_h = get(prefix + ".w_h");
        g.u_h = get(prefix + ".u_h");
        if (context) {
            g.c_z = get(prefix + ".c_z");
            g.c_r = get(prefix + ".c_r");
            g.c_p = get(prefix + ".c_p");
            g.has_context = true;
        }
        return g;
    }

    const ModelParams<S>* model;
    std::vector<Val<S>> leaves;
    EncoderVals<S> encoder;
    EncoderState<S> enc_state;
    Val<S> head_w, head_b;
    DecoderVals<S> decoder;
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <typename S>
struct ModelForward {
    Val<S> probs;           // (T, V) frame distributions
    Val<S> hidden;          // (T, d_enc) encoder output
    DecoderTrace<S> trace;  // filled when the decoder ran
};

template <typename S>
Val<S> encode_frames(Tape<S>& tape, const BoundModel<S>& bound, const Tensor<S>& frames,
                     const LayerMode& mode, std::array<BatchMoments<S>, 3>* moments = nullptr) {
    auto x = tape.leaf(frames);
    return encoder_forward(x, bound.model->config.encoder, bound.encoder, bound.enc_state, mode,
                           moments);
}

/// Frame distributions fed to CTC: the cascaded decoder's outputs for the
/// attention-decoder variants, the linear + softmax head otherwise.
template <typename S>
ModelForward<S> model_frame_probs(Tape<S>& tape, const BoundModel<S>& bound,
                                  const Tensor<S>& frames, const LayerMode& mode,
                                  std::array<BatchMoments<S>, 3>* moments = nullptr) {
    ModelForward<S> out;
    out.hidden = encode_frames(tape, bound, frames, mode, moments);
    const Variant v = bound.model->config.variant;
    if (v == Variant::AhCtc || v == Variant::ACtc) {
        out.trace = decode_sequence(out.hidden, bound.decoder, out.hidden.value().rows());
        out.probs = out.trace.outputs;
    } else {
        out.probs = softmax(linear(out.hidden, bound.head_w, bound.head_b), 1);
    }
    return out;
}

template <typename S>
struct ModelLoss {
    Val<S> total;
    Val<S> ctc_branch;  // hybrid variant only
    Val<S> ce_branch;   // hybrid variant only
};

/// Mean per-character cross entropy of the teacher-forced attention branch.
template <typename S>
Val<S> ce_branch_loss(Val<S> hidden, const DecoderVals<S>& decoder, std::span<const int> labels) {
    auto trace = decode_sequence(hidden, decoder, static_cast<std::int64_t>(labels.size()), labels);
    Val<S> total;
    for (std::size_t t = 0; t < labels.size(); ++t) {
        auto nll = neg_log_pick(trace.steps[t], labels[t]);
        total = t == 0 ? nll : add(total, nll);
    }
    return scale(total, static_cast<S>(1.0 / static_cast<double>(labels.size())));
}

template <typename S>
ModelLoss<S> model_loss(Tape<S>& tape, const BoundModel<S>& bound, const Tensor<S>& frames,
                        std::span<const int> labels, const LayerMode& mode,
                        std::array<BatchMoments<S>, 3>* moments = nullptr) {
    ModelLoss<S> out;
    const auto& cfg = bound.model->config;
    if (cfg.variant != Variant::AhCtcCe) {
        auto fwd = model_frame_probs(tape, bound, frames, mode, moments);
        out.total = ctc_loss(fwd.probs, labels);
        return out;
    }
    auto hidden = encode_frames(tape, bound, frames, mode, moments);
    auto head_probs = softmax(linear(hidden, bound.head_w, bound.head_b), 1);
    out.ctc_branch = ctc_loss(head_probs, labels);
    out.ce_branch = ce_branch_loss(hidden, bound.decoder, labels);
    const S lambda = static_cast<S>(cfg.lambda);
    out.total = add(scale(out.ctc_branch, lambda), scale(out.ce_branch, S(1) - lambda));
    return out;
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Beam decode of one sample. The hybrid variant rescores the CTC beam's
/// top hypotheses with the teacher-forced attention branch:
/// lambda * log p_ctc + (1 - lambda) * log p_attention.
template <typename S>
std::vector<Hypothesis> model_decode(const ModelParams<S>& model, const Vocabulary& vocab,
                                     const Tensor<S>& frames, int beam_width, int topk = 1) {
    Tape<S> tape;
    BoundModel<S> bound(tape, model);
    LayerMode mode;  // eval
    auto fwd = model_frame_probs(tape, bound, frames, mode);

    if (model.config.variant != Variant::AhCtcCe)
        return prefix_beam_decode(fwd.probs.value(), vocab, beam_width, topk);

    auto candidates = prefix_beam_decode(fwd.probs.value(), vocab, beam_width, beam_width);
    const S lambda = static_cast<S>(model.config.lambda);
    std::vector<Hypothesis> rescored;
    rescored.reserve(candidates.size());
    for (const auto& cand : candidates) {
        double log_att = 0.0;
        if (!cand.text.empty()) {
            const auto labels = vocab.encode(cand.text);
            auto trace = decode_sequence(fwd.hidden, bound.decoder,
                                         static_cast<std::int64_t>(labels.size()), labels);
            for (std::size_t t = 0; t < labels.size(); ++t)
                log_att += std::log(static_cast<double>(
                    trace.steps[t].value()[labels[static_cast<std::size_t>(t)]]));
        }
        rescored.push_back(Hypothesis{
            cand.text, static_cast<double>(lambda) * cand.log_prob +
                           (1.0 - static_cast<double>(lambda)) * log_att});
    }
    std::stable_sort(rescored.begin(), rescored.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.log_prob > b.log_prob; });
    if (static_cast<int>(rescored.size()) > topk) rescored.resize(static_cast<std::size_t>(topk));
    return rescored;
}

}  // namespace lcanet

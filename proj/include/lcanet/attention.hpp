#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lcanet/autodiff.hpp"
#include "lcanet/errors.hpp"
#include "lcanet/layers.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

/// Additive attention: energy projection vector and the decoder-/encoder-state
/// maps, all of width d_a.
template <typename S>
struct AttentionVals {
    Val<S> v_a;  // (d_a, 1)
    Val<S> w_a;  // (d_a, d_s)
    Val<S> u_a;  // (d_a, d_enc)
};

/// U_a h_j for all encoder rows at once; hoisted out of the decode loop.
template <typename S>
Val<S> attention_encoder_proj(Val<S> h, const AttentionVals<S>& p) {
    return linear(h, p.u_a);  // (T, d_a)
}

template <typename S>
Val<S> attention_weights_from_proj(Val<S> s_prev, Val<S> h_proj, const AttentionVals<S>& p) {
    auto ws = linear(s_prev, p.w_a);  // (1, d_a)
    auto energies = matmul(lcanet::tanh(add_rowvec(h_proj, ws)), p.v_a);  // (T, 1)
    return softmax(transpose(energies), 1);  // (1, T)
}

/// e_j = V_a . tanh(W_a s_prev + U_a h_j); alpha = softmax(e). Returns (1, T).
template <typename S>
Val<S> attention_weights(Val<S> s_prev, Val<S> h, const AttentionVals<S>& p) {
    return attention_weights_from_proj(s_prev, attention_encoder_proj(h, p), p);
}

/// c = sum_k alpha_k h_k, the attention-weighted average of encoder rows.
template <typename S>
Val<S> context_vector(Val<S> alpha, Val<S> h) {
    if (alpha.value().cols() != h.value().rows())
        throw ShapeError("context_vector: weights " + shape_str(alpha.value().shape) +
                         " do not match encoder states " + shape_str(h.value().shape));
    return matmul(alpha, h);  // (1, d_enc)
}

/// Decoder parameters: attention, a context-conditioned GRU cell, the output
/// maps of the prediction rule, and the character embedding table.
template <typename S>
struct DecoderVals {
    AttentionVals<S> attn;
    GruVals<S> cell;  // has_context = true
    Val<S> w_o;       // (V, d_e)
    Val<S> u_o;       // (V, d_s)
    Val<S> c_o;       // (V, d_enc)
    Val<S> embedding;  // (V, d_e)
};

template <typename S>
struct DecoderStepOut {
    Val<S> y;      // (1, V) output distribution
    Val<S> s;      // (1, d_s) new decoder state
    Val<S> c;      // (1, d_enc) context
    Val<S> alpha;  // (1, T) attention weights
};

/// One decoder step: attention over the encoder states, context vector, GRU
/// state update fed by the previous prediction's embedding, and the output
/// distribution softmax(W_o E y_prev + U_o s_prev + C_o c).
template <typename S>
DecoderStepOut<S> decoder_step(Val<S> s_prev, Val<S> y_prev, Val<S> h, Val<S> h_proj,
                               const DecoderVals<S>& p) {
    auto alpha = attention_weights_from_proj(s_prev, h_proj, p.attn);
    auto c = context_vector(alpha, h);
    auto ey = embed(y_prev, p.embedding);
    auto s = gru_step(ey, s_prev, p.cell, &c);
    auto logits = add(add(linear(ey, p.w_o), linear(s_prev, p.u_o)), linear(c, p.c_o));
    return {softmax(logits, 1), s, c, alpha};
}

template <typename S>
DecoderStepOut<S> decoder_step(Val<S> s_prev, Val<S> y_prev, Val<S> h, const DecoderVals<S>& p) {
    return decoder_step(s_prev, y_prev, h, attention_encoder_proj(h, p.attn), p);
}

template <typename S>
struct DecoderTrace {
    Val<S> outputs;               // (T_out, V)
    std::vector<Val<S>> steps;    // per-step (1, V) rows
    Tensor<S> attention;          // (T_out, T_in) weight values
    Tensor<S> contexts;           // (T_out, d_enc) context values
};

/// Unrolls the decoder from s_0 = 0 and y_0 = one-hot blank. In cascade mode
/// (teacher empty) each step feeds back the previous step's full softmax
/// distribution; otherwise steps are teacher-forced with one-hot targets.
template <typename S>
DecoderTrace<S> decode_sequence(Val<S> h, const DecoderVals<S>& p, std::int64_t t_out,
                                std::span<const int> teacher = {}) {
    if (t_out <= 0) throw Error("decode_sequence: output length must be positive");
    if (!teacher.empty() && static_cast<std::int64_t>(teacher.size()) != t_out)
        throw ShapeError("decode_sequence: teacher length does not match output length");
    Tape<S>& tape = *h.tape;
    const std::int64_t t_in = h.value().rows();
    const std::int64_t v = p.embedding.value().rows();
    const std::int64_t d_s = p.u_o.value().cols();
    const std::int64_t d_enc = h.value().cols();

    auto h_proj = attention_encoder_proj(h, p.attn);

    auto one_hot = [&](int idx) {
        Tensor<S> t({1, v});
        t[idx] = S(1);
        return tape.leaf(std::move(t));
    };

    DecoderTrace<S> trace;
    trace.attention = Tensor<S>({t_out, t_in});
    trace.contexts = Tensor<S>({t_out, d_enc});
    trace.steps.reserve(static_cast<std::size_t>(t_out));

    Val<S> s = tape.leaf(Tensor<S>::zeros({1, d_s}));
    Val<S> y_prev = one_hot(0);  // start symbol: blank
    for (std::int64_t t = 0; t < t_out; ++t) {
        auto step = decoder_step(s, y_prev, h, h_proj, p);
        trace.steps.push_back(step.y);
        std::copy_n(step.alpha.value().data.data(), t_in, trace.attention.data.data() + t * t_in);
        std::copy_n(step.c.value().data.data(), d_enc, trace.contexts.data.data() + t * d_enc);
        s = step.s;
        y_prev = teacher.empty() ? step.y : one_hot(teacher[static_cast<std::size_t>(t)]);
    }
    trace.outputs = stack_rows(trace.steps);
    return trace;
}

}  // namespace lcanet

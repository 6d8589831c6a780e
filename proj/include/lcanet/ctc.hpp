#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lcanet/autodiff.hpp"
#include "lcanet/errors.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

/// Character inventory with the blank symbol reserved at index 0.
class Vocabulary {
public:
    /// `chars` lists the real symbols in order; blank is prepended at index 0.
    explicit Vocabulary(std::string chars) : chars_(std::move(chars)) {
        if (chars_.find(kBlankChar) != std::string::npos)
            throw VocabError("vocabulary must not contain the blank display character");
    }

    /// Blank + space + 'a'..'z' (28 symbols).
    static Vocabulary grid() {
        std::string chars = " ";
        for (char c = 'a'; c <= 'z'; ++c) chars.push_back(c);
        return Vocabulary(std::move(chars));
    }

    int size() const { return static_cast<int>(chars_.size()) + 1; }
    static constexpr int blank() { return 0; }

    char symbol(int index) const {
        if (index == 0) return kBlankChar;
        return chars_.at(static_cast<std::size_t>(index - 1));
    }

    int index_of(char c) const {
        const auto pos = chars_.find(c);
        if (pos == std::string::npos)
            throw VocabError(std::string("character '") + c + "' is not in the vocabulary");
        return static_cast<int>(pos) + 1;
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        out.reserve(text.size());
        for (char c : text) out.push_back(index_of(c));
        return out;
    }

    std::string decode(std::span<const int> labels) const {
        std::string out;
        out.reserve(labels.size());
        for (int l : labels) {
            if (l == 0) throw VocabError("blank cannot appear in a transcript");
            out.push_back(symbol(l));
        }
        return out;
    }

private:
    static constexpr char kBlankChar = '-';
    std::string chars_;
};

/// Merge adjacent repeats, then delete blanks.
inline std::vector<int> collapse(std::span<const int> path, int blank = 0) {
    std::vector<int> out;
    int prev = -1;
    for (int p : path) {
        if (p != prev && p != blank) out.push_back(p);
        prev = p;
    }
    return out;
}

/// Minimum number of frames needed to emit `labels`: one per label plus a
/// blank between adjacent repeats.
inline std::int64_t ctc_min_frames(std::span<const int> labels) {
    std::int64_t n = static_cast<std::int64_t>(labels.size());
    for (std::size_t i = 1; i < labels.size(); ++i)
        if (labels[i] == labels[i - 1]) ++n;
    return n;
}

inline bool ctc_feasible(std::span<const int> labels, std::int64_t frames) {
    return frames >= ctc_min_frames(labels);
}

namespace detail {

constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double lse(double a, double b) {
    if (a == kLogZero) return b;
    if (b == kLogZero) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(std::min(a, b) - m));
}

inline std::vector<int> extend_labels(std::span<const int> labels, int blank) {
    std::vector<int> ext;
    ext.reserve(2 * labels.size() + 1);
    ext.push_back(blank);
    for (int l : labels) {
        ext.push_back(l);
        ext.push_back(blank);
    }
    return ext;
}

}  // namespace detail

/// log p(labels | probs) via the forward-backward dynamic program, entirely in
/// log space. `probs` is (T, V) and need not be row-normalized (the gradient
/// check perturbs rows off the simplex). Returns -inf when no path produces
/// the labels. When `grad` is non-null it receives d log p / d probs.
inline double ctc_log_prob(const Tensor<double>& probs, std::span<const int> labels, int blank = 0,
                           Tensor<double>* grad = nullptr) {
    using detail::kLogZero;
    using detail::lse;
    if (probs.rank() != 2) throw ShapeError("ctc: probs must be (T, V), got " + shape_str(probs.shape));
    const std::int64_t T = probs.rows();
    const std::int64_t V = probs.cols();
    for (int l : labels)
        if (l <= 0 || l >= V) throw VocabError("ctc: label index " + std::to_string(l) + " out of range");

    const auto ext = detail::extend_labels(labels, blank);
    const std::int64_t S = static_cast<std::int64_t>(ext.size());

    auto logp_tk = [&](std::int64_t t, int k) {
        return std::log(probs.at(t, k));  // log(0) = -inf is intended
    };
    // Transition into state s from s-2 is allowed only between distinct
    // non-blank labels.
    auto skip_allowed = [&](std::int64_t s) {
        return s >= 2 && ext[static_cast<std::size_t>(s)] != blank &&
               ext[static_cast<std::size_t>(s)] != ext[static_cast<std::size_t>(s - 2)];
    };

    // Forward pass; alpha_pre excludes the emission at t.
    Tensor<double> alpha_pre({T, S});
    Tensor<double> alpha({T, S});
    for (auto& v : alpha_pre.data) v = kLogZero;
    for (auto& v : alpha.data) v = kLogZero;
    alpha_pre.at(0, 0) = 0.0;
    if (S > 1) alpha_pre.at(0, 1) = 0.0;
    for (std::int64_t s = 0; s < std::min<std::int64_t>(S, 2); ++s)
        alpha.at(0, s) = alpha_pre.at(0, s) + logp_tk(0, ext[static_cast<std::size_t>(s)]);
    for (std::int64_t t = 1; t < T; ++t) {
        for (std::int64_t s = 0; s < S; ++s) {
            double a = alpha.at(t - 1, s);
            if (s >= 1) a = lse(a, alpha.at(t - 1, s - 1));
            if (skip_allowed(s)) a = lse(a, alpha.at(t - 1, s - 2));
            alpha_pre.at(t, s) = a;
            alpha.at(t, s) = a == kLogZero ? kLogZero : a + logp_tk(t, ext[static_cast<std::size_t>(s)]);
        }
    }
    double logp = alpha.at(T - 1, S - 1);
    if (S > 1) logp = lse(logp, alpha.at(T - 1, S - 2));

    if (grad) {
        *grad = Tensor<double>::zeros(probs.shape);
        if (logp != kLogZero) {
            // Backward pass; beta excludes the emission at t.
            Tensor<double> beta({T, S});
            for (auto& v : beta.data) v = kLogZero;
            beta.at(T - 1, S - 1) = 0.0;
            if (S > 1) beta.at(T - 1, S - 2) = 0.0;
            for (std::int64_t t = T - 2; t >= 0; --t) {
                for (std::int64_t s = 0; s < S; ++s) {
                    double b = kLogZero;
                    for (std::int64_t s2 = s; s2 <= std::min<std::int64_t>(s + 2, S - 1); ++s2) {
                        if (s2 == s + 2 && !skip_allowed(s2)) continue;
                        const double next = beta.at(t + 1, s2);
                        if (next == kLogZero) continue;
                        b = lse(b, logp_tk(t + 1, ext[static_cast<std::size_t>(s2)]) + next);
                    }
                    beta.at(t, s) = b;
                }
            }
            // d log p / d probs(t, k) = sum over states labeled k of
            // exp(alpha_pre + beta - log p).
            for (std::int64_t t = 0; t < T; ++t)
                for (std::int64_t s = 0; s < S; ++s) {
                    const double lg = alpha_pre.at(t, s) + beta.at(t, s) - logp;
                    if (lg == kLogZero || std::isnan(lg)) continue;
                    grad->at(t, ext[static_cast<std::size_t>(s)]) += std::exp(lg);
                }
        }
    }
    return logp;
}

/// CTC loss -ln p(target | probs) on the tape, gradient exact. Requires a
/// non-empty, feasible target.
template <typename S>
Val<S> ctc_loss(Val<S> probs, std::span<const int> labels, int blank = 0) {
    const auto& pv = probs.value();
    if (pv.rank() != 2) throw ShapeError("ctc_loss: probs must be (T, V), got " + shape_str(pv.shape));
    if (labels.empty()) throw FeasibilityError("ctc_loss: target is empty");
    if (!ctc_feasible(labels, pv.rows()))
        throw FeasibilityError("ctc_loss: target needs at least " +
                               std::to_string(ctc_min_frames(labels)) + " frames, got " +
                               std::to_string(pv.rows()));
    Tensor<double> grad;
    const double logp = ctc_log_prob(pv.template cast<double>(), labels, blank, &grad);
    const S loss = static_cast<S>(-logp);
    auto ip = probs.id;
    return {probs.tape,
            probs.tape->push(Tensor<S>({1}, {loss}), [ip, grad = grad.template cast<S>()](
                                                         Tape<S>& t, std::int32_t self) {
                const S g = t.grad_buf(self)[0];
                auto& gp = t.grad_buf(ip);
                for (std::int64_t i = 0; i < gp.size(); ++i) gp[i] += -g * grad[i];
            })};
}

/// Literal path enumeration of p(target | probs); the oracle for the dynamic
/// program. Returns +inf loss when no path produces the target.
inline double ctc_bruteforce(const Tensor<double>& probs, std::span<const int> labels,
                             int blank = 0) {
    if (probs.rank() != 2) throw ShapeError("ctc_bruteforce: probs must be (T, V)");
    const std::int64_t T = probs.rows();
    const std::int64_t V = probs.cols();
    double n_paths = std::pow(static_cast<double>(V), static_cast<double>(T));
    if (n_paths > 1e7) throw Error("ctc_bruteforce: instance too large to enumerate");

    std::vector<int> path(static_cast<std::size_t>(T), 0);
    const std::vector<int> target(labels.begin(), labels.end());
    double total = 0.0;
    for (;;) {
        double p = 1.0;
        for (std::int64_t t = 0; t < T; ++t) p *= probs.at(t, path[static_cast<std::size_t>(t)]);
        if (p > 0.0 && collapse(path, blank) == target) total += p;
        // Odometer increment.
        std::int64_t pos = T - 1;
        while (pos >= 0) {
            if (++path[static_cast<std::size_t>(pos)] < V) break;
            path[static_cast<std::size_t>(pos)] = 0;
            --pos;
        }
        if (pos < 0) break;
    }
    return -std::log(total);
}

/// Per-frame argmax (ties to the lowest index), then collapse.
template <typename S>
std::string greedy_decode(const Tensor<S>& probs, const Vocabulary& vocab) {
    if (probs.rank() != 2 || probs.cols() != vocab.size())
        throw ShapeError("greedy_decode: probs must be (T, V) with V = vocabulary size");
    std::vector<int> path;
    path.reserve(static_cast<std::size_t>(probs.rows()));
    for (std::int64_t t = 0; t < probs.rows(); ++t) {
        int best = 0;
        for (std::int64_t k = 1; k < probs.cols(); ++k)
            if (probs.at(t, k) > probs.at(t, best)) best = static_cast<int>(k);
        path.push_back(best);
    }
    return vocab.decode(collapse(path));
}

struct Hypothesis {
    std::string text;
    double log_prob = detail::kLogZero;
};

/// Standard CTC prefix beam search (no language model). Keeps per-prefix
/// blank/non-blank log probabilities; ties break toward the lexicographically
/// smaller prefix. Returns up to `topk` hypotheses, best first.
template <typename S>
std::vector<Hypothesis> prefix_beam_decode(const Tensor<S>& probs, const Vocabulary& vocab,
                                           int beam_width, int topk = 1) {
    using detail::kLogZero;
    using detail::lse;
    if (beam_width < 1) throw Error("prefix_beam_decode: beam width must be >= 1");
    if (probs.rank() != 2 || probs.cols() != vocab.size())
        throw ShapeError("prefix_beam_decode: probs must be (T, V) with V = vocabulary size");
    const std::int64_t T = probs.rows();
    const std::int64_t V = probs.cols();

    struct Mass {
        double lb = kLogZero;   // paths ending in blank
        double lnb = kLogZero;  // paths ending in the prefix's last symbol
        double total() const { return lse(lb, lnb); }
    };
    using Beam = std::map<std::vector<int>, Mass>;
    Beam beam;
    beam[{}] = Mass{0.0, kLogZero};

    for (std::int64_t t = 0; t < T; ++t) {
        std::vector<double> logp(static_cast<std::size_t>(V));
        for (std::int64_t k = 0; k < V; ++k)
            logp[static_cast<std::size_t>(k)] = std::log(static_cast<double>(probs.at(t, k)));
        Beam next;
        for (const auto& [prefix, mass] : beam) {
            const double ptot = mass.total();
            // Emit blank: prefix unchanged.
            {
                auto& m = next[prefix];
                m.lb = lse(m.lb, logp[0] + ptot);
            }
            for (std::int64_t k = 1; k < V; ++k) {
                const double lpk = logp[static_cast<std::size_t>(k)];
                if (lpk == kLogZero) continue;
                if (!prefix.empty() && prefix.back() == static_cast<int>(k)) {
                    // Repeated symbol merges unless separated by a blank.
                    auto& same = next[prefix];
                    same.lnb = lse(same.lnb, lpk + mass.lnb);
                    auto ext = prefix;
                    ext.push_back(static_cast<int>(k));
                    auto& grown = next[ext];
                    grown.lnb = lse(grown.lnb, lpk + mass.lb);
                } else {
                    auto ext = prefix;
                    ext.push_back(static_cast<int>(k));
                    auto& grown = next[ext];
                    grown.lnb = lse(grown.lnb, lpk + ptot);
                }
            }
        }
        // Prune to the beam width; map order makes ties deterministic.
        if (static_cast<int>(next.size()) > beam_width) {
            std::vector<std::pair<const std::vector<int>*, double>> ranked;
            ranked.reserve(next.size());
            for (const auto& [prefix, mass] : next) ranked.emplace_back(&prefix, mass.total());
            std::stable_sort(ranked.begin(), ranked.end(),
                             [](const auto& a, const auto& b) { return a.second > b.second; });
            Beam pruned;
            for (int i = 0; i < beam_width; ++i) pruned[*ranked[static_cast<std::size_t>(i)].first] =
                next[*ranked[static_cast<std::size_t>(i)].first];
            next = std::move(pruned);
        }
        beam = std::move(next);
    }

    std::vector<std::pair<std::vector<int>, double>> final_ranked;
    final_ranked.reserve(beam.size());
    for (const auto& [prefix, mass] : beam) final_ranked.emplace_back(prefix, mass.total());
    std::stable_sort(final_ranked.begin(), final_ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    std::vector<Hypothesis> out;
    for (const auto& [prefix, lp] : final_ranked) {
        if (static_cast<int>(out.size()) >= topk) break;
        out.push_back(Hypothesis{vocab.decode(prefix), lp});
    }
    return out;
}

}  // namespace lcanet

#pragma once

#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "lcanet/ctc.hpp"
#include "lcanet/data.hpp"
#include "lcanet/errors.hpp"
#include "lcanet/metrics.hpp"
#include "lcanet/model.hpp"

namespace lcanet {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename S>
struct AdamState {
    std::vector<Tensor<S>> m, v;
    std::int64_t step = 0;
};

/// One bias-corrected Adam update. A non-finite gradient skips the whole step
/// (the incident is the caller's to log); returns whether the step applied.
template <typename S>
bool adam_step(std::vector<Tensor<S>*>& params, const std::vector<const Tensor<S>*>& grads,
               AdamState<S>& state, const AdamConfig& cfg) {
    if (params.size() != grads.size()) throw Error("adam_step: parameter/gradient count mismatch");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i] = Tensor<S>::zeros(params[i]->shape);
            state.v[i] = Tensor<S>::zeros(params[i]->shape);
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->same_shape(*grads[i]))
            throw ShapeError("adam_step: gradient shape mismatch at tensor " + std::to_string(i));
        for (auto g : grads[i]->data)
            if (!std::isfinite(static_cast<double>(g))) return false;
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        auto& p = *params[i];
        const auto& g = *grads[i];
        for (std::int64_t j = 0; j < p.size(); ++j) {
            m[j] = static_cast<S>(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j]);
            v[j] = static_cast<S>(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j]);
            const double mh = m[j] / bc1;
            const double vh = v[j] / bc2;
            p[j] = static_cast<S>(p[j] - cfg.lr * mh / (std::sqrt(vh) + cfg.eps));
        }
    }
    return true;
}

template <typename S>
bool adam_step(std::vector<Tensor<S>>& params, const std::vector<Tensor<S>>& grads,
               AdamState<S>& state, const AdamConfig& cfg) {
    std::vector<Tensor<S>*> p;
    std::vector<const Tensor<S>*> g;
    for (auto& t : params) p.push_back(&t);
    for (const auto& t : grads) g.push_back(&t);
    return adam_step(p, g, state, cfg);
}

/// Scales gradients so the global L2 norm does not exceed `max_norm`;
/// returns the pre-clip norm.
template <typename S>
double clip_global_norm(std::vector<Tensor<S>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (auto v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const S factor = static_cast<S>(max_norm / norm);
        for (auto& g : grads)
            for (auto& v : g.data) v *= factor;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints (LCKP)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
    std::string config_text;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

/// LCKP: "LCKP" magic, version, config blob length + structured-text config,
/// tensor count, then per tensor: name length, name, rank, dims, f32 payload.
inline void write_checkpoint_file(const std::filesystem::path& path, const CheckpointData& data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_checkpoint: cannot open " + path.string());
    os.write("LCKP", 4);
    detail::write_u32(os, kCheckpointVersion);
    detail::write_u32(os, static_cast<std::uint32_t>(data.config_text.size()));
    os.write(data.config_text.data(), static_cast<std::streamsize>(data.config_text.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(data.tensors.size()));
    for (const auto& [name, tensor] : data.tensors) {
        detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u32(os, static_cast<std::uint32_t>(tensor.rank()));
        for (auto d : tensor.shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
        detail::write_f32_payload(os, tensor.data);
    }
    if (!os) throw IoError("write_checkpoint: write failed for " + path.string());
}

inline CheckpointData read_checkpoint_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_checkpoint: cannot open " + path.string());
    const std::string name = path.filename().string();
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "LCKP")
        throw FormatError(name + ": bad LCKP magic");
    if (detail::read_u32(is, name) != kCheckpointVersion)
        throw FormatError(name + ": unsupported LCKP version");
    CheckpointData data;
    const std::uint32_t cfg_len = detail::read_u32(is, name);
    data.config_text.resize(cfg_len);
    if (!is.read(data.config_text.data(), cfg_len))
        throw FormatError(name + ": truncated config blob");
    const std::uint32_t count = detail::read_u32(is, name);
    if (count > 100000) throw FormatError(name + ": implausible tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::read_u32(is, name);
        if (name_len > 4096) throw FormatError(name + ": implausible tensor name length");
        std::string tname(name_len, '\0');
        if (!is.read(tname.data(), name_len)) throw FormatError(name + ": truncated tensor name");
        const std::uint32_t rank = detail::read_u32(is, name);
        if (rank == 0 || rank > 8) throw FormatError(name + ": implausible tensor rank");
        Shape shape;
        std::int64_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t dim = detail::read_u32(is, name);
            if (dim == 0 || n > (1ll << 40) / std::max<std::int64_t>(1, dim))
                throw FormatError(name + ": implausible tensor dimensions");
            shape.push_back(dim);
            n *= dim;
        }
        Tensor<float> t(shape);
        if (!is.read(reinterpret_cast<char*>(t.data.data()), n * 4))
            throw FormatError(name + ": truncated payload in tensor " + tname);
        data.tensors.emplace_back(std::move(tname), std::move(t));
    }
    return data;
}

template <typename S>
CheckpointData checkpoint_from_model(const ModelParams<S>& model, const std::string& config_text) {
    CheckpointData data;
    data.config_text = config_text;
    for (const auto& [name, t] : model.params) data.tensors.emplace_back(name, t.template cast<float>());
    for (const auto& [name, t] : model.state) data.tensors.emplace_back(name, t.template cast<float>());
    return data;
}

/// Copies checkpoint tensors into an already-built model, insisting on an
/// exact match of names and shapes in both directions.
template <typename S>
void load_tensors_into_model(const CheckpointData& data, ModelParams<S>& model) {
    std::size_t used = 0;
    for (const auto& [name, tensor] : data.tensors) {
        Tensor<S>* dst = nullptr;
        if (model.param_index.count(name))
            dst = &model.params[model.param_index.at(name)].second;
        else if (model.state_index.count(name))
            dst = &model.state[model.state_index.at(name)].second;
        else
            throw FormatError("checkpoint tensor '" + name + "' does not exist in a " +
                              variant_name(model.config.variant) + " model");
        if (dst->shape != tensor.shape)
            throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(tensor.shape) +
                              " but the model expects " + shape_str(dst->shape));
        *dst = tensor.template cast<S>();
        ++used;
    }
    if (used != model.params.size() + model.state.size())
        throw FormatError("checkpoint is missing " +
                          std::to_string(model.params.size() + model.state.size() - used) +
                          " model tensors");
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::int64_t epochs = 50;
    std::int64_t batch_size = 16;
    double lr = 1e-4;
    std::int64_t patience = 5;
    std::uint64_t seed = 42;
    double grad_clip = 5.0;
    double loss_threshold = 15.0;  // epochs-to-threshold metric
    int threads = 1;
};

struct EpochRecord {
    std::int64_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_cer = 0.0;
    std::int64_t skipped_steps = 0;
};

template <typename S>
struct TrainResult {
    std::vector<EpochRecord> history;
    ModelParams<S> best;            // best-validation parameters
    std::int64_t best_epoch = 0;    // 1-based
    std::int64_t epochs_to_threshold = -1;
    std::int64_t infeasible_filtered = 0;
    bool stopped_early = false;
};

namespace detail {

/// Shortest round-trip decimal representation; keeps logs byte-stable.
inline std::string fmt_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

/// Runs fn(0..n-1) on `threads` workers; results must be written to
/// per-index slots so reductions stay in index order.
template <typename Fn>
void parallel_for(std::int64_t n, int threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::int64_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    const int workers = static_cast<int>(std::min<std::int64_t>(threads, n));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const std::int64_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

template <typename S>
void shuffle_indices(std::vector<std::int64_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
}

}  // namespace detail

/// Runs the epoch loop: seeded shuffling, mean batch loss, per-epoch
/// validation loss and greedy-decode CER, best-checkpoint tracking, and early
/// stopping when validation loss fails to improve for `patience` epochs.
/// Per-epoch records stream to `history_out` as one JSON object per line.
template <typename S>
TrainResult<S> train(ModelParams<S> model, const std::vector<Sample>& train_set,
                     const std::vector<Sample>& val_set, const Vocabulary& vocab,
                     const TrainConfig& cfg, std::ostream* history_out = nullptr,
                     std::int64_t start_epoch = 0) {
    if (train_set.empty()) throw Error("train: empty training set");
    if (cfg.batch_size < 1) throw Error("train: batch size must be >= 1");
    if (cfg.patience < 1) throw Error("train: patience must be >= 1");

    struct Encoded {
        const Sample* sample;
        std::vector<int> labels;
    };
    TrainResult<S> result;
    std::vector<Encoded> data;
    for (const auto& s : train_set) {
        auto labels = vocab.encode(s.transcript);
        if (!ctc_feasible(labels, s.frames.shape[1])) {
            ++result.infeasible_filtered;
            continue;
        }
        data.push_back({&s, std::move(labels)});
    }
    if (data.empty()) throw Error("train: every training sample is infeasible for ctc");

    std::vector<Encoded> val_data;
    for (const auto& s : val_set) val_data.push_back({&s, vocab.encode(s.transcript)});

    AdamState<S> opt;
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr;
    double best_val = std::numeric_limits<double>::infinity();
    std::int64_t since_best = 0;

    const std::int64_t n = static_cast<std::int64_t>(data.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    for (std::int64_t e = 0; e < cfg.epochs; ++e) {
        const std::int64_t epoch = start_epoch + e + 1;
        Rng shuffle_rng(Rng::derive(cfg.seed, 0x10000 + static_cast<std::uint64_t>(epoch)));
        detail::shuffle_indices<S>(order, shuffle_rng);

        EpochRecord record;
        record.epoch = epoch;
        double loss_sum = 0.0;
        std::int64_t loss_count = 0;

        for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
            const std::int64_t bn = std::min<std::int64_t>(cfg.batch_size, n - start);
            std::vector<double> losses(static_cast<std::size_t>(bn));
            std::vector<std::vector<Tensor<S>>> grads(static_cast<std::size_t>(bn));
            std::vector<std::array<BatchMoments<S>, 3>> moments(static_cast<std::size_t>(bn));

            detail::parallel_for(bn, cfg.threads, [&](std::int64_t bi) {
                const auto& item = data[static_cast<std::size_t>(order[static_cast<std::size_t>(start + bi)])];
                Rng sample_rng(Rng::derive(cfg.seed ^ 0xd1ce5eedULL,
                                           static_cast<std::uint64_t>(epoch) * 0x100000 +
                                               static_cast<std::uint64_t>(start + bi)));
                Tape<S> tape;
                BoundModel<S> bound(tape, model);
                LayerMode mode{true, &sample_rng};
                auto loss = model_loss(tape, bound, item.sample->frames, item.labels, mode,
                                       &moments[static_cast<std::size_t>(bi)]);
                losses[static_cast<std::size_t>(bi)] = static_cast<double>(loss.total.value()[0]);
                tape.backward(loss.total);
                auto& g = grads[static_cast<std::size_t>(bi)];
                g.reserve(bound.leaves.size());
                for (const auto& leaf : bound.leaves) g.push_back(tape.grad(leaf.id));
            });

            // Ordered reduction keeps results identical across thread counts.
            std::vector<Tensor<S>> mean_grads;
            mean_grads.reserve(model.params.size());
            for (std::size_t p = 0; p < model.params.size(); ++p)
                mean_grads.push_back(Tensor<S>::zeros(model.params[p].second.shape));
            const S inv_bn = static_cast<S>(1.0 / static_cast<double>(bn));
            for (std::int64_t bi = 0; bi < bn; ++bi) {
                for (std::size_t p = 0; p < mean_grads.size(); ++p) {
                    const auto& g = grads[static_cast<std::size_t>(bi)][p];
                    auto& acc = mean_grads[p];
                    for (std::int64_t j = 0; j < acc.size(); ++j) acc[j] += g[j] * inv_bn;
                }
                loss_sum += losses[static_cast<std::size_t>(bi)];
                ++loss_count;
            }
            clip_global_norm(mean_grads, cfg.grad_clip);

            std::vector<Tensor<S>*> param_ptrs;
            std::vector<const Tensor<S>*> grad_ptrs;
            for (std::size_t p = 0; p < model.params.size(); ++p) {
                param_ptrs.push_back(&model.params[p].second);
                grad_ptrs.push_back(&mean_grads[p]);
            }
            if (!adam_step(param_ptrs, grad_ptrs, opt, adam_cfg)) ++record.skipped_steps;

            // Batch-norm running statistics, serialized at batch end.
            const S momentum = static_cast<S>(model.config.encoder.bn_momentum);
            for (std::size_t block = 0; block < 3; ++block) {
                const std::string prefix = "enc.conv" + std::to_string(block + 1);
                auto& rmean = model.state_tensor(prefix + ".run_mean");
                auto& rvar = model.state_tensor(prefix + ".run_var");
                Tensor<S> bmean = Tensor<S>::zeros(rmean.shape);
                Tensor<S> bvar = Tensor<S>::zeros(rvar.shape);
                for (std::int64_t bi = 0; bi < bn; ++bi) {
                    const auto& m = moments[static_cast<std::size_t>(bi)][block];
                    for (std::int64_t c = 0; c < bmean.size(); ++c) {
                        bmean[c] += m.mean[c] * inv_bn;
                        bvar[c] += m.var[c] * inv_bn;
                    }
                }
                for (std::int64_t c = 0; c < rmean.size(); ++c) {
                    rmean[c] = momentum * rmean[c] + (S(1) - momentum) * bmean[c];
                    rvar[c] = momentum * rvar[c] + (S(1) - momentum) * bvar[c];
                }
            }
        }
        record.train_loss = loss_sum / static_cast<double>(std::max<std::int64_t>(loss_count, 1));

        // Validation: mean loss plus corpus CER from greedy decoding.
        if (!val_data.empty()) {
            std::vector<double> vloss(val_data.size());
            std::vector<std::string> vpred(val_data.size());
            detail::parallel_for(static_cast<std::int64_t>(val_data.size()), cfg.threads,
                                 [&](std::int64_t vi) {
                                     const auto& item = val_data[static_cast<std::size_t>(vi)];
                                     Tape<S> tape;
                                     BoundModel<S> bound(tape, model);
                                     LayerMode mode;  // eval
                                     auto fwd = model_frame_probs(tape, bound, item.sample->frames, mode);
                                     vloss[static_cast<std::size_t>(vi)] =
                                         ctc_feasible(item.labels, item.sample->frames.shape[1])
                                             ? static_cast<double>(
                                                   ctc_loss(fwd.probs, item.labels).value()[0])
                                             : std::numeric_limits<double>::quiet_NaN();
                                     vpred[static_cast<std::size_t>(vi)] =
                                         greedy_decode(fwd.probs.value(), vocab);
                                 });
            double vsum = 0.0;
            std::int64_t vcount = 0;
            std::vector<std::string> refs;
            for (std::size_t i = 0; i < val_data.size(); ++i) {
                if (std::isfinite(vloss[i])) {
                    vsum += vloss[i];
                    ++vcount;
                }
                refs.push_back(val_data[i].sample->transcript);
            }
            record.val_loss = vcount ? vsum / static_cast<double>(vcount) : 0.0;
            record.val_cer = corpus_cer(vpred, refs);
        }

        if (result.epochs_to_threshold < 0 && record.train_loss < cfg.loss_threshold)
            result.epochs_to_threshold = epoch;

        result.history.push_back(record);
        if (history_out) {
            (*history_out) << "{\"epoch\":" << record.epoch
                           << ",\"train_loss\":" << detail::fmt_double(record.train_loss)
                           << ",\"val_loss\":" << detail::fmt_double(record.val_loss)
                           << ",\"val_cer\":" << detail::fmt_double(record.val_cer)
                           << ",\"skipped_steps\":" << record.skipped_steps
                           << ",\"train_loss_below_threshold\":"
                           << (record.train_loss < cfg.loss_threshold ? "true" : "false") << "}\n";
            history_out->flush();
        }

        const double val_metric = val_data.empty() ? record.train_loss : record.val_loss;
        if (val_metric < best_val) {
            best_val = val_metric;
            result.best = model;
            result.best_epoch = epoch;
            since_best = 0;
        } else {
            ++since_best;
            if (since_best >= cfg.patience) {
                result.stopped_early = true;
                break;
            }
        }
    }
    if (result.best_epoch == 0) result.best = model;
    return result;
}

}  // namespace lcanet

#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lcanet/data.hpp"
#include "lcanet/errors.hpp"
#include "lcanet/model.hpp"
#include "lcanet/train.hpp"

namespace lcanet {

// ---------------------------------------------------------------------------
// Strict INI-style config files
// ---------------------------------------------------------------------------

struct IniDoc {
    using Section = std::vector<std::pair<std::string, std::string>>;
    std::vector<std::pair<std::string, Section>> sections;

    static IniDoc parse(const std::string& text) {
        IniDoc doc;
        std::istringstream is(text);
        std::string line;
        Section* current = nullptr;
        std::int64_t line_no = 0;
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        while (std::getline(is, line)) {
            ++line_no;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#' || t[0] == ';') continue;
            if (t.front() == '[') {
                if (t.back() != ']')
                    throw FormatError("config line " + std::to_string(line_no) + ": unterminated section");
                const std::string name = trim(t.substr(1, t.size() - 2));
                if (name.empty())
                    throw FormatError("config line " + std::to_string(line_no) + ": empty section name");
                for (const auto& [existing, _] : doc.sections)
                    if (existing == name)
                        throw FormatError("config line " + std::to_string(line_no) +
                                          ": duplicate section [" + name + "]");
                doc.sections.emplace_back(name, Section{});
                current = &doc.sections.back().second;
                continue;
            }
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw FormatError("config line " + std::to_string(line_no) + ": expected key = value");
            if (!current)
                throw FormatError("config line " + std::to_string(line_no) + ": key outside any section");
            const std::string key = trim(t.substr(0, eq));
            const std::string value = trim(t.substr(eq + 1));
            if (key.empty())
                throw FormatError("config line " + std::to_string(line_no) + ": empty key");
            for (const auto& [k, v] : *current)
                if (k == key)
                    throw FormatError("config line " + std::to_string(line_no) + ": duplicate key '" +
                                      key + "'");
            current->emplace_back(key, value);
        }
        return doc;
    }

    static IniDoc parse_file(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config file " + path.string());
        std::ostringstream buf;
        buf << is.rdbuf();
        return parse(buf.str());
    }

    std::string serialize() const {
        std::ostringstream os;
        for (const auto& [name, section] : sections) {
            os << '[' << name << "]\n";
            for (const auto& [k, v] : section) os << k << " = " << v << '\n';
            os << '\n';
        }
        return os.str();
    }
};

namespace detail {

inline std::int64_t parse_int(const std::string& value, const std::string& where) {
    std::int64_t out = 0;
    const auto* begin = value.data();
    const auto* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc() || ptr != end)
        throw FormatError(where + ": expected an integer, got '" + value + "'");
    return out;
}

inline double parse_double(const std::string& value, const std::string& where) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return out;
    } catch (const std::exception&) {
        throw FormatError(where + ": expected a number, got '" + value + "'");
    }
}

inline bool parse_bool(const std::string& value, const std::string& where) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw FormatError(where + ": expected true/false, got '" + value + "'");
}

inline std::vector<std::string> parse_list(const std::string& value) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(value);
    while (std::getline(is, item, ',')) {
        const auto a = item.find_first_not_of(" \t");
        const auto b = item.find_last_not_of(" \t");
        if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Everything a run needs, resolvable from defaults, a config file and
/// command-line overrides. Unknown sections or keys are rejected.
struct RunConfig {
    Grammar grammar;
    RenderSpec render;
    std::int64_t train_samples = 2000;
    std::int64_t val_samples = 200;
    std::int64_t test_samples = 200;

    std::string variant = "ah-ctc";
    bool table1 = false;
    double lambda = 0.5;
    std::array<std::int64_t, 3> conv_channels{8, 16, 24};
    std::int64_t gru_hidden = 32;
    std::int64_t attn_dim = 32;
    std::int64_t embed_dim = 16;
    std::int64_t dec_hidden = 32;
    double dropout = 0.5;

    TrainConfig train;
    std::string precision = "f32";

    int beam = 10;
    int topk = 1;

    std::string data_dir;
    std::string out_dir;

    std::uint64_t seed = 42;

    void apply_ini(const IniDoc& doc);
    std::string to_ini() const;
    ModelConfig model_config() const;
};

namespace detail {

inline std::string join_list(const std::vector<std::string>& items) {
    std::string out;
    for (const auto& i : items) {
        if (!out.empty()) out += ",";
        out += i;
    }
    return out;
}

}  // namespace detail

inline void RunConfig::apply_ini(const IniDoc& doc) {
    for (const auto& [section, entries] : doc.sections) {
        for (const auto& [key, value] : entries) {
            const std::string where = "[" + section + "] " + key;
            if (section == "grammar") {
                auto list = detail::parse_list(value);
                if (list.empty()) throw FormatError(where + ": empty word list");
                if (key == "commands") grammar.commands = list;
                else if (key == "colors") grammar.colors = list;
                else if (key == "prepositions") grammar.prepositions = list;
                else if (key == "letters") grammar.letters = list;
                else if (key == "digits") grammar.digits = list;
                else if (key == "adverbs") grammar.adverbs = list;
                else throw FormatError(where + ": unknown key");
            } else if (section == "render") {
                if (key == "height") render.height = detail::parse_int(value, where);
                else if (key == "width") render.width = detail::parse_int(value, where);
                else if (key == "min_frames_per_char") render.min_frames_per_char = detail::parse_int(value, where);
                else if (key == "max_frames_per_char") render.max_frames_per_char = detail::parse_int(value, where);
                else if (key == "crossfade") render.crossfade = detail::parse_int(value, where);
                else if (key == "noise_sigma") render.noise_sigma = detail::parse_double(value, where);
                else if (key == "max_frames") render.max_frames = detail::parse_int(value, where);
                else if (key == "confusable_scale") render.confusable_scale = detail::parse_double(value, where);
                else if (key == "pattern_seed") render.pattern_seed =
                    static_cast<std::uint64_t>(detail::parse_int(value, where));
                else if (key == "confusable_pairs") {
                    render.confusable_pairs.clear();
                    for (const auto& pair : detail::parse_list(value)) {
                        if (pair.size() != 3 || pair[1] != ':')
                            throw FormatError(where + ": expected pairs like p:b, got '" + pair + "'");
                        render.confusable_pairs.emplace_back(pair[0], pair[2]);
                    }
                } else if (key == "train_samples") train_samples = detail::parse_int(value, where);
                else if (key == "val_samples") val_samples = detail::parse_int(value, where);
                else if (key == "test_samples") test_samples = detail::parse_int(value, where);
                else throw FormatError(where + ": unknown key");
            } else if (section == "model") {
                if (key == "variant") variant = value;
                else if (key == "table1") table1 = detail::parse_bool(value, where);
                else if (key == "lambda") lambda = detail::parse_double(value, where);
                else if (key == "conv_channels") {
                    auto list = detail::parse_list(value);
                    if (list.size() != 3) throw FormatError(where + ": expected three channel counts");
                    for (std::size_t i = 0; i < 3; ++i)
                        conv_channels[i] = detail::parse_int(list[i], where);
                } else if (key == "gru_hidden") gru_hidden = detail::parse_int(value, where);
                else if (key == "attn_dim") attn_dim = detail::parse_int(value, where);
                else if (key == "embed_dim") embed_dim = detail::parse_int(value, where);
                else if (key == "dec_hidden") dec_hidden = detail::parse_int(value, where);
                else if (key == "dropout") dropout = detail::parse_double(value, where);
                else throw FormatError(where + ": unknown key");
            } else if (section == "train") {
                if (key == "epochs") train.epochs = detail::parse_int(value, where);
                else if (key == "batch") train.batch_size = detail::parse_int(value, where);
                else if (key == "lr") train.lr = detail::parse_double(value, where);
                else if (key == "patience") train.patience = detail::parse_int(value, where);
                else if (key == "loss_threshold") train.loss_threshold = detail::parse_double(value, where);
                else if (key == "grad_clip") train.grad_clip = detail::parse_double(value, where);
                else if (key == "threads") train.threads = static_cast<int>(detail::parse_int(value, where));
                else if (key == "precision") {
                    if (value != "f32" && value != "f64")
                        throw FormatError(where + ": precision must be f32 or f64");
                    precision = value;
                } else throw FormatError(where + ": unknown key");
            } else if (section == "decode") {
                if (key == "beam") beam = static_cast<int>(detail::parse_int(value, where));
                else if (key == "topk") topk = static_cast<int>(detail::parse_int(value, where));
                else throw FormatError(where + ": unknown key");
            } else if (section == "paths") {
                if (key == "data") data_dir = value;
                else if (key == "out") out_dir = value;
                else throw FormatError(where + ": unknown key");
            } else if (section == "seed") {
                if (key == "value") seed = static_cast<std::uint64_t>(detail::parse_int(value, where));
                else throw FormatError(where + ": unknown key");
            } else {
                throw FormatError("unknown config section [" + section + "]");
            }
        }
    }
}

inline std::string RunConfig::to_ini() const {
    std::ostringstream os;
    os << "[grammar]\n";
    os << "commands = " << detail::join_list(grammar.commands) << '\n';
    os << "colors = " << detail::join_list(grammar.colors) << '\n';
    os << "prepositions = " << detail::join_list(grammar.prepositions) << '\n';
    os << "letters = " << detail::join_list(grammar.letters) << '\n';
    os << "digits = " << detail::join_list(grammar.digits) << '\n';
    os << "adverbs = " << detail::join_list(grammar.adverbs) << '\n';
    os << "\n[render]\n";
    os << "height = " << render.height << '\n';
    os << "width = " << render.width << '\n';
    os << "min_frames_per_char = " << render.min_frames_per_char << '\n';
    os << "max_frames_per_char = " << render.max_frames_per_char << '\n';
    os << "crossfade = " << render.crossfade << '\n';
    os << "noise_sigma = " << detail::fmt_double(render.noise_sigma) << '\n';
    os << "max_frames = " << render.max_frames << '\n';
    std::string pairs;
    for (const auto& [a, b] : render.confusable_pairs) {
        if (!pairs.empty()) pairs += ",";
        pairs += a;
        pairs += ':';
        pairs += b;
    }
    os << "confusable_pairs = " << pairs << '\n';
    os << "confusable_scale = " << detail::fmt_double(render.confusable_scale) << '\n';
    os << "pattern_seed = " << render.pattern_seed << '\n';
    os << "train_samples = " << train_samples << '\n';
    os << "val_samples = " << val_samples << '\n';
    os << "test_samples = " << test_samples << '\n';
    os << "\n[model]\n";
    os << "variant = " << variant << '\n';
    os << "table1 = " << (table1 ? "true" : "false") << '\n';
    os << "lambda = " << detail::fmt_double(lambda) << '\n';
    os << "conv_channels = " << conv_channels[0] << ',' << conv_channels[1] << ',' << conv_channels[2]
       << '\n';
    os << "gru_hidden = " << gru_hidden << '\n';
    os << "attn_dim = " << attn_dim << '\n';
    os << "embed_dim = " << embed_dim << '\n';
    os << "dec_hidden = " << dec_hidden << '\n';
    os << "dropout = " << detail::fmt_double(dropout) << '\n';
    os << "\n[train]\n";
    os << "epochs = " << train.epochs << '\n';
    os << "batch = " << train.batch_size << '\n';
    os << "lr = " << detail::fmt_double(train.lr) << '\n';
    os << "patience = " << train.patience << '\n';
    os << "loss_threshold = " << detail::fmt_double(train.loss_threshold) << '\n';
    os << "grad_clip = " << detail::fmt_double(train.grad_clip) << '\n';
    os << "threads = " << train.threads << '\n';
    os << "precision = " << precision << '\n';
    os << "\n[decode]\n";
    os << "beam = " << beam << '\n';
    os << "topk = " << topk << '\n';
    os << "\n[paths]\n";
    os << "data = " << data_dir << '\n';
    os << "out = " << out_dir << '\n';
    os << "\n[seed]\n";
    os << "value = " << seed << '\n';
    return os.str();
}

/// Builds the model configuration shared by the run-config and checkpoint
/// paths. The full-scale preset fixes its own geometry; the desk-scale preset
/// takes its input size from the render spec.
inline ModelConfig make_model_config(Variant v, bool table1, double lambda,
                                     const std::array<std::int64_t, 3>& channels,
                                     std::int64_t in_h, std::int64_t in_w, std::int64_t gru_hidden,
                                     std::int64_t attn_dim, std::int64_t embed_dim,
                                     std::int64_t dec_hidden, double dropout) {
    ModelConfig cfg = table1 ? table1_model_config(v) : toy_model_config(v);
    cfg.lambda = lambda;
    if (!table1) {
        cfg.encoder.in_h = in_h;
        cfg.encoder.in_w = in_w;
        for (std::size_t i = 0; i < 3; ++i) cfg.encoder.blocks[i].out_channels = channels[i];
        cfg.encoder.gru_hidden = gru_hidden;
        cfg.attn_dim = attn_dim;
        cfg.embed_dim = embed_dim;
        cfg.dec_hidden = dec_hidden;
        cfg.encoder.dropout_rate = dropout;
        // Re-derive the highway width and check the pooling chain stays valid.
        std::int64_t h = in_h, w = in_w;
        for (const auto& b : cfg.encoder.blocks) {
            h = pool_out_dim(conv_out_dim(h, b.kernel.h, b.stride.h, b.pad.h), b.pool_window.h,
                             b.pool_stride.h);
            w = pool_out_dim(conv_out_dim(w, b.kernel.w, b.stride.w, b.pad.w), b.pool_window.w,
                             b.pool_stride.w);
            if (h < 1 || w < 1)
                throw Error("model config: input " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                            " collapses to nothing under three pooling stages");
        }
        cfg.encoder.highway_width = encoder_flat_width(cfg.encoder);
    }
    return cfg;
}

inline ModelConfig RunConfig::model_config() const {
    return make_model_config(parse_variant(variant), table1, lambda, conv_channels, render.height,
                             render.width, gru_hidden, attn_dim, embed_dim, dec_hidden, dropout);
}

/// The vocabulary every run uses; validates that all grammar characters are
/// covered.
inline Vocabulary vocabulary_for(const Grammar& grammar) {
    auto vocab = Vocabulary::grid();
    for (const auto* category : grammar.categories())
        for (const auto& word : *category)
            for (char c : word) vocab.index_of(c);
    return vocab;
}

// ---------------------------------------------------------------------------
// Checkpoint config blobs
// ---------------------------------------------------------------------------

inline std::string checkpoint_config_text(const ModelConfig& cfg, std::int64_t trained_epochs) {
    std::ostringstream os;
    os << "[model]\n";
    os << "variant = " << variant_name(cfg.variant) << '\n';
    os << "table1 = " << (cfg.table1 ? "true" : "false") << '\n';
    os << "lambda = " << detail::fmt_double(cfg.lambda) << '\n';
    os << "conv_channels = " << cfg.encoder.blocks[0].out_channels << ','
       << cfg.encoder.blocks[1].out_channels << ',' << cfg.encoder.blocks[2].out_channels << '\n';
    os << "input_height = " << cfg.encoder.in_h << '\n';
    os << "input_width = " << cfg.encoder.in_w << '\n';
    os << "gru_hidden = " << cfg.encoder.gru_hidden << '\n';
    os << "attn_dim = " << cfg.attn_dim << '\n';
    os << "embed_dim = " << cfg.embed_dim << '\n';
    os << "dec_hidden = " << cfg.dec_hidden << '\n';
    os << "dropout = " << detail::fmt_double(cfg.encoder.dropout_rate) << '\n';
    os << "\n[checkpoint]\n";
    os << "trained_epochs = " << trained_epochs << '\n';
    return os.str();
}

inline std::pair<ModelConfig, std::int64_t> parse_checkpoint_config(const std::string& text) {
    const IniDoc doc = IniDoc::parse(text);
    std::string variant = "ah-ctc";
    bool table1 = false;
    double lambda = 0.5, dropout = 0.5;
    std::array<std::int64_t, 3> channels{8, 16, 24};
    std::int64_t in_h = 8, in_w = 16, gru_hidden = 32, attn_dim = 32, embed_dim = 16,
                 dec_hidden = 32, trained_epochs = 0;
    for (const auto& [section, entries] : doc.sections) {
        for (const auto& [key, value] : entries) {
            const std::string where = "checkpoint config [" + section + "] " + key;
            if (section == "model") {
                if (key == "variant") variant = value;
                else if (key == "table1") table1 = detail::parse_bool(value, where);
                else if (key == "lambda") lambda = detail::parse_double(value, where);
                else if (key == "conv_channels") {
                    auto list = detail::parse_list(value);
                    if (list.size() != 3) throw FormatError(where + ": expected three channel counts");
                    for (std::size_t i = 0; i < 3; ++i) channels[i] = detail::parse_int(list[i], where);
                } else if (key == "input_height") in_h = detail::parse_int(value, where);
                else if (key == "input_width") in_w = detail::parse_int(value, where);
                else if (key == "gru_hidden") gru_hidden = detail::parse_int(value, where);
                else if (key == "attn_dim") attn_dim = detail::parse_int(value, where);
                else if (key == "embed_dim") embed_dim = detail::parse_int(value, where);
                else if (key == "dec_hidden") dec_hidden = detail::parse_int(value, where);
                else if (key == "dropout") dropout = detail::parse_double(value, where);
                else throw FormatError(where + ": unknown key");
            } else if (section == "checkpoint") {
                if (key == "trained_epochs") trained_epochs = detail::parse_int(value, where);
                else throw FormatError(where + ": unknown key");
            } else {
                throw FormatError("checkpoint config: unknown section [" + section + "]");
            }
        }
    }
    return {make_model_config(parse_variant(variant), table1, lambda, channels, in_h, in_w,
                              gru_hidden, attn_dim, embed_dim, dec_hidden, dropout),
            trained_epochs};
}

template <typename S>
void save_model_checkpoint(const std::filesystem::path& path, const ModelParams<S>& model,
                           std::int64_t trained_epochs) {
    write_checkpoint_file(path,
                          checkpoint_from_model(model, checkpoint_config_text(model.config, trained_epochs)));
}

template <typename S>
ModelParams<S> load_model_checkpoint(const std::filesystem::path& path,
                                     std::int64_t* trained_epochs = nullptr) {
    const CheckpointData data = read_checkpoint_file(path);
    auto [cfg, epochs] = parse_checkpoint_config(data.config_text);
    auto model = build_model<S>(cfg, 0);
    load_tensors_into_model(data, model);
    if (trained_epochs) *trained_epochs = epochs;
    return model;
}

}  // namespace lcanet

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lcanet/errors.hpp"
#include "lcanet/rng.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

// ---------------------------------------------------------------------------
// Grammar
// ---------------------------------------------------------------------------

/// Six-slot sentence grammar: command + color + preposition + letter + digit
/// + adverb, one word per category.
struct Grammar {
    std::vector<std::string> commands{"bin", "lay", "place", "set"};
    std::vector<std::string> colors{"blue", "green", "red", "white"};
    std::vector<std::string> prepositions{"at", "by", "in", "with"};
    std::vector<std::string> letters;  // a..z minus w by default
    std::vector<std::string> digits{"zero", "one", "two",   "three", "four",
                                    "five", "six", "seven", "eight", "nine"};
    std::vector<std::string> adverbs{"again", "now", "please", "soon"};

    Grammar() {
        for (char c = 'a'; c <= 'z'; ++c)
            if (c != 'w') letters.emplace_back(1, c);
    }

    std::array<const std::vector<std::string>*, 6> categories() const {
        return {&commands, &colors, &prepositions, &letters, &digits, &adverbs};
    }
};

/// One word drawn uniformly and independently per category, space-joined.
inline std::string sample_sentence(const Grammar& grammar, Rng& rng) {
    std::string out;
    for (const auto* category : grammar.categories()) {
        if (category->empty()) throw Error("sample_sentence: empty word category");
        if (!out.empty()) out.push_back(' ');
        out += (*category)[rng.uniform_int(category->size())];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// How sentences become frame tensors: every character (including space) maps
/// to a fixed smooth pattern; confusable pairs share a base pattern plus a
/// scaled per-character perturbation.
struct RenderSpec {
    std::int64_t height = 8;
    std::int64_t width = 16;
    std::int64_t min_frames_per_char = 2;
    std::int64_t max_frames_per_char = 4;
    std::int64_t crossfade = 1;  // boundary frames blended with the next character
    double noise_sigma = 0.05;
    std::int64_t max_frames = 64;
    std::vector<std::pair<char, char>> confusable_pairs{
        {'p', 'b'}, {'f', 'v'}, {'m', 'n'}, {'s', 'z'}, {'t', 'd'}};
    double confusable_scale = 0.3;
    std::uint64_t pattern_seed = 0x5eed;
};

namespace detail {

// Smooth pseudo-random pattern: a few Gaussian bumps seeded per key.
inline Tensor<double> pattern_blob(std::int64_t h, std::int64_t w, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> out({h, w});
    for (int bump = 0; bump < 3; ++bump) {
        const double cy = rng.uniform(0.0, static_cast<double>(h));
        const double cx = rng.uniform(0.0, static_cast<double>(w));
        const double sigma = rng.uniform(1.0, static_cast<double>(std::max(h, w)) / 3.0);
        const double amp = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                const double dy = static_cast<double>(y) - cy;
                const double dx = static_cast<double>(x) - cx;
                out.at(y, x) += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            }
    }
    return out;
}

}  // namespace detail

/// The base pattern a character renders as. Members of a confusable pair share
/// a pattern and differ only by a perturbation scaled by `confusable_scale`
/// (scale 0 renders the two characters identically).
inline Tensor<double> character_pattern(char c, const RenderSpec& spec) {
    char key = c;
    bool perturbed = false;
    for (const auto& [a, b] : spec.confusable_pairs) {
        if (c == a || c == b) {
            key = a;
            perturbed = true;
            break;
        }
    }
    auto base = detail::pattern_blob(spec.height, spec.width,
                                     Rng::derive(spec.pattern_seed, static_cast<std::uint64_t>(key)));
    if (perturbed) {
        auto delta = detail::pattern_blob(
            spec.height, spec.width,
            Rng::derive(spec.pattern_seed ^ 0x9e3779b97f4a7c15ULL, static_cast<std::uint64_t>(c)));
        for (std::int64_t i = 0; i < base.size(); ++i) base[i] += spec.confusable_scale * delta[i];
    }
    return base;
}

/// Renders a sentence into a (1, T, H, W) tensor. Character durations are
/// drawn from [min, max] frames and squeezed toward the minimum when the
/// total would exceed `max_frames`; a 1-frame crossfade blends each character
/// boundary. Gaussian pixel noise is added, then the whole tensor is
/// mean-reduced and scaled to unit variance.
inline Tensor<float> render_frames(const std::string& sentence, const RenderSpec& spec, Rng& rng) {
    if (sentence.empty()) throw Error("render_frames: empty sentence");
    const std::int64_t n = static_cast<std::int64_t>(sentence.size());

    std::vector<std::int64_t> durations(static_cast<std::size_t>(n));
    std::int64_t total = 0;
    for (auto& d : durations) {
        d = spec.min_frames_per_char +
            static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(
                spec.max_frames_per_char - spec.min_frames_per_char + 1)));
        total += d;
    }
    while (total > spec.max_frames) {
        // Trim the longest remaining duration, first occurrence wins.
        std::size_t longest = 0;
        for (std::size_t i = 1; i < durations.size(); ++i)
            if (durations[i] > durations[longest]) longest = i;
        if (durations[longest] <= spec.min_frames_per_char)
            throw Error("render_frames: sentence '" + sentence + "' needs " + std::to_string(total) +
                        " frames, more than the configured maximum " +
                        std::to_string(spec.max_frames));
        --durations[longest];
        --total;
    }

    std::vector<Tensor<double>> patterns;
    patterns.reserve(static_cast<std::size_t>(n));
    for (char c : sentence) patterns.push_back(character_pattern(c, spec));

    const std::int64_t hw = spec.height * spec.width;
    Tensor<double> frames({1, total, spec.height, spec.width});
    std::int64_t frame = 0;
    for (std::int64_t ci = 0; ci < n; ++ci) {
        for (std::int64_t d = 0; d < durations[static_cast<std::size_t>(ci)]; ++d, ++frame) {
            const bool fade = spec.crossfade > 0 && ci + 1 < n &&
                              d >= durations[static_cast<std::size_t>(ci)] - spec.crossfade;
            double* dst = frames.data.data() + frame * hw;
            const double* cur = patterns[static_cast<std::size_t>(ci)].data.data();
            if (fade) {
                const double* nxt = patterns[static_cast<std::size_t>(ci + 1)].data.data();
                for (std::int64_t i = 0; i < hw; ++i) dst[i] = 0.5 * cur[i] + 0.5 * nxt[i];
            } else {
                for (std::int64_t i = 0; i < hw; ++i) dst[i] = cur[i];
            }
        }
    }
    if (spec.noise_sigma > 0.0)
        for (auto& v : frames.data) v += spec.noise_sigma * rng.normal();

    // Mean-reduce and normalize, in double for accuracy.
    double mean = 0.0;
    for (auto v : frames.data) mean += v;
    mean /= static_cast<double>(frames.size());
    double var = 0.0;
    for (auto v : frames.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(frames.size());
    const double inv_std = var > 1e-30 ? 1.0 / std::sqrt(var) : 1.0;
    Tensor<float> out;
    out.shape = frames.shape;
    out.data.resize(frames.data.size());
    for (std::size_t i = 0; i < frames.data.size(); ++i)
        out.data[i] = static_cast<float>((frames.data[i] - mean) * inv_std);
    return out;
}

// ---------------------------------------------------------------------------
// Samples and generation
// ---------------------------------------------------------------------------

struct Sample {
    std::string id;
    Tensor<float> frames;  // (1, T, H, W)
    std::string transcript;
};

/// Generates `count` samples with per-sample derived seeds, so any sample can
/// be regenerated independently of the others.
inline std::vector<Sample> generate_samples(const Grammar& grammar, const RenderSpec& spec,
                                            std::int64_t count, std::uint64_t base_seed,
                                            std::int64_t start_index = 0) {
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        const std::int64_t index = start_index + i;
        Rng rng(Rng::derive(base_seed, static_cast<std::uint64_t>(index)));
        Sample s;
        std::ostringstream id;
        id << 's' << std::setw(6) << std::setfill('0') << index;
        s.id = id.str();
        s.transcript = sample_sentence(grammar, rng);
        s.frames = render_frames(s.transcript, spec, rng);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// VSEQ files
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char bytes[4] = {static_cast<unsigned char>(v & 0xff),
                                    static_cast<unsigned char>((v >> 8) & 0xff),
                                    static_cast<unsigned char>((v >> 16) & 0xff),
                                    static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(bytes), 4);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
    unsigned char bytes[4];
    if (!is.read(reinterpret_cast<char*>(bytes), 4))
        throw FormatError(what + ": truncated while reading header");
    return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
           (static_cast<std::uint32_t>(bytes[2]) << 16) |
           (static_cast<std::uint32_t>(bytes[3]) << 24);
}

inline void write_f32_payload(std::ostream& os, const std::vector<float>& data) {
    static_assert(sizeof(float) == 4);
    // Little-endian hosts only, which covers every supported target.
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * 4));
}

}  // namespace detail

inline constexpr std::uint32_t kVseqVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 1;

/// VSEQ: "VSEQ" magic, version, dtype code, rank, dims, little-endian f32
/// payload in row-major order.
inline void write_vseq(const std::filesystem::path& path, const Tensor<float>& tensor) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_vseq: cannot open " + path.string());
    os.write("VSEQ", 4);
    detail::write_u32(os, kVseqVersion);
    detail::write_u32(os, kDtypeF32);
    detail::write_u32(os, static_cast<std::uint32_t>(tensor.rank()));
    for (auto d : tensor.shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
    detail::write_f32_payload(os, tensor.data);
    if (!os) throw IoError("write_vseq: write failed for " + path.string());
}

inline Tensor<float> read_vseq(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_vseq: cannot open " + path.string());
    const std::string name = path.filename().string();
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "VSEQ")
        throw FormatError(name + ": bad VSEQ magic");
    if (detail::read_u32(is, name) != kVseqVersion) throw FormatError(name + ": unsupported VSEQ version");
    if (detail::read_u32(is, name) != kDtypeF32) throw FormatError(name + ": unsupported dtype code");
    const std::uint32_t rank = detail::read_u32(is, name);
    if (rank == 0 || rank > 8) throw FormatError(name + ": implausible rank " + std::to_string(rank));
    Shape shape;
    std::int64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint32_t d = detail::read_u32(is, name);
        if (d == 0 || count > (1ll << 40) / std::max<std::int64_t>(1, d))
            throw FormatError(name + ": implausible dimensions");
        shape.push_back(d);
        count *= d;
    }
    Tensor<float> out(shape);
    if (!is.read(reinterpret_cast<char*>(out.data.data()), count * 4))
        throw FormatError(name + ": truncated payload, expected " + std::to_string(count) +
                          " values");
    return out;
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

/// Layout: one VSEQ file per sample plus manifest.tsv with lines
/// "id <tab> relative-path <tab> transcript".
inline void write_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("write_dataset: cannot create " + dir.string() + ": " + ec.message());
    std::ofstream manifest(dir / "manifest.tsv");
    if (!manifest) throw IoError("write_dataset: cannot create manifest in " + dir.string());
    for (const auto& s : samples) {
        const std::string file = s.id + ".vseq";
        write_vseq(dir / file, s.frames);
        manifest << s.id << '\t' << file << '\t' << s.transcript << '\n';
    }
    if (!manifest) throw IoError("write_dataset: manifest write failed in " + dir.string());
}

inline std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.tsv");
    if (!manifest) throw IoError("read_dataset: no manifest.tsv in " + dir.string());
    std::vector<Sample> out;
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto tab1 = line.find('\t');
        const auto tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
        if (tab2 == std::string::npos)
            throw FormatError("read_dataset: malformed manifest line " + std::to_string(line_no) +
                              " in " + dir.string());
        Sample s;
        s.id = line.substr(0, tab1);
        const std::string file = line.substr(tab1 + 1, tab2 - tab1 - 1);
        s.transcript = line.substr(tab2 + 1);
        const auto path = dir / file;
        if (!std::filesystem::exists(path))
            throw FormatError("read_dataset: sample " + s.id + " references missing file " + file);
        try {
            s.frames = read_vseq(path);
        } catch (const FormatError& e) {
            throw FormatError("read_dataset: sample " + s.id + ": " + e.what());
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace lcanet

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lcanet/errors.hpp"

namespace lcanet {

/// Minimal insert/delete/substitute count with unit costs.
template <typename Seq>
std::int64_t levenshtein(const Seq& a, const Seq& b) {
    const std::size_t n = a.size();
    const std::size_t m = b.size();
    std::vector<std::int64_t> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<std::int64_t>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<std::int64_t>(i);
        for (std::size_t j = 1; j <= m; ++j) {
            const std::int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream is(text);
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

/// Character-level edit distance divided by the reference length.
inline double cer(const std::string& pred, const std::string& ref) {
    if (ref.empty()) throw Error("cer: reference must be non-empty");
    return static_cast<double>(levenshtein(pred, ref)) / static_cast<double>(ref.size());
}

/// Word-level edit distance divided by the reference word count.
inline double wer(const std::string& pred, const std::string& ref) {
    const auto ref_words = split_words(ref);
    if (ref_words.empty()) throw Error("wer: reference must be non-empty");
    return static_cast<double>(levenshtein(split_words(pred), ref_words)) /
           static_cast<double>(ref_words.size());
}

/// Corpus-level rates sum the distances before dividing by the summed
/// reference lengths.
inline double corpus_cer(std::span<const std::string> preds, std::span<const std::string> refs) {
    if (preds.size() != refs.size()) throw Error("corpus_cer: list lengths differ");
    std::int64_t dist = 0, len = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (refs[i].empty()) throw Error("corpus_cer: reference must be non-empty");
        dist += levenshtein(preds[i], refs[i]);
        len += static_cast<std::int64_t>(refs[i].size());
    }
    return static_cast<double>(dist) / static_cast<double>(len);
}

inline double corpus_wer(std::span<const std::string> preds, std::span<const std::string> refs) {
    if (preds.size() != refs.size()) throw Error("corpus_wer: list lengths differ");
    std::int64_t dist = 0, len = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto r = split_words(refs[i]);
        if (r.empty()) throw Error("corpus_wer: reference must be non-empty");
        dist += levenshtein(split_words(preds[i]), r);
        len += static_cast<std::int64_t>(r.size());
    }
    return static_cast<double>(dist) / static_cast<double>(len);
}

/// Stricter word accuracy: a word counts only when predicted exactly at its
/// position. Reported alongside the alignment-based WER.
inline double positional_word_accuracy(std::span<const std::string> preds,
                                       std::span<const std::string> refs) {
    if (preds.size() != refs.size()) throw Error("word accuracy: list lengths differ");
    std::int64_t correct = 0, total = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto p = split_words(preds[i]);
        const auto r = split_words(refs[i]);
        total += static_cast<std::int64_t>(r.size());
        for (std::size_t j = 0; j < r.size(); ++j)
            if (j < p.size() && p[j] == r[j]) ++correct;
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

namespace detail {

using NgramCounts = std::map<std::vector<std::string>, std::int64_t>;

inline NgramCounts count_ngrams(const std::vector<std::string>& words, std::size_t n) {
    NgramCounts counts;
    if (words.size() < n) return counts;
    for (std::size_t i = 0; i + n <= words.size(); ++i)
        ++counts[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                          words.begin() + static_cast<std::ptrdiff_t>(i + n))];
    return counts;
}

}  // namespace detail

/// Corpus BLEU-4 on word tokens: clipped modified n-gram precisions,
/// geometric mean, brevity penalty. A precision whose match count is zero is
/// smoothed to eps / total so short sentences stay scoreable; orders with no
/// candidate n-grams at all are skipped. Identical corpora score exactly 1.
inline double bleu(std::span<const std::string> preds, std::span<const std::string> refs,
                   double eps = 1e-9) {
    if (preds.size() != refs.size()) throw Error("bleu: list lengths differ");
    constexpr std::size_t kMaxOrder = 4;
    std::int64_t matches[kMaxOrder] = {0, 0, 0, 0};
    std::int64_t totals[kMaxOrder] = {0, 0, 0, 0};
    std::int64_t cand_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (refs[i].empty()) throw Error("bleu: reference must be non-empty");
        const auto cand = split_words(preds[i]);
        const auto ref = split_words(refs[i]);
        cand_len += static_cast<std::int64_t>(cand.size());
        ref_len += static_cast<std::int64_t>(ref.size());
        for (std::size_t n = 1; n <= kMaxOrder; ++n) {
            const auto cand_counts = detail::count_ngrams(cand, n);
            const auto ref_counts = detail::count_ngrams(ref, n);
            for (const auto& [ngram, count] : cand_counts) {
                totals[n - 1] += count;
                const auto it = ref_counts.find(ngram);
                if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
            }
        }
    }
    double log_sum = 0.0;
    int used_orders = 0;
    for (std::size_t n = 0; n < kMaxOrder; ++n) {
        if (totals[n] == 0) continue;  // no candidate n-grams of this order exist
        ++used_orders;
        const double p = matches[n] > 0
                             ? static_cast<double>(matches[n]) / static_cast<double>(totals[n])
                             : eps / static_cast<double>(totals[n]);
        log_sum += std::log(p);
    }
    if (used_orders == 0) return 0.0;
    const double geo = std::exp(log_sum / used_orders);
    const double bp = cand_len >= ref_len
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(ref_len) /
                                               static_cast<double>(std::max<std::int64_t>(cand_len, 1)));
    return bp * geo;
}

}  // namespace lcanet

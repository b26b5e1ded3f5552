// SPDX-License-Identifier: Apache-2.0
#pragma once

// Summary-quality metrics: BLEU-4, ROUGE-L, greedy-matching BERTScore,
// micro-F1 over observation labels, and entity-level F1 over entity graphs,
// plus impression-length terciles for error analysis.

#include "laysum/corpus.hpp"
#include "laysum/embedstore.hpp"
#include "laysum/error.hpp"
#include "laysum/io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace laysum {

// ---------------------------------------------------------------------------
// Tokenization

inline bool is_ascii_punct(unsigned char c) {
    return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) || (c >= 123 && c <= 126);
}

/// Lowercase (ASCII), split on whitespace, detach leading and trailing ASCII punctuation.
inline std::vector<std::string> metric_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    auto is_ws = [](unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (i < text.size()) {
        while (i < text.size() && is_ws(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !is_ws(static_cast<unsigned char>(text[j]))) ++j;
        if (j == i) break;
        std::string_view chunk = text.substr(i, j - i);
        std::size_t lead = 0;
        while (lead < chunk.size() && is_ascii_punct(static_cast<unsigned char>(chunk[lead]))) ++lead;
        std::size_t trail = chunk.size();
        while (trail > lead && is_ascii_punct(static_cast<unsigned char>(chunk[trail - 1]))) --trail;
        for (std::size_t k = 0; k < lead; ++k) out.emplace_back(1, chunk[k]);
        if (trail > lead) {
            std::string core(chunk.substr(lead, trail - lead));
            for (auto& c : core) {
                if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
            }
            out.push_back(std::move(core));
        }
        for (std::size_t k = trail; k < chunk.size(); ++k) out.emplace_back(1, chunk[k]);
        i = j;
    }
    return out;
}

/// Pairwise summation; fixed reduction order regardless of caller.
inline double pairwise_sum(std::span<const double> xs) {
    if (xs.size() <= 8) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s;
    }
    std::size_t half = xs.size() / 2;
    return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

inline std::optional<double> mean(std::span<const double> xs) {
    if (xs.empty()) return std::nullopt;
    return pairwise_sum(xs) / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------
// BLEU-4

enum class BleuMode { corpus, sentence_smoothed };

inline std::string_view to_string(BleuMode m) { return m == BleuMode::corpus ? "corpus" : "sentence_smoothed"; }

inline std::optional<BleuMode> parse_bleu_mode(std::string_view s) {
    if (s == "corpus") return BleuMode::corpus;
    if (s == "sentence_smoothed") return BleuMode::sentence_smoothed;
    return std::nullopt;
}

struct BleuStats {
    std::array<std::size_t, 4> matches{};
    std::array<std::size_t, 4> totals{};
    std::size_t hyp_length = 0;
    std::size_t ref_length = 0;

    BleuStats& operator+=(const BleuStats& o) {
        for (std::size_t n = 0; n < 4; ++n) {
            matches[n] += o.matches[n];
            totals[n] += o.totals[n];
        }
        hyp_length += o.hyp_length;
        ref_length += o.ref_length;
        return *this;
    }

    double precision(std::size_t order) const {
        return totals[order - 1] == 0 ? 0.0
                                      : static_cast<double>(matches[order - 1]) / static_cast<double>(totals[order - 1]);
    }
};

namespace detail {

inline std::map<std::vector<std::string_view>, std::size_t> ngram_counts(const std::vector<std::string>& toks,
                                                                         std::size_t n) {
    std::map<std::vector<std::string_view>, std::size_t> counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        std::vector<std::string_view> g(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                        toks.begin() + static_cast<std::ptrdiff_t>(i + n));
        ++counts[g];
    }
    return counts;
}

inline double brevity_penalty(std::size_t c, std::size_t r) {
    if (c == 0) return 0.0;
    if (c > r) return 1.0;
    return std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
}

} // namespace detail

/// Clipped n-gram counts for one hypothesis/reference pair of metric tokens.
inline BleuStats bleu_stats(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
    BleuStats s;
    s.hyp_length = hyp.size();
    s.ref_length = ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
        auto h = detail::ngram_counts(hyp, n);
        auto r = detail::ngram_counts(ref, n);
        for (const auto& [gram, count] : h) {
            auto it = r.find(gram);
            if (it != r.end()) s.matches[n - 1] += std::min(count, it->second);
        }
        s.totals[n - 1] = hyp.size() >= n ? hyp.size() - n + 1 : 0;
    }
    return s;
}

inline BleuStats bleu_stats(std::string_view hyp, std::string_view ref) {
    return bleu_stats(metric_tokens(hyp), metric_tokens(ref));
}

/// Geometric mean of clipped precisions times brevity penalty, scaled to [0, 100].
inline double bleu_from_stats(const BleuStats& s) {
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        if (s.matches[n - 1] == 0) return 0.0;
        log_sum += std::log(s.precision(n));
    }
    return 100.0 * detail::brevity_penalty(s.hyp_length, s.ref_length) * std::exp(log_sum / 4.0);
}

/// Add-one smoothing on clipped counts for orders 2..4.
inline double smoothed_sentence_bleu(const BleuStats& s) {
    if (s.hyp_length == 0 || s.matches[0] == 0) return 0.0;
    double log_sum = std::log(s.precision(1));
    for (std::size_t n = 2; n <= 4; ++n) {
        log_sum += std::log((static_cast<double>(s.matches[n - 1]) + 1.0) / (static_cast<double>(s.totals[n - 1]) + 1.0));
    }
    return 100.0 * detail::brevity_penalty(s.hyp_length, s.ref_length) * std::exp(log_sum / 4.0);
}

inline double bleu4(std::span<const std::string> hypotheses, std::span<const std::string> references,
                    BleuMode mode = BleuMode::corpus) {
    if (hypotheses.size() != references.size()) {
        throw ValidationError("bleu4 needs equally many hypotheses (" + std::to_string(hypotheses.size()) +
                              ") and references (" + std::to_string(references.size()) + ")");
    }
    if (hypotheses.empty()) return 0.0;
    if (mode == BleuMode::corpus) {
        BleuStats total;
        for (std::size_t i = 0; i < hypotheses.size(); ++i) total += bleu_stats(hypotheses[i], references[i]);
        return bleu_from_stats(total);
    }
    std::vector<double> scores;
    scores.reserve(hypotheses.size());
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        scores.push_back(smoothed_sentence_bleu(bleu_stats(hypotheses[i], references[i])));
    }
    return *mean(scores);
}

// ---------------------------------------------------------------------------
// ROUGE-L

struct PRF {
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;
};

inline double harmonic_f1(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline PRF rouge_l(std::string_view hypothesis, std::string_view reference) {
    auto h = metric_tokens(hypothesis);
    auto r = metric_tokens(reference);
    if (h.empty() || r.empty()) return {};
    double l = static_cast<double>(lcs_length(h, r));
    PRF out;
    out.precision = l / static_cast<double>(h.size());
    out.recall = l / static_cast<double>(r.size());
    out.f = harmonic_f1(out.precision, out.recall);
    return out;
}

// ---------------------------------------------------------------------------
// BERTScore (greedy matching, no idf, no rescaling)

inline PRF bertscore(std::span<const Vector> hyp, std::span<const Vector> ref) {
    if (hyp.empty() || ref.empty()) return {};
    std::vector<double> best_h(hyp.size(), -2.0), best_r(ref.size(), -2.0);
    for (std::size_t i = 0; i < hyp.size(); ++i) {
        for (std::size_t j = 0; j < ref.size(); ++j) {
            if (hyp[i].size() != ref[j].size()) {
                throw ValidationError("bertscore token vectors differ in dimension");
            }
            double c = dot(hyp[i], ref[j]);
            best_h[i] = std::max(best_h[i], c);
            best_r[j] = std::max(best_r[j], c);
        }
    }
    PRF out;
    out.precision = *mean(best_h);
    out.recall = *mean(best_r);
    out.f = harmonic_f1(out.precision, out.recall);
    return out;
}

/// Supplies one unit vector per metric token.
class TokenEmbedder {
public:
    virtual ~TokenEmbedder() = default;
    virtual Vector embed(const std::string& token) const = 0;
    virtual std::string id() const = 0;
};

class MockTokenEmbedder final : public TokenEmbedder {
public:
    MockTokenEmbedder(std::size_t dimension = 64, std::uint64_t seed = 0) : dimension_(dimension), seed_(seed) {}
    Vector embed(const std::string& token) const override { return mock_embed(token, dimension_, seed_); }
    std::string id() const override { return "mock:d" + std::to_string(dimension_) + ":seed" + std::to_string(seed_); }

private:
    std::size_t dimension_;
    std::uint64_t seed_;
};

/// Vocabulary lookup in a store whose ids are tokens; unknown tokens fall back to the mock embedder.
class StoreTokenEmbedder final : public TokenEmbedder {
public:
    StoreTokenEmbedder(const EmbeddingStore& store, std::uint64_t seed) : store_(store), fallback_(store.dimension(), seed) {}

    Vector embed(const std::string& token) const override {
        if (auto row = store_.find(token)) return Vector(row->begin(), row->end());
        return fallback_.embed(token);
    }
    std::string id() const override { return "store:d" + std::to_string(store_.dimension()); }

private:
    const EmbeddingStore& store_;
    MockTokenEmbedder fallback_;
};

inline PRF bertscore_text(std::string_view hypothesis, std::string_view reference, const TokenEmbedder& embedder) {
    auto embed_all = [&](std::string_view text) {
        std::vector<Vector> out;
        for (const auto& t : metric_tokens(text)) out.push_back(embedder.embed(t));
        return out;
    };
    return bertscore(embed_all(hypothesis), embed_all(reference));
}

// ---------------------------------------------------------------------------
// Label and entity F1

enum class UncertainPolicy { as_positive, as_negative };

inline std::optional<UncertainPolicy> parse_uncertain_policy(std::string_view s) {
    if (s == "as_positive") return UncertainPolicy::as_positive;
    if (s == "as_negative") return UncertainPolicy::as_negative;
    return std::nullopt;
}

inline std::string_view to_string(UncertainPolicy p) {
    return p == UncertainPolicy::as_positive ? "as_positive" : "as_negative";
}

inline double micro_f1(std::size_t tp, std::size_t fp, std::size_t fn) {
    if (tp + fp + fn == 0) return 1.0; // agreement on absence
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

inline double f1_chexbert(std::span<const ObservationState> pred, std::span<const ObservationState> ref,
                          UncertainPolicy policy = UncertainPolicy::as_positive) {
    if (pred.size() != kObservationCount || ref.size() != kObservationCount) {
        throw ValidationError("label vectors must have " + std::to_string(kObservationCount) + " entries (got " +
                              std::to_string(pred.size()) + " and " + std::to_string(ref.size()) + ")");
    }
    auto on = [&](ObservationState s) {
        return s == ObservationState::positive || (s == ObservationState::uncertain && policy == UncertainPolicy::as_positive);
    };
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < kObservationCount; ++i) {
        bool p = on(pred[i]), r = on(ref[i]);
        tp += p && r;
        fp += p && !r;
        fn += !p && r;
    }
    return micro_f1(tp, fp, fn);
}

inline double f1_chexbert(const LabelVector& pred, const LabelVector& ref,
                          UncertainPolicy policy = UncertainPolicy::as_positive) {
    return f1_chexbert(std::span<const ObservationState>(pred.states), std::span<const ObservationState>(ref.states), policy);
}

enum class RadGraphLevel { entity, entity_relation };

inline std::optional<RadGraphLevel> parse_radgraph_level(std::string_view s) {
    if (s == "entity") return RadGraphLevel::entity;
    if (s == "entity_relation") return RadGraphLevel::entity_relation;
    return std::nullopt;
}

inline std::string_view to_string(RadGraphLevel l) { return l == RadGraphLevel::entity ? "entity" : "entity_relation"; }

struct F1Counts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    double precision() const { return tp + fp == 0 ? (fn == 0 ? 1.0 : 0.0) : static_cast<double>(tp) / static_cast<double>(tp + fp); }
    double recall() const { return tp + fn == 0 ? (fp == 0 ? 1.0 : 0.0) : static_cast<double>(tp) / static_cast<double>(tp + fn); }
    double f1() const { return micro_f1(tp, fp, fn); }
};

namespace detail {

inline std::string entity_key(const Entity& e) {
    std::string k;
    for (char c : e.text) k.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c);
    k.push_back('\x1f');
    k += to_string(e.label);
    return k;
}

inline void multiset_match(const std::vector<std::string>& pred, const std::vector<std::string>& ref, F1Counts& c) {
    std::unordered_map<std::string, std::size_t> available;
    for (const auto& k : ref) ++available[k];
    std::size_t tp = 0;
    for (const auto& k : pred) {
        auto it = available.find(k);
        if (it != available.end() && it->second > 0) {
            --it->second;
            ++tp;
        }
    }
    c.tp += tp;
    c.fp += pred.size() - tp;
    c.fn += ref.size() - tp;
}

inline std::vector<std::string> entity_keys(const EntityGraph& g) {
    std::vector<std::string> out;
    for (const auto& e : g.entities) out.push_back(entity_key(e));
    return out;
}

inline std::vector<std::string> relation_keys(const EntityGraph& g) {
    std::vector<std::string> out;
    for (const auto& r : g.relations) {
        out.push_back(entity_key(g.entities.at(r.source)) + '\x1e' + entity_key(g.entities.at(r.target)) + '\x1e' + r.name);
    }
    return out;
}

} // namespace detail

/// Multiset matching on (lowercased text, label); the relation level also matches
/// (source entity, target entity, relation name) triples and pools both counts.
inline F1Counts radgraph_counts(const EntityGraph& pred, const EntityGraph& ref, RadGraphLevel level = RadGraphLevel::entity) {
    F1Counts c;
    detail::multiset_match(detail::entity_keys(pred), detail::entity_keys(ref), c);
    if (level == RadGraphLevel::entity_relation) {
        detail::multiset_match(detail::relation_keys(pred), detail::relation_keys(ref), c);
    }
    return c;
}

inline double f1_radgraph(const EntityGraph& pred, const EntityGraph& ref, RadGraphLevel level = RadGraphLevel::entity) {
    return radgraph_counts(pred, ref, level).f1();
}

// ---------------------------------------------------------------------------
// Rows and length buckets

struct ScoreRow {
    std::string report_id;
    std::string strategy;
    double bleu4 = 0.0; // smoothed sentence BLEU of this pair
    double rouge_l_f = 0.0;
    double bertscore_f = 0.0;
    std::optional<double> f1_chexbert;
    std::optional<double> f1_radgraph;
};

struct BucketReport {
    std::string bucket;
    std::size_t n = 0;
    std::size_t min_length = 0;
    std::size_t max_length = 0;
    std::optional<double> rouge_l;
    std::optional<double> f1_radgraph;
    std::optional<double> bleu4;
    std::optional<double> bertscore;
    std::optional<double> f1_chexbert;
};

inline BucketReport summarize_bucket(std::string name, std::span<const ScoreRow* const> rows,
                                     std::span<const std::size_t> lengths) {
    BucketReport b;
    b.bucket = std::move(name);
    b.n = rows.size();
    if (!lengths.empty()) {
        b.min_length = *std::min_element(lengths.begin(), lengths.end());
        b.max_length = *std::max_element(lengths.begin(), lengths.end());
    }
    std::vector<double> rl, rg, bl, bs, cx;
    for (const ScoreRow* r : rows) {
        rl.push_back(r->rouge_l_f);
        bl.push_back(r->bleu4);
        bs.push_back(r->bertscore_f);
        if (r->f1_radgraph) rg.push_back(*r->f1_radgraph);
        if (r->f1_chexbert) cx.push_back(*r->f1_chexbert);
    }
    b.rouge_l = mean(rl);
    b.f1_radgraph = mean(rg);
    b.bleu4 = mean(bl);
    b.bertscore = mean(bs);
    b.f1_chexbert = mean(cx);
    return b;
}

/// Terciles of reference-impression length (nearest-rank cut points, ties to the lower bucket).
/// Fewer than three rows yield one "all" bucket.
inline std::vector<BucketReport> bucketize(std::span<const ScoreRow> rows,
                                           const std::map<std::string, std::size_t>& ref_lengths) {
    std::vector<std::size_t> lengths;
    lengths.reserve(rows.size());
    for (const auto& r : rows) {
        auto it = ref_lengths.find(r.report_id);
        if (it == ref_lengths.end()) {
            throw ValidationError("no reference length for '" + r.report_id + "'");
        }
        lengths.push_back(it->second);
    }
    if (rows.size() < 3) {
        std::vector<const ScoreRow*> all;
        for (const auto& r : rows) all.push_back(&r);
        return {summarize_bucket("all", all, lengths)};
    }
    std::vector<std::size_t> sorted = lengths;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const std::size_t q1 = sorted[(n + 2) / 3 - 1];
    const std::size_t q2 = sorted[(2 * n + 2) / 3 - 1];

    std::array<std::vector<const ScoreRow*>, 3> members;
    std::array<std::vector<std::size_t>, 3> member_lengths;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::size_t b = lengths[i] <= q1 ? 0 : lengths[i] <= q2 ? 1 : 2;
        members[b].push_back(&rows[i]);
        member_lengths[b].push_back(lengths[i]);
    }
    static constexpr std::array<const char*, 3> names = {"short", "medium", "long"};
    std::vector<BucketReport> out;
    for (std::size_t b = 0; b < 3; ++b) out.push_back(summarize_bucket(names[b], members[b], member_lengths[b]));
    return out;
}

inline std::string buckets_csv(std::span<const BucketReport> buckets) {
    auto cell = [](const std::optional<double>& v) { return v ? io::format_double(*v) : std::string(); };
    std::string out = "bucket,n,rouge_l,f1_radgraph,bleu4,bertscore,f1_chexbert\n";
    for (const auto& b : buckets) {
        out += b.bucket + "," + std::to_string(b.n) + "," + cell(b.rouge_l) + "," + cell(b.f1_radgraph) + "," +
               cell(b.bleu4) + "," + cell(b.bertscore) + "," + cell(b.f1_chexbert) + "\n";
    }
    return out;
}

} // namespace laysum

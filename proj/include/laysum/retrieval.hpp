// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "laysum/corpus.hpp"
#include "laysum/embedstore.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace laysum {

struct RankedNeighbor {
    std::string report_id;
    double score = 0.0;
    bool operator==(const RankedNeighbor&) const = default;
};

/// Score descending, then id ascending. Total over distinct ids.
inline bool ranks_before(const RankedNeighbor& a, const RankedNeighbor& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.report_id < b.report_id;
}

/// Exhaustive cosine scan over the store rows accepted by `candidate`.
template <class Pred>
std::vector<RankedNeighbor> top_k_if(const EmbeddingStore& store, std::span<const float> query, std::size_t k,
                                     Pred&& candidate) {
    if (k == 0) {
        throw ValidationError("top_k needs k >= 1");
    }
    if (query.size() != store.dimension()) {
        throw ValidationError("query dimension " + std::to_string(query.size()) + " does not match store dimension " +
                              std::to_string(store.dimension()));
    }
    double qn = l2_norm(query);
    if (qn == 0.0) {
        throw ValidationError("query vector is zero");
    }
    std::vector<RankedNeighbor> scored;
    scored.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        if (!candidate(store.id(i))) continue;
        scored.push_back({store.id(i), dot(store.row(i), query) / qn});
    }
    std::size_t n = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(), ranks_before);
    scored.resize(n);
    return scored;
}

inline std::vector<RankedNeighbor> top_k(const EmbeddingStore& store, std::span<const float> query, std::size_t k,
                                         const std::set<std::string>& exclude = {}) {
    return top_k_if(store, query, k, [&](const std::string& id) { return exclude.count(id) == 0; });
}

using StoreSet = std::map<Modality, const EmbeddingStore*>;

struct RetrievedDemo {
    const Report* report = nullptr;
    double score = 0.0;
};

struct RetrievalResult {
    std::vector<RetrievedDemo> demos;
    /// Modality actually searched (differs from the request after a text fallback).
    Modality modality_used = Modality::text;
    bool fell_back_to_text = false;
};

struct RetrievalOptions {
    bool fallback_to_text = false;
    /// Overrides the stored query vector for the test report.
    std::optional<Vector> query;
};

/// Top-k train-split demonstrations for one test report; the test id is never returned.
inline RetrievalResult retrieve_demos(const Corpus& train, const StoreSet& stores, const Report& test,
                                      Modality modality, std::size_t k, const RetrievalOptions& options = {}) {
    RetrievalResult result;
    result.modality_used = modality;
    if (modality != Modality::text && test.image_ids.empty()) {
        if (!options.fallback_to_text) {
            throw ConfigError("report '" + test.id + "' has no images; " + std::string(to_string(modality)) +
                              " retrieval needs them (set fallback_to_text to use the text store)");
        }
        result.modality_used = Modality::text;
        result.fell_back_to_text = true;
    }
    auto it = stores.find(result.modality_used);
    if (it == stores.end() || it->second == nullptr) {
        throw ConfigError("no " + std::string(to_string(result.modality_used)) + " embedding store configured");
    }
    const EmbeddingStore& store = *it->second;

    Vector query;
    if (options.query && !result.fell_back_to_text) {
        query = *options.query;
    } else {
        auto row = store.find(test.id);
        if (!row) {
            throw ConfigError("test report '" + test.id + "' is missing from the " +
                              std::string(to_string(result.modality_used)) + " store");
        }
        query.assign(row->begin(), row->end());
    }

    auto neighbors = top_k_if(store, query, k, [&](const std::string& id) {
        if (id == test.id) return false;
        const Report* r = train.find(id);
        return r != nullptr && r->split == Split::train;
    });
    result.demos.reserve(neighbors.size());
    for (const auto& n : neighbors) {
        result.demos.push_back({train.find(n.report_id), n.score});
    }
    return result;
}

} // namespace laysum

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Report corpora and their sidecar files (observation labels, entity graphs).
//
// All three files are line-delimited JSON keyed by report id. Labels and
// entities are kept out of the corpus file so one corpus can be paired with
// different annotation sources.

#include "laysum/error.hpp"
#include "laysum/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace laysum {

enum class Split { train, validation, test };

inline std::string_view to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
    }
    return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "validation") return Split::validation;
    if (s == "test") return Split::test;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Observation labels

inline constexpr std::size_t kObservationCount = 14;

/// Fixed observation order; it is part of the labels-file contract.
inline constexpr std::array<std::string_view, kObservationCount> kObservations = {
    "No Finding",   "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Lesion",      "Lung Opacity",
    "Edema",        "Consolidation",              "Pneumonia",    "Atelectasis",      "Pneumothorax",
    "Pleural Effusion", "Pleural Other",          "Fracture",     "Support Devices",
};

enum class ObservationState { positive, negative, uncertain, blank };

inline std::string_view to_string(ObservationState s) {
    switch (s) {
    case ObservationState::positive: return "positive";
    case ObservationState::negative: return "negative";
    case ObservationState::uncertain: return "uncertain";
    case ObservationState::blank: return "blank";
    }
    return "?";
}

inline std::optional<ObservationState> parse_observation_state(std::string_view s) {
    if (s == "positive") return ObservationState::positive;
    if (s == "negative") return ObservationState::negative;
    if (s == "uncertain") return ObservationState::uncertain;
    if (s == "blank") return ObservationState::blank;
    return std::nullopt;
}

struct LabelVector {
    std::array<ObservationState, kObservationCount> states{};

    LabelVector() { states.fill(ObservationState::blank); }

    ObservationState state(std::string_view observation) const {
        auto it = std::find(kObservations.begin(), kObservations.end(), observation);
        if (it == kObservations.end()) {
            throw ValidationError("unknown observation '" + std::string(observation) + "'");
        }
        return states[static_cast<std::size_t>(it - kObservations.begin())];
    }

    LabelVector& set(std::string_view observation, ObservationState s) {
        auto it = std::find(kObservations.begin(), kObservations.end(), observation);
        if (it == kObservations.end()) {
            throw ValidationError("unknown observation '" + std::string(observation) + "'");
        }
        states[static_cast<std::size_t>(it - kObservations.begin())] = s;
        return *this;
    }

    bool operator==(const LabelVector&) const = default;
};

// ---------------------------------------------------------------------------
// Entity graphs

enum class EntityLabel { anat_dp, obs_dp, obs_da, obs_u };

inline std::string_view to_string(EntityLabel l) {
    switch (l) {
    case EntityLabel::anat_dp: return "ANAT-DP";
    case EntityLabel::obs_dp: return "OBS-DP";
    case EntityLabel::obs_da: return "OBS-DA";
    case EntityLabel::obs_u: return "OBS-U";
    }
    return "?";
}

inline std::optional<EntityLabel> parse_entity_label(std::string_view s) {
    if (s == "ANAT-DP") return EntityLabel::anat_dp;
    if (s == "OBS-DP") return EntityLabel::obs_dp;
    if (s == "OBS-DA") return EntityLabel::obs_da;
    if (s == "OBS-U") return EntityLabel::obs_u;
    return std::nullopt;
}

struct Entity {
    std::string text;
    EntityLabel label = EntityLabel::obs_dp;
    bool operator==(const Entity&) const = default;
};

struct Relation {
    std::size_t source = 0;
    std::size_t target = 0;
    std::string name;
    bool operator==(const Relation&) const = default;
};

struct EntityGraph {
    std::vector<Entity> entities;
    std::vector<Relation> relations;

    /// Throws ValidationError when a relation endpoint is out of range.
    void validate() const {
        for (const auto& r : relations) {
            if (r.source >= entities.size() || r.target >= entities.size()) {
                throw ValidationError("relation '" + r.name + "' references entity index " +
                                      std::to_string(std::max(r.source, r.target)) + " in a graph of " +
                                      std::to_string(entities.size()) + " entities");
            }
        }
    }

    bool operator==(const EntityGraph&) const = default;
};

// ---------------------------------------------------------------------------
// Reports and corpora

struct Report {
    std::string id;
    Split split = Split::train;
    std::string findings;
    std::string impression;
    std::vector<std::string> image_ids;
    std::optional<std::string> layperson;
    std::optional<LabelVector> labels;
    std::optional<EntityGraph> entities;

    bool operator==(const Report&) const = default;
};

/// Immutable-after-construction collection of reports with a per-split index.
class Corpus {
public:
    Corpus() = default;

    explicit Corpus(std::vector<Report> reports) : reports_(std::move(reports)) {
        for (std::size_t i = 0; i < reports_.size(); ++i) {
            const auto& r = reports_[i];
            if (r.findings.empty()) {
                throw ValidationError("report '" + r.id + "' has empty findings");
            }
            if (!index_.emplace(r.id, i).second) {
                throw ValidationError("duplicate report id '" + r.id + "'");
            }
            split_index_[r.split].push_back(r.id);
        }
    }

    const std::vector<Report>& reports() const noexcept { return reports_; }
    std::size_t size() const noexcept { return reports_.size(); }
    bool empty() const noexcept { return reports_.empty(); }

    bool contains(std::string_view id) const { return index_.count(std::string(id)) != 0; }

    const Report* find(std::string_view id) const {
        auto it = index_.find(std::string(id));
        return it == index_.end() ? nullptr : &reports_[it->second];
    }

    const Report& at(std::string_view id) const {
        const Report* r = find(id);
        if (!r) {
            throw ValidationError("unknown report id '" + std::string(id) + "'");
        }
        return *r;
    }

    /// Ids of one split, in corpus order.
    const std::vector<std::string>& split_ids(Split s) const {
        static const std::vector<std::string> none;
        auto it = split_index_.find(s);
        return it == split_index_.end() ? none : it->second;
    }

    const std::map<Split, std::vector<std::string>>& split_index() const noexcept { return split_index_; }

    /// Releases the reports for rebuilding a modified corpus.
    std::vector<Report> release() && {
        index_.clear();
        split_index_.clear();
        return std::move(reports_);
    }

    bool operator==(const Corpus& other) const { return reports_ == other.reports_; }

private:
    std::vector<Report> reports_;
    std::unordered_map<std::string, std::size_t> index_;
    std::map<Split, std::vector<std::string>> split_index_;
};

namespace detail {

using nlohmann::json;

inline const json& require_field(const json& obj, const char* key, std::size_t line) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw ParseError(std::string("missing field \"") + key + "\"", line);
    }
    return *it;
}

inline std::string require_string(const json& obj, const char* key, std::size_t line) {
    const json& v = require_field(obj, key, line);
    if (!v.is_string()) {
        throw ParseError(std::string("field \"") + key + "\" must be a string", line);
    }
    return v.get<std::string>();
}

inline json parse_json_line(std::string_view text, std::size_t line) {
    json obj;
    try {
        obj = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed JSON: ") + e.what(), line);
    }
    if (!obj.is_object()) {
        throw ParseError("record is not a JSON object", line);
    }
    return obj;
}

inline Report parse_report(const json& obj, std::size_t line) {
    Report r;
    r.id = require_string(obj, "id", line);
    if (r.id.empty()) {
        throw ParseError("empty report id", line);
    }
    std::string split = require_string(obj, "split", line);
    auto parsed = parse_split(split);
    if (!parsed) {
        throw ValidationError("report '" + r.id + "' has invalid split '" + split + "' (line " +
                              std::to_string(line) + ")");
    }
    r.split = *parsed;
    r.findings = require_string(obj, "findings", line);
    if (r.findings.empty()) {
        throw ValidationError("report '" + r.id + "' has empty findings (line " + std::to_string(line) + ")");
    }
    if (obj.contains("impression")) {
        r.impression = require_string(obj, "impression", line);
    }
    if (auto it = obj.find("image_ids"); it != obj.end()) {
        if (!it->is_array()) {
            throw ParseError("field \"image_ids\" must be an array", line);
        }
        for (const auto& v : *it) {
            if (!v.is_string()) {
                throw ParseError("image id must be a string", line);
            }
            r.image_ids.push_back(v.get<std::string>());
        }
    }
    if (auto it = obj.find("layperson"); it != obj.end() && !it->is_null()) {
        if (!it->is_string()) {
            throw ParseError("field \"layperson\" must be a string", line);
        }
        r.layperson = it->get<std::string>();
    }
    return r;
}

inline json report_to_json(const Report& r) {
    json obj = json::object();
    obj["id"] = r.id;
    obj["split"] = std::string(to_string(r.split));
    obj["findings"] = r.findings;
    obj["impression"] = r.impression;
    obj["image_ids"] = r.image_ids;
    if (r.layperson) {
        obj["layperson"] = *r.layperson;
    }
    return obj;
}

} // namespace detail

/// Loads a corpus file. When `expected_split` is set every record must carry it.
inline Corpus load_corpus(const std::filesystem::path& path, std::optional<Split> expected_split = std::nullopt) {
    std::vector<Report> reports;
    std::unordered_map<std::string, std::size_t> first_seen;
    io::for_each_line(path, [&](std::string_view text, std::size_t line) {
        Report r = detail::parse_report(detail::parse_json_line(text, line), line);
        if (expected_split && r.split != *expected_split) {
            throw ValidationError("report '" + r.id + "' has split '" + std::string(to_string(r.split)) +
                                  "', expected '" + std::string(to_string(*expected_split)) + "' (line " +
                                  std::to_string(line) + ")");
        }
        auto [it, inserted] = first_seen.emplace(r.id, line);
        if (!inserted) {
            throw ValidationError("duplicate report id '" + r.id + "' on line " + std::to_string(line) +
                                  " (first seen on line " + std::to_string(it->second) + ")");
        }
        reports.push_back(std::move(r));
    });
    return Corpus(std::move(reports));
}

inline std::string serialize_corpus(const Corpus& corpus) {
    std::string out;
    for (const auto& r : corpus.reports()) {
        out += detail::report_to_json(r).dump();
        out += '\n';
    }
    return out;
}

/// Writes the corpus-file fields (sidecar annotations are not part of this file).
inline void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    io::write_file_atomic(path, serialize_corpus(corpus));
}

inline Corpus store_layperson(Corpus corpus, std::string_view id, std::string text) {
    if (text.empty()) {
        throw ValidationError("layperson text for '" + std::string(id) + "' is empty");
    }
    if (!corpus.contains(id)) {
        throw ValidationError("unknown report id '" + std::string(id) + "'");
    }
    auto reports = std::move(corpus).release();
    for (auto& r : reports) {
        if (r.id == id) {
            r.layperson = std::move(text);
        }
    }
    return Corpus(std::move(reports));
}

/// Batch form of store_layperson; one rebuild for many ids.
inline Corpus store_laypersons(Corpus corpus, const std::map<std::string, std::string>& texts) {
    for (const auto& [id, text] : texts) {
        if (text.empty()) {
            throw ValidationError("layperson text for '" + id + "' is empty");
        }
        if (!corpus.contains(id)) {
            throw ValidationError("unknown report id '" + id + "'");
        }
    }
    auto reports = std::move(corpus).release();
    for (auto& r : reports) {
        if (auto it = texts.find(r.id); it != texts.end()) {
            r.layperson = it->second;
        }
    }
    return Corpus(std::move(reports));
}

// ---------------------------------------------------------------------------
// Sidecars

struct AttachResult {
    Corpus corpus;
    /// Ids present in the sidecar but absent from the corpus.
    std::vector<std::string> warnings;
};

inline std::map<std::string, LabelVector> load_labels(const std::filesystem::path& path) {
    std::map<std::string, LabelVector> out;
    io::for_each_line(path, [&](std::string_view text, std::size_t line) {
        auto obj = detail::parse_json_line(text, line);
        std::string id = detail::require_string(obj, "id", line);
        const auto& states = detail::require_field(obj, "states", line);
        if (!states.is_array()) {
            throw ParseError("field \"states\" must be an array", line);
        }
        if (states.size() != kObservationCount) {
            throw ValidationError("labels for '" + id + "' have " + std::to_string(states.size()) + " states, expected " +
                                  std::to_string(kObservationCount) + " (line " + std::to_string(line) + ")");
        }
        LabelVector lv;
        for (std::size_t i = 0; i < kObservationCount; ++i) {
            auto s = states[i].is_string() ? parse_observation_state(states[i].get<std::string>()) : std::nullopt;
            if (!s) {
                throw ValidationError("labels for '" + id + "' contain an invalid state at position " +
                                      std::to_string(i) + " (line " + std::to_string(line) + ")");
            }
            lv.states[i] = *s;
        }
        if (!out.emplace(id, lv).second) {
            throw ValidationError("duplicate labels for '" + id + "' (line " + std::to_string(line) + ")");
        }
    });
    return out;
}

inline std::map<std::string, EntityGraph> load_entities(const std::filesystem::path& path) {
    std::map<std::string, EntityGraph> out;
    io::for_each_line(path, [&](std::string_view text, std::size_t line) {
        auto obj = detail::parse_json_line(text, line);
        std::string id = detail::require_string(obj, "id", line);
        EntityGraph g;
        if (auto it = obj.find("entities"); it != obj.end()) {
            if (!it->is_array()) {
                throw ParseError("field \"entities\" must be an array", line);
            }
            for (const auto& e : *it) {
                if (!e.is_object()) {
                    throw ParseError("entity must be an object", line);
                }
                Entity ent;
                ent.text = detail::require_string(e, "text", line);
                std::string label = detail::require_string(e, "label", line);
                auto parsed = parse_entity_label(label);
                if (!parsed) {
                    throw ValidationError("entity label '" + label + "' for '" + id + "' is not in the closed set (line " +
                                          std::to_string(line) + ")");
                }
                ent.label = *parsed;
                g.entities.push_back(std::move(ent));
            }
        }
        if (auto it = obj.find("relations"); it != obj.end()) {
            if (!it->is_array()) {
                throw ParseError("field \"relations\" must be an array", line);
            }
            for (const auto& r : *it) {
                if (!r.is_array() || r.size() != 3 || !r[0].is_number_unsigned() || !r[1].is_number_unsigned() ||
                    !r[2].is_string()) {
                    throw ParseError("relation must be [source, target, \"name\"]", line);
                }
                g.relations.push_back({r[0].get<std::size_t>(), r[1].get<std::size_t>(), r[2].get<std::string>()});
            }
        }
        try {
            g.validate();
        } catch (const ValidationError& e) {
            throw ValidationError("entities for '" + id + "': " + e.what() + " (line " + std::to_string(line) + ")");
        }
        if (!out.emplace(id, std::move(g)).second) {
            throw ValidationError("duplicate entities for '" + id + "' (line " + std::to_string(line) + ")");
        }
    });
    return out;
}

namespace detail {

template <class T, class Member>
AttachResult attach(Corpus corpus, const std::map<std::string, T>& sidecar, Member member) {
    AttachResult result;
    for (const auto& [id, _] : sidecar) {
        if (!corpus.contains(id)) {
            result.warnings.push_back(id);
        }
    }
    auto reports = std::move(corpus).release();
    for (auto& r : reports) {
        if (auto it = sidecar.find(r.id); it != sidecar.end()) {
            r.*member = it->second;
        }
    }
    result.corpus = Corpus(std::move(reports));
    return result;
}

} // namespace detail

inline AttachResult attach_labels(Corpus corpus, const std::filesystem::path& path) {
    return detail::attach(std::move(corpus), load_labels(path), &Report::labels);
}

inline AttachResult attach_entities(Corpus corpus, const std::filesystem::path& path) {
    return detail::attach(std::move(corpus), load_entities(path), &Report::entities);
}

inline std::string serialize_labels(const std::map<std::string, LabelVector>& labels) {
    std::string out;
    for (const auto& [id, lv] : labels) {
        nlohmann::json states = nlohmann::json::array();
        for (auto s : lv.states) {
            states.push_back(std::string(to_string(s)));
        }
        out += nlohmann::json{{"id", id}, {"states", states}}.dump();
        out += '\n';
    }
    return out;
}

inline std::string serialize_entities(const std::map<std::string, EntityGraph>& graphs) {
    std::string out;
    for (const auto& [id, g] : graphs) {
        nlohmann::json ents = nlohmann::json::array();
        for (const auto& e : g.entities) {
            ents.push_back({{"text", e.text}, {"label", std::string(to_string(e.label))}});
        }
        nlohmann::json rels = nlohmann::json::array();
        for (const auto& r : g.relations) {
            rels.push_back(nlohmann::json::array({r.source, r.target, r.name}));
        }
        out += nlohmann::json{{"id", id}, {"entities", ents}, {"relations", rels}}.dump();
        out += '\n';
    }
    return out;
}

inline void write_labels(const std::map<std::string, LabelVector>& labels, const std::filesystem::path& path) {
    io::write_file_atomic(path, serialize_labels(labels));
}

inline void write_entities(const std::map<std::string, EntityGraph>& graphs, const std::filesystem::path& path) {
    io::write_file_atomic(path, serialize_entities(graphs));
}

} // namespace laysum

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Orchestration behind the CLI: layperson annotation of the train corpus,
// prompt/generation runs, evaluation, and k x modality sweeps.
//
// Run directory:
//   manifest.json  generations.jsonl  scores.jsonl  metrics.json
//   buckets.csv    sweep.csv          report.md     plots/*.svg
// All per-report outputs are written in input order, so file bytes do not
// depend on worker scheduling.

#include "laysum/corpus.hpp"
#include "laysum/digest.hpp"
#include "laysum/embedstore.hpp"
#include "laysum/error.hpp"
#include "laysum/genclient.hpp"
#include "laysum/io.hpp"
#include "laysum/metrics.hpp"
#include "laysum/promptkit.hpp"
#include "laysum/retrieval.hpp"
#include "laysum/svg.hpp"
#include "laysum/tokenizer.hpp"
#include "laysum/version.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

namespace laysum {

namespace fs = std::filesystem;

inline constexpr std::array<std::size_t, 6> kSweepKs = {2, 8, 12, 16, 24, 32};

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
    std::optional<fs::path> train;
    std::optional<fs::path> validation;
    std::optional<fs::path> test;
    std::optional<fs::path> labels;
    std::optional<fs::path> entities;
    std::map<Modality, fs::path> stores;

    Strategy strategy = Strategy::few_shot_layperson;
    Modality modality = Modality::multimodal;
    std::size_t k = 8;
    std::size_t budget = kDefaultBudget;
    GenerationParams generation;

    std::string endpoint;
    std::optional<fs::path> cache;
    std::optional<fs::path> replay;
    std::uint64_t seed = 0;
    fs::path out = "run";
    std::optional<fs::path> templates;
    std::optional<fs::path> tokenizer;
    std::size_t concurrency = 4;
    bool fallback_to_text = false;
    double failure_threshold = 0.05;
    std::optional<fs::path> annotated_train;

    // eval
    std::optional<fs::path> generations;
    std::optional<fs::path> pred_labels;
    std::optional<fs::path> pred_entities;
    std::optional<fs::path> token_embeddings;
    std::size_t token_dimension = 64;
    BleuMode bleu_mode = BleuMode::corpus;
    UncertainPolicy uncertain_policy = UncertainPolicy::as_positive;
    RadGraphLevel radgraph_level = RadGraphLevel::entity;

    // sweep
    std::vector<std::size_t> sweep_ks{kSweepKs.begin(), kSweepKs.end()};
    std::vector<Modality> sweep_modalities{Modality::text, Modality::image, Modality::multimodal};
    std::vector<Strategy> sweep_strategies;

    /// Keys holding filesystem paths; resolved against the config file's directory.
    static constexpr std::array<const char*, 17> kPathKeys = {
        "train", "validation", "test", "labels", "entities", "store_text", "store_image", "store_multimodal", "cache",
        "replay", "out", "templates", "tokenizer", "annotated_train", "generations", "pred_labels", "pred_entities"};

    static RunConfig from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("config must be a JSON object");
        static const std::set<std::string> known = {
            "train", "validation", "test", "labels", "entities", "store_text", "store_image", "store_multimodal",
            "strategy", "modality", "k", "budget", "temperature", "top_p", "top_k", "max_new_tokens", "model",
            "endpoint", "cache", "replay", "seed", "out", "templates", "tokenizer", "concurrency", "fallback_to_text",
            "failure_threshold", "annotated_train", "generations", "pred_labels", "pred_entities", "token_embeddings",
            "token_dimension", "bleu_mode", "uncertain_policy", "radgraph_level", "sweep_ks", "sweep_modalities",
            "sweep_strategies"};
        for (const auto& [key, _] : j.items()) {
            if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
        }
        RunConfig c;
        auto path = [&](const char* key, std::optional<fs::path>& dst) {
            if (auto it = j.find(key); it != j.end() && !it->is_null()) {
                if (!it->is_string()) throw ConfigError(std::string("config key '") + key + "' must be a path string");
                dst = it->get<std::string>();
            }
        };
        auto str = [&](const char* key) -> std::optional<std::string> {
            if (auto it = j.find(key); it != j.end() && !it->is_null()) {
                if (!it->is_string()) throw ConfigError(std::string("config key '") + key + "' must be a string");
                return it->get<std::string>();
            }
            return std::nullopt;
        };
        auto number = [&](const char* key, auto& dst) {
            if (auto it = j.find(key); it != j.end() && !it->is_null()) {
                if (!it->is_number()) throw ConfigError(std::string("config key '") + key + "' must be a number");
                using T = std::decay_t<decltype(dst)>;
                if constexpr (std::is_integral_v<T>) {
                    if (!it->is_number_integer()) throw ConfigError(std::string("config key '") + key + "' must be an integer");
                }
                if constexpr (std::is_unsigned_v<T>) {
                    if (it->get<long long>() < 0) throw ConfigError(std::string("config key '") + key + "' must be >= 0");
                }
                dst = it->get<T>();
            }
        };
        path("train", c.train);
        path("validation", c.validation);
        path("test", c.test);
        path("labels", c.labels);
        path("entities", c.entities);
        for (auto m : {Modality::text, Modality::image, Modality::multimodal}) {
            std::optional<fs::path> p;
            path(("store_" + std::string(to_string(m))).c_str(), p);
            if (p) c.stores[m] = *p;
        }
        if (auto s = str("strategy")) {
            auto parsed = parse_strategy(*s);
            if (!parsed || *parsed == Strategy::layperson_gen) throw ConfigError("unknown strategy '" + *s + "'");
            c.strategy = *parsed;
        }
        if (auto s = str("modality")) {
            auto parsed = parse_modality(*s);
            if (!parsed) throw ConfigError("unknown modality '" + *s + "'");
            c.modality = *parsed;
        }
        number("k", c.k);
        number("budget", c.budget);
        number("temperature", c.generation.temperature);
        number("top_p", c.generation.top_p);
        number("top_k", c.generation.top_k);
        number("max_new_tokens", c.generation.max_new_tokens);
        if (auto s = str("model")) c.generation.model_name = *s;
        if (auto s = str("endpoint")) c.endpoint = *s;
        path("cache", c.cache);
        path("replay", c.replay);
        number("seed", c.seed);
        if (std::optional<fs::path> p; path("out", p), p) c.out = *p;
        path("templates", c.templates);
        path("tokenizer", c.tokenizer);
        number("concurrency", c.concurrency);
        if (auto it = j.find("fallback_to_text"); it != j.end()) {
            if (!it->is_boolean()) throw ConfigError("config key 'fallback_to_text' must be a boolean");
            c.fallback_to_text = it->get<bool>();
        }
        number("failure_threshold", c.failure_threshold);
        path("annotated_train", c.annotated_train);
        path("generations", c.generations);
        path("pred_labels", c.pred_labels);
        path("pred_entities", c.pred_entities);
        path("token_embeddings", c.token_embeddings);
        number("token_dimension", c.token_dimension);
        if (auto s = str("bleu_mode")) {
            auto parsed = parse_bleu_mode(*s);
            if (!parsed) throw ConfigError("unknown bleu_mode '" + *s + "'");
            c.bleu_mode = *parsed;
        }
        if (auto s = str("uncertain_policy")) {
            auto parsed = parse_uncertain_policy(*s);
            if (!parsed) throw ConfigError("unknown uncertain_policy '" + *s + "'");
            c.uncertain_policy = *parsed;
        }
        if (auto s = str("radgraph_level")) {
            auto parsed = parse_radgraph_level(*s);
            if (!parsed) throw ConfigError("unknown radgraph_level '" + *s + "'");
            c.radgraph_level = *parsed;
        }
        if (auto it = j.find("sweep_ks"); it != j.end()) {
            c.sweep_ks.clear();
            for (const auto& v : *it) {
                if (!v.is_number_integer() || v.get<long long>() <= 0) throw ConfigError("sweep_ks must be positive integers");
                c.sweep_ks.push_back(v.get<std::size_t>());
            }
        }
        if (auto it = j.find("sweep_modalities"); it != j.end()) {
            c.sweep_modalities.clear();
            for (const auto& v : *it) {
                auto parsed = v.is_string() ? parse_modality(v.get<std::string>()) : std::nullopt;
                if (!parsed) throw ConfigError("unknown modality in sweep_modalities");
                c.sweep_modalities.push_back(*parsed);
            }
        }
        if (auto it = j.find("sweep_strategies"); it != j.end()) {
            for (const auto& v : *it) {
                auto parsed = v.is_string() ? parse_strategy(v.get<std::string>()) : std::nullopt;
                if (!parsed || *parsed == Strategy::layperson_gen) throw ConfigError("unknown strategy in sweep_strategies");
                c.sweep_strategies.push_back(*parsed);
            }
        }
        c.validate();
        return c;
    }

    /// Loads a JSON config file; relative paths inside it are taken relative to the file.
    static nlohmann::json load_json(const fs::path& file) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(io::read_file(file));
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("config " + file.string() + " is not valid JSON: " + e.what());
        }
        resolve_paths(j, file.parent_path());
        return j;
    }

    static void resolve_paths(nlohmann::json& j, const fs::path& base) {
        if (!j.is_object()) return;
        for (const char* key : kPathKeys) {
            if (auto it = j.find(key); it != j.end() && it->is_string()) {
                fs::path p = it->get<std::string>();
                if (p.is_relative()) *it = (base / p).lexically_normal().string();
            }
        }
        if (auto it = j.find("token_embeddings"); it != j.end() && it->is_string()) {
            fs::path p = it->get<std::string>();
            if (p.is_relative()) *it = (base / p).lexically_normal().string();
        }
    }

    void validate() const {
        if (k == 0) throw ConfigError("k must be >= 1");
        if (budget == 0) throw ConfigError("budget must be >= 1");
        if (concurrency == 0) throw ConfigError("concurrency must be >= 1");
        if (!(failure_threshold >= 0.0 && failure_threshold <= 1.0)) throw ConfigError("failure_threshold must be in [0, 1]");
        if (token_dimension == 0) throw ConfigError("token_dimension must be >= 1");
        generation.validate();
    }

    /// Verifies that every configured input file exists.
    void check_files() const {
        auto check = [](const std::optional<fs::path>& p, const char* what) {
            if (p && !fs::exists(*p)) throw ConfigError(std::string(what) + " file " + p->string() + " does not exist");
        };
        check(train, "train");
        check(validation, "validation");
        check(test, "test");
        check(labels, "labels");
        check(entities, "entities");
        check(replay, "replay transcript");
        check(templates, "template");
        check(tokenizer, "tokenizer");
        check(generations, "generations");
        check(pred_labels, "prediction labels");
        check(pred_entities, "prediction entities");
        check(token_embeddings, "token embeddings");
        for (const auto& [m, p] : stores) {
            if (!fs::exists(p)) throw ConfigError(std::string(to_string(m)) + " store " + p.string() + " does not exist");
        }
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        auto opt = [](const std::optional<fs::path>& p) { return p ? nlohmann::ordered_json(p->string()) : nlohmann::ordered_json(); };
        j["train"] = opt(train);
        j["validation"] = opt(validation);
        j["test"] = opt(test);
        j["labels"] = opt(labels);
        j["entities"] = opt(entities);
        for (const auto& [m, p] : stores) j["store_" + std::string(to_string(m))] = p.string();
        j["strategy"] = to_string(strategy);
        j["modality"] = to_string(modality);
        j["k"] = k;
        j["budget"] = budget;
        j["temperature"] = generation.temperature;
        j["top_p"] = generation.top_p;
        j["top_k"] = generation.top_k;
        j["max_new_tokens"] = generation.max_new_tokens;
        j["model"] = generation.model_name;
        j["endpoint"] = endpoint;
        j["cache"] = opt(cache);
        j["replay"] = opt(replay);
        j["seed"] = seed;
        j["out"] = out.string();
        j["templates"] = opt(templates);
        j["tokenizer"] = opt(tokenizer);
        j["concurrency"] = concurrency;
        j["fallback_to_text"] = fallback_to_text;
        j["failure_threshold"] = failure_threshold;
        j["bleu_mode"] = to_string(bleu_mode);
        j["uncertain_policy"] = to_string(uncertain_policy);
        j["radgraph_level"] = to_string(radgraph_level);
        return j;
    }
};

inline std::unique_ptr<GenClient> make_client(const RunConfig& config) {
    if (config.replay) return GenClient::replay(*config.replay);
    ClientOptions o;
    o.endpoint = config.endpoint;
    o.cache_path = config.cache;
    o.max_in_flight = config.concurrency;
    o.seed = config.seed;
    return GenClient::live(std::move(o));
}

// ---------------------------------------------------------------------------
// Worker pool

/// Runs fn(i) for i in [0, n) on up to `workers` threads. fn must not throw.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    }
}

// ---------------------------------------------------------------------------
// Workspace: everything a command reads, with content digests for the manifest

struct InputFile {
    std::string role;
    fs::path path;
    std::string sha256;
};

struct Workspace {
    std::optional<Corpus> train;
    std::optional<Corpus> validation;
    std::optional<Corpus> test;
    std::map<Modality, EmbeddingStore> stores;
    std::unique_ptr<Tokenizer> tokenizer;
    PromptTemplates templates = PromptTemplates::defaults();
    std::vector<InputFile> inputs;
    std::vector<std::string> warnings;

    StoreSet store_set() const {
        StoreSet s;
        for (const auto& [m, st] : stores) s[m] = &st;
        return s;
    }
};

struct WorkspaceRequest {
    bool train = false;
    bool validation = false;
    bool test = false;
    bool stores = false;
};

inline Workspace load_workspace(const RunConfig& config, WorkspaceRequest want) {
    config.check_files();
    Workspace ws;
    auto record = [&](std::string role, const fs::path& p) { ws.inputs.push_back({std::move(role), p, sha256_file(p)}); };

    std::optional<std::map<std::string, LabelVector>> labels;
    std::optional<std::map<std::string, EntityGraph>> entities;
    if (config.labels) {
        labels = load_labels(*config.labels);
        record("labels", *config.labels);
    }
    if (config.entities) {
        entities = load_entities(*config.entities);
        record("entities", *config.entities);
    }
    std::set<std::string> known_ids;
    auto load = [&](bool needed, const std::optional<fs::path>& p, Split split, const char* role) -> std::optional<Corpus> {
        if (!needed) return std::nullopt;
        if (!p) throw ConfigError(std::string("no ") + role + " corpus configured");
        Corpus c = load_corpus(*p, split);
        record(role, *p);
        for (const auto& r : c.reports()) known_ids.insert(r.id);
        if (labels) c = detail::attach(std::move(c), *labels, &Report::labels).corpus;
        if (entities) c = detail::attach(std::move(c), *entities, &Report::entities).corpus;
        return c;
    };
    ws.train = load(want.train, config.train, Split::train, "train");
    ws.validation = load(want.validation, config.validation, Split::validation, "validation");
    ws.test = load(want.test, config.test, Split::test, "test");
    auto warn_unknown = [&](const auto& sidecar, const char* what) {
        std::size_t unknown = 0;
        for (const auto& [id, _] : sidecar) unknown += known_ids.count(id) == 0;
        if (unknown) ws.warnings.push_back(std::to_string(unknown) + " " + what + " ids not in any loaded corpus");
    };
    if (labels) warn_unknown(*labels, "label");
    if (entities) warn_unknown(*entities, "entity");

    if (want.stores) {
        for (const auto& [m, p] : config.stores) {
            EmbeddingStore s = load_store(p);
            if (s.modality() != m) {
                throw ConfigError("store " + p.string() + " holds " + std::string(to_string(s.modality())) +
                                  " embeddings but is configured as " + std::string(to_string(m)));
            }
            record("store_" + std::string(to_string(m)), p);
            ws.stores.emplace(m, std::move(s));
        }
    }
    if (config.templates) {
        ws.templates = PromptTemplates::load(*config.templates);
        record("templates", *config.templates);
    }
    if (config.tokenizer) {
        ws.tokenizer = BpeTokenizer::from_file(*config.tokenizer);
        record("tokenizer", *config.tokenizer);
    } else {
        ws.tokenizer = std::make_unique<WhitespaceTokenizer>();
    }
    return ws;
}

inline nlohmann::ordered_json inputs_json(const std::vector<InputFile>& inputs) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& f : inputs) arr.push_back({{"role", f.role}, {"path", f.path.string()}, {"sha256", f.sha256}});
    return arr;
}

inline void write_json(const fs::path& path, const nlohmann::ordered_json& j) { io::write_file_atomic(path, j.dump(2) + "\n"); }

inline std::int64_t ms_since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t).count();
}

// ---------------------------------------------------------------------------
// annotate-layperson

struct AnnotateResult {
    Corpus corpus;
    std::size_t attempted = 0;
    std::size_t annotated = 0;
    std::map<std::string, std::string> failures;
    std::size_t network_calls = 0;
    fs::path output;
    bool failed = false; // failure rate above threshold
};

/// Generates a layperson summary for every train report that lacks one.
inline AnnotateResult cmd_annotate_layperson(const RunConfig& config, GenClient& client) {
    Workspace ws = load_workspace(config, {.train = true});
    const Corpus& train = *ws.train;
    std::vector<const Report*> todo;
    for (const auto& id : train.split_ids(Split::train)) {
        const Report& r = train.at(id);
        if (!r.layperson) todo.push_back(&r);
    }
    std::size_t calls_before = client.network_calls();
    std::vector<std::optional<std::string>> texts(todo.size());
    std::vector<std::string> errors(todo.size());
    parallel_for(todo.size(), config.concurrency, [&](std::size_t i) {
        try {
            auto prompt = build_layperson_gen_prompt(*todo[i], todo[i]->labels, ws.templates, *ws.tokenizer, config.budget);
            auto result = client.complete(prompt, config.generation);
            std::string text(detail::trim(result.text));
            if (text.empty()) throw ProtocolError("empty layperson summary");
            texts[i] = std::move(text);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });

    AnnotateResult out;
    out.attempted = todo.size();
    std::map<std::string, std::string> summaries;
    for (std::size_t i = 0; i < todo.size(); ++i) {
        if (texts[i]) {
            summaries[todo[i]->id] = *texts[i];
        } else {
            out.failures[todo[i]->id] = errors[i];
        }
    }
    out.annotated = summaries.size();
    out.network_calls = client.network_calls() - calls_before;
    out.corpus = store_laypersons(*ws.train, summaries);
    out.output = config.annotated_train ? *config.annotated_train : config.out / "train.annotated.jsonl";
    write_corpus(out.corpus, out.output);
    double rate = out.attempted ? static_cast<double>(out.failures.size()) / static_cast<double>(out.attempted) : 0.0;
    out.failed = rate > config.failure_threshold;
    return out;
}

// ---------------------------------------------------------------------------
// run

struct GenerationRecord {
    std::string id;
    Strategy strategy = Strategy::zero_shot;
    std::size_t k = 0;
    Modality modality = Modality::text;
    std::optional<Modality> modality_used;
    std::size_t demos_used = 0;
    std::size_t demos_dropped = 0;
    std::size_t prompt_tokens = 0;
    std::vector<std::string> demo_ids;
    std::string raw;
    std::string layperson;
    std::string impression;
    std::string parse_status;
    std::optional<std::string> error;

    bool ok() const { return !error.has_value(); }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["id"] = id;
        j["strategy"] = to_string(strategy);
        j["k"] = k;
        j["modality"] = to_string(modality);
        if (modality_used && *modality_used != modality) j["modality_used"] = to_string(*modality_used);
        j["demos_used"] = demos_used;
        j["demos_dropped"] = demos_dropped;
        j["prompt_tokens"] = prompt_tokens;
        j["demo_ids"] = demo_ids;
        j["raw"] = raw;
        j["layperson"] = layperson;
        j["impression"] = impression;
        j["parse_status"] = parse_status;
        j["status"] = error ? "error" : "ok";
        if (error) j["error"] = *error;
        return j;
    }

    static GenerationRecord from_json(const nlohmann::json& j, std::size_t line) {
        GenerationRecord r;
        try {
            r.id = j.at("id").get<std::string>();
            auto s = parse_strategy(j.at("strategy").get<std::string>());
            auto m = parse_modality(j.at("modality").get<std::string>());
            if (!s || !m) throw ParseError("unknown strategy or modality", line);
            r.strategy = *s;
            r.modality = *m;
            r.k = j.value("k", std::size_t{0});
            if (auto it = j.find("modality_used"); it != j.end()) r.modality_used = parse_modality(it->get<std::string>());
            r.demos_used = j.value("demos_used", std::size_t{0});
            r.demos_dropped = j.value("demos_dropped", std::size_t{0});
            r.prompt_tokens = j.value("prompt_tokens", std::size_t{0});
            r.demo_ids = j.value("demo_ids", std::vector<std::string>{});
            r.raw = j.value("raw", std::string());
            r.layperson = j.value("layperson", std::string());
            r.impression = j.value("impression", std::string());
            r.parse_status = j.value("parse_status", std::string());
            if (auto it = j.find("error"); it != j.end() && it->is_string()) r.error = it->get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("bad generation record: ") + e.what(), line);
        }
        return r;
    }
};

inline std::string serialize_generations(const std::vector<GenerationRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += r.to_json().dump();
        out += '\n';
    }
    return out;
}

inline std::vector<GenerationRecord> load_generations(const fs::path& path) {
    std::vector<GenerationRecord> out;
    io::for_each_line(path, [&](std::string_view line, std::size_t number) {
        out.push_back(GenerationRecord::from_json(detail::parse_json_line(line, number), number));
    });
    return out;
}

struct PointSpec {
    Strategy strategy;
    Modality modality;
    std::size_t k;
};

/// Assembled prompt for one evaluation report, or the reason it could not be built.
struct PreparedPrompt {
    std::optional<AssembledPrompt> prompt;
    std::optional<Modality> modality_used;
    std::string error;
};

inline PreparedPrompt prepare_prompt(const Workspace& ws, const RunConfig& config, const Report& report, PointSpec point) {
    PreparedPrompt out;
    try {
        if (point.strategy == Strategy::zero_shot) {
            out.prompt = build_zero_shot(report, config.budget, *ws.tokenizer, ws.templates);
            return out;
        }
        if (!ws.train) throw ConfigError("few-shot strategies need a train corpus");
        RetrievalOptions ro;
        ro.fallback_to_text = config.fallback_to_text;
        auto retrieved = retrieve_demos(*ws.train, ws.store_set(), report, point.modality, point.k, ro);
        out.modality_used = retrieved.modality_used;
        auto demos = demonstrations_from(retrieved);
        FewShotVariant variant = point.strategy == Strategy::few_shot          ? FewShotVariant::plain
                                 : point.strategy == Strategy::few_shot_chexbert ? FewShotVariant::chexbert
                                                                                 : FewShotVariant::layperson;
        out.prompt = build_few_shot(report, demos, config.budget, *ws.tokenizer, variant, report.labels, ws.templates);
    } catch (const std::exception& e) {
        out.error = e.what();
    }
    return out;
}

/// Generates and parses in input order; per-report failures become error records.
inline std::vector<GenerationRecord> generate_records(const Workspace& ws, const RunConfig& config, const Corpus& eval_corpus,
                                                      PointSpec point, const std::vector<PreparedPrompt>& prepared,
                                                      GenClient& client) {
    const auto& reports = eval_corpus.reports();
    std::vector<GenerationRecord> records(reports.size());
    parallel_for(reports.size(), config.concurrency, [&](std::size_t i) {
        GenerationRecord& rec = records[i];
        rec.id = reports[i].id;
        rec.strategy = point.strategy;
        rec.k = point.strategy == Strategy::zero_shot ? 0 : point.k;
        rec.modality = point.modality;
        const PreparedPrompt& pp = prepared[i];
        rec.modality_used = pp.modality_used;
        if (!pp.prompt) {
            rec.error = pp.error;
            rec.parse_status = "error";
            return;
        }
        rec.demos_used = pp.prompt->demos_used;
        rec.demos_dropped = pp.prompt->demos_dropped;
        rec.prompt_tokens = pp.prompt->token_count;
        rec.demo_ids = pp.prompt->demo_ids;
        try {
            auto result = client.complete(*pp.prompt, config.generation);
            rec.raw = result.text;
            auto parsed = parse_response(result.text, point.strategy);
            rec.layperson = parsed.layperson;
            rec.impression = parsed.impression;
            rec.parse_status = std::string(to_string(parsed.status));
        } catch (const std::exception& e) {
            rec.error = e.what();
            rec.parse_status = "error";
        }
    });
    (void)ws;
    return records;
}

struct RunResult {
    std::vector<GenerationRecord> records;
    std::vector<PreparedPrompt> prompts;
    fs::path generations_path;
    std::size_t failures = 0;
    std::vector<std::string> fallbacks;
};

inline nlohmann::ordered_json manifest_json(const RunConfig& config, const Workspace& ws, const char* command) {
    nlohmann::ordered_json m;
    m["tool"] = "laysum";
    m["version"] = std::string(kVersion);
    m["command"] = command;
    m["config"] = config.to_json();
    m["templates_digest"] = sha256_hex(ws.templates.canonical());
    m["templates_version"] = ws.templates.get("version");
    m["tokenizer"] = ws.tokenizer->id();
    m["inputs"] = inputs_json(ws.inputs);
    m["protocol"] = {{"request", "chat.completions"}, {"top_k", "extension field"}};
    m["warnings"] = ws.warnings;
    return m;
}

/// Prompts are assembled for the whole corpus before the manifest is written;
/// generation starts only after that.
inline RunResult run_point(const Workspace& ws, const RunConfig& config, const Corpus& eval_corpus, PointSpec point,
                           GenClient& client, const fs::path& out_dir, const char* command, bool write_manifest) {
    if (point.strategy != Strategy::zero_shot && !ws.stores.count(point.modality)) {
        throw ConfigError("no " + std::string(to_string(point.modality)) + " embedding store configured");
    }
    auto t0 = std::chrono::steady_clock::now();
    RunResult result;
    const auto& reports = eval_corpus.reports();
    result.prompts.resize(reports.size());
    parallel_for(reports.size(), config.concurrency,
                 [&](std::size_t i) { result.prompts[i] = prepare_prompt(ws, config, reports[i], point); });
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& pp = result.prompts[i];
        if (pp.modality_used && *pp.modality_used != point.modality) result.fallbacks.push_back(reports[i].id);
    }
    auto assemble_ms = ms_since(t0);
    if (write_manifest) {
        auto m = manifest_json(config, ws, command);
        m["point"] = {{"strategy", to_string(point.strategy)}, {"modality", to_string(point.modality)}, {"k", point.k}};
        m["fallbacks"] = result.fallbacks;
        m["stages"] = {{"retrieve_and_assemble_ms", assemble_ms}};
        write_json(out_dir / "manifest.json", m);
    }
    result.records = generate_records(ws, config, eval_corpus, point, result.prompts, client);
    for (const auto& r : result.records) result.failures += !r.ok();
    result.generations_path = out_dir / "generations.jsonl";
    io::write_file_atomic(result.generations_path, serialize_generations(result.records));
    return result;
}

/// Runs the configured strategy on the test corpus.
inline RunResult cmd_run(const RunConfig& config, GenClient& client) {
    bool few_shot = config.strategy != Strategy::zero_shot;
    Workspace ws = load_workspace(config, {.train = few_shot, .test = true, .stores = few_shot});
    return run_point(ws, config, *ws.test, {config.strategy, config.modality, config.k}, client, config.out, "run", true);
}

// ---------------------------------------------------------------------------
// eval

struct EvalSummary {
    std::size_t n = 0;
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    double bertscore = 0.0;
    std::optional<double> f1_chexbert;
    std::optional<double> f1_radgraph;
};

struct EvalResult {
    std::vector<ScoreRow> rows;
    std::vector<BucketReport> buckets;
    EvalSummary overall;
    std::map<std::string, EvalSummary> by_strategy;
    std::size_t skipped = 0;
};

struct EvalInputs {
    const Corpus* references = nullptr;
    const std::map<std::string, LabelVector>* pred_labels = nullptr;
    const std::map<std::string, EntityGraph>* pred_entities = nullptr;
    const TokenEmbedder* embedder = nullptr;
};

inline EvalSummary summarize_rows(const std::vector<const ScoreRow*>& rows, const std::vector<std::string>& hyps,
                                  const std::vector<std::string>& refs, BleuMode mode) {
    EvalSummary s;
    s.n = rows.size();
    std::vector<double> rl, bs, cx, rg, sb;
    for (const ScoreRow* r : rows) {
        rl.push_back(r->rouge_l_f);
        bs.push_back(r->bertscore_f);
        sb.push_back(r->bleu4);
        if (r->f1_chexbert) cx.push_back(*r->f1_chexbert);
        if (r->f1_radgraph) rg.push_back(*r->f1_radgraph);
    }
    s.bleu4 = mode == BleuMode::corpus ? bleu4(hyps, refs, BleuMode::corpus) : mean(sb).value_or(0.0);
    s.rouge_l = mean(rl).value_or(0.0);
    s.bertscore = mean(bs).value_or(0.0);
    s.f1_chexbert = mean(cx);
    s.f1_radgraph = mean(rg);
    return s;
}

/// Scores generation records against references. Error records are skipped.
inline EvalResult evaluate(const std::vector<GenerationRecord>& records, const EvalInputs& in, const RunConfig& config) {
    if (records.empty()) throw ValidationError("generations file has no records");
    EvalResult out;
    std::vector<const GenerationRecord*> scored;
    for (const auto& r : records) {
        if (!in.references->contains(r.id)) throw ValidationError("generation id '" + r.id + "' is not in the reference corpus");
        if (r.ok()) {
            scored.push_back(&r);
        } else {
            ++out.skipped;
        }
    }
    out.rows.resize(scored.size());
    parallel_for(scored.size(), config.concurrency, [&](std::size_t i) {
        const GenerationRecord& g = *scored[i];
        const Report& ref = in.references->at(g.id);
        ScoreRow& row = out.rows[i];
        row.report_id = g.id;
        row.strategy = std::string(to_string(g.strategy));
        row.bleu4 = smoothed_sentence_bleu(bleu_stats(g.impression, ref.impression));
        row.rouge_l_f = rouge_l(g.impression, ref.impression).f;
        row.bertscore_f = bertscore_text(g.impression, ref.impression, *in.embedder).f;
        if (in.pred_labels && ref.labels) {
            if (auto it = in.pred_labels->find(g.id); it != in.pred_labels->end()) {
                row.f1_chexbert = f1_chexbert(it->second, *ref.labels, config.uncertain_policy);
            }
        }
        if (in.pred_entities && ref.entities) {
            if (auto it = in.pred_entities->find(g.id); it != in.pred_entities->end()) {
                row.f1_radgraph = f1_radgraph(it->second, *ref.entities, config.radgraph_level);
            }
        }
    });

    std::map<std::string, std::size_t> lengths;
    std::vector<const ScoreRow*> all;
    std::vector<std::string> hyps, refs;
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < out.rows.size(); ++i) {
        const Report& ref = in.references->at(out.rows[i].report_id);
        lengths[ref.id] = metric_tokens(ref.impression).size();
        all.push_back(&out.rows[i]);
        hyps.push_back(scored[i]->impression);
        refs.push_back(ref.impression);
        groups[out.rows[i].strategy].push_back(i);
    }
    out.overall = summarize_rows(all, hyps, refs, config.bleu_mode);
    for (const auto& [strategy, idx] : groups) {
        std::vector<const ScoreRow*> rows;
        std::vector<std::string> h, r;
        for (auto i : idx) {
            rows.push_back(&out.rows[i]);
            h.push_back(hyps[i]);
            r.push_back(refs[i]);
        }
        out.by_strategy[strategy] = summarize_rows(rows, h, r, config.bleu_mode);
    }
    if (!out.rows.empty()) out.buckets = bucketize(out.rows, lengths);
    return out;
}

namespace detail {

inline nlohmann::ordered_json opt_num(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json();
}

inline nlohmann::ordered_json summary_json(const EvalSummary& s) {
    return {{"n", s.n},           {"bleu4", s.bleu4},
            {"rouge_l", s.rouge_l}, {"bertscore", s.bertscore},
            {"f1_chexbert", opt_num(s.f1_chexbert)}, {"f1_radgraph", opt_num(s.f1_radgraph)}};
}

inline std::string pct(const std::optional<double>& v) {
    if (!v) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
    return buf;
}

inline std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

} // namespace detail

inline nlohmann::ordered_json metrics_json(const EvalResult& r, const RunConfig& config, const TokenEmbedder& embedder) {
    nlohmann::ordered_json j;
    j["settings"] = {{"bleu_mode", to_string(config.bleu_mode)},
                     {"tokenization", "ascii-lowercase, whitespace split, leading/trailing ASCII punctuation detached"},
                     {"bertscore", {{"matching", "greedy"}, {"idf", false}, {"rescale", false}, {"embedder", embedder.id()}}},
                     {"uncertain_policy", to_string(config.uncertain_policy)},
                     {"radgraph_level", to_string(config.radgraph_level)}};
    j["n_scored"] = r.rows.size();
    j["n_skipped"] = r.skipped;
    j["overall"] = detail::summary_json(r.overall);
    nlohmann::ordered_json by = nlohmann::ordered_json::object();
    for (const auto& [s, sum] : r.by_strategy) by[s] = detail::summary_json(sum);
    j["by_strategy"] = by;
    nlohmann::ordered_json buckets = nlohmann::ordered_json::array();
    for (const auto& b : r.buckets) {
        buckets.push_back({{"bucket", b.bucket},
                           {"n", b.n},
                           {"min_length", b.min_length},
                           {"max_length", b.max_length},
                           {"rouge_l", detail::opt_num(b.rouge_l)},
                           {"f1_radgraph", detail::opt_num(b.f1_radgraph)},
                           {"bleu4", detail::opt_num(b.bleu4)},
                           {"bertscore", detail::opt_num(b.bertscore)},
                           {"f1_chexbert", detail::opt_num(b.f1_chexbert)}});
    }
    j["buckets"] = buckets;
    return j;
}

inline std::string scores_jsonl(const EvalResult& r) {
    std::string out;
    for (const auto& row : r.rows) {
        nlohmann::ordered_json j{{"id", row.report_id},
                                 {"strategy", row.strategy},
                                 {"bleu4", row.bleu4},
                                 {"rouge_l_f", row.rouge_l_f},
                                 {"bertscore_f", row.bertscore_f},
                                 {"f1_chexbert", detail::opt_num(row.f1_chexbert)},
                                 {"f1_radgraph", detail::opt_num(row.f1_radgraph)}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

/// Strategy x metric table (percentages) followed by the length-bucket breakdown.
inline std::string report_markdown(const EvalResult& r) {
    std::string md = "# Evaluation report\n\n";
    md += "| Strategy | n | BLEU4 | ROUGE-L | BERTScore | F1-CheXbert | F1-RadGraph |\n";
    md += "|---|---:|---:|---:|---:|---:|---:|\n";
    for (const auto& [s, sum] : r.by_strategy) {
        md += "| " + s + " | " + std::to_string(sum.n) + " | " + detail::fixed2(sum.bleu4) + " | " + detail::pct(sum.rouge_l) +
              " | " + detail::pct(sum.bertscore) + " | " + detail::pct(sum.f1_chexbert) + " | " + detail::pct(sum.f1_radgraph) +
              " |\n";
    }
    md += "\n## By reference impression length\n\n";
    md += "| Bucket | n | length range | ROUGE-L | F1-RadGraph | BLEU4 | BERTScore | F1-CheXbert |\n";
    md += "|---|---:|---|---:|---:|---:|---:|---:|\n";
    for (const auto& b : r.buckets) {
        std::string range = b.n ? std::to_string(b.min_length) + "-" + std::to_string(b.max_length) : "-";
        md += "| " + b.bucket + " | " + std::to_string(b.n) + " | " + range + " | " + detail::pct(b.rouge_l) + " | " +
              detail::pct(b.f1_radgraph) + " | " + (b.bleu4 ? detail::fixed2(*b.bleu4) : std::string("n/a")) + " | " +
              detail::pct(b.bertscore) + " | " + detail::pct(b.f1_chexbert) + " |\n";
    }
    if (r.skipped) md += "\n" + std::to_string(r.skipped) + " generation records with errors were skipped.\n";
    return md;
}

struct EvalContext {
    std::optional<std::map<std::string, LabelVector>> pred_labels;
    std::optional<std::map<std::string, EntityGraph>> pred_entities;
    std::optional<EmbeddingStore> token_store;
    std::unique_ptr<TokenEmbedder> embedder;

    EvalInputs inputs(const Corpus& refs) const {
        return {&refs, pred_labels ? &*pred_labels : nullptr, pred_entities ? &*pred_entities : nullptr, embedder.get()};
    }
};

inline EvalContext load_eval_context(const RunConfig& config) {
    EvalContext ctx;
    if (config.pred_labels) ctx.pred_labels = load_labels(*config.pred_labels);
    if (config.pred_entities) ctx.pred_entities = load_entities(*config.pred_entities);
    if (config.token_embeddings) {
        ctx.token_store = load_store(*config.token_embeddings);
        ctx.embedder = std::make_unique<StoreTokenEmbedder>(*ctx.token_store, config.seed);
    } else {
        ctx.embedder = std::make_unique<MockTokenEmbedder>(config.token_dimension, config.seed);
    }
    return ctx;
}

inline void write_eval_outputs(const EvalResult& r, const RunConfig& config, const TokenEmbedder& embedder, const fs::path& dir) {
    write_json(dir / "metrics.json", metrics_json(r, config, embedder));
    io::write_file_atomic(dir / "scores.jsonl", scores_jsonl(r));
    io::write_file_atomic(dir / "buckets.csv", buckets_csv(r.buckets));
    io::write_file_atomic(dir / "report.md", report_markdown(r));
    std::vector<std::string> cats;
    std::vector<std::optional<double>> rl, rg;
    for (const auto& b : r.buckets) {
        cats.push_back(b.bucket);
        rl.push_back(b.rouge_l);
        rg.push_back(b.f1_radgraph);
    }
    io::write_file_atomic(dir / "plots" / "buckets.svg",
                          svg::bar_chart("Scores by reference impression length", "score", cats,
                                         {{"ROUGE-L", rl}, {"F1-RadGraph", rg}}));
}

/// Scores `config.generations` (default: out/generations.jsonl) against the test corpus.
inline EvalResult cmd_eval(const RunConfig& config) {
    fs::path gen_path = config.generations ? *config.generations : config.out / "generations.jsonl";
    if (!fs::exists(gen_path)) throw ConfigError("generations file " + gen_path.string() + " does not exist");
    Workspace ws = load_workspace(config, {.test = true});
    auto records = load_generations(gen_path);
    EvalContext ctx = load_eval_context(config);
    EvalResult r = evaluate(records, ctx.inputs(*ws.test), config);
    write_eval_outputs(r, config, *ctx.embedder, config.out);
    return r;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepRow {
    std::string strategy;
    std::string modality;
    std::size_t k = 0;
    std::size_t n = 0;
    std::size_t failures = 0;
    double demos_used_mean = 0.0;
    std::optional<double> rouge_l;
    std::optional<double> f1_radgraph;
    bool operator==(const SweepRow&) const = default;
};

inline constexpr std::string_view kSweepHeader = "strategy,modality,k,n,failures,demos_used_mean,rouge_l,f1_radgraph";

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    auto cell = [](const std::optional<double>& v) { return v ? io::format_double(*v) : std::string(); };
    std::string out(kSweepHeader);
    out += '\n';
    for (const auto& r : rows) {
        out += r.strategy + "," + r.modality + "," + std::to_string(r.k) + "," + std::to_string(r.n) + "," +
               std::to_string(r.failures) + "," + io::format_double(r.demos_used_mean) + "," + cell(r.rouge_l) + "," +
               cell(r.f1_radgraph) + "\n";
    }
    return out;
}

inline std::vector<SweepRow> parse_sweep_csv(std::string_view text) {
    std::vector<SweepRow> rows;
    std::size_t pos = 0, line_no = 0;
    auto to_double = [](const std::string& s) -> std::optional<double> {
        if (s.empty()) return std::nullopt;
        double v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc()) throw ParseError("bad number '" + s + "' in sweep CSV", 0);
        return v;
    };
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string line(text.substr(pos, end - pos));
        pos = end + 1;
        ++line_no;
        if (line_no == 1) {
            if (line != kSweepHeader) throw ParseError("unexpected sweep CSV header", 1);
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t s = 0;
        while (true) {
            auto c = line.find(',', s);
            f.push_back(line.substr(s, c == std::string::npos ? std::string::npos : c - s));
            if (c == std::string::npos) break;
            s = c + 1;
        }
        if (f.size() != 8) throw ParseError("sweep CSV row needs 8 fields", line_no);
        SweepRow r;
        r.strategy = f[0];
        r.modality = f[1];
        r.k = std::stoul(f[2]);
        r.n = std::stoul(f[3]);
        r.failures = std::stoul(f[4]);
        r.demos_used_mean = to_double(f[5]).value_or(0.0);
        r.rouge_l = to_double(f[6]);
        r.f1_radgraph = to_double(f[7]);
        rows.push_back(std::move(r));
    }
    return rows;
}

struct SweepResult {
    std::vector<SweepRow> rows;
    fs::path csv_path;
};

/// One run + eval per (strategy, modality, k) on the validation corpus.
inline SweepResult cmd_sweep(const RunConfig& config, GenClient& client) {
    std::vector<Strategy> strategies = config.sweep_strategies;
    if (strategies.empty()) strategies.push_back(config.strategy);
    bool few_shot = std::any_of(strategies.begin(), strategies.end(), [](Strategy s) { return s != Strategy::zero_shot; });
    if (!config.validation) throw ConfigError("sweep needs a validation corpus");
    Workspace ws = load_workspace(config, {.train = few_shot, .validation = true, .stores = few_shot});
    EvalContext ctx = load_eval_context(config);
    const Corpus& val = *ws.validation;

    auto m = manifest_json(config, ws, "sweep");
    nlohmann::ordered_json grid;
    for (auto s : strategies) grid["strategies"].push_back(to_string(s));
    for (auto md : config.sweep_modalities) grid["modalities"].push_back(to_string(md));
    grid["ks"] = config.sweep_ks;
    m["grid"] = grid;
    write_json(config.out / "manifest.json", m);

    SweepResult out;
    for (auto strategy : strategies) {
        for (auto modality : config.sweep_modalities) {
            for (auto k : config.sweep_ks) {
                SweepRow row;
                row.strategy = std::string(to_string(strategy));
                row.modality = std::string(to_string(modality));
                row.k = k;
                row.n = val.size();
                fs::path dir = config.out / "sweep" / (row.strategy + "-" + row.modality + "-k" + std::to_string(k));
                auto run = run_point(ws, config, val, {strategy, modality, k}, client, dir, "sweep", false);
                row.failures = run.failures;
                std::vector<double> used;
                for (const auto& r : run.records)
                    if (r.ok()) used.push_back(static_cast<double>(r.demos_used));
                row.demos_used_mean = mean(used).value_or(0.0);
                if (run.failures < run.records.size()) {
                    auto eval = evaluate(run.records, ctx.inputs(val), config);
                    write_eval_outputs(eval, config, *ctx.embedder, dir);
                    row.rouge_l = eval.overall.rouge_l;
                    row.f1_radgraph = eval.overall.f1_radgraph;
                }
                out.rows.push_back(std::move(row));
            }
        }
    }
    out.csv_path = config.out / "sweep.csv";
    io::write_file_atomic(out.csv_path, sweep_csv(out.rows));

    for (auto strategy : strategies) {
        std::vector<svg::Series> rouge, radgraph;
        for (auto modality : config.sweep_modalities) {
            svg::Series rs{std::string(to_string(modality)), {}}, gs{std::string(to_string(modality)), {}};
            for (const auto& r : out.rows) {
                if (r.strategy != to_string(strategy) || r.modality != to_string(modality)) continue;
                if (r.rouge_l) rs.points.emplace_back(static_cast<double>(r.k), *r.rouge_l);
                if (r.f1_radgraph) gs.points.emplace_back(static_cast<double>(r.k), *r.f1_radgraph);
            }
            rouge.push_back(std::move(rs));
            if (!gs.points.empty()) radgraph.push_back(std::move(gs));
        }
        std::string name(to_string(strategy));
        io::write_file_atomic(config.out / "plots" / ("sweep_" + name + "_rouge_l.svg"),
                              svg::line_chart(name + ": ROUGE-L vs. number of demonstrations", "k", "ROUGE-L", rouge));
        if (!radgraph.empty()) {
            io::write_file_atomic(config.out / "plots" / ("sweep_" + name + "_f1_radgraph.svg"),
                                  svg::line_chart(name + ": F1-RadGraph vs. number of demonstrations", "k", "F1-RadGraph",
                                                  radgraph));
        }
    }
    return out;
}

} // namespace laysum

// SPDX-License-Identifier: Apache-2.0
// laysum: layperson-first radiology report summarization experiments.

#include "laysum/laysum.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <map>
#include <string>

namespace {

using nlohmann::json;

// Flag values collected as strings/numbers; only flags actually given override the config file.
struct Flags {
    std::string config;
    std::map<std::string, std::string> strings;
    std::map<std::string, double> numbers;
    std::map<std::string, long long> integers;
    std::vector<std::size_t> sweep_ks;
    std::vector<std::string> sweep_modalities;
    std::vector<std::string> sweep_strategies;
    bool fallback_to_text = false;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("-c,--config", f.config, "JSON config file");
    for (const char* key : {"train", "validation", "test", "labels", "entities", "store_text", "store_image",
                            "store_multimodal", "cache", "replay", "out", "templates", "tokenizer", "endpoint", "model",
                            "annotated_train", "generations", "pred_labels", "pred_entities", "token_embeddings",
                            "strategy", "modality", "bleu_mode", "uncertain_policy", "radgraph_level"}) {
        std::string flag = std::string("--") + key;
        for (auto& c : flag) {
            if (c == '_') c = '-';
        }
        cmd->add_option(flag, f.strings[key]);
    }
    for (const char* key : {"temperature", "top_p", "failure_threshold"}) {
        std::string flag = std::string("--") + key;
        for (auto& c : flag) {
            if (c == '_') c = '-';
        }
        cmd->add_option(flag, f.numbers[key]);
    }
    for (const char* key : {"k", "budget", "top_k", "max_new_tokens", "seed", "concurrency", "token_dimension"}) {
        std::string flag = std::string(key == std::string("k") ? "-k,--" : "--") + key;
        for (auto& c : flag) {
            if (c == '_') c = '-';
        }
        cmd->add_option(flag, f.integers[key]);
    }
    cmd->add_flag("--fallback-to-text", f.fallback_to_text, "use the text store when a test report has no images");
}

laysum::RunConfig build_config(CLI::App* cmd, const Flags& f) {
    json j = json::object();
    if (!f.config.empty()) j = laysum::RunConfig::load_json(f.config);
    auto given = [&](const std::string& key) {
        std::string flag = "--" + key;
        for (auto& c : flag) {
            if (c == '_') c = '-';
        }
        return cmd->count(flag) > 0;
    };
    for (const auto& [k, v] : f.strings)
        if (given(k)) j[k] = v;
    for (const auto& [k, v] : f.numbers)
        if (given(k)) j[k] = v;
    for (const auto& [k, v] : f.integers) {
        if (!given(k)) continue;
        if (v < 0) throw laysum::ConfigError("--" + k + " must be >= 0");
        j[k] = static_cast<unsigned long long>(v);
    }
    if (f.fallback_to_text) j["fallback_to_text"] = true;
    if (!f.sweep_ks.empty()) j["sweep_ks"] = f.sweep_ks;
    if (!f.sweep_modalities.empty()) j["sweep_modalities"] = f.sweep_modalities;
    if (!f.sweep_strategies.empty()) j["sweep_strategies"] = f.sweep_strategies;
    return laysum::RunConfig::from_json(j);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Layperson-first radiology report summarization"};
    app.set_version_flag("--version", std::string(laysum::kVersion));
    app.require_subcommand(1);

    Flags annotate_flags, run_flags, eval_flags, sweep_flags;
    auto* annotate = app.add_subcommand("annotate-layperson", "generate layperson summaries for the train corpus");
    auto* run = app.add_subcommand("run", "retrieve, assemble, generate and parse for the test corpus");
    auto* eval = app.add_subcommand("eval", "score generations against reference impressions");
    auto* sweep = app.add_subcommand("sweep", "k x modality grid on the validation corpus");
    auto* templates = app.add_subcommand("templates", "print the default prompt templates as JSON");
    add_common(annotate, annotate_flags);
    add_common(run, run_flags);
    add_common(eval, eval_flags);
    add_common(sweep, sweep_flags);
    sweep->add_option("--ks", sweep_flags.sweep_ks, "values of k (default 2 8 12 16 24 32)");
    sweep->add_option("--modalities", sweep_flags.sweep_modalities, "modalities (default text image multimodal)");
    sweep->add_option("--strategies", sweep_flags.sweep_strategies, "strategies (default: --strategy)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (templates->parsed()) {
            std::cout << laysum::PromptTemplates::defaults().canonical();
        } else if (annotate->parsed()) {
            auto config = build_config(annotate, annotate_flags);
            auto client = laysum::make_client(config);
            auto r = laysum::cmd_annotate_layperson(config, *client);
            for (const auto& [id, err] : r.failures) std::cerr << "failed " << id << ": " << err << "\n";
            std::cout << "annotated " << r.annotated << "/" << r.attempted << " reports (" << r.network_calls
                      << " network calls) -> " << r.output.string() << "\n";
            if (r.failed) {
                std::cerr << "error: failure rate " << r.failures.size() << "/" << r.attempted << " exceeds threshold "
                          << config.failure_threshold << "\n";
                return 3;
            }
        } else if (run->parsed()) {
            auto config = build_config(run, run_flags);
            auto client = laysum::make_client(config);
            auto r = laysum::cmd_run(config, *client);
            for (const auto& rec : r.records) {
                if (rec.error) std::cerr << "failed " << rec.id << ": " << *rec.error << "\n";
            }
            std::cout << "wrote " << r.records.size() << " records (" << r.failures << " failed) -> "
                      << r.generations_path.string() << "\n";
        } else if (eval->parsed()) {
            auto config = build_config(eval, eval_flags);
            auto r = laysum::cmd_eval(config);
            std::printf("n=%zu BLEU4=%.2f ROUGE-L=%.4f BERTScore=%.4f\n", r.overall.n, r.overall.bleu4, r.overall.rouge_l,
                        r.overall.bertscore);
            std::cout << "wrote " << (config.out / "metrics.json").string() << "\n";
        } else if (sweep->parsed()) {
            auto config = build_config(sweep, sweep_flags);
            auto client = laysum::make_client(config);
            auto r = laysum::cmd_sweep(config, *client);
            std::cout << "wrote " << r.rows.size() << " rows -> " << r.csv_path.string() << "\n";
        }
    } catch (const laysum::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

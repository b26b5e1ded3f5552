// SPDX-License-Identifier: Apache-2.0
#include "laysum/runner.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace laysum;
using laysum::testing::TempDir;
namespace fs = std::filesystem;

namespace {

const fs::path kData = LAYSUM_SYNTHETIC_DIR;

RunConfig synthetic_config(const fs::path& out) {
    auto j = RunConfig::load_json(kData / "config.json");
    j["out"] = out.string();
    return RunConfig::from_json(j);
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    return lines;
}

} // namespace

TEST(Config, Defaults) {
    auto c = RunConfig::from_json(nlohmann::json::object());
    EXPECT_EQ(c.strategy, Strategy::few_shot_layperson);
    EXPECT_EQ(c.modality, Modality::multimodal);
    EXPECT_EQ(c.k, 8u);
    EXPECT_EQ(c.budget, 7800u);
    EXPECT_DOUBLE_EQ(c.generation.temperature, 0.2);
    EXPECT_DOUBLE_EQ(c.generation.top_p, 0.5);
    EXPECT_EQ(c.generation.top_k, 20);
    EXPECT_EQ(c.generation.max_new_tokens, 256);
    EXPECT_EQ(c.sweep_ks, (std::vector<std::size_t>{2, 8, 12, 16, 24, 32}));
    EXPECT_DOUBLE_EQ(c.failure_threshold, 0.05);
}

TEST(Config, Rejections) {
    EXPECT_THROW(RunConfig::from_json({{"kk", 3}}), ConfigError);
    EXPECT_THROW(RunConfig::from_json({{"k", -1}}), ConfigError);
    EXPECT_THROW(RunConfig::from_json({{"k", 2.5}}), ConfigError);
    EXPECT_THROW(RunConfig::from_json({{"k", "8"}}), ConfigError);
    EXPECT_THROW(RunConfig::from_json({{"strategy", "two_shot"}}), ConfigError);
    EXPECT_THROW(RunConfig::from_json({{"modality", "audio"}}), ConfigError);
    EXPECT_THROW(RunConfig::from_json({{"sweep_ks", {2, 0}}}), ConfigError);
    EXPECT_THROW(RunConfig::from_json({{"top_p", 0.0}}).validate(), ConfigError);
    EXPECT_THROW(RunConfig::from_json({{"k", 0}}).validate(), ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::array()), ConfigError);
}

TEST(Config, RelativePathsFollowTheFile) {
    TempDir dir;
    fs::create_directories(dir / "sub");
    dir.write("sub/c.json", R"({"train": "data/train.jsonl", "test": "/abs/test.jsonl", "k": 4, "model": "m"})");
    auto c = RunConfig::from_json(RunConfig::load_json(dir / "sub/c.json"));
    EXPECT_EQ(*c.train, (dir / "sub" / "data" / "train.jsonl").lexically_normal());
    EXPECT_EQ(*c.test, fs::path("/abs/test.jsonl"));
    EXPECT_EQ(c.k, 4u);
    EXPECT_EQ(c.generation.model_name, "m");
    EXPECT_THROW(c.check_files(), ConfigError);
}

TEST(Config, JsonRoundTrip) {
    auto c = synthetic_config("/tmp/x");
    auto back = RunConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(Generations, RecordRoundTrip) {
    GenerationRecord r;
    r.id = "te1";
    r.strategy = Strategy::few_shot_layperson;
    r.k = 8;
    r.modality = Modality::image;
    r.modality_used = Modality::text;
    r.demos_used = 3;
    r.demos_dropped = 5;
    r.prompt_tokens = 99;
    r.demo_ids = {"a", "b", "c"};
    r.raw = "Layperson Summary: x\nIMPRESSION: y";
    r.layperson = "x";
    r.impression = "y";
    r.parse_status = "clean";
    TempDir dir;
    GenerationRecord bad = r;
    bad.id = "te2";
    bad.error = "boom";
    bad.parse_status = "error";
    dir.write("g.jsonl", serialize_generations({r, bad}));
    auto back = load_generations(dir / "g.jsonl");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].to_json(), r.to_json());
    EXPECT_EQ(back[1].to_json(), bad.to_json());
    EXPECT_FALSE(back[1].ok());
    EXPECT_EQ(back[1].to_json()["status"], "error");
}

TEST(Annotate, SyntheticReplay) {
    TempDir dir;
    auto config = synthetic_config(dir.path());
    auto client = make_client(config);
    auto r = cmd_annotate_layperson(config, *client);
    EXPECT_EQ(r.attempted, 200u);
    EXPECT_EQ(r.annotated, 200u);
    EXPECT_TRUE(r.failures.empty());
    EXPECT_FALSE(r.failed);
    EXPECT_EQ(r.network_calls, 0u);
    EXPECT_EQ(r.output, dir / "train.annotated.jsonl");
    auto annotated = load_corpus(r.output);
    for (const auto& rep : annotated.reports()) {
        ASSERT_TRUE(rep.layperson) << rep.id;
        EXPECT_FALSE(rep.layperson->empty());
    }

    // Already-annotated reports are skipped.
    config.train = r.output;
    config.annotated_train = dir / "again.jsonl";
    auto again = cmd_annotate_layperson(config, *client);
    EXPECT_EQ(again.attempted, 0u);
    EXPECT_EQ(io::read_file(dir / "again.jsonl"), io::read_file(r.output));
}

TEST(Annotate, MissingTranscriptEntryIsOneFailure) {
    TempDir dir;
    auto config = synthetic_config(dir.path());
    Workspace ws = load_workspace(config, {.train = true});
    const Report& victim = ws.train->at("tr0042");
    auto prompt = build_layperson_gen_prompt(victim, victim.labels);
    std::string key = cache_key(prompt.text, config.generation);

    std::string kept;
    std::size_t removed = 0;
    for (const auto& line : read_lines(*config.replay)) {
        if (nlohmann::json::parse(line)["key"] == key) {
            ++removed;
            continue;
        }
        kept += line + "\n";
    }
    ASSERT_EQ(removed, 1u);
    config.replay = dir.write("transcript.jsonl", kept);

    auto client = make_client(config);
    auto r = cmd_annotate_layperson(config, *client);
    EXPECT_EQ(r.annotated, 199u);
    ASSERT_EQ(r.failures.size(), 1u);
    EXPECT_EQ(r.failures.begin()->first, "tr0042");
    EXPECT_FALSE(r.failed);
    EXPECT_FALSE(load_corpus(r.output).at("tr0042").layperson);

    config.failure_threshold = 0.0;
    EXPECT_TRUE(cmd_annotate_layperson(config, *client).failed);
}

TEST(Run, ZeroShotUsesNoDemos) {
    TempDir dir;
    auto config = synthetic_config(dir.path());
    config.strategy = Strategy::zero_shot;
    auto client = make_client(config);
    auto r = cmd_run(config, *client);
    ASSERT_EQ(r.records.size(), 20u);
    EXPECT_EQ(r.failures, 0u);
    for (std::size_t i = 0; i < r.records.size(); ++i) {
        EXPECT_EQ(r.records[i].demos_used, 0u);
        EXPECT_EQ(r.records[i].k, 0u);
        EXPECT_TRUE(r.records[i].demo_ids.empty());
        EXPECT_EQ(r.records[i].parse_status, "clean");
        EXPECT_EQ(r.prompts[i].prompt->text.substr(r.prompts[i].prompt->text.size() - 11), "IMPRESSION:");
    }
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
    EXPECT_TRUE(fs::exists(dir / "generations.jsonl"));
    auto manifest = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
    EXPECT_EQ(manifest["point"]["strategy"], "zero_shot");
    EXPECT_TRUE(manifest.contains("templates_digest"));
}

TEST(Run, LaypersonWithoutAnnotationRecordsErrors) {
    TempDir dir;
    auto config = synthetic_config(dir.path());
    auto client = make_client(config);
    auto r = cmd_run(config, *client);
    EXPECT_EQ(r.failures, 20u);
    for (const auto& rec : r.records) {
        ASSERT_TRUE(rec.error);
        EXPECT_NE(rec.error->find("layperson"), std::string::npos);
        EXPECT_EQ(rec.parse_status, "error");
    }
}

TEST(Run, MissingStoreFailsBeforeGeneration) {
    TempDir dir;
    auto config = synthetic_config(dir.path());
    config.stores.erase(Modality::multimodal);
    config.strategy = Strategy::few_shot;
    auto client = make_client(config);
    EXPECT_THROW(cmd_run(config, *client), ConfigError);
    EXPECT_FALSE(fs::exists(dir / "generations.jsonl"));
}

TEST(Eval, IdentityGenerationsScoreMaximum) {
    TempDir dir;
    auto config = synthetic_config(dir.path());
    Corpus test = load_corpus(*config.test, Split::test);
    std::vector<GenerationRecord> records;
    for (const auto& rep : test.reports()) {
        GenerationRecord g;
        g.id = rep.id;
        g.strategy = Strategy::few_shot;
        g.impression = rep.impression;
        g.parse_status = "clean";
        records.push_back(g);
    }
    MockTokenEmbedder emb;
    EvalInputs in{&test, nullptr, nullptr, &emb};
    auto r = evaluate(records, in, config);
    EXPECT_NEAR(r.overall.bleu4, 100.0, 1e-9);
    EXPECT_NEAR(r.overall.rouge_l, 1.0, 1e-12);
    EXPECT_NEAR(r.overall.bertscore, 1.0, 1e-6);
    EXPECT_FALSE(r.overall.f1_radgraph);
    ASSERT_EQ(r.buckets.size(), 3u);
    EXPECT_EQ(r.buckets[0].n + r.buckets[1].n + r.buckets[2].n, 20u);

    // Reference sidecars scored against themselves.
    auto labels = load_labels(*config.labels);
    auto entities = load_entities(*config.entities);
    Corpus with = detail::attach(detail::attach(std::move(test), labels, &Report::labels).corpus, entities, &Report::entities).corpus;
    EvalInputs full{&with, &labels, &entities, &emb};
    auto f = evaluate(records, full, config);
    EXPECT_DOUBLE_EQ(*f.overall.f1_chexbert, 1.0);
    EXPECT_DOUBLE_EQ(*f.overall.f1_radgraph, 1.0);
}

TEST(Eval, BadInputsAreFatal) {
    TempDir dir;
    auto config = synthetic_config(dir.path());
    dir.write("generations.jsonl", "");
    EXPECT_THROW(cmd_eval(config), ValidationError);

    GenerationRecord g;
    g.id = "nope";
    g.parse_status = "clean";
    dir.write("generations.jsonl", serialize_generations({g}));
    EXPECT_THROW(cmd_eval(config), ValidationError);

    config.generations = dir / "absent.jsonl";
    EXPECT_THROW(cmd_eval(config), ConfigError);
}

TEST(Eval, ErrorRecordsAreSkipped) {
    TempDir dir;
    auto config = synthetic_config(dir.path());
    Corpus test = load_corpus(*config.test, Split::test);
    std::vector<GenerationRecord> records;
    for (const auto& rep : test.reports()) {
        GenerationRecord g;
        g.id = rep.id;
        g.impression = rep.impression;
        g.parse_status = "clean";
        if (records.size() < 2) g.error = "failed";
        records.push_back(g);
    }
    dir.write("generations.jsonl", serialize_generations(records));
    auto r = cmd_eval(config);
    EXPECT_EQ(r.skipped, 2u);
    EXPECT_EQ(r.rows.size(), 18u);
    for (const char* f : {"metrics.json", "scores.jsonl", "buckets.csv", "report.md", "plots/buckets.svg"}) {
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    }
    auto m = nlohmann::json::parse(io::read_file(dir / "metrics.json"));
    EXPECT_EQ(m["n_skipped"], 2);
    EXPECT_EQ(m["settings"]["bleu_mode"], "corpus");
    EXPECT_NE(io::read_file(dir / "report.md").find("| Strategy |"), std::string::npos);
}

TEST(Sweep, CsvRoundTrip) {
    std::vector<SweepRow> rows = {{"few_shot", "text", 2, 20, 0, 2.0, 0.5, std::nullopt},
                                  {"zero_shot", "image", 32, 20, 1, 0.0, std::nullopt, 0.25}};
    std::string csv = sweep_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), kSweepHeader);
    EXPECT_EQ(parse_sweep_csv(csv), rows);
    EXPECT_THROW(parse_sweep_csv("bad header\n"), ParseError);
    EXPECT_THROW(parse_sweep_csv(std::string(kSweepHeader) + "\na,b,1\n"), ParseError);
}

TEST(Sweep, SmallGrid) {
    TempDir dir;
    auto config = synthetic_config(dir.path());
    {
        auto client = make_client(config);
        auto a = cmd_annotate_layperson(config, *client);
        config.train = a.output;
    }
    config.sweep_ks = {2, 8};
    config.sweep_modalities = {Modality::text, Modality::multimodal};
    config.sweep_strategies = {Strategy::few_shot};
    auto client = make_client(config);
    auto r = cmd_sweep(config, *client);
    ASSERT_EQ(r.rows.size(), 4u);
    for (const auto& row : r.rows) {
        EXPECT_EQ(row.n, 20u);
        EXPECT_EQ(row.failures, 0u);
        EXPECT_DOUBLE_EQ(row.demos_used_mean, static_cast<double>(row.k));
        EXPECT_TRUE(row.rouge_l);
    }
    EXPECT_EQ(parse_sweep_csv(io::read_file(r.csv_path)), r.rows);
    EXPECT_TRUE(fs::exists(dir / "plots" / "sweep_few_shot_rouge_l.svg"));
    EXPECT_TRUE(fs::exists(dir / "sweep" / "few_shot-text-k2" / "generations.jsonl"));
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
}

TEST(ParallelFor, CoversEveryIndexOnce) {
    std::vector<std::atomic<int>> hits(1000);
    parallel_for(hits.size(), 7, [&](std::size_t i) { ++hits[i]; });
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
    parallel_for(0, 4, [&](std::size_t) { FAIL(); });
}

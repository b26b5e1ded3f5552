// SPDX-License-Identifier: Apache-2.0
#include "laysum/promptkit.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace laysum;
using laysum::testing::TempDir;
using laysum::testing::random_words;

namespace {

Report test_report(std::string findings = "Heart size is normal. Lungs are clear.") {
    Report r;
    r.id = "t1";
    r.split = Split::test;
    r.findings = std::move(findings);
    r.impression = "No acute process.";
    return r;
}

Demonstration demo(const std::string& id, double score, std::string findings = "", std::string impression = "") {
    Demonstration d;
    d.id = id;
    d.findings = findings.empty() ? "findings " + id : findings;
    d.impression = impression.empty() ? "impression " + id : impression;
    d.layperson = "plain words " + id;
    d.score = score;
    d.labels = LabelVector().set("Edema", ObservationState::positive);
    return d;
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::size_t occurrences(const std::string& s, std::string_view needle) {
    std::size_t n = 0;
    for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
    return n;
}

} // namespace

TEST(KeyObservations, OnlyNoFinding) {
    LabelVector l;
    l.set("No Finding", ObservationState::positive);
    auto p = build_layperson_gen_prompt(test_report(), l);
    EXPECT_NE(p.text.find("\nKey observations: No Finding\n"), std::string::npos) << p.text;
}

TEST(KeyObservations, UncertainSuffix) {
    LabelVector l;
    l.set("Pneumonia", ObservationState::positive).set("Edema", ObservationState::uncertain);
    auto p = build_layperson_gen_prompt(test_report(), l);
    // Fixed observation order puts Edema before Pneumonia.
    EXPECT_NE(p.text.find("Key observations: Edema (uncertain), Pneumonia\n"), std::string::npos) << p.text;
    EXPECT_EQ(key_observations(LabelVector().set("Edema", ObservationState::negative)), "none");
}

TEST(LaypersonGen, LayoutAndErrors) {
    LabelVector l;
    l.set("Cardiomegaly", ObservationState::positive);
    Report r = test_report();
    auto p = build_layperson_gen_prompt(r, l);
    EXPECT_TRUE(ends_with(p.text, "Layperson Summary:"));
    auto f = p.text.find(r.findings), i = p.text.find(r.impression), k = p.text.find("Key observations:");
    ASSERT_NE(f, std::string::npos);
    EXPECT_LT(f, i);
    EXPECT_LT(i, k);
    EXPECT_EQ(p.strategy, Strategy::layperson_gen);
    EXPECT_THROW(build_layperson_gen_prompt(r, std::nullopt), ValidationError);
    r.impression.clear();
    EXPECT_THROW(build_layperson_gen_prompt(r, l), ValidationError);
}

TEST(ZeroShot, VerbatimInstructionAndCue) {
    WhitespaceTokenizer w;
    auto p = build_zero_shot(test_report(), kDefaultBudget, w);
    EXPECT_EQ(p.text.rfind("You are an expert chest radiologist. Your task is to summarize the radiology report findings "
                           "into an impression with minimal text",
                           0),
              0u);
    EXPECT_TRUE(ends_with(p.text, "IMPRESSION:"));
    EXPECT_EQ(occurrences(p.text, "FINDINGS:"), 1u);
    EXPECT_EQ(p.demos_used, 0u);
    EXPECT_EQ(p.token_count, w.count(p.text));
}

TEST(ZeroShot, OverBudget) {
    WhitespaceTokenizer w;
    std::mt19937_64 rng(1);
    Report r = test_report(random_words(rng, 10000));
    try {
        build_zero_shot(r, kDefaultBudget, w);
        FAIL() << "expected OverBudgetError";
    } catch (const OverBudgetError& e) {
        EXPECT_GT(e.needed(), kDefaultBudget);
        EXPECT_EQ(e.budget(), kDefaultBudget);
    }
}

TEST(FewShot, HandCountedBudgetExample) {
    TempDir dir;
    auto path = dir.write("t.json", R"({"instruction.few_shot": "one two three four five six seven eight nine ten"})");
    auto templates = PromptTemplates::load(path);
    std::mt19937_64 rng(2);
    std::vector<Demonstration> demos;
    for (int i = 0; i < 6; ++i) demos.push_back(demo("d" + std::to_string(i), 1.0 - 0.1 * i, random_words(rng, 14), random_words(rng, 14)));
    Report r = test_report(random_words(rng, 19));
    WhitespaceTokenizer w;
    ASSERT_EQ(w.count(render_demo(demos[0], FewShotVariant::plain)), 30u);
    auto p = build_few_shot(r, demos, 100, w, FewShotVariant::plain, std::nullopt, templates);
    EXPECT_EQ(p.demos_used, 2u);
    EXPECT_EQ(p.demos_dropped, 4u);
    EXPECT_EQ(p.token_count, 91u);
    EXPECT_LE(p.token_count, 100u);
    EXPECT_EQ(p.demo_ids, (std::vector<std::string>{"d0", "d1"}));
}

TEST(FewShot, Saturation) {
    std::vector<Demonstration> demos;
    for (int i = 0; i < 32; ++i) demos.push_back(demo("d" + std::to_string(i), 1.0 - 0.01 * i));
    auto p = build_few_shot(test_report(), demos, 1000000, WhitespaceTokenizer(), FewShotVariant::layperson);
    EXPECT_EQ(p.demos_used, 32u);
    EXPECT_EQ(p.demos_dropped, 0u);
    EXPECT_TRUE(ends_with(p.text, "Layperson Summary:"));
    EXPECT_EQ(p.strategy, Strategy::few_shot_layperson);
}

TEST(FewShot, LeastSimilarFirstMostSimilarLast) {
    std::vector<Demonstration> demos = {demo("best", 0.9), demo("mid", 0.5), demo("worst", 0.1)};
    Report r = test_report();
    auto p = build_few_shot(r, demos, 100000, WhitespaceTokenizer(), FewShotVariant::plain);
    auto worst = p.text.find("findings worst"), mid = p.text.find("findings mid"), best = p.text.find("findings best");
    auto test = p.text.find(r.findings);
    EXPECT_LT(worst, mid);
    EXPECT_LT(mid, best);
    EXPECT_LT(best, test);
    EXPECT_TRUE(ends_with(p.text, "\n\nIMPRESSION:"));
}

TEST(FewShot, DemoBlockShapes) {
    Demonstration d = demo("x", 1.0);
    EXPECT_EQ(render_demo(d, FewShotVariant::plain), "FINDINGS: findings x\nIMPRESSION: impression x");
    EXPECT_EQ(render_demo(d, FewShotVariant::layperson),
              "FINDINGS: findings x\nLayperson Summary: plain words x\nIMPRESSION: impression x");
    EXPECT_EQ(render_demo(d, FewShotVariant::chexbert), "FINDINGS: findings x\nKey observations: Edema\nIMPRESSION: impression x");
}

TEST(FewShot, ChexbertInjectsKeywords) {
    std::vector<Demonstration> demos = {demo("a", 0.9)};
    LabelVector test_labels;
    test_labels.set("Pleural Effusion", ObservationState::positive);
    auto p = build_few_shot(test_report(), demos, 100000, WhitespaceTokenizer(), FewShotVariant::chexbert, test_labels);
    EXPECT_NE(p.text.find("Lungs are clear.\nKey observations: Pleural Effusion\n\nIMPRESSION:"), std::string::npos) << p.text;
    demos[0].labels.reset();
    EXPECT_THROW(build_few_shot(test_report(), demos, 100000, WhitespaceTokenizer(), FewShotVariant::chexbert), ValidationError);
}

TEST(FewShot, MissingLaypersonNamesDemo) {
    std::vector<Demonstration> demos = {demo("ok", 0.9), demo("bad7", 0.5)};
    demos[1].layperson.reset();
    try {
        build_few_shot(test_report(), demos, 100000, WhitespaceTokenizer(), FewShotVariant::layperson);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("bad7"), std::string::npos);
    }
    EXPECT_NO_THROW(build_few_shot(test_report(), demos, 100000, WhitespaceTokenizer(), FewShotVariant::plain));
}

TEST(FewShot, BareBudgetTooSmall) {
    std::vector<Demonstration> demos = {demo("a", 0.9)};
    EXPECT_THROW(build_few_shot(test_report(), demos, 5, WhitespaceTokenizer(), FewShotVariant::plain), OverBudgetError);
}

TEST(FewShot, RandomizedBudgetSafety) {
    std::mt19937_64 rng(3);
    WhitespaceTokenizer w;
    for (int t = 0; t < 1000; ++t) {
        std::size_t n = rng() % 20;
        std::vector<Demonstration> demos;
        std::vector<std::size_t> costs;
        for (std::size_t i = 0; i < n; ++i) {
            demos.push_back(demo("d" + std::to_string(i), 1.0 - 0.01 * static_cast<double>(i), random_words(rng, 1 + rng() % 40),
                                 random_words(rng, 1 + rng() % 10)));
            costs.push_back(oracle::whitespace_tokens(render_demo(demos.back(), FewShotVariant::layperson)));
        }
        Report r = test_report(random_words(rng, 1 + rng() % 60));
        std::size_t budget = rng() % 600;
        std::string bare = PromptTemplates::defaults().get("instruction.few_shot_layperson") + " " + r.findings +
                           " FINDINGS: Layperson Summary:";
        long want = oracle::expected_demos_kept(oracle::whitespace_tokens(bare), costs, budget);
        if (want < 0) {
            EXPECT_THROW(build_few_shot(r, demos, budget, w, FewShotVariant::layperson), OverBudgetError);
            continue;
        }
        auto p = build_few_shot(r, demos, budget, w, FewShotVariant::layperson);
        EXPECT_LE(p.token_count, budget);
        EXPECT_EQ(p.demos_used, static_cast<std::size_t>(want));
        EXPECT_EQ(p.demos_used + p.demos_dropped, n);
        for (std::size_t i = 0; i < p.demos_used; ++i) EXPECT_EQ(p.demo_ids[i], demos[i].id);
    }
}

TEST(ParseResponse, LaypersonClean) {
    auto p = parse_response("Layperson Summary: X\nIMPRESSION: Y", Strategy::few_shot_layperson);
    EXPECT_EQ(p, (ParsedResponse{"X", "Y", ParseStatus::clean}));
    auto q = parse_response("  the heart is big\n  impression:  Cardiomegaly.  ", Strategy::few_shot_layperson);
    EXPECT_EQ(q, (ParsedResponse{"the heart is big", "Cardiomegaly.", ParseStatus::clean}));
}

TEST(ParseResponse, PlainFewShotPassthrough) {
    auto p = parse_response("No acute thoracic pathology.", Strategy::few_shot);
    EXPECT_EQ(p, (ParsedResponse{"", "No acute thoracic pathology.", ParseStatus::clean}));
    auto q = parse_response(" IMPRESSION: No acute thoracic pathology.", Strategy::zero_shot);
    EXPECT_EQ(q.impression, "No acute thoracic pathology.");
}

TEST(ParseResponse, NoMarkerFallback) {
    auto p = parse_response("fluid in the lungs, all fine", Strategy::few_shot_layperson);
    EXPECT_EQ(p, (ParsedResponse{"", "fluid in the lungs, all fine", ParseStatus::fallback_no_marker}));
}

TEST(ParseResponse, RamblingCut) {
    auto p = parse_response("easy words\nIMPRESSION: Edema.\n\nFINDINGS: more text\nIMPRESSION: more",
                            Strategy::few_shot_layperson);
    EXPECT_EQ(p, (ParsedResponse{"easy words", "Edema.", ParseStatus::fallback_rambling}));
    auto q = parse_response("Edema.\nfindings: next", Strategy::few_shot_chexbert);
    EXPECT_EQ(q, (ParsedResponse{"", "Edema.", ParseStatus::fallback_rambling}));
}

TEST(ParseResponse, RenderParseDuality) {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 500; ++t) {
        Demonstration d = demo("d", 1.0, random_words(rng, 1 + rng() % 20), random_words(rng, 1 + rng() % 10));
        d.layperson = random_words(rng, 1 + rng() % 12);
        auto p = parse_response(render_demo(d, FewShotVariant::layperson), Strategy::few_shot_layperson);
        EXPECT_EQ(p.layperson, *d.layperson);
        EXPECT_EQ(p.impression, d.impression);
        EXPECT_EQ(p.status, ParseStatus::clean);
    }
}

TEST(Templates, LoadOverridesAndRejectsUnknownKeys) {
    TempDir dir;
    auto t = PromptTemplates::load(dir.write("t.json", R"({"cue.impression": "SUMMARY:"})"));
    EXPECT_EQ(t.get("cue.impression"), "SUMMARY:");
    EXPECT_EQ(t.get("demo.plain"), PromptTemplates::defaults().get("demo.plain"));
    EXPECT_NE(t.canonical(), PromptTemplates::defaults().canonical());
    EXPECT_THROW(PromptTemplates::load(dir.write("u.json", R"({"cue.other": "x"})")), ValidationError);
    EXPECT_THROW(PromptTemplates::load(dir.write("v.json", R"([1])")), ParseError);
}

TEST(Templates, ShippedFileMatchesDefaults) {
    auto shipped = PromptTemplates::load(std::string(LAYSUM_SOURCE_DIR) + "/templates/default.json");
    EXPECT_EQ(shipped.entries(), PromptTemplates::defaults().entries());
}

TEST(Templates, Budgets) {
    EXPECT_EQ(kDefaultBudget, 7800u);
    EXPECT_EQ(kBudgetPreset3800, 3800u);
    EXPECT_EQ(kBudgetPreset1700, 1700u);
    EXPECT_EQ(kDefaultMaxNewTokens, 256u);
}

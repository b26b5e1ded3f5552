// SPDX-License-Identifier: Apache-2.0
#include "laysum/corpus.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace laysum;
using laysum::testing::TempDir;

namespace {

std::string line(const std::string& id, const std::string& split, const std::string& findings = "Lungs are clear.",
                 const std::string& impression = "Normal.") {
    nlohmann::json j{{"id", id}, {"split", split}, {"findings", findings}, {"impression", impression},
                     {"image_ids", nlohmann::json::array({id + "_a"})}};
    return j.dump() + "\n";
}

std::string labels_line(const std::string& id, std::size_t n, const std::string& state = "blank") {
    nlohmann::json states = nlohmann::json::array();
    for (std::size_t i = 0; i < n; ++i) states.push_back(state);
    return nlohmann::json{{"id", id}, {"states", states}}.dump() + "\n";
}

Corpus three(const TempDir& dir) {
    return load_corpus(dir.write("c.jsonl", line("r1", "train") + line("r2", "train") + line("r3", "test")));
}

} // namespace

TEST(LoadCorpus, ThreeValidLines) {
    TempDir dir;
    Corpus c = three(dir);
    EXPECT_EQ(c.size(), 3u);
    std::size_t total = 0;
    for (const auto& [split, ids] : c.split_index()) total += ids.size();
    EXPECT_EQ(total, 3u);
    EXPECT_EQ(c.split_ids(Split::train).size(), 2u);
    EXPECT_EQ(c.split_ids(Split::test), std::vector<std::string>{"r3"});
    EXPECT_TRUE(c.split_ids(Split::validation).empty());
    EXPECT_EQ(c.at("r1").image_ids, std::vector<std::string>{"r1_a"});
}

TEST(LoadCorpus, DuplicateIdNamesIdAndLine) {
    TempDir dir;
    auto p = dir.write("c.jsonl", line("r0", "train") + line("r1", "train") + line("r2", "train") + line("r3", "train") +
                                      line("r1", "train"));
    try {
        load_corpus(p);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("'r1'"), std::string::npos) << msg;
        EXPECT_NE(msg.find("line 5"), std::string::npos) << msg;
    }
}

TEST(LoadCorpus, MalformedLineCarriesLineNumber) {
    TempDir dir;
    auto p = dir.write("c.jsonl", line("r1", "train") + "{not json\n");
    try {
        load_corpus(p);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
    }
}

TEST(LoadCorpus, EmptyFindingsRejected) {
    TempDir dir;
    EXPECT_THROW(load_corpus(dir.write("c.jsonl", line("r1", "train", ""))), ValidationError);
}

TEST(LoadCorpus, UnknownSplitRejected) {
    TempDir dir;
    try {
        load_corpus(dir.write("c.jsonl", line("r1", "dev")));
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("'dev'"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
    }
}

TEST(LoadCorpus, ExpectedSplitEnforced) {
    TempDir dir;
    auto p = dir.write("c.jsonl", line("r1", "train") + line("r2", "test"));
    EXPECT_THROW(load_corpus(p, Split::train), ValidationError);
    EXPECT_NO_THROW(load_corpus(p));
}

TEST(LoadCorpus, MissingFieldRejected) {
    TempDir dir;
    EXPECT_THROW(load_corpus(dir.write("c.jsonl", R"({"id":"r1","split":"train"})" "\n")), ParseError);
}

TEST(LoadCorpus, KeyOrderAndBlankLinesIgnored) {
    TempDir dir;
    auto p = dir.write("c.jsonl", "\n" R"({"findings":"F.","image_ids":[],"split":"validation","impression":"I.","id":"v"})"
                                  "\n\n");
    Corpus c = load_corpus(p);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c.at("v").split, Split::validation);
    EXPECT_FALSE(c.at("v").layperson);
}

TEST(AttachLabels, SetsReferencedReportsOnly) {
    TempDir dir;
    Corpus c = three(dir);
    auto r = attach_labels(c, dir.write("l.jsonl", labels_line("r1", 14, "positive")));
    EXPECT_TRUE(r.warnings.empty());
    ASSERT_TRUE(r.corpus.at("r1").labels);
    EXPECT_EQ(r.corpus.at("r1").labels->state("Edema"), ObservationState::positive);
    EXPECT_FALSE(r.corpus.at("r2").labels);
    EXPECT_FALSE(r.corpus.at("r3").labels);
}

TEST(AttachLabels, WrongArityNamesId) {
    TempDir dir;
    Corpus c = three(dir);
    try {
        attach_labels(c, dir.write("l.jsonl", labels_line("r2", 13)));
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("'r2'"), std::string::npos) << e.what();
    }
}

TEST(AttachLabels, UnknownIdIsWarning) {
    TempDir dir;
    Corpus c = three(dir);
    auto r = attach_labels(c, dir.write("l.jsonl", labels_line("r1", 14) + labels_line("zz", 14)));
    EXPECT_TRUE(r.corpus.at("r1").labels);
    EXPECT_EQ(r.warnings, std::vector<std::string>{"zz"});
}

TEST(AttachLabels, InvalidStateRejected) {
    TempDir dir;
    Corpus c = three(dir);
    EXPECT_THROW(attach_labels(c, dir.write("l.jsonl", labels_line("r1", 14, "maybe"))), ValidationError);
}

TEST(AttachLabels, Idempotent) {
    TempDir dir;
    Corpus c = three(dir);
    auto path = dir.write("l.jsonl", labels_line("r1", 14, "uncertain") + labels_line("r3", 14, "negative"));
    auto once = attach_labels(c, path).corpus;
    auto twice = attach_labels(once, path).corpus;
    EXPECT_EQ(once.reports(), twice.reports());
}

TEST(AttachLabels, SerializeRoundTrip) {
    TempDir dir;
    std::map<std::string, LabelVector> labels;
    labels["a"].set("Pneumonia", ObservationState::positive).set("Edema", ObservationState::uncertain);
    labels["b"].set("No Finding", ObservationState::negative);
    write_labels(labels, dir / "l.jsonl");
    EXPECT_EQ(load_labels(dir / "l.jsonl"), labels);
}

TEST(Observations, FixedCheXpertOrder) {
    EXPECT_EQ(kObservations.size(), 14u);
    EXPECT_EQ(kObservations.front(), "No Finding");
    EXPECT_EQ(kObservations[2], "Cardiomegaly");
    EXPECT_EQ(kObservations.back(), "Support Devices");
    LabelVector v;
    EXPECT_THROW(v.set("Flu", ObservationState::positive), ValidationError);
}

TEST(AttachEntities, OneEntity) {
    TempDir dir;
    Corpus c = three(dir);
    auto r = attach_entities(
        c, dir.write("e.jsonl", R"({"id":"r1","entities":[{"text":"opacity","label":"OBS-DP"}],"relations":[]})" "\n"));
    ASSERT_TRUE(r.corpus.at("r1").entities);
    ASSERT_EQ(r.corpus.at("r1").entities->entities.size(), 1u);
    EXPECT_EQ(r.corpus.at("r1").entities->entities[0].label, EntityLabel::obs_dp);
    EXPECT_FALSE(r.corpus.at("r2").entities);
}

TEST(AttachEntities, RelationOutOfRange) {
    TempDir dir;
    Corpus c = three(dir);
    auto p = dir.write("e.jsonl", R"({"id":"r1","entities":[{"text":"a","label":"OBS-DP"},{"text":"b","label":"ANAT-DP"}],)"
                                  R"("relations":[[0,5,"located_at"]]})" "\n");
    EXPECT_THROW(attach_entities(c, p), ValidationError);
}

TEST(AttachEntities, EmptyEntityListIsValid) {
    TempDir dir;
    Corpus c = three(dir);
    auto r = attach_entities(c, dir.write("e.jsonl", R"({"id":"r2","entities":[],"relations":[]})" "\n"));
    ASSERT_TRUE(r.corpus.at("r2").entities);
    EXPECT_TRUE(r.corpus.at("r2").entities->entities.empty());
}

TEST(AttachEntities, BadLabelAndRelationShape) {
    TempDir dir;
    Corpus c = three(dir);
    EXPECT_THROW(attach_entities(c, dir.write("e1.jsonl", R"({"id":"r1","entities":[{"text":"a","label":"OBS"}]})" "\n")),
                 ValidationError);
    EXPECT_THROW(attach_entities(c, dir.write("e2.jsonl", R"({"id":"r1","entities":[{"text":"a","label":"OBS-DP"}],)"
                                                          R"("relations":[[0,0]]})" "\n")),
                 ParseError);
}

TEST(AttachEntities, SerializeRoundTrip) {
    TempDir dir;
    std::map<std::string, EntityGraph> g;
    g["x"].entities = {{"Lung", EntityLabel::anat_dp}, {"opacity", EntityLabel::obs_u}};
    g["x"].relations = {{1, 0, "located_at"}};
    g["y"];
    write_entities(g, dir / "e.jsonl");
    EXPECT_EQ(load_entities(dir / "e.jsonl"), g);
}

TEST(StoreLayperson, SetWriteLoadIdentical) {
    TempDir dir;
    Corpus c = store_layperson(three(dir), "r2", "Your lungs look healthy.");
    write_corpus(c, dir / "out.jsonl");
    Corpus back = load_corpus(dir / "out.jsonl");
    EXPECT_EQ(back, c);
    EXPECT_EQ(back.at("r2").layperson, "Your lungs look healthy.");
}

TEST(StoreLayperson, UnknownIdRejected) {
    TempDir dir;
    EXPECT_THROW(store_layperson(three(dir), "qq", "text"), ValidationError);
}

TEST(StoreLayperson, EmptyTextRejected) {
    TempDir dir;
    EXPECT_THROW(store_layperson(three(dir), "r1", ""), ValidationError);
}

TEST(StoreLayperson, OverwriteReflectedOnReload) {
    TempDir dir;
    Corpus c = store_layperson(three(dir), "r1", "first");
    c = store_layperson(std::move(c), "r1", "second");
    write_corpus(c, dir / "out.jsonl");
    EXPECT_EQ(load_corpus(dir / "out.jsonl").at("r1").layperson, "second");
}

TEST(CorpusProperty, RandomizedRoundTripAndPartition) {
    std::mt19937_64 rng(7);
    const char* splits[] = {"train", "validation", "test"};
    for (int trial = 0; trial < 50; ++trial) {
        TempDir dir;
        std::vector<Report> reports;
        std::size_t n = 1 + rng() % 40;
        for (std::size_t i = 0; i < n; ++i) {
            Report r;
            r.id = "id" + std::to_string(i) + laysum::testing::random_word(rng);
            r.split = *parse_split(splits[rng() % 3]);
            r.findings = laysum::testing::random_words(rng, 1 + rng() % 20) + " \"quoted\" é中\t\\";
            r.impression = rng() % 5 ? laysum::testing::random_words(rng, rng() % 6) : std::string();
            for (std::size_t k = rng() % 4; k > 0; --k) r.image_ids.push_back(laysum::testing::random_word(rng));
            if (rng() % 2) r.layperson = laysum::testing::random_words(rng, 1 + rng() % 5) + "\n";
            reports.push_back(std::move(r));
        }
        Corpus c(std::move(reports));
        write_corpus(c, dir / "c.jsonl");
        Corpus back = load_corpus(dir / "c.jsonl");
        ASSERT_EQ(back, c);

        std::set<std::string> seen;
        std::size_t total = 0;
        for (const auto& [split, ids] : back.split_index()) {
            for (const auto& id : ids) {
                EXPECT_EQ(back.at(id).split, split);
                EXPECT_TRUE(seen.insert(id).second) << "id in two buckets: " << id;
            }
            total += ids.size();
        }
        EXPECT_EQ(total, back.size());
    }
}

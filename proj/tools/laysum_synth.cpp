// SPDX-License-Identifier: Apache-2.0
// Builds the bundled synthetic corpus: reports, label/entity sidecars, the
// three embedding stores and a replay transcript recorded against a
// deterministic in-process responder.
//
//   laysum_synth <out-dir> [--seed N]

#include "laysum/laysum.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <random>

namespace {

using namespace laysum;

constexpr std::size_t kStoreDim = 32;

struct Finding {
    const char* observation;  // CheXpert name
    const char* findings;     // sentence for the findings section, %s = side
    const char* impression;   // impression phrase, %s = side
    const char* layperson;    // plain-language phrase
};

const std::vector<Finding>& catalogue() {
    static const std::vector<Finding> c = {
        {"Cardiomegaly", "The cardiac silhouette is enlarged.", "Cardiomegaly.", "The heart looks bigger than normal."},
        {"Pleural Effusion", "There is a small %s pleural effusion with blunting of the costophrenic angle.",
         "Small %s pleural effusion.", "There is a little fluid around the %s lung."},
        {"Edema", "Diffuse interstitial markings and vascular congestion are present.", "Mild pulmonary edema.",
         "There is some extra fluid in the lungs."},
        {"Pneumonia", "Focal airspace consolidation is seen in the %s lower lobe.", "%s lower lobe pneumonia.",
         "There are signs of a lung infection on the %s side."},
        {"Atelectasis", "Linear opacity at the %s lung base.", "%s basilar atelectasis.",
         "A small part of the %s lung is not fully inflated."},
        {"Pneumothorax", "A thin pleural line is visible at the %s apex.", "Small %s apical pneumothorax.",
         "There is a small pocket of air outside the %s lung."},
        {"Support Devices", "An endotracheal tube terminates 4 cm above the carina.", "Endotracheal tube in standard position.",
         "A breathing tube is in the correct place."},
        {"Lung Lesion", "A 9 mm rounded density projects over the %s upper lung.", "%s upper lobe nodule.",
         "There is a small spot on the %s lung that needs follow-up."},
        {"Fracture", "There is a healed fracture of the %s posterior rib.", "Old %s rib fracture.",
         "A rib on the %s side was broken in the past and has healed."},
        {"Enlarged Cardiomediastinum", "The mediastinum appears widened.", "Widened mediastinum.",
         "The middle of the chest looks wider than usual."},
    };
    return c;
}

struct LexEntry {
    const char* keyword;
    const char* observation;
    const char* anatomy; // may be null
};

// Keyword labeler for impressions: stands in for the external labelers.
const std::vector<LexEntry>& lexicon() {
    static const std::vector<LexEntry> l = {
        {"cardiomegaly", "Cardiomegaly", "heart"},
        {"effusion", "Pleural Effusion", "pleural"},
        {"edema", "Edema", "pulmonary"},
        {"pneumonia", "Pneumonia", "lobe"},
        {"atelectasis", "Atelectasis", "basilar"},
        {"pneumothorax", "Pneumothorax", "apical"},
        {"tube", "Support Devices", nullptr},
        {"nodule", "Lung Lesion", "lobe"},
        {"fracture", "Fracture", "rib"},
        {"mediastinum", "Enlarged Cardiomediastinum", "mediastinum"},
    };
    return l;
}

std::string lower(std::string_view s) {
    std::string o(s);
    for (auto& c : o)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return o;
}

std::pair<LabelVector, EntityGraph> label_impression(std::string_view impression) {
    LabelVector lv;
    EntityGraph g;
    std::string text = lower(impression);
    bool any = false;
    for (const auto& e : lexicon()) {
        auto pos = text.find(e.keyword);
        if (pos == std::string::npos) continue;
        any = true;
        auto sentence = text.rfind(". ", pos);
        sentence = sentence == std::string::npos ? 0 : sentence;
        bool uncertain = text.substr(sentence, pos - sentence).find("possible") != std::string::npos;
        lv.set(e.observation, uncertain ? ObservationState::uncertain : ObservationState::positive);
        std::size_t obs = g.entities.size();
        g.entities.push_back({e.keyword, uncertain ? EntityLabel::obs_u : EntityLabel::obs_dp});
        if (e.anatomy && e.anatomy != std::string_view(e.keyword)) {
            g.entities.push_back({e.anatomy, EntityLabel::anat_dp});
            g.relations.push_back({obs, obs + 1, "located_at"});
        }
    }
    if (!any) {
        lv.set("No Finding", ObservationState::positive);
        if (text.find("no acute") != std::string::npos) g.entities.push_back({"acute", EntityLabel::obs_da});
    }
    return {lv, g};
}

std::string fill(const char* tpl, const std::string& side) {
    std::string s(tpl);
    if (auto p = s.find("%s"); p != std::string::npos) s.replace(p, 2, side);
    return s;
}

std::string capitalize(std::string s) {
    if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
    return s;
}

struct Synth {
    std::mt19937_64 rng;
    explicit Synth(std::uint64_t seed) : rng(seed) {}
    std::size_t pick(std::size_t n) { return static_cast<std::size_t>(rng() % n); }
    bool coin(unsigned percent) { return rng() % 100 < percent; }
};

Report make_report(Synth& s, const std::string& id, Split split) {
    // Normal sentences and the observations they would contradict.
    static const std::vector<std::pair<std::string, std::vector<std::string_view>>> normals = {
        {"The lungs are clear.", {"Edema", "Pneumonia", "Atelectasis", "Lung Lesion"}},
        {"No pleural effusion or pneumothorax.", {"Pleural Effusion", "Pneumothorax"}},
        {"Heart size is normal.", {"Cardiomegaly"}},
        {"The mediastinal contours are unremarkable.", {"Enlarged Cardiomediastinum"}},
        {"No focal consolidation.", {"Pneumonia"}},
        {"Osseous structures are intact.", {"Fracture"}},
        {"There is no free air under the diaphragm.", {}},
        {"Lung volumes are low.", {}}};
    const auto& cat = catalogue();
    Report r;
    r.id = id;
    r.split = split;
    std::size_t nobs = s.pick(100) < 25 ? 0 : 1 + s.pick(4);
    std::vector<std::size_t> chosen;
    while (chosen.size() < nobs) {
        std::size_t c = s.pick(cat.size());
        if (std::find(chosen.begin(), chosen.end(), c) == chosen.end()) chosen.push_back(c);
    }
    std::vector<std::string> f_sent, i_sent, l_sent;
    for (std::size_t c : chosen) {
        std::string side = s.coin(50) ? "left" : "right";
        f_sent.push_back(fill(cat[c].findings, side));
        std::string imp = capitalize(fill(cat[c].impression, side));
        if (std::string_view(cat[c].observation) == "Pneumonia" && s.coin(30)) imp = "Possible " + lower(imp);
        if (chosen.size() > 1) imp = std::to_string(i_sent.size() + 1) + ". " + imp;
        i_sent.push_back(imp);
        l_sent.push_back(fill(cat[c].layperson, side));
    }
    std::size_t extra = 1 + s.pick(3);
    for (std::size_t i = 0; i < extra; ++i) {
        const auto& [sentence, conflicts] = normals[s.pick(normals.size())];
        bool clash = std::find(f_sent.begin(), f_sent.end(), sentence) != f_sent.end();
        for (std::size_t c : chosen) clash = clash || std::find(conflicts.begin(), conflicts.end(), cat[c].observation) != conflicts.end();
        if (!clash) f_sent.push_back(sentence);
    }
    if (chosen.empty()) {
        i_sent.push_back(s.coin(50) ? "No acute cardiopulmonary process." : "No acute thoracic pathology.");
    }
    for (std::size_t i = 0; i < f_sent.size(); ++i) r.findings += (i ? " " : "") + f_sent[i];
    for (std::size_t i = 0; i < i_sent.size(); ++i) r.impression += (i ? " " : "") + i_sent[i];
    std::size_t images = 1 + s.pick(3);
    for (std::size_t i = 0; i < images; ++i) r.image_ids.push_back(id + "_img" + std::to_string(i));
    return r;
}

Vector text_vector(const Report& r) {
    std::vector<double> acc(kStoreDim, 0.0);
    for (const auto& tok : metric_tokens(r.findings)) {
        auto v = mock_embed(tok, kStoreDim, 3);
        for (std::size_t i = 0; i < kStoreDim; ++i) acc[i] += v[i];
    }
    Vector out(acc.begin(), acc.end());
    return normalize(out);
}

Vector image_vector(const Report& r, const LabelVector& labels) {
    std::vector<Vector> per_image;
    for (const auto& img : r.image_ids) {
        std::vector<double> acc(kStoreDim, 0.0);
        bool any = false;
        for (std::size_t o = 0; o < kObservationCount; ++o) {
            if (labels.states[o] != ObservationState::positive && labels.states[o] != ObservationState::uncertain) continue;
            any = true;
            auto v = mock_embed("obs:" + std::string(kObservations[o]), kStoreDim, 7);
            for (std::size_t i = 0; i < kStoreDim; ++i) acc[i] += v[i];
        }
        if (!any) {
            auto v = mock_embed("obs:none", kStoreDim, 7);
            for (std::size_t i = 0; i < kStoreDim; ++i) acc[i] += v[i];
        }
        auto noise = mock_embed(img, kStoreDim, 11);
        for (std::size_t i = 0; i < kStoreDim; ++i) acc[i] += 0.8 * noise[i];
        per_image.push_back(normalize(Vector(acc.begin(), acc.end())));
    }
    return fuse_images(per_image);
}

// ---------------------------------------------------------------------------
// Responder: a stand-in generation service with fixed, inspectable behavior.

std::vector<std::string> split_blocks(const std::string& text) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        auto e = text.find("\n\n", pos);
        out.push_back(text.substr(pos, e == std::string::npos ? std::string::npos : e - pos));
        if (e == std::string::npos) break;
        pos = e + 2;
    }
    return out;
}

std::string line_value(const std::string& block, std::string_view prefix) {
    std::size_t pos = 0;
    while (pos <= block.size()) {
        auto e = block.find('\n', pos);
        std::string line = block.substr(pos, e == std::string::npos ? std::string::npos : e - pos);
        if (line.rfind(prefix, 0) == 0) return std::string(detail::trim(std::string_view(line).substr(prefix.size())));
        if (e == std::string::npos) break;
        pos = e + 1;
    }
    return {};
}

std::string respond(const std::string& prompt) {
    auto blocks = split_blocks(prompt);
    const std::string& instruction = blocks.front();
    const std::string& cue = blocks.back();
    std::uint64_t h = detail::keyed_hash(prompt, 5);

    if (instruction.find("explaining a report to a patient") != std::string::npos) {
        std::string keys = line_value(blocks[1], "Key observations:");
        std::string impression = line_value(blocks[1], "IMPRESSION:");
        if (keys == "none" || keys == "No Finding") return "The chest x-ray looks normal. Nothing urgent was found.";
        std::string side = lower(impression).find("left") != std::string::npos ? "left" : "right";
        std::string out;
        for (const auto& f : catalogue()) {
            if (keys.find(f.observation) == std::string::npos) continue;
            if (!out.empty()) out += " ";
            out += fill(f.layperson, side);
        }
        return out.empty() ? "The chest x-ray looks normal." : out;
    }

    // Nearest demonstration is the last demo block before the test findings.
    std::string nearest_imp, nearest_lay;
    for (std::size_t i = 1; i + 2 < blocks.size(); ++i) {
        std::string imp = line_value(blocks[i], "IMPRESSION:");
        if (imp.empty()) continue;
        nearest_imp = imp;
        nearest_lay = line_value(blocks[i], "Layperson Summary:");
    }
    if (nearest_imp.empty()) {
        // Zero-shot: restate the first findings sentence.
        std::string findings = line_value(blocks[blocks.size() - 2], "FINDINGS:");
        auto dot = findings.find('.');
        std::string first = findings.substr(0, dot == std::string::npos ? findings.size() : dot + 1);
        return h % 2 ? " " + first : "IMPRESSION: " + first;
    }
    if (cue == "Layperson Summary:") {
        std::string lay = nearest_lay.empty() ? "The chest x-ray looks normal." : nearest_lay;
        return (h % 2 ? "Layperson Summary: " : " ") + lay + "\nIMPRESSION: " + nearest_imp;
    }
    return h % 2 ? " " + nearest_imp : "IMPRESSION: " + nearest_imp;
}

class ResponderTransport final : public Transport {
public:
    HttpReply post(const std::string&, const std::string& body, const std::vector<std::pair<std::string, std::string>>&) override {
        auto req = nlohmann::json::parse(body);
        std::string prompt = req["messages"][0]["content"].get<std::string>();
        std::string text = respond(prompt);
        nlohmann::json reply{{"choices", {{{"message", {{"role", "assistant"}, {"content", text}}}}}},
                             {"usage",
                              {{"prompt_tokens", WhitespaceTokenizer().count(prompt)},
                               {"completion_tokens", WhitespaceTokenizer().count(text)}}}};
        return {200, reply.dump()};
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Generate the bundled synthetic corpus"};
    std::string out_dir;
    std::uint64_t seed = 20240601;
    app.add_option("out", out_dir, "output directory")->required();
    app.add_option("--seed", seed, "generator seed");
    CLI11_PARSE(app, argc, argv);

    try {
        namespace fs = std::filesystem;
        fs::path out(out_dir);
        fs::create_directories(out);
        Synth s(seed);

        std::map<Split, std::vector<Report>> splits;
        const std::vector<std::pair<Split, std::size_t>> sizes = {{Split::train, 200}, {Split::validation, 20}, {Split::test, 20}};
        std::map<std::string, LabelVector> labels;
        std::map<std::string, EntityGraph> entities;
        EmbeddingStore text(kStoreDim, Modality::text), image(kStoreDim, Modality::image), multi(kStoreDim, Modality::multimodal);
        for (const auto& [split, n] : sizes) {
            const char* prefix = split == Split::train ? "tr" : split == Split::validation ? "va" : "te";
            for (std::size_t i = 0; i < n; ++i) {
                char id[16];
                std::snprintf(id, sizeof id, "%s%04zu", prefix, i);
                Report r = make_report(s, id, split);
                auto [lv, g] = label_impression(r.impression);
                labels[r.id] = lv;
                entities[r.id] = g;
                Vector t = text_vector(r);
                Vector im = image_vector(r, lv);
                Vector mm(kStoreDim);
                for (std::size_t k = 0; k < kStoreDim; ++k) mm[k] = t[k] + im[k];
                text.add(r.id, t);
                image.add(r.id, im);
                multi.add_normalized(r.id, mm);
                splits[split].push_back(std::move(r));
            }
        }
        write_corpus(Corpus(splits[Split::train]), out / "train.jsonl");
        write_corpus(Corpus(splits[Split::validation]), out / "validation.jsonl");
        write_corpus(Corpus(splits[Split::test]), out / "test.jsonl");
        write_labels(labels, out / "labels.jsonl");
        write_entities(entities, out / "entities.jsonl");
        save_store(text, out / "store_text.emb");
        save_store(image, out / "store_image.emb");
        save_store(multi, out / "store_multimodal.emb");

        nlohmann::json cfg = {{"train", "train.jsonl"},
                              {"validation", "validation.jsonl"},
                              {"test", "test.jsonl"},
                              {"labels", "labels.jsonl"},
                              {"entities", "entities.jsonl"},
                              {"store_text", "store_text.emb"},
                              {"store_image", "store_image.emb"},
                              {"store_multimodal", "store_multimodal.emb"},
                              {"replay", "transcript.jsonl"},
                              {"pred_labels", "pred_labels.jsonl"},
                              {"pred_entities", "pred_entities.jsonl"},
                              {"strategy", "few_shot_layperson"},
                              {"modality", "multimodal"},
                              {"k", 8},
                              {"concurrency", 4}};
        io::write_file_atomic(out / "config.json", cfg.dump(2) + "\n");

        // Record the transcript by driving the real pipeline against the responder.
        fs::path transcript = out / "transcript.jsonl";
        fs::remove(transcript);
        fs::path work = fs::temp_directory_path() / ("laysum_synth_" + std::to_string(seed));
        fs::remove_all(work);
        nlohmann::json rec = RunConfig::load_json(out / "config.json");
        rec.erase("replay");
        rec.erase("pred_labels");
        rec.erase("pred_entities");
        rec["concurrency"] = 1;
        rec["out"] = work.string();
        RunConfig config = RunConfig::from_json(rec);

        ClientOptions opts;
        opts.cache_path = transcript;
        opts.max_in_flight = 1;
        auto client = GenClient::live(opts, std::make_shared<ResponderTransport>());

        auto annotated = cmd_annotate_layperson(config, *client);
        config.train = annotated.output;
        std::vector<GenerationRecord> primary;
        for (auto strategy : {Strategy::zero_shot, Strategy::few_shot, Strategy::few_shot_chexbert, Strategy::few_shot_layperson}) {
            config.strategy = strategy;
            config.out = work / ("run_" + std::string(to_string(strategy)));
            auto r = cmd_run(config, *client);
            if (strategy == Strategy::few_shot_layperson) primary = r.records;
        }
        config.strategy = Strategy::few_shot_layperson;
        config.out = work / "sweep";
        config.sweep_strategies = {Strategy::zero_shot, Strategy::few_shot, Strategy::few_shot_chexbert, Strategy::few_shot_layperson};
        cmd_sweep(config, *client);

        // Prediction sidecars for the primary run's impressions.
        std::map<std::string, LabelVector> pred_labels;
        std::map<std::string, EntityGraph> pred_entities;
        for (const auto& g : primary) {
            auto [lv, eg] = label_impression(g.impression);
            pred_labels[g.id] = lv;
            pred_entities[g.id] = eg;
        }
        write_labels(pred_labels, out / "pred_labels.jsonl");
        write_entities(pred_entities, out / "pred_entities.jsonl");
        fs::remove_all(work);
        std::cout << "wrote synthetic corpus to " << out.string() << " (" << client->network_calls() << " responses)\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

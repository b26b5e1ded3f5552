// SPDX-License-Identifier: Apache-2.0
#pragma once

// Prompt assembly for the layperson-generation step and the four
// summarization strategies, plus parsing of model responses.
//
// Layout of a few-shot prompt (blocks joined by a blank line):
//   instruction | demo_n ... demo_1 | test findings | cue
// where demo_1 is the most similar demonstration. When the budget binds,
// whole demonstrations are removed from the front, so the least similar
// ones go first.

#include "laysum/corpus.hpp"
#include "laysum/error.hpp"
#include "laysum/io.hpp"
#include "laysum/retrieval.hpp"
#include "laysum/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace laysum {

enum class Strategy { zero_shot, few_shot, few_shot_chexbert, few_shot_layperson, layperson_gen };

inline std::string_view to_string(Strategy s) {
    switch (s) {
    case Strategy::zero_shot: return "zero_shot";
    case Strategy::few_shot: return "few_shot";
    case Strategy::few_shot_chexbert: return "few_shot_chexbert";
    case Strategy::few_shot_layperson: return "few_shot_layperson";
    case Strategy::layperson_gen: return "layperson_gen";
    }
    return "?";
}

inline std::optional<Strategy> parse_strategy(std::string_view s) {
    if (s == "zero_shot") return Strategy::zero_shot;
    if (s == "few_shot") return Strategy::few_shot;
    if (s == "few_shot_chexbert") return Strategy::few_shot_chexbert;
    if (s == "few_shot_layperson") return Strategy::few_shot_layperson;
    if (s == "layperson_gen") return Strategy::layperson_gen;
    return std::nullopt;
}

enum class FewShotVariant { plain, chexbert, layperson };

inline Strategy strategy_of(FewShotVariant v) {
    switch (v) {
    case FewShotVariant::plain: return Strategy::few_shot;
    case FewShotVariant::chexbert: return Strategy::few_shot_chexbert;
    case FewShotVariant::layperson: return Strategy::few_shot_layperson;
    }
    return Strategy::few_shot;
}

inline constexpr std::size_t kDefaultBudget = 7800;
inline constexpr std::size_t kBudgetPreset3800 = 3800;
inline constexpr std::size_t kBudgetPreset1700 = 1700;
inline constexpr std::size_t kDefaultMaxNewTokens = 256;

inline constexpr std::string_view kZeroShotInstruction =
    "You are an expert chest radiologist. Your task is to summarize the radiology report findings into an "
    "impression with minimal text";

// ---------------------------------------------------------------------------
// Templates

/// Named template strings with {findings}, {impression}, {layperson} and {keywords} placeholders.
class PromptTemplates {
public:
    static constexpr std::string_view kVersion = "laysum-templates/1";

    static PromptTemplates defaults() {
        PromptTemplates t;
        const std::string base(kZeroShotInstruction);
        t.entries_ = {
            {"version", std::string(kVersion)},
            {"separator", "\n\n"},
            {"instruction.zero_shot", base + "."},
            {"instruction.few_shot",
             base + ". Follow the style of the example reports below: each one lists the FINDINGS and the "
                    "IMPRESSION written for them."},
            {"instruction.few_shot_chexbert",
             base + ". Follow the style of the example reports below. Each report lists key observations found by "
                    "an automatic labeler; use them to focus on the diseases that matter."},
            {"instruction.few_shot_layperson",
             base + ". First write a layperson summary: explain the findings in short, plain sentences a patient "
                    "without medical training can follow, using everyday words instead of medical terms. Then "
                    "write the expert impression, starting with \"IMPRESSION:\". Follow the examples below."},
            {"instruction.layperson_gen",
             "You are an expert chest radiologist explaining a report to a patient. Rewrite the radiology report "
             "below as a short summary for a layperson. Use simple everyday words instead of medical terms (for "
             "example, say \"enlarged heart\" rather than \"cardiomegaly\"). Cover every key observation listed "
             "and do not add anything that is not in the report."},
            {"demo.plain", "FINDINGS: {findings}\nIMPRESSION: {impression}"},
            {"demo.chexbert", "FINDINGS: {findings}\nKey observations: {keywords}\nIMPRESSION: {impression}"},
            {"demo.layperson", "FINDINGS: {findings}\nLayperson Summary: {layperson}\nIMPRESSION: {impression}"},
            {"test.plain", "FINDINGS: {findings}"},
            {"test.chexbert", "FINDINGS: {findings}\nKey observations: {keywords}"},
            {"layperson_gen.body", "FINDINGS: {findings}\nIMPRESSION: {impression}\nKey observations: {keywords}"},
            {"cue.impression", "IMPRESSION:"},
            {"cue.layperson", "Layperson Summary:"},
        };
        return t;
    }

    /// Loads a JSON object of template strings; keys it omits keep their defaults.
    static PromptTemplates load(const std::filesystem::path& path) {
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(io::read_file(path));
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(std::string("template file is not JSON: ") + e.what(), 0);
        }
        if (!obj.is_object()) {
            throw ParseError("template file must be a JSON object", 0);
        }
        PromptTemplates t = defaults();
        for (const auto& [k, v] : obj.items()) {
            if (!v.is_string()) {
                throw ValidationError("template '" + k + "' must be a string");
            }
            if (!t.entries_.count(k)) {
                throw ValidationError("unknown template key '" + k + "'");
            }
            t.entries_[k] = v.get<std::string>();
        }
        return t;
    }

    const std::string& get(const std::string& key) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) {
            throw ConfigError("missing template '" + key + "'");
        }
        return it->second;
    }

    const std::map<std::string, std::string>& entries() const noexcept { return entries_; }

    /// Sorted-key JSON; the bytes that get digested into run manifests.
    std::string canonical() const { return nlohmann::json(entries_).dump(2) + "\n"; }

private:
    std::map<std::string, std::string> entries_;
};

/// Substitutes known placeholders; other brace text is left untouched.
inline std::string render_template(std::string_view tpl, const std::map<std::string, std::string>& vars) {
    std::string out;
    out.reserve(tpl.size() + 64);
    std::size_t i = 0;
    while (i < tpl.size()) {
        if (tpl[i] == '{') {
            auto close = tpl.find('}', i);
            if (close != std::string_view::npos) {
                auto it = vars.find(std::string(tpl.substr(i + 1, close - i - 1)));
                if (it != vars.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out.push_back(tpl[i++]);
    }
    return out;
}

/// Positive observations by name, uncertain ones suffixed "(uncertain)", comma-joined.
inline std::string key_observations(const LabelVector& labels) {
    std::string out;
    for (std::size_t i = 0; i < kObservationCount; ++i) {
        auto s = labels.states[i];
        if (s != ObservationState::positive && s != ObservationState::uncertain) continue;
        if (!out.empty()) out += ", ";
        out += kObservations[i];
        if (s == ObservationState::uncertain) out += " (uncertain)";
    }
    return out.empty() ? std::string("none") : out;
}

// ---------------------------------------------------------------------------
// Assembly

struct Demonstration {
    std::string id;
    std::string findings;
    std::optional<std::string> layperson;
    std::string impression;
    double score = 0.0;
    std::optional<LabelVector> labels;
};

inline Demonstration demonstration_from(const Report& r, double score) {
    return {r.id, r.findings, r.layperson, r.impression, score, r.labels};
}

inline std::vector<Demonstration> demonstrations_from(const RetrievalResult& retrieved) {
    std::vector<Demonstration> out;
    out.reserve(retrieved.demos.size());
    for (const auto& d : retrieved.demos) {
        out.push_back(demonstration_from(*d.report, d.score));
    }
    return out;
}

struct AssembledPrompt {
    Strategy strategy = Strategy::zero_shot;
    std::string text;
    std::size_t token_count = 0;
    std::size_t demos_used = 0;
    std::size_t demos_dropped = 0;
    /// Retained demonstrations, most similar first.
    std::vector<std::string> demo_ids;
};

inline std::string render_demo(const Demonstration& d, FewShotVariant variant,
                               const PromptTemplates& templates = PromptTemplates::defaults()) {
    std::map<std::string, std::string> vars{{"findings", d.findings}, {"impression", d.impression}};
    switch (variant) {
    case FewShotVariant::plain: return render_template(templates.get("demo.plain"), vars);
    case FewShotVariant::chexbert:
        vars["keywords"] = d.labels ? key_observations(*d.labels) : std::string("none");
        return render_template(templates.get("demo.chexbert"), vars);
    case FewShotVariant::layperson:
        vars["layperson"] = d.layperson.value_or("");
        return render_template(templates.get("demo.layperson"), vars);
    }
    return {};
}

namespace detail {

inline std::string join_blocks(std::span<const std::string* const> blocks, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (i) out += sep;
        out += *blocks[i];
    }
    return out;
}

} // namespace detail

inline AssembledPrompt build_layperson_gen_prompt(const Report& report, const std::optional<LabelVector>& labels,
                                                  const PromptTemplates& templates = PromptTemplates::defaults(),
                                                  const Tokenizer& tokenizer = WhitespaceTokenizer(),
                                                  std::optional<std::size_t> budget = std::nullopt) {
    if (!labels) {
        throw ValidationError("report '" + report.id + "' has no labels; the layperson prompt needs them");
    }
    if (report.impression.empty()) {
        throw ValidationError("report '" + report.id + "' has no impression; the layperson prompt needs one");
    }
    const std::string& sep = templates.get("separator");
    std::string body = render_template(templates.get("layperson_gen.body"), {{"findings", report.findings},
                                                                             {"impression", report.impression},
                                                                             {"keywords", key_observations(*labels)}});
    AssembledPrompt p;
    p.strategy = Strategy::layperson_gen;
    p.text = templates.get("instruction.layperson_gen") + sep + body + sep + templates.get("cue.layperson");
    p.token_count = tokenizer.count(p.text);
    if (budget && p.token_count > *budget) {
        throw OverBudgetError(p.token_count, *budget);
    }
    return p;
}

inline AssembledPrompt build_zero_shot(const Report& report, std::size_t budget, const Tokenizer& tokenizer,
                                       const PromptTemplates& templates = PromptTemplates::defaults()) {
    if (report.findings.empty()) {
        throw ValidationError("report '" + report.id + "' has empty findings");
    }
    const std::string& sep = templates.get("separator");
    AssembledPrompt p;
    p.strategy = Strategy::zero_shot;
    p.text = templates.get("instruction.zero_shot") + sep +
             render_template(templates.get("test.plain"), {{"findings", report.findings}}) + sep +
             templates.get("cue.impression");
    p.token_count = tokenizer.count(p.text);
    if (p.token_count > budget) {
        throw OverBudgetError(p.token_count, budget);
    }
    return p;
}

/// Few-shot prompt from demonstrations ordered most similar first.
inline AssembledPrompt build_few_shot(const Report& report, std::span<const Demonstration> demos, std::size_t budget,
                                      const Tokenizer& tokenizer, FewShotVariant variant,
                                      const std::optional<LabelVector>& labels = std::nullopt,
                                      const PromptTemplates& templates = PromptTemplates::defaults()) {
    if (report.findings.empty()) {
        throw ValidationError("report '" + report.id + "' has empty findings");
    }
    for (const auto& d : demos) {
        if (d.findings.empty() || d.impression.empty()) {
            throw ValidationError("demonstration '" + d.id + "' needs nonempty findings and impression");
        }
        if (variant == FewShotVariant::layperson && (!d.layperson || d.layperson->empty())) {
            throw ValidationError("demonstration '" + d.id + "' has no layperson summary");
        }
        if (variant == FewShotVariant::chexbert && !d.labels) {
            throw ValidationError("demonstration '" + d.id + "' has no labels for keyword injection");
        }
    }

    const std::string& sep = templates.get("separator");
    std::string instruction;
    std::string test_block;
    std::string cue;
    switch (variant) {
    case FewShotVariant::plain:
        instruction = templates.get("instruction.few_shot");
        test_block = render_template(templates.get("test.plain"), {{"findings", report.findings}});
        cue = templates.get("cue.impression");
        break;
    case FewShotVariant::chexbert:
        instruction = templates.get("instruction.few_shot_chexbert");
        test_block = labels ? render_template(templates.get("test.chexbert"),
                                             {{"findings", report.findings}, {"keywords", key_observations(*labels)}})
                            : render_template(templates.get("test.plain"), {{"findings", report.findings}});
        cue = templates.get("cue.impression");
        break;
    case FewShotVariant::layperson:
        instruction = templates.get("instruction.few_shot_layperson");
        test_block = render_template(templates.get("test.plain"), {{"findings", report.findings}});
        cue = templates.get("cue.layperson");
        break;
    }

    // rendered[0] is the least similar demonstration.
    std::vector<std::string> rendered;
    rendered.reserve(demos.size());
    for (auto it = demos.rbegin(); it != demos.rend(); ++it) {
        rendered.push_back(render_demo(*it, variant, templates));
    }

    auto assemble = [&](std::size_t dropped) {
        std::vector<const std::string*> blocks;
        blocks.reserve(rendered.size() - dropped + 3);
        blocks.push_back(&instruction);
        for (std::size_t i = dropped; i < rendered.size(); ++i) blocks.push_back(&rendered[i]);
        blocks.push_back(&test_block);
        blocks.push_back(&cue);
        return detail::join_blocks(blocks, sep);
    };
    auto fits = [&](std::size_t dropped, std::size_t* count_out) {
        std::string text = assemble(dropped);
        std::size_t c = tokenizer.count(text);
        if (count_out) *count_out = c;
        return c <= budget;
    };

    std::size_t bare = 0;
    if (!fits(rendered.size(), &bare)) {
        throw OverBudgetError(bare, budget);
    }

    // Estimate from per-block counts, then settle on exact whole-prompt counts.
    std::size_t estimate = bare;
    std::size_t sep_cost = tokenizer.count(sep);
    std::size_t dropped = rendered.size();
    for (std::size_t i = rendered.size(); i-- > 0;) {
        std::size_t cost = tokenizer.count(rendered[i]) + sep_cost;
        if (estimate + cost > budget) break;
        estimate += cost;
        dropped = i;
    }
    while (dropped > 0 && fits(dropped - 1, nullptr)) --dropped;
    while (!fits(dropped, nullptr)) ++dropped;

    AssembledPrompt p;
    p.strategy = strategy_of(variant);
    p.text = assemble(dropped);
    p.token_count = tokenizer.count(p.text);
    p.demos_used = rendered.size() - dropped;
    p.demos_dropped = dropped;
    for (std::size_t i = 0; i < p.demos_used; ++i) p.demo_ids.push_back(demos[i].id);
    return p;
}

// ---------------------------------------------------------------------------
// Response parsing

enum class ParseStatus { clean, fallback_no_marker, fallback_rambling };

inline std::string_view to_string(ParseStatus s) {
    switch (s) {
    case ParseStatus::clean: return "clean";
    case ParseStatus::fallback_no_marker: return "fallback_no_marker";
    case ParseStatus::fallback_rambling: return "fallback_rambling";
    }
    return "?";
}

struct ParsedResponse {
    std::string layperson;
    std::string impression;
    ParseStatus status = ParseStatus::clean;
    bool operator==(const ParsedResponse&) const = default;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    auto is_ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (!s.empty() && is_ws(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_ws(s.back())) s.remove_suffix(1);
    return s;
}

inline bool iequal_at(std::string_view hay, std::size_t pos, std::string_view needle) {
    if (hay.size() - pos < needle.size()) return false;
    for (std::size_t i = 0; i < needle.size(); ++i) {
        if (std::tolower(static_cast<unsigned char>(hay[pos + i])) != std::tolower(static_cast<unsigned char>(needle[i]))) {
            return false;
        }
    }
    return true;
}

inline std::size_t ifind(std::string_view hay, std::string_view needle, std::size_t from = 0) {
    for (std::size_t i = from; i + needle.size() <= hay.size(); ++i) {
        if (iequal_at(hay, i, needle)) return i;
    }
    return std::string_view::npos;
}

inline std::size_t irfind(std::string_view hay, std::string_view needle) {
    if (needle.size() > hay.size()) return std::string_view::npos;
    for (std::size_t i = hay.size() - needle.size() + 1; i-- > 0;) {
        if (iequal_at(hay, i, needle)) return i;
    }
    return std::string_view::npos;
}

inline std::string_view cut_rambling(std::string_view s, ParseStatus& status) {
    auto f = ifind(s, "FINDINGS:");
    if (f != std::string_view::npos) {
        status = ParseStatus::fallback_rambling;
        return s.substr(0, f);
    }
    return s;
}

} // namespace detail

inline constexpr std::string_view kImpressionMarker = "IMPRESSION:";
inline constexpr std::string_view kLaypersonMarker = "Layperson Summary:";

/// Splits raw model output into layperson and impression sections. Never throws.
inline ParsedResponse parse_response(std::string_view raw, Strategy strategy) {
    ParsedResponse out;
    if (strategy == Strategy::few_shot_layperson) {
        auto imp = detail::ifind(raw, kImpressionMarker);
        if (imp == std::string_view::npos) {
            out.status = ParseStatus::fallback_no_marker;
            out.impression = std::string(detail::trim(raw));
            return out;
        }
        auto head = raw.substr(0, imp);
        if (auto lay = detail::irfind(head, kLaypersonMarker); lay != std::string_view::npos) {
            head = head.substr(lay + kLaypersonMarker.size());
        }
        out.layperson = std::string(detail::trim(head));
        out.impression =
            std::string(detail::trim(detail::cut_rambling(raw.substr(imp + kImpressionMarker.size()), out.status)));
        return out;
    }
    if (strategy == Strategy::layperson_gen) {
        auto s = detail::trim(raw);
        if (detail::iequal_at(s, 0, kLaypersonMarker)) s.remove_prefix(kLaypersonMarker.size());
        out.layperson = std::string(detail::trim(s));
        return out;
    }
    auto s = detail::trim(raw);
    if (detail::iequal_at(s, 0, kImpressionMarker)) s.remove_prefix(kImpressionMarker.size());
    out.impression = std::string(detail::trim(detail::cut_rambling(s, out.status)));
    return out;
}

} // namespace laysum

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "laysum/error.hpp"
#include "laysum/io.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace laysum {

/// Token counting contract used for prompt budgets.
class Tokenizer {
public:
    virtual ~Tokenizer() = default;

    virtual std::size_t count(std::string_view text) const = 0;

    /// Longest prefix of `text` (cut at a token boundary) whose count is <= n.
    virtual std::string truncate(std::string_view text, std::size_t n) const = 0;

    /// Stable identifier recorded in run manifests.
    virtual std::string id() const = 0;
};

/// Whitespace-delimited tokens. Fallback for tests and model-agnostic runs.
class WhitespaceTokenizer final : public Tokenizer {
public:
    std::size_t count(std::string_view text) const override {
        std::size_t n = 0;
        bool in_token = false;
        for (char c : text) {
            bool space = is_space(c);
            if (!space && !in_token) ++n;
            in_token = !space;
        }
        return n;
    }

    std::string truncate(std::string_view text, std::size_t n) const override {
        std::size_t seen = 0;
        bool in_token = false;
        for (std::size_t i = 0; i < text.size(); ++i) {
            bool space = is_space(text[i]);
            if (!space && !in_token) {
                if (seen == n) return std::string(text.substr(0, i));
                ++seen;
            }
            in_token = !space;
        }
        return std::string(text);
    }

    std::string id() const override { return "whitespace"; }

private:
    static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
};

/// Subword BPE tokenizer read from a `tokenizer.json` definition file.
///
/// Handles the two layouts used by current chat models: byte-level BPE
/// (GPT-2 / Llama-3 family) and metaspace BPE with optional byte fallback
/// (Llama-2 / Mistral family). Pre-tokenization follows the GPT-2 split
/// rules with every non-ASCII code point treated as a letter.
class BpeTokenizer final : public Tokenizer {
public:
    static std::unique_ptr<BpeTokenizer> from_file(const std::filesystem::path& path) {
        auto text = io::read_file(path);
        auto tok = from_json(text);
        tok->id_ = "bpe:" + path.filename().string();
        return tok;
    }

    static std::unique_ptr<BpeTokenizer> from_json(std::string_view definition) {
        using nlohmann::json;
        json root;
        try {
            root = json::parse(definition);
        } catch (const json::parse_error& e) {
            throw FormatError(std::string("tokenizer definition is not JSON: ") + e.what());
        }
        const json& model = root.value("model", json::object());
        if (model.value("type", std::string("BPE")) != "BPE") {
            throw FormatError("only BPE tokenizer models are supported");
        }
        auto tok = std::unique_ptr<BpeTokenizer>(new BpeTokenizer());
        if (!model.contains("vocab") || !model["vocab"].is_object()) {
            throw FormatError("tokenizer model has no vocab");
        }
        for (const auto& [piece, id] : model["vocab"].items()) {
            tok->vocab_.emplace(piece, id.get<std::int64_t>());
        }
        int rank = 0;
        for (const auto& m : model.value("merges", json::array())) {
            std::string a, b;
            if (m.is_string()) {
                auto s = m.get<std::string>();
                auto sp = s.find(' ');
                if (sp == std::string::npos) throw FormatError("bad merge entry '" + s + "'");
                a = s.substr(0, sp);
                b = s.substr(sp + 1);
            } else if (m.is_array() && m.size() == 2) {
                a = m[0].get<std::string>();
                b = m[1].get<std::string>();
            } else {
                throw FormatError("bad merge entry");
            }
            tok->ranks_.emplace(pair_key(a, b), rank++);
        }
        tok->byte_fallback_ = model.value("byte_fallback", false);
        tok->ignore_merges_ = model.value("ignore_merges", false);
        tok->byte_level_ = mentions_type(root.value("pre_tokenizer", json()), "ByteLevel") ||
                           mentions_type(root.value("decoder", json()), "ByteLevel");
        tok->id_ = "bpe";
        return tok;
    }

    std::size_t count(std::string_view text) const override { return token_ends(text).size(); }

    std::string truncate(std::string_view text, std::size_t n) const override {
        auto ends = token_ends(text);
        if (ends.size() <= n) return std::string(text);
        std::size_t keep = n;
        while (true) {
            std::string cut = keep == 0 ? std::string() : std::string(text.substr(0, ends[keep - 1]));
            if (keep == 0 || count(cut) <= n) return cut;
            --keep;
        }
    }

    std::string id() const override { return id_; }

    bool byte_level() const noexcept { return byte_level_; }

    /// Source byte offset at which each token ends.
    std::vector<std::size_t> token_ends(std::string_view text) const {
        std::vector<std::size_t> ends;
        if (text.empty()) return ends;
        if (byte_level_) {
            for (auto [start, len] : split_words(text)) {
                std::vector<Unit> units;
                units.reserve(len);
                for (std::size_t i = 0; i < len; ++i) {
                    units.push_back({byte_char(static_cast<unsigned char>(text[start + i])), 1});
                }
                encode_word(std::move(units), start, ends);
            }
        } else {
            encode_metaspace(text, ends);
        }
        return ends;
    }

private:
    BpeTokenizer() = default;

    struct Unit {
        std::string piece;
        std::size_t source_bytes;
    };

    static std::string pair_key(std::string_view a, std::string_view b) {
        std::string k;
        k.reserve(a.size() + b.size() + 1);
        k.append(a).push_back('\0');
        k.append(b);
        return k;
    }

    static bool mentions_type(const nlohmann::json& node, std::string_view type) {
        if (node.is_object()) {
            if (node.contains("type") && node["type"].is_string() && node["type"].get<std::string>() == type) {
                return true;
            }
            for (const auto& [_, v] : node.items()) {
                if (mentions_type(v, type)) return true;
            }
        } else if (node.is_array()) {
            for (const auto& v : node) {
                if (mentions_type(v, type)) return true;
            }
        }
        return false;
    }

    // GPT-2 byte-to-unicode table: printable bytes map to themselves, the rest to U+0100...
    static const std::string& byte_char(unsigned char b) {
        static const std::array<std::string, 256> table = [] {
            std::array<std::string, 256> t;
            int next = 0;
            for (int c = 0; c < 256; ++c) {
                bool printable = (c >= 0x21 && c <= 0x7E) || (c >= 0xA1 && c <= 0xAC) || (c >= 0xAE && c <= 0xFF);
                int cp = printable ? c : 256 + next++;
                t[c] = encode_utf8(static_cast<char32_t>(cp));
            }
            return t;
        }();
        return table[b];
    }

    static std::string encode_utf8(char32_t cp) {
        std::string s;
        if (cp < 0x80) {
            s.push_back(static_cast<char>(cp));
        } else if (cp < 0x800) {
            s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else if (cp < 0x10000) {
            s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
            s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else {
            s.push_back(static_cast<char>(0xF0 | (cp >> 18)));
            s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
            s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        }
        return s;
    }

    static std::size_t utf8_length(unsigned char lead) {
        if (lead < 0x80) return 1;
        if ((lead >> 5) == 0x6) return 2;
        if ((lead >> 4) == 0xE) return 3;
        if ((lead >> 3) == 0x1E) return 4;
        return 1;
    }

    enum class CharClass { letter, digit, space, other };

    static CharClass classify(unsigned char c) {
        if (c >= 0x80) return CharClass::letter;
        if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) return CharClass::letter;
        if (c >= '0' && c <= '9') return CharClass::digit;
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return CharClass::space;
        return CharClass::other;
    }

    /// GPT-2 style pre-tokenization into (offset, length) words.
    static std::vector<std::pair<std::size_t, std::size_t>> split_words(std::string_view t) {
        std::vector<std::pair<std::size_t, std::size_t>> words;
        const std::size_t n = t.size();
        std::size_t i = 0;
        auto run = [&](std::size_t from, CharClass cls) {
            std::size_t j = from;
            while (j < n && classify(static_cast<unsigned char>(t[j])) == cls) ++j;
            return j;
        };
        while (i < n) {
            unsigned char c = static_cast<unsigned char>(t[i]);
            if (c == '\'' && i + 1 < n) {
                static constexpr std::array<std::string_view, 7> suffixes = {"re", "ve", "ll", "s", "t", "m", "d"};
                bool matched = false;
                for (auto suf : suffixes) {
                    if (t.substr(i + 1, suf.size()) == suf) {
                        words.emplace_back(i, 1 + suf.size());
                        i += 1 + suf.size();
                        matched = true;
                        break;
                    }
                }
                if (matched) continue;
            }
            std::size_t start = i;
            std::size_t body = i;
            if (c == ' ' && i + 1 < n && classify(static_cast<unsigned char>(t[i + 1])) != CharClass::space) {
                body = i + 1;
            }
            CharClass cls = classify(static_cast<unsigned char>(t[body]));
            if (cls != CharClass::space) {
                std::size_t end = run(body, cls);
                words.emplace_back(start, end - start);
                i = end;
                continue;
            }
            std::size_t end = run(i, CharClass::space);
            if (end < n && end - i > 1) {
                words.emplace_back(i, end - 1 - i);
                if (t[end - 1] == ' ') {
                    i = end - 1; // becomes the prefix of the next word
                } else {
                    words.emplace_back(end - 1, 1);
                    i = end;
                }
            } else if (end < n && t[i] != ' ') {
                words.emplace_back(i, 1);
                i = end;
            } else {
                words.emplace_back(i, end - i);
                i = end;
            }
        }
        return words;
    }

    void encode_metaspace(std::string_view text, std::vector<std::size_t>& ends) const {
        static const std::string kMeta = "\xE2\x96\x81"; // U+2581
        std::vector<Unit> word;
        std::size_t word_start = 0;
        // The leading metaspace is synthetic and covers no source bytes.
        word.push_back({kMeta, 0});
        for (std::size_t i = 0; i < text.size();) {
            if (text[i] == ' ') {
                encode_word(std::move(word), word_start, ends);
                word.clear();
                word_start = i;
                word.push_back({kMeta, 1});
                ++i;
                continue;
            }
            std::size_t len = std::min(utf8_length(static_cast<unsigned char>(text[i])), text.size() - i);
            word.push_back({std::string(text.substr(i, len)), len});
            i += len;
        }
        encode_word(std::move(word), word_start, ends);
    }

    void encode_word(std::vector<Unit> units, std::size_t source_start, std::vector<std::size_t>& ends) const {
        if (units.empty()) return;
        if (ignore_merges_) {
            std::string whole;
            std::size_t bytes = 0;
            for (const auto& u : units) {
                whole += u.piece;
                bytes += u.source_bytes;
            }
            if (vocab_.count(whole)) {
                ends.push_back(source_start + bytes);
                return;
            }
        }
        while (units.size() > 1) {
            int best = std::numeric_limits<int>::max();
            std::size_t at = 0;
            for (std::size_t i = 0; i + 1 < units.size(); ++i) {
                auto it = ranks_.find(pair_key(units[i].piece, units[i + 1].piece));
                if (it != ranks_.end() && it->second < best) {
                    best = it->second;
                    at = i;
                }
            }
            if (best == std::numeric_limits<int>::max()) break;
            // Merge every occurrence of the winning pair, left to right.
            const std::string left = units[at].piece;
            const std::string right = units[at + 1].piece;
            std::vector<Unit> merged;
            merged.reserve(units.size());
            for (std::size_t i = 0; i < units.size(); ++i) {
                if (i + 1 < units.size() && units[i].piece == left && units[i + 1].piece == right) {
                    merged.push_back({left + right, units[i].source_bytes + units[i + 1].source_bytes});
                    ++i;
                } else {
                    merged.push_back(std::move(units[i]));
                }
            }
            units = std::move(merged);
        }
        std::size_t pos = source_start;
        for (const auto& u : units) {
            std::size_t piece_start = pos;
            pos += u.source_bytes;
            if (vocab_.count(u.piece) || !byte_fallback_) {
                ends.push_back(pos); // known piece, or a single unknown token
                continue;
            }
            // One <0xXX> token per byte; only the last one completes the piece.
            for (std::size_t b = 1; b < u.piece.size(); ++b) ends.push_back(piece_start);
            ends.push_back(pos);
        }
    }

    std::unordered_map<std::string, std::int64_t> vocab_;
    std::unordered_map<std::string, int> ranks_;
    bool byte_level_ = false;
    bool byte_fallback_ = false;
    bool ignore_merges_ = false;
    std::string id_;
};

} // namespace laysum

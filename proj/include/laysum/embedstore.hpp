// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-report embedding stores in three modalities.
//
// Binary layout, little-endian:
//   "EMB1" | u32 dimension | u8 modality | u32 count |
//   count x ( u16 id_len | id bytes | dimension x f32 )
// The text alternative is line-delimited JSON: a header line
//   {"dimension": d, "modality": "text"}
// followed by one {"id": ..., "vector": [...]} line per record.

#include "laysum/error.hpp"
#include "laysum/io.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace laysum {

using Vector = std::vector<float>;

enum class Modality : std::uint8_t { text = 0, image = 1, multimodal = 2 };

inline std::string_view to_string(Modality m) {
    switch (m) {
    case Modality::text: return "text";
    case Modality::image: return "image";
    case Modality::multimodal: return "multimodal";
    }
    return "?";
}

inline std::optional<Modality> parse_modality(std::string_view s) {
    if (s == "text") return Modality::text;
    if (s == "image") return Modality::image;
    if (s == "multimodal") return Modality::multimodal;
    return std::nullopt;
}

inline constexpr double kUnitNormTolerance = 1e-5;

inline double l2_norm(std::span<const float> v) {
    double sum = 0.0;
    for (float x : v) {
        sum += static_cast<double>(x) * x;
    }
    return std::sqrt(sum);
}

inline double dot(std::span<const float> a, std::span<const float> b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sum += static_cast<double>(a[i]) * b[i];
    }
    return sum;
}

inline Vector normalize(std::span<const float> v) {
    double n = l2_norm(v);
    if (n == 0.0 || !std::isfinite(n)) {
        throw ValidationError("cannot normalize a zero or non-finite vector");
    }
    Vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = static_cast<float>(v[i] / n);
    }
    return out;
}

/// Averages per-image embeddings of one report, then normalizes the mean.
inline Vector fuse_images(std::span<const Vector> vectors) {
    if (vectors.empty()) {
        throw ValidationError("fuse_images needs at least one vector");
    }
    const std::size_t d = vectors.front().size();
    std::vector<double> sum(d, 0.0);
    for (const auto& v : vectors) {
        if (v.size() != d) {
            throw ValidationError("fuse_images dimension mismatch: " + std::to_string(v.size()) + " vs " +
                                  std::to_string(d));
        }
        for (std::size_t i = 0; i < d; ++i) {
            sum[i] += v[i];
        }
    }
    // Normalizing the sum is the same direction as normalizing the mean.
    double n = 0.0;
    for (double x : sum) {
        n += x * x;
    }
    n = std::sqrt(n);
    if (n == 0.0 || !std::isfinite(n)) {
        throw ValidationError("fused image embedding is zero");
    }
    Vector out(d);
    for (std::size_t i = 0; i < d; ++i) {
        out[i] = static_cast<float>(sum[i] / n);
    }
    return out;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// FNV-1a over the text, keyed by a mixed seed.
inline std::uint64_t keyed_hash(std::string_view text, std::uint64_t seed) {
    std::uint64_t key = seed;
    std::uint64_t h = 0xcbf29ce484222325ULL ^ splitmix64(key);
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

/// Deterministic stand-in encoder: hashes (text, seed) and expands it into a unit vector.
inline Vector mock_embed(std::string_view text, std::size_t dimension, std::uint64_t seed) {
    if (dimension == 0) {
        throw ValidationError("mock_embed dimension must be >= 1");
    }
    std::uint64_t state = detail::keyed_hash(text, seed);
    Vector v(dimension);
    for (auto& x : v) {
        double u = static_cast<double>(detail::splitmix64(state) >> 11) * 0x1.0p-53;
        x = static_cast<float>(2.0 * u - 1.0);
    }
    if (l2_norm(v) == 0.0) {
        v[0] = 1.0f;
    }
    return normalize(v);
}

class EmbeddingStore {
public:
    EmbeddingStore(std::size_t dimension, Modality modality) : dimension_(dimension), modality_(modality) {
        if (dimension == 0) {
            throw ValidationError("embedding dimension must be >= 1");
        }
    }

    std::size_t dimension() const noexcept { return dimension_; }
    Modality modality() const noexcept { return modality_; }
    std::size_t size() const noexcept { return ids_.size(); }
    bool empty() const noexcept { return ids_.empty(); }

    /// Adds an already-normalized vector.
    void add(std::string id, std::span<const float> vector) {
        if (vector.size() != dimension_) {
            throw ValidationError("vector for '" + id + "' has dimension " + std::to_string(vector.size()) +
                                  ", store dimension is " + std::to_string(dimension_));
        }
        double n = l2_norm(vector);
        if (!(std::abs(n - 1.0) <= kUnitNormTolerance)) {
            throw ValidationError("vector for '" + id + "' has norm " + std::to_string(n) + ", expected unit norm");
        }
        if (id.size() > 0xFFFF) {
            throw ValidationError("report id longer than 65535 bytes");
        }
        if (index_.count(id)) {
            throw ValidationError("duplicate embedding id '" + id + "'");
        }
        index_.emplace(id, ids_.size());
        ids_.push_back(std::move(id));
        data_.insert(data_.end(), vector.begin(), vector.end());
    }

    void add_normalized(std::string id, std::span<const float> vector) { add(std::move(id), normalize(vector)); }

    bool contains(std::string_view id) const { return index_.count(std::string(id)) != 0; }

    std::optional<std::span<const float>> find(std::string_view id) const {
        auto it = index_.find(std::string(id));
        if (it == index_.end()) {
            return std::nullopt;
        }
        return row(it->second);
    }

    const std::string& id(std::size_t i) const { return ids_[i]; }
    std::span<const float> row(std::size_t i) const { return {data_.data() + i * dimension_, dimension_}; }
    const std::vector<std::string>& ids() const noexcept { return ids_; }

    bool operator==(const EmbeddingStore& o) const {
        return dimension_ == o.dimension_ && modality_ == o.modality_ && ids_ == o.ids_ &&
               std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(float)) == 0 &&
               data_.size() == o.data_.size();
    }

private:
    std::size_t dimension_;
    Modality modality_;
    std::vector<std::string> ids_;
    std::vector<float> data_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u16(std::string& out, std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

    std::size_t offset() const noexcept { return pos_; }

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(std::string("truncated store: expected ") + what, pos_);
        }
    }

    std::uint64_t uint(std::size_t width, const char* what) {
        need(width, what);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < width; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += width;
        return v;
    }

    std::string_view take(std::size_t n, const char* what) {
        need(n, what);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const noexcept { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

inline EmbeddingStore parse_text_store(std::string_view text) {
    using nlohmann::json;
    std::optional<EmbeddingStore> store;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("malformed store line: ") + e.what(), line_no);
        }
        if (!store) {
            if (!obj.contains("dimension") || !obj["dimension"].is_number_unsigned() || !obj.contains("modality") ||
                !obj["modality"].is_string()) {
                throw FormatError("text store header must carry \"dimension\" and \"modality\"");
            }
            auto m = parse_modality(obj["modality"].get<std::string>());
            if (!m) {
                throw FormatError("unknown modality in text store header");
            }
            store.emplace(obj["dimension"].get<std::size_t>(), *m);
            continue;
        }
        if (!obj.contains("id") || !obj["id"].is_string() || !obj.contains("vector") || !obj["vector"].is_array()) {
            throw ParseError("store record needs \"id\" and \"vector\"", line_no);
        }
        Vector v;
        for (const auto& x : obj["vector"]) {
            if (!x.is_number()) throw ParseError("vector entries must be numbers", line_no);
            v.push_back(x.get<float>());
        }
        store->add(obj["id"].get<std::string>(), v);
    }
    if (!store) {
        throw FormatError("empty text store");
    }
    return std::move(*store);
}

} // namespace detail

inline std::string serialize_store(const EmbeddingStore& store) {
    std::string out = "EMB1";
    detail::put_u32(out, static_cast<std::uint32_t>(store.dimension()));
    detail::put_u8(out, static_cast<std::uint8_t>(store.modality()));
    detail::put_u32(out, static_cast<std::uint32_t>(store.size()));
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& id = store.id(i);
        detail::put_u16(out, static_cast<std::uint16_t>(id.size()));
        out += id;
        for (float f : store.row(i)) {
            detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
        }
    }
    return out;
}

inline std::string serialize_store_text(const EmbeddingStore& store) {
    using nlohmann::json;
    std::string out = json{{"dimension", store.dimension()}, {"modality", std::string(to_string(store.modality()))}}.dump();
    out += '\n';
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto row = store.row(i);
        out += json{{"id", store.id(i)}, {"vector", std::vector<float>(row.begin(), row.end())}}.dump();
        out += '\n';
    }
    return out;
}

/// Decodes either the binary format or its JSON-lines alternative.
inline EmbeddingStore parse_store(std::string_view bytes) {
    if (bytes.size() >= 4 && bytes.substr(0, 4) == "EMB1") {
        detail::ByteReader in(bytes);
        in.take(4, "magic");
        auto dim = static_cast<std::size_t>(in.uint(4, "dimension"));
        auto code = in.uint(1, "modality code");
        if (code > 2) {
            throw FormatError("unknown modality code " + std::to_string(code), 8);
        }
        auto count = in.uint(4, "record count");
        if (dim == 0) {
            throw FormatError("zero dimension", 4);
        }
        EmbeddingStore store(dim, static_cast<Modality>(code));
        Vector v(dim);
        for (std::uint64_t r = 0; r < count; ++r) {
            auto id_len = static_cast<std::size_t>(in.uint(2, "id length"));
            std::string id(in.take(id_len, "id bytes"));
            for (std::size_t i = 0; i < dim; ++i) {
                v[i] = std::bit_cast<float>(static_cast<std::uint32_t>(in.uint(4, "vector component")));
            }
            store.add(std::move(id), v);
        }
        if (!in.done()) {
            throw FormatError("trailing bytes after last record", in.offset());
        }
        return store;
    }
    auto first = bytes.find_first_not_of(" \t\r\n");
    if (first != std::string_view::npos && bytes[first] == '{') {
        return detail::parse_text_store(bytes);
    }
    throw FormatError("bad magic: not an EMB1 store", 0);
}

inline EmbeddingStore load_store(const std::filesystem::path& path) { return parse_store(io::read_file(path)); }

inline void save_store(const EmbeddingStore& store, const std::filesystem::path& path) {
    io::write_file_atomic(path, serialize_store(store));
}

inline void save_store_text(const EmbeddingStore& store, const std::filesystem::path& path) {
    io::write_file_atomic(path, serialize_store_text(store));
}

} // namespace laysum

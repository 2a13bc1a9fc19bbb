#include "embdistill/dataset.hpp"

#include <set>
#include <utility>

#include "embdistill/io_util.hpp"
#include "json.hpp"

namespace embd {

std::map<Label, std::vector<std::size_t>> EmbeddingSet::cliques() const {
    std::map<Label, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].clique) out[*items[i].clique].push_back(i);
    }
    return out;
}

void EmbeddingSet::validate() const {
    if (items.size() != vectors.rows()) {
        throw DimensionError("embedding set: " + std::to_string(items.size()) + " items vs " +
                             std::to_string(vectors.rows()) + " vector rows");
    }
    std::set<std::string> seen;
    for (const Item& it : items) {
        if (!seen.insert(it.id).second) {
            throw FormatError("duplicate item id: " + it.id);
        }
    }
    require_finite(vectors, "embedding vectors");
}

EmbeddingSet make_embedding_set(std::vector<Item> items, Matrix vectors) {
    EmbeddingSet set{std::move(items), std::move(vectors)};
    set.validate();
    return set;
}

namespace {
constexpr char kMagic[4] = {'E', 'M', 'B', 'D'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_embeddings(const EmbeddingSet& set, const std::string& path) {
    set.validate();
    std::string out;
    out.reserve(16 + set.vectors.size() * 4);
    out.append(kMagic, 4);
    io::put_u32(out, kVersion);
    io::put_u32(out, static_cast<std::uint32_t>(set.vectors.rows()));
    io::put_u32(out, static_cast<std::uint32_t>(set.vectors.cols()));
    for (float v : set.vectors.storage()) io::put_f32(out, v);

    nlohmann::json trailer;
    trailer["items"] = nlohmann::json::array();
    for (const Item& it : set.items) {
        nlohmann::json j;
        j["id"] = it.id;
        if (it.clique) {
            j["clique"] = *it.clique;
        } else {
            j["clique"] = nullptr;
        }
        trailer["items"].push_back(std::move(j));
    }
    const std::string trailer_str = trailer.dump();
    out += trailer_str;
    io::put_u64(out, trailer_str.size());
    io::write_file(path, out);
}

EmbeddingSet load_embeddings(const std::string& path) {
    const std::vector<std::uint8_t> buf = io::read_file(path);
    io::Reader r(buf.data(), buf.size());
    r.require(4, "magic");
    if (std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw FormatError("bad magic bytes in " + path, 0);
    }
    r.skip(4);
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw FormatError("unsupported version " + std::to_string(version) + " in " + path, 4);
    }
    const std::uint32_t n = r.u32("row count");
    const std::uint32_t d = r.u32("column count");

    Matrix vectors(n, d);
    const std::size_t payload_bytes = static_cast<std::size_t>(n) * d * 4;
    r.require(payload_bytes, "vector payload");
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * d; ++i) {
        vectors.storage()[i] = r.f32("vector payload");
    }

    if (buf.size() < 8) throw FormatError("file too small for trailer length", buf.size());
    io::Reader tail(buf.data() + buf.size() - 8, 8);
    const std::uint64_t trailer_len = tail.u64("trailer length");
    const std::size_t trailer_start = 16 + payload_bytes;
    if (trailer_start + trailer_len + 8 != buf.size()) {
        throw FormatError("trailer length " + std::to_string(trailer_len) +
                              " inconsistent with file size",
                          trailer_start);
    }

    nlohmann::json trailer;
    try {
        trailer = nlohmann::json::parse(buf.begin() + static_cast<std::ptrdiff_t>(trailer_start),
                                        buf.begin() + static_cast<std::ptrdiff_t>(trailer_start + trailer_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad JSON trailer: ") + e.what(), trailer_start);
    }
    if (!trailer.contains("items") || !trailer["items"].is_array() ||
        trailer["items"].size() != n) {
        throw FormatError("trailer item list does not match row count", trailer_start);
    }

    std::vector<Item> items;
    items.reserve(n);
    std::set<std::string> seen;
    for (const auto& j : trailer["items"]) {
        Item it;
        it.id = j.at("id").get<std::string>();
        if (!j.at("clique").is_null()) it.clique = j.at("clique").get<Label>();
        if (!seen.insert(it.id).second) {
            throw FormatError("duplicate item id '" + it.id + "' in trailer", trailer_start);
        }
        items.push_back(std::move(it));
    }

    EmbeddingSet set{std::move(items), std::move(vectors)};
    set.validate();
    return set;
}

void save_manifest(const Manifest& m, const std::string& path) {
    std::string out;
    out += "train = " + m.train_path + "\n";
    out += "val = " + m.val_path + "\n";
    io::write_file(path, out);
}

Manifest load_manifest(const std::string& path) {
    const std::vector<std::uint8_t> buf = io::read_file(path);
    const std::string text(buf.begin(), buf.end());
    Manifest m;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "train") {
            m.train_path = value;
        } else if (key == "val") {
            m.val_path = value;
        }
    }
    if (m.train_path.empty() || m.val_path.empty()) {
        throw FormatError("manifest must list train and val paths: " + path);
    }
    return m;
}

}  // namespace embd

#ifndef EMBDISTILL_DATASET_HPP
#define EMBDISTILL_DATASET_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "embdistill/losses.hpp"
#include "embdistill/matrix.hpp"

namespace embd {

struct Item {
    std::string id;
    std::optional<Label> clique;  // nullopt = noise item
};

// Immutable after construction; safe to share across threads.
struct EmbeddingSet {
    std::vector<Item> items;
    Matrix vectors;  // n x d

    std::size_t size() const { return items.size(); }
    std::size_t dim() const { return vectors.cols(); }

    // clique id -> member row indices, in row order.
    std::map<Label, std::vector<std::size_t>> cliques() const;

    void validate() const;  // throws on broken invariants
};

EmbeddingSet make_embedding_set(std::vector<Item> items, Matrix vectors);

// Binary container: magic "EMBD", u32 version=1, u32 n, u32 d, n*d float32
// row-major, UTF-8 JSON trailer {"items":[{"id":..,"clique":..}]}, and the
// trailer byte length as a trailing u64. Everything little-endian.
void save_embeddings(const EmbeddingSet& set, const std::string& path);
EmbeddingSet load_embeddings(const std::string& path);

// Plain-text manifest listing the train/val embedding files.
struct Manifest {
    std::string train_path;
    std::string val_path;
};

void save_manifest(const Manifest& m, const std::string& path);
Manifest load_manifest(const std::string& path);

}  // namespace embd

#endif

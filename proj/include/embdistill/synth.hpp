#ifndef EMBDISTILL_SYNTH_HPP
#define EMBDISTILL_SYNTH_HPP

#include <cstdint>
#include <utility>

#include "embdistill/dataset.hpp"

namespace embd {

// Clique-structured synthetic teacher features: each clique is a Gaussian
// center (spread center_scale) plus per-item noise (spread noise_scale).
// Clique sizes follow a truncated geometric over [min, max], skewed toward
// small cliques. Noise items (no clique) are emitted into the val split only.
struct SynthConfig {
    std::size_t num_cliques = 48;       // train split
    std::size_t num_val_cliques = 16;   // val split (disjoint clique ids)
    std::size_t clique_size_min = 2;
    std::size_t clique_size_max = 8;
    // 0 = draw val sizes like the train split, capped at 13 to mirror the
    // narrower validation spread of the source data; nonzero = exact size.
    std::size_t val_clique_size = 0;
    std::size_t teacher_dim = 256;
    // Rank of the subspace the clique centers span (0 = full rank). High-d
    // teacher embeddings compress losslessly in practice, so the realistic
    // presets keep the center geometry low-rank while the per-item noise
    // stays full-rank.
    std::size_t intrinsic_dim = 0;
    double center_scale = 1.0;
    double noise_scale = 0.1;
    std::size_t num_noise_items = 0;
    std::uint64_t seed = 1;

    void validate() const;

    // center/noise ratio 10, comfortably separable clusters
    static SynthConfig separable(std::uint64_t seed = 1);
    // evaluation shape of a 1,000 x 13 clique benchmark plus 2,000 noise items
    static SynthConfig paper_shape(std::uint64_t seed = 1);
};

struct SynthResult {
    EmbeddingSet train;
    EmbeddingSet val;
};

SynthResult generate_synthetic(const SynthConfig& cfg);

}  // namespace embd

#endif

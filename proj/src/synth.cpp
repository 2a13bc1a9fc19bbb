#include "embdistill/synth.hpp"

#include <cmath>
#include <string>

#include "embdistill/rng.hpp"

namespace embd {

void SynthConfig::validate() const {
    if (num_cliques == 0) throw ConfigError("synth: num_cliques must be >= 1");
    if (num_val_cliques == 0) throw ConfigError("synth: num_val_cliques must be >= 1");
    if (clique_size_min < 2) throw ConfigError("synth: clique_size_min must be >= 2");
    if (clique_size_max < clique_size_min) {
        throw ConfigError("synth: clique_size_max must be >= clique_size_min");
    }
    if (val_clique_size == 1) throw ConfigError("synth: val_clique_size must be 0 or >= 2");
    if (teacher_dim == 0) throw ConfigError("synth: teacher_dim must be >= 1");
    if (intrinsic_dim > teacher_dim) {
        throw ConfigError("synth: intrinsic_dim must be <= teacher_dim");
    }
    if (center_scale < 0.0 || noise_scale < 0.0) {
        throw ConfigError("synth: scales must be non-negative");
    }
}

SynthConfig SynthConfig::separable(std::uint64_t seed) {
    SynthConfig cfg;
    cfg.num_cliques = 48;
    cfg.num_val_cliques = 16;
    cfg.clique_size_min = 4;
    cfg.clique_size_max = 8;
    cfg.teacher_dim = 256;
    cfg.intrinsic_dim = 8;
    cfg.center_scale = 1.0;
    cfg.noise_scale = 0.1;
    cfg.num_noise_items = 0;
    cfg.seed = seed;
    return cfg;
}

SynthConfig SynthConfig::paper_shape(std::uint64_t seed) {
    SynthConfig cfg;
    cfg.num_cliques = 1450;
    cfg.num_val_cliques = 1000;
    cfg.clique_size_min = 2;
    cfg.clique_size_max = 109;
    cfg.val_clique_size = 13;
    cfg.teacher_dim = 256;
    cfg.intrinsic_dim = 32;
    cfg.center_scale = 1.0;
    cfg.noise_scale = 0.1;
    cfg.num_noise_items = 2000;
    cfg.seed = seed;
    return cfg;
}

namespace {

// Truncated geometric over [min, max]: heavier mass on small cliques.
std::size_t draw_clique_size(Rng& rng, std::size_t min_size, std::size_t max_size) {
    if (min_size == max_size) return min_size;
    constexpr double kDecay = 0.75;  // P(s) proportional to kDecay^(s - min)
    const std::size_t span = max_size - min_size + 1;
    double total = 0.0;
    double w = 1.0;
    for (std::size_t s = 0; s < span; ++s) {
        total += w;
        w *= kDecay;
    }
    double u = rng.next_double() * total;
    w = 1.0;
    for (std::size_t s = 0; s < span; ++s) {
        if (u < w) return min_size + s;
        u -= w;
        w *= kDecay;
    }
    return max_size;
}

// Orthonormal r x d basis scaled by sqrt(d/r), so a unit-variance latent
// draw through it has the same norm as a full-rank Gaussian center.
MatrixD center_basis(const SynthConfig& cfg) {
    const std::size_t d = cfg.teacher_dim;
    const std::size_t r = cfg.intrinsic_dim == 0 ? d : cfg.intrinsic_dim;
    Rng rng(mix_seed(cfg.seed, 0x6261736973));
    MatrixD basis(r, d);
    for (auto& v : basis.storage()) v = rng.normal();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += basis(i, k) * basis(j, k);
            for (std::size_t k = 0; k < d; ++k) basis(i, k) -= dot * basis(j, k);
        }
        double norm = 0.0;
        for (std::size_t k = 0; k < d; ++k) norm += basis(i, k) * basis(i, k);
        norm = std::sqrt(norm);
        for (std::size_t k = 0; k < d; ++k) basis(i, k) /= norm;
    }
    const double scale = std::sqrt(static_cast<double>(d) / static_cast<double>(r));
    for (auto& v : basis.storage()) v *= scale;
    return basis;
}

EmbeddingSet build_split(const SynthConfig& cfg, Rng& rng, const MatrixD& basis,
                         Label first_clique, std::size_t clique_count, std::size_t noise_count,
                         const std::string& prefix, std::size_t size_min, std::size_t size_max) {
    std::vector<Item> items;
    std::vector<float> data;
    const std::size_t d = cfg.teacher_dim;
    const std::size_t r = basis.rows();
    std::vector<double> latent(r);
    std::vector<double> center(d);
    auto draw_center = [&]() {
        for (std::size_t k = 0; k < r; ++k) latent[k] = cfg.center_scale * rng.normal();
        for (std::size_t k = 0; k < d; ++k) {
            double acc = 0.0;
            for (std::size_t c = 0; c < r; ++c) acc += latent[c] * basis(c, k);
            center[k] = acc;
        }
    };
    for (std::size_t c = 0; c < clique_count; ++c) {
        const Label clique = first_clique + static_cast<Label>(c);
        draw_center();
        const std::size_t sz = draw_clique_size(rng, size_min, size_max);
        for (std::size_t m = 0; m < sz; ++m) {
            items.push_back({prefix + std::to_string(clique) + "_" + std::to_string(m), clique});
            for (std::size_t k = 0; k < d; ++k) {
                data.push_back(static_cast<float>(center[k] + cfg.noise_scale * rng.normal()));
            }
        }
    }
    for (std::size_t i = 0; i < noise_count; ++i) {
        items.push_back({prefix + "noise_" + std::to_string(i), std::nullopt});
        draw_center();
        for (std::size_t k = 0; k < d; ++k) data.push_back(static_cast<float>(center[k]));
    }
    Matrix vectors(items.size(), d, std::move(data));
    return make_embedding_set(std::move(items), std::move(vectors));
}

}  // namespace

SynthResult generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    Rng train_rng(mix_seed(cfg.seed, 0x7261696e));
    Rng val_rng(mix_seed(cfg.seed, 0x76616c));

    const MatrixD basis = center_basis(cfg);

    SynthResult out;
    out.train = build_split(cfg, train_rng, basis, 0, cfg.num_cliques, 0, "t",
                            cfg.clique_size_min, cfg.clique_size_max);
    // Val cliques sit in a disjoint id range; the eval protocol keeps noise
    // items out of training entirely.
    const Label val_first = static_cast<Label>(cfg.num_cliques);
    std::size_t val_min = cfg.clique_size_min;
    std::size_t val_max = std::min<std::size_t>(
        cfg.clique_size_max, std::max<std::size_t>(cfg.clique_size_min, 13));
    if (cfg.val_clique_size != 0) {
        val_min = cfg.val_clique_size;
        val_max = cfg.val_clique_size;
    }
    out.val = build_split(cfg, val_rng, basis, val_first, cfg.num_val_cliques,
                          cfg.num_noise_items, "v", val_min, val_max);
    return out;
}

}  // namespace embd

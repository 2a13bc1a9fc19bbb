#ifndef EMBDISTILL_REDUCTION_HPP
#define EMBDISTILL_REDUCTION_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "embdistill/matrix.hpp"

namespace embd {

enum class ReducerKind { pca, ica, grp };

std::string to_string(ReducerKind k);
ReducerKind reducer_kind_from_string(const std::string& s);

// A fitted unsupervised transform. PCA/ICA subtract the stored mean before
// projecting; GRP projects raw input. Immutable once fitted.
struct Reducer {
    ReducerKind kind = ReducerKind::pca;
    std::vector<float> mean;  // empty for grp
    Matrix components;        // k x d
    std::size_t fitted_n = 0;
    std::size_t fitted_d = 0;
    std::size_t target_dim = 0;
    std::vector<float> explained_variance;  // pca only, non-increasing
};

// Top-k right singular vectors of the mean-centered data, ordered by
// non-increasing explained variance. Sign convention: the largest-magnitude
// entry of every component is positive.
Reducer fit_pca(const Matrix& X, std::size_t k);

struct IcaDiagnostics {
    std::size_t iterations = 0;
    double final_delta = 0.0;
    bool converged = false;
};

// FastICA outcome; `reducer` is only set on convergence. Non-convergence is
// reported, not thrown.
struct IcaOutcome {
    std::optional<Reducer> reducer;
    IcaDiagnostics diag;
};

// PCA-whitening to k dimensions followed by symmetric fixed-point iteration
// with the logcosh contrast (a = 1).
IcaOutcome fit_ica(const Matrix& X, std::size_t k, std::size_t max_iter = 200, double tol = 1e-4,
                   std::uint64_t seed = 0);

// Components i.i.d. Normal(0, 1/k); independent of any data.
Reducer fit_grp(std::size_t d, std::size_t k, std::uint64_t seed);

Matrix transform(const Reducer& r, const Matrix& X);

// Checkpoint file, same container conventions as the embedding format.
void save_reducer(const Reducer& r, const std::string& path);
Reducer load_reducer(const std::string& path);

}  // namespace embd

#endif

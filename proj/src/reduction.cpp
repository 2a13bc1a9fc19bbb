#include "embdistill/reduction.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "embdistill/io_util.hpp"
#include "embdistill/rng.hpp"
#include "json.hpp"

namespace embd {

std::string to_string(ReducerKind k) {
    switch (k) {
        case ReducerKind::pca: return "pca";
        case ReducerKind::ica: return "ica";
        case ReducerKind::grp: return "grp";
    }
    return "?";
}

ReducerKind reducer_kind_from_string(const std::string& s) {
    if (s == "pca") return ReducerKind::pca;
    if (s == "ica") return ReducerKind::ica;
    if (s == "grp") return ReducerKind::grp;
    throw ConfigError("unknown reducer kind: " + s);
}

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd to_eigen(const Matrix& m) {
    MatrixXd out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m(i, j);
    }
    return out;
}

Matrix from_eigen(const MatrixXd& m) {
    Matrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = static_cast<float>(m(i, j));
        }
    }
    return out;
}

// Largest-magnitude entry of each row made positive so fits are reproducible.
void fix_signs(MatrixXd& rows) {
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
        Eigen::Index arg = 0;
        double best = -1.0;
        for (Eigen::Index j = 0; j < rows.cols(); ++j) {
            const double a = std::abs(rows(i, j));
            if (a > best) {
                best = a;
                arg = j;
            }
        }
        if (rows(i, arg) < 0.0) rows.row(i) = -rows.row(i);
    }
}

std::vector<float> column_means(const Matrix& X) {
    std::vector<float> mean(X.cols(), 0.0f);
    if (X.rows() == 0) return mean;
    for (std::size_t j = 0; j < X.cols(); ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < X.rows(); ++i) acc += X(i, j);
        mean[j] = static_cast<float>(acc / static_cast<double>(X.rows()));
    }
    return mean;
}

// W <- (W W^T)^{-1/2} W, the symmetric decorrelation step.
MatrixXd sym_decorrelate(const MatrixXd& W) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(W * W.transpose());
    const VectorXd vals = eig.eigenvalues().cwiseMax(1e-30).cwiseSqrt().cwiseInverse();
    return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose() * W;
}

}  // namespace

Reducer fit_pca(const Matrix& X, std::size_t k) {
    require_finite(X, "pca input");
    const std::size_t n = X.rows(), d = X.cols();
    if (n < 2) throw ConfigError("pca: need at least 2 rows");
    if (k < 1 || k > std::min(n - 1, d)) {
        throw ConfigError("pca: k=" + std::to_string(k) + " out of range [1, min(n-1, d)] = [1, " +
                          std::to_string(std::min(n - 1, d)) + "]");
    }

    Reducer r;
    r.kind = ReducerKind::pca;
    r.mean = column_means(X);
    r.fitted_n = n;
    r.fitted_d = d;
    r.target_dim = k;

    MatrixXd Xc = to_eigen(X);
    for (std::size_t j = 0; j < d; ++j) Xc.col(static_cast<Eigen::Index>(j)).array() -= r.mean[j];

    // SVD of the centered matrix; the covariance eigendecomposition only
    // appears as a test oracle.
    Eigen::BDCSVD<MatrixXd> svd(Xc, Eigen::ComputeThinV);
    MatrixXd comps = svd.matrixV().leftCols(static_cast<Eigen::Index>(k)).transpose();
    fix_signs(comps);
    r.components = from_eigen(comps);

    r.explained_variance.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double s = svd.singularValues()(static_cast<Eigen::Index>(i));
        r.explained_variance[i] = static_cast<float>(s * s / static_cast<double>(n - 1));
    }
    return r;
}

IcaOutcome fit_ica(const Matrix& X, std::size_t k, std::size_t max_iter, double tol,
                   std::uint64_t seed) {
    require_finite(X, "ica input");
    const std::size_t n = X.rows(), d = X.cols();
    if (n < 2) throw ConfigError("ica: need at least 2 rows");
    if (k < 1 || k > std::min(n - 1, d)) {
        throw ConfigError("ica: k=" + std::to_string(k) + " out of range [1, min(n-1, d)]");
    }
    if (max_iter < 1) throw ConfigError("ica: max_iter must be >= 1");

    const std::vector<float> mean = column_means(X);
    MatrixXd Xc = to_eigen(X);
    for (std::size_t j = 0; j < d; ++j) Xc.col(static_cast<Eigen::Index>(j)).array() -= mean[j];

    // Whiten to k dims: Z = Xc * V_k * diag(sqrt(n-1)/s_k) has identity
    // sample covariance.
    Eigen::BDCSVD<MatrixXd> svd(Xc, Eigen::ComputeThinV);
    MatrixXd whiten(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
    for (std::size_t c = 0; c < k; ++c) {
        const double s = svd.singularValues()(static_cast<Eigen::Index>(c));
        if (s <= 0.0) throw DegenerateInputError("ica: data rank below k");
        whiten.col(static_cast<Eigen::Index>(c)) =
            svd.matrixV().col(static_cast<Eigen::Index>(c)) * (std::sqrt(static_cast<double>(n - 1)) / s);
    }
    const MatrixXd Z = Xc * whiten;  // n x k

    Rng rng(mix_seed(seed, 0x696361));
    MatrixXd W(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
        for (Eigen::Index j = 0; j < W.cols(); ++j) W(i, j) = rng.normal();
    }
    W = sym_decorrelate(W);

    IcaOutcome out;
    double delta = std::numeric_limits<double>::infinity();
    std::size_t it = 0;
    for (; it < max_iter; ++it) {
        const MatrixXd U = Z * W.transpose();            // n x k source estimates
        const MatrixXd G = U.array().tanh().matrix();    // logcosh contrast, a = 1
        const VectorXd gprime_mean =
            (1.0 - G.array().square()).colwise().mean().matrix().transpose();
        MatrixXd W_new =
            (G.transpose() * Z) / static_cast<double>(n) - gprime_mean.asDiagonal() * W;
        W_new = sym_decorrelate(W_new);
        delta = 0.0;
        for (Eigen::Index i = 0; i < W.rows(); ++i) {
            delta = std::max(delta, std::abs(1.0 - std::abs(W_new.row(i).dot(W.row(i)))));
        }
        W = W_new;
        if (delta < tol) {
            ++it;
            break;
        }
    }
    out.diag.iterations = it;
    out.diag.final_delta = delta;
    out.diag.converged = delta < tol;
    if (!out.diag.converged) return out;

    Reducer r;
    r.kind = ReducerKind::ica;
    r.mean = mean;
    r.fitted_n = n;
    r.fitted_d = d;
    r.target_dim = k;
    MatrixXd comps = W * whiten.transpose();  // k x d unmixing incl. whitening
    fix_signs(comps);
    r.components = from_eigen(comps);
    out.reducer = std::move(r);
    return out;
}

Reducer fit_grp(std::size_t d, std::size_t k, std::uint64_t seed) {
    if (d < 1 || k < 1) throw ConfigError("grp: d and k must be >= 1");
    Reducer r;
    r.kind = ReducerKind::grp;
    r.fitted_n = 0;
    r.fitted_d = d;
    r.target_dim = k;
    r.components = Matrix(k, d);
    Rng rng(mix_seed(seed, 0x677270));
    const double scale = 1.0 / std::sqrt(static_cast<double>(k));
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            r.components(i, j) = static_cast<float>(scale * rng.normal());
        }
    }
    return r;
}

Matrix transform(const Reducer& r, const Matrix& X) {
    if (X.cols() != r.fitted_d) {
        throw DimensionError("transform: input has " + std::to_string(X.cols()) +
                             " cols, reducer was fitted on " + std::to_string(r.fitted_d));
    }
    const std::size_t n = X.rows(), k = r.target_dim, d = r.fitted_d;
    Matrix out(n, k);
    const bool centered = !r.mean.empty();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < k; ++c) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double x = centered ? static_cast<double>(X(i, j)) - static_cast<double>(r.mean[j])
                                          : static_cast<double>(X(i, j));
                acc += x * static_cast<double>(r.components(c, j));
            }
            out(i, c) = static_cast<float>(acc);
        }
    }
    return out;
}

namespace {
constexpr char kMagic[4] = {'R', 'D', 'C', 'R'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_reducer(const Reducer& r, const std::string& path) {
    std::string out;
    out.append(kMagic, 4);
    io::put_u32(out, kVersion);
    io::put_u32(out, static_cast<std::uint32_t>(r.target_dim));
    io::put_u32(out, static_cast<std::uint32_t>(r.fitted_d));
    const std::uint32_t has_mean = r.mean.empty() ? 0 : 1;
    io::put_u32(out, has_mean);
    for (float v : r.mean) io::put_f32(out, v);
    for (float v : r.components.storage()) io::put_f32(out, v);

    nlohmann::json trailer;
    trailer["kind"] = to_string(r.kind);
    trailer["fitted_n"] = r.fitted_n;
    trailer["fitted_d"] = r.fitted_d;
    trailer["target_dim"] = r.target_dim;
    trailer["explained_variance"] = r.explained_variance;
    const std::string t = trailer.dump();
    out += t;
    io::put_u64(out, t.size());
    io::write_file(path, out);
}

Reducer load_reducer(const std::string& path) {
    const std::vector<std::uint8_t> buf = io::read_file(path);
    io::Reader rd(buf.data(), buf.size());
    rd.require(4, "magic");
    if (std::memcmp(buf.data(), kMagic, 4) != 0) throw FormatError("bad magic in " + path, 0);
    rd.skip(4);
    if (rd.u32("version") != kVersion) throw FormatError("unsupported reducer version", 4);
    const std::uint32_t k = rd.u32("target dim");
    const std::uint32_t d = rd.u32("fitted dim");
    const std::uint32_t has_mean = rd.u32("mean flag");

    Reducer r;
    r.target_dim = k;
    r.fitted_d = d;
    if (has_mean) {
        r.mean.resize(d);
        for (std::uint32_t j = 0; j < d; ++j) r.mean[j] = rd.f32("mean");
    }
    r.components = Matrix(k, d);
    for (std::size_t i = 0; i < static_cast<std::size_t>(k) * d; ++i) {
        r.components.storage()[i] = rd.f32("components");
    }

    io::Reader tail(buf.data() + buf.size() - 8, 8);
    const std::uint64_t trailer_len = tail.u64("trailer length");
    const std::size_t trailer_start = rd.offset();
    if (trailer_start + trailer_len + 8 != buf.size()) {
        throw FormatError("reducer trailer length inconsistent with file size", trailer_start);
    }
    nlohmann::json trailer = nlohmann::json::parse(
        buf.begin() + static_cast<std::ptrdiff_t>(trailer_start),
        buf.begin() + static_cast<std::ptrdiff_t>(trailer_start + trailer_len));
    r.kind = reducer_kind_from_string(trailer.at("kind").get<std::string>());
    r.fitted_n = trailer.at("fitted_n").get<std::size_t>();
    r.explained_variance = trailer.at("explained_variance").get<std::vector<float>>();
    return r;
}

}  // namespace embd

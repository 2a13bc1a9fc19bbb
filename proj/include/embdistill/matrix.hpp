#ifndef EMBDISTILL_MATRIX_HPP
#define EMBDISTILL_MATRIX_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "embdistill/errors.hpp"

namespace embd {

// Dense row-major matrix. Production code uses MatT<float> (storage is
// 32-bit); reductions and dot products accumulate in 64-bit. The double
// instantiation exists so tests can run the same kernels as a 64-bit
// shadow computation.
template <typename T>
class MatT {
public:
    MatT() = default;
    MatT(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, T(0)) {}
    MatT(std::size_t rows, std::size_t cols, std::vector<T> values)
        : rows_(rows), cols_(cols), data_(std::move(values)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                                 " != rows*cols = " + std::to_string(rows_ * cols_));
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    void fill(T v) { data_.assign(data_.size(), v); }

    bool same_shape(const MatT& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const {
        for (const T& v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename U>
    MatT<U> cast() const {
        MatT<U> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = MatT<float>;
using MatrixD = MatT<double>;

// NaN/Inf policing at module boundaries. Kernels themselves stay branch-free.
template <typename T>
void require_finite(const MatT<T>& m, const std::string& what) {
    if (!m.all_finite()) {
        throw DegenerateInputError(what + " contains a non-finite entry");
    }
}

// Const row view regardless of the matrix's own constness; handy because the
// span-based kernels deduce their scalar type from const spans.
template <typename T>
std::span<const T> crow(const MatT<T>& m, std::size_t r) {
    return m.row(r);
}

template <typename T>
void require_finite(std::span<const T> v, const std::string& what) {
    for (const T& x : v) {
        if (!std::isfinite(static_cast<double>(x))) {
            throw DegenerateInputError(what + " contains a non-finite entry");
        }
    }
}

}  // namespace embd

#endif

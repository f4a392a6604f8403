#pragma once

#include <binspot/error.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace binspot {

using Real = double;
using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major tensor of reals.
///
/// Construction from external data checks that the payload matches the
/// shape and that every value is finite. Kernels that fill a zero tensor
/// in place skip the finiteness scan.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), Real{0}) {}

    Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
        detail::require_shape(data_.size() == shape_size(shape_),
                              "tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
        for (Real v : data_) {
            detail::require(std::isfinite(v), "tensor values must be finite");
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor filled(Shape shape, Real value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<Real> data() noexcept { return data_; }
    std::span<const Real> data() const noexcept { return data_; }
    std::vector<Real>& storage() noexcept { return data_; }
    const std::vector<Real>& storage() const noexcept { return data_; }

    Real& operator[](std::size_t i) noexcept { return data_[i]; }
    Real operator[](std::size_t i) const noexcept { return data_[i]; }

    // 2-D helpers; callers guarantee rank 2.
    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.at(1); }
    Real& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
    Real at(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

    std::span<Real> row(std::size_t r) noexcept { return {data_.data() + r * shape_[1], shape_[1]}; }
    std::span<const Real> row(std::size_t r) const noexcept {
        return {data_.data() + r * shape_[1], shape_[1]};
    }

    Tensor reshaped(Shape shape) const {
        detail::require_shape(shape_size(shape) == data_.size(), "reshape changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<Real> data_;
};

/// Bit-packed matrix of ±1 values. Bit 1 encodes +1, bit 0 encodes −1.
/// Rows occupy whole 64-bit words; bits past logical_cols are kept zero.
class BitTensor {
public:
    static constexpr std::size_t kWordBits = 64;

    BitTensor() = default;

    BitTensor(std::size_t rows, std::size_t logical_cols)
        : rows_(rows), cols_(logical_cols), wpr_(words_for(logical_cols)), words_(rows * wpr_, 0) {}

    /// Adopts raw words; rejects payloads whose padding bits are set.
    static BitTensor from_words(std::size_t rows, std::size_t logical_cols,
                                std::vector<std::uint64_t> words) {
        BitTensor t(rows, logical_cols);
        detail::require_shape(words.size() == t.words_.size(), "bit tensor word count mismatch");
        t.words_ = std::move(words);
        detail::require(t.padding_clean(), "bit tensor padding bits must be zero");
        return t;
    }

    static constexpr std::size_t words_for(std::size_t bits) noexcept {
        return (bits + kWordBits - 1) / kWordBits;
    }

    /// Mask of valid bits in the final word of a row (all ones when the row is word-aligned).
    std::uint64_t tail_mask() const noexcept {
        const std::size_t rem = cols_ % kWordBits;
        return rem == 0 ? ~std::uint64_t{0} : ((std::uint64_t{1} << rem) - 1);
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t logical_cols() const noexcept { return cols_; }
    std::size_t words_per_row() const noexcept { return wpr_; }

    std::span<const std::uint64_t> words() const noexcept { return words_; }
    std::span<const std::uint64_t> row(std::size_t r) const noexcept {
        return {words_.data() + r * wpr_, wpr_};
    }

    bool get(std::size_t r, std::size_t c) const noexcept {
        return (words_[r * wpr_ + c / kWordBits] >> (c % kWordBits)) & 1u;
    }

    void set(std::size_t r, std::size_t c, bool positive) {
        detail::require(r < rows_ && c < cols_, "bit index out of range");
        std::uint64_t& w = words_[r * wpr_ + c / kWordBits];
        const std::uint64_t bit = std::uint64_t{1} << (c % kWordBits);
        w = positive ? (w | bit) : (w & ~bit);
    }

    bool padding_clean() const noexcept {
        if (wpr_ == 0) return true;
        const std::uint64_t pad = ~tail_mask();
        for (std::size_t r = 0; r < rows_; ++r) {
            if (words_[r * wpr_ + wpr_ - 1] & pad) return false;
        }
        return true;
    }

    friend bool operator==(const BitTensor&, const BitTensor&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::size_t wpr_ = 0;
    std::vector<std::uint64_t> words_;
};

/// Packs one row of ±1 values into `out` (which must hold words_for(n) words).
inline void pack_sign_row(std::span<const Real> signs, std::span<std::uint64_t> out) {
    std::fill(out.begin(), out.end(), 0);
    for (std::size_t i = 0; i < signs.size(); ++i) {
        const Real v = signs[i];
        if (v == Real{1}) {
            out[i / BitTensor::kWordBits] |= std::uint64_t{1} << (i % BitTensor::kWordBits);
        } else if (v != Real{-1}) {
            throw InvalidArgument("pack_signs: element " + std::to_string(i) + " is not +1 or -1");
        }
    }
}

/// Packs a rank-1 or rank-2 tensor of strict ±1 values row by row.
inline BitTensor pack_signs(const Tensor& signs) {
    detail::require(signs.rank() == 1 || signs.rank() == 2, "pack_signs expects rank 1 or 2");
    const std::size_t rows = signs.rank() == 2 ? signs.dim(0) : 1;
    const std::size_t cols = signs.rank() == 2 ? signs.dim(1) : signs.dim(0);
    std::vector<std::uint64_t> words(rows * BitTensor::words_for(cols), 0);
    const std::size_t wpr = BitTensor::words_for(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        pack_sign_row(signs.data().subspan(r * cols, cols),
                      std::span<std::uint64_t>(words.data() + r * wpr, wpr));
    }
    return BitTensor::from_words(rows, cols, std::move(words));
}

inline Tensor unpack_signs(const BitTensor& t) {
    Tensor out({t.rows(), t.logical_cols()});
    for (std::size_t r = 0; r < t.rows(); ++r) {
        for (std::size_t c = 0; c < t.logical_cols(); ++c) {
            out.at(r, c) = t.get(r, c) ? Real{1} : Real{-1};
        }
    }
    return out;
}

}  // namespace binspot

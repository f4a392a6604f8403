#pragma once

#include <binspot/tensor.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace binspot {

/// Row-major matrix of exact integer dot products.
struct IntMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int32_t> data;

    IntMatrix() = default;
    IntMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

    std::int32_t& at(std::size_t r, std::size_t c) noexcept { return data[r * cols + c]; }
    std::int32_t at(std::size_t r, std::size_t c) const noexcept { return data[r * cols + c]; }

    friend bool operator==(const IntMatrix&, const IntMatrix&) = default;
};

/// Register blocking of the lane-accumulating kernel.
///
/// Per-byte popcounts (at most `narrow_lane_bits` each) are summed into
/// 8-bit lanes for `inner_unroll` words, then pairwise-widened into 16-bit
/// lanes, then folded into full-width totals.
struct KernelBlocking {
    std::size_t inner_unroll = 16;
    std::size_t narrow_lane_bits = 8;
    std::size_t wide_lane_bits = 16;

    std::size_t worst_case_narrow_sum() const noexcept { return inner_unroll * narrow_lane_bits; }

    bool valid() const noexcept {
        if (narrow_lane_bits != 8 || wide_lane_bits != 16) return false;
        if (inner_unroll == 0) return false;
        return worst_case_narrow_sum() <= (std::size_t{1} << narrow_lane_bits) - 1;
    }

    void validate() const {
        if (narrow_lane_bits != 8 || wide_lane_bits != 16) {
            throw InvalidArgument("kernel blocking: only 8-bit narrow / 16-bit wide lanes are supported");
        }
        if (inner_unroll == 0) throw InvalidArgument("kernel blocking: inner_unroll must be >= 1");
        if (!valid()) {
            throw InvalidArgument("kernel blocking: inner_unroll " + std::to_string(inner_unroll) +
                                  " overflows the 8-bit narrow lane (worst case " +
                                  std::to_string(worst_case_narrow_sum()) + " > 255)");
        }
    }
};

/// Sum over ±1 pairs, computed as n − 2·popcount(a XOR b). Padding bits are
/// zero in both rows so they never contribute.
inline std::int64_t xnor_popcount_dot(std::span<const std::uint64_t> a,
                                      std::span<const std::uint64_t> b, std::size_t n) {
    const std::size_t words = BitTensor::words_for(n);
    detail::require_shape(a.size() == words && b.size() == words,
                          "xnor_popcount_dot: row length does not match logical length");
    std::int64_t diff = 0;
    for (std::size_t w = 0; w < words; ++w) diff += std::popcount(a[w] ^ b[w]);
    return static_cast<std::int64_t>(n) - 2 * diff;
}

namespace detail {

inline void check_bgemm_operands(const BitTensor& a, const BitTensor& b) {
    require_shape(a.logical_cols() == b.logical_cols(),
                  "bgemm: operands disagree on inner dimension (" + std::to_string(a.logical_cols()) +
                      " vs " + std::to_string(b.logical_cols()) + ")");
}

// Per-byte popcount: each byte of the result holds the bit count (0..8) of that byte.
constexpr std::uint64_t byte_popcount(std::uint64_t x) noexcept {
    x = x - ((x >> 1) & 0x5555555555555555ULL);
    x = (x & 0x3333333333333333ULL) + ((x >> 2) & 0x3333333333333333ULL);
    return (x + (x >> 4)) & 0x0F0F0F0F0F0F0F0FULL;
}

// Pairwise add of adjacent 8-bit lanes into 16-bit lanes (the ADALP step).
constexpr std::uint64_t widen_pairs(std::uint64_t narrow) noexcept {
    return (narrow & 0x00FF00FF00FF00FFULL) + ((narrow >> 8) & 0x00FF00FF00FF00FFULL);
}

constexpr std::uint64_t sum_u16_lanes(std::uint64_t wide) noexcept {
    return (wide & 0xFFFF) + ((wide >> 16) & 0xFFFF) + ((wide >> 32) & 0xFFFF) + (wide >> 48);
}

inline void bgemm_reference_rows(const BitTensor& a, const BitTensor& b, std::size_t row_begin,
                                 std::size_t row_end, IntMatrix& out) {
    const std::size_t n = a.logical_cols();
    for (std::size_t i = row_begin; i < row_end; ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            out.at(i, j) = static_cast<std::int32_t>(xnor_popcount_dot(a.row(i), b.row(j), n));
        }
    }
}

inline constexpr std::size_t kTileRowsA = 4;
inline constexpr std::size_t kTileRowsB = 2;

inline void bgemm_blocked_rows(const BitTensor& a, const BitTensor& b, const KernelBlocking& blk,
                               std::size_t row_begin, std::size_t row_end, IntMatrix& out) {
    const std::size_t n = a.logical_cols();
    const std::size_t words = a.words_per_row();
    // Each widening adds at most 2 * inner_unroll * 8 to a 16-bit lane.
    const std::size_t widen_budget = 0xFFFF / (2 * blk.worst_case_narrow_sum());

    for (std::size_t i0 = row_begin; i0 < row_end; i0 += kTileRowsA) {
        const std::size_t mr = std::min(kTileRowsA, row_end - i0);
        for (std::size_t j0 = 0; j0 < b.rows(); j0 += kTileRowsB) {
            const std::size_t nr = std::min(kTileRowsB, b.rows() - j0);

            std::array<const std::uint64_t*, kTileRowsA> pa{};
            std::array<const std::uint64_t*, kTileRowsB> pb{};
            for (std::size_t ii = 0; ii < mr; ++ii) pa[ii] = a.row(i0 + ii).data();
            for (std::size_t jj = 0; jj < nr; ++jj) pb[jj] = b.row(j0 + jj).data();

            std::array<std::uint64_t, kTileRowsA * kTileRowsB> narrow{};  // 8-bit lanes
            std::array<std::uint64_t, kTileRowsA * kTileRowsB> wide{};    // 16-bit lanes
            std::array<std::uint64_t, kTileRowsA * kTileRowsB> total{};   // full width
            std::size_t inner = 0;
            std::size_t widened = 0;

            auto widen = [&] {
                for (std::size_t t = 0; t < mr * kTileRowsB; ++t) {
                    wide[t] += widen_pairs(narrow[t]);
                    narrow[t] = 0;
                }
                inner = 0;
                if (++widened == widen_budget) {
                    for (std::size_t t = 0; t < mr * kTileRowsB; ++t) {
                        total[t] += sum_u16_lanes(wide[t]);
                        wide[t] = 0;
                    }
                    widened = 0;
                }
            };

            for (std::size_t w = 0; w < words; ++w) {
                for (std::size_t ii = 0; ii < mr; ++ii) {
                    const std::uint64_t av = pa[ii][w];
                    for (std::size_t jj = 0; jj < nr; ++jj) {
                        narrow[ii * kTileRowsB + jj] += byte_popcount(av ^ pb[jj][w]);
                    }
                }
                if (++inner == blk.inner_unroll) widen();
            }
            if (inner != 0) widen();
            for (std::size_t t = 0; t < mr * kTileRowsB; ++t) total[t] += sum_u16_lanes(wide[t]);

            for (std::size_t ii = 0; ii < mr; ++ii) {
                for (std::size_t jj = 0; jj < nr; ++jj) {
                    const auto diff = static_cast<std::int64_t>(total[ii * kTileRowsB + jj]);
                    out.at(i0 + ii, j0 + jj) =
                        static_cast<std::int32_t>(static_cast<std::int64_t>(n) - 2 * diff);
                }
            }
        }
    }
}

}  // namespace detail

/// out[i][j] = dot(A row i, B row j). B holds the right operand pre-transposed.
inline IntMatrix bgemm_reference(const BitTensor& a, const BitTensor& b) {
    detail::check_bgemm_operands(a, b);
    IntMatrix out(a.rows(), b.rows());
    detail::bgemm_reference_rows(a, b, 0, a.rows(), out);
    return out;
}

/// Lane-blocked BGEMM; bit-exact with bgemm_reference.
inline IntMatrix bgemm_blocked(const BitTensor& a, const BitTensor& b,
                               const KernelBlocking& blocking = {}) {
    blocking.validate();
    detail::check_bgemm_operands(a, b);
    IntMatrix out(a.rows(), b.rows());
    detail::bgemm_blocked_rows(a, b, blocking, 0, a.rows(), out);
    return out;
}

/// out[i][j] = alpha_w[j] * raw[i][j]; columns of raw are output channels.
inline Tensor assemble_scaled_output(const IntMatrix& raw, std::span<const Real> alpha_w) {
    detail::require_shape(alpha_w.size() == raw.cols,
                          "assemble_scaled_output: alpha_w length must equal output channels");
    Tensor out({raw.rows, raw.cols});
    for (std::size_t i = 0; i < raw.rows; ++i) {
        for (std::size_t j = 0; j < raw.cols; ++j) {
            out.at(i, j) = alpha_w[j] * static_cast<Real>(raw.at(i, j));
        }
    }
    return out;
}

/// Dual-scale assembly: alpha_w * (raw_first + alpha2 * raw_second). The
/// second-scale factor is applied exactly once.
inline Tensor assemble_scaled_output(const IntMatrix& raw_first, const IntMatrix& raw_second,
                                     std::span<const Real> alpha_w, Real alpha2) {
    detail::require_shape(raw_first.rows == raw_second.rows && raw_first.cols == raw_second.cols,
                          "assemble_scaled_output: first/second scale shapes differ");
    detail::require_shape(alpha_w.size() == raw_first.cols,
                          "assemble_scaled_output: alpha_w length must equal output channels");
    Tensor out({raw_first.rows, raw_first.cols});
    for (std::size_t i = 0; i < raw_first.rows; ++i) {
        for (std::size_t j = 0; j < raw_first.cols; ++j) {
            out.at(i, j) = alpha_w[j] * (static_cast<Real>(raw_first.at(i, j)) +
                                         alpha2 * static_cast<Real>(raw_second.at(i, j)));
        }
    }
    return out;
}

}  // namespace binspot

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace binspot;

TEST(Tensor, ValidatingConstructorRejectsBadPayloads) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<Real>(5, 0)), ShapeMismatch);
    EXPECT_THROW(Tensor({1}, {std::nan("")}), InvalidArgument);
    const Tensor t({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(t.at(1, 0), 3);
    EXPECT_EQ(t.reshaped({4})[3], 4);
}

TEST(BitTensor, PackingKeepsPaddingZero) {
    std::mt19937_64 rng(1);
    for (std::size_t cols : {1u, 63u, 64u, 65u, 130u}) {
        const Tensor s = oracle::random_signs(3, cols, rng);
        const BitTensor b = pack_signs(s);
        EXPECT_TRUE(b.padding_clean());
        EXPECT_EQ(unpack_signs(b), s);
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t c = 0; c < cols; ++c) EXPECT_EQ(b.get(r, c), s.at(r, c) > 0);
    }
}

TEST(BitTensor, RejectsNonSignValuesAndDirtyPadding) {
    EXPECT_THROW(pack_signs(Tensor({1, 2}, {1, 0.5})), InvalidArgument);
    EXPECT_THROW(BitTensor::from_words(1, 3, {0xFFu}), InvalidArgument);
    EXPECT_NO_THROW(BitTensor::from_words(1, 3, {0x7u}));
    EXPECT_THROW(BitTensor::from_words(1, 3, {0x1u, 0x0u}), ShapeMismatch);
}

TEST(Kernel, DotMatchesBitwiseCount) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<std::size_t> len(1, 300);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = len(rng);
        const BitTensor a = pack_signs(oracle::random_signs(1, n, rng));
        const BitTensor b = pack_signs(oracle::random_signs(1, n, rng));
        const std::vector<std::uint64_t> wa(a.row(0).begin(), a.row(0).end()), wb(b.row(0).begin(), b.row(0).end());
        EXPECT_EQ(xnor_popcount_dot(a.row(0), b.row(0), n), oracle::brute_dot_bits(wa, wb, n));
    }
}

TEST(Kernel, DotExtremes) {
    const std::size_t n = 100;
    const BitTensor ones = pack_signs(Tensor::filled({1, n}, 1));
    const BitTensor neg = pack_signs(Tensor::filled({1, n}, -1));
    EXPECT_EQ(xnor_popcount_dot(ones.row(0), ones.row(0), n), 100);
    EXPECT_EQ(xnor_popcount_dot(ones.row(0), neg.row(0), n), -100);
    EXPECT_EQ(xnor_popcount_dot(neg.row(0), neg.row(0), n), 100);
}

TEST(Kernel, BlockedAndReferenceMatchFloatGemm) {
    std::mt19937_64 rng(3);
    for (auto [m, k, n] : {std::tuple{1u, 1u, 1u}, {5u, 3u, 64u}, {4u, 2u, 65u}, {9u, 7u, 1000u}, {13u, 5u, 4096u}}) {
        const Tensor a = oracle::random_signs(m, n, rng), b = oracle::random_signs(k, n, rng);
        const auto expect = oracle::float_gemm_abt(a, b);
        const IntMatrix r = bgemm_reference(pack_signs(a), pack_signs(b));
        const IntMatrix bl = bgemm_blocked(pack_signs(a), pack_signs(b));
        for (std::size_t i = 0; i < m * k; ++i) {
            EXPECT_EQ(r.data[i], expect[i]);
            EXPECT_EQ(bl.data[i], expect[i]);
        }
    }
}

TEST(Kernel, WideLanesDoNotOverflowOnLongAgreeingRows) {
    // All-disagreeing rows make every byte popcount 8, the worst case for the lanes.
    const std::size_t n = 64 * 2000;
    const BitTensor a = pack_signs(Tensor::filled({1, n}, 1));
    const BitTensor b = pack_signs(Tensor::filled({2, n}, -1));
    for (std::size_t unroll : {1u, 7u, 16u, 31u}) {
        const IntMatrix out = bgemm_blocked(a, b, {unroll, 8, 16});
        EXPECT_EQ(out.at(0, 0), -static_cast<std::int32_t>(n));
        EXPECT_EQ(out.at(0, 1), -static_cast<std::int32_t>(n));
    }
}

TEST(Kernel, BlockingValidation) {
    EXPECT_TRUE(KernelBlocking{}.valid());
    EXPECT_TRUE((KernelBlocking{31, 8, 16}.valid()));
    EXPECT_FALSE((KernelBlocking{32, 8, 16}.valid()));
    EXPECT_FALSE((KernelBlocking{0, 8, 16}.valid()));
    EXPECT_FALSE((KernelBlocking{4, 16, 32}.valid()));
    const BitTensor a(1, 8);
    EXPECT_THROW(bgemm_blocked(a, a, {32, 8, 16}), InvalidArgument);
}

TEST(Kernel, MismatchedInnerDimensionThrows) {
    EXPECT_THROW(bgemm_reference(BitTensor(2, 10), BitTensor(2, 11)), ShapeMismatch);
    EXPECT_THROW(bgemm_blocked(BitTensor(2, 10), BitTensor(2, 11)), ShapeMismatch);
}

TEST(Kernel, LaneHelpers) {
    EXPECT_EQ(detail::byte_popcount(0xFF00FF00FF00FF00ull), 0x0800080008000800ull);
    EXPECT_EQ(detail::widen_pairs(0x0102030405060708ull), 0x00030007000B000Full);
    EXPECT_EQ(detail::sum_u16_lanes(0x0001000200030004ull), 10u);
}

TEST(Kernel, ScaledAssembly) {
    IntMatrix raw(1, 2), raw2(1, 2);
    raw.at(0, 0) = 3, raw.at(0, 1) = -5;
    raw2.at(0, 0) = 1, raw2.at(0, 1) = 2;
    const std::vector<Real> alpha{0.5, 2.0};
    const Tensor s = assemble_scaled_output(raw, alpha);
    EXPECT_DOUBLE_EQ(s.at(0, 0), 1.5);
    EXPECT_DOUBLE_EQ(s.at(0, 1), -10);
    const Tensor d = assemble_scaled_output(raw, raw2, alpha, 0.25);
    EXPECT_DOUBLE_EQ(d.at(0, 0), 0.5 * (3 + 0.25));
    EXPECT_DOUBLE_EQ(d.at(0, 1), 2.0 * (-5 + 0.5));
    EXPECT_THROW(assemble_scaled_output(raw, std::vector<Real>{1.0}), ShapeMismatch);
}

TEST(Bench, SizeParsingAndThreadIndependence) {
    const GemmSize s = parse_gemm_size("256x4096x256");
    EXPECT_EQ(s.m, 256u);
    EXPECT_EQ(s.n, 4096u);
    EXPECT_EQ(s.k, 256u);
    EXPECT_THROW(parse_gemm_size("256x0x1"), InvalidArgument);
    EXPECT_THROW(parse_gemm_size("12x4"), InvalidArgument);
    EXPECT_THROW(parse_gemm_size("1x2x3y"), InvalidArgument);

    std::mt19937_64 rng(4);
    const BitTensor a = pack_signs(oracle::random_signs(37, 300, rng));
    const BitTensor b = pack_signs(oracle::random_signs(11, 300, rng));
    IntMatrix one(37, 11), many(37, 11);
    parallel_rows(37, 1, [&](std::size_t lo, std::size_t hi) { detail::bgemm_blocked_rows(a, b, {}, lo, hi, one); });
    parallel_rows(37, 4, [&](std::size_t lo, std::size_t hi) { detail::bgemm_blocked_rows(a, b, {}, lo, hi, many); });
    EXPECT_EQ(one, many);

    const auto rows = bench_kernel({{8, 128, 8}}, 1, 1, 1);
    ASSERT_EQ(rows.size(), 1u);
    std::ostringstream csv;
    write_bench_csv(csv, rows);
    EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')),
              "size_m,size_n,size_k,float_ns,ref_ns,blocked_ns,speedup_blocked_vs_float");
}

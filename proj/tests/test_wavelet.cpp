#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace binspot;

namespace {

Real energy(const Tensor& t) {
    Real s = 0;
    for (Real v : t.data()) s += v * v;
    return s;
}

}  // namespace

TEST(Haar, MatchesSeparableOracle) {
    std::mt19937_64 rng(9);
    const Tensor m = oracle::random_normal({6, 8}, rng);
    const WaveletPyramid p = haar_dwt2(m);
    const oracle::Bands b = oracle::haar_even(m);
    for (std::size_t i = 0; i < b.ll.size(); ++i) {
        EXPECT_NEAR(p.ll[i], b.ll[i], 1e-12);
        EXPECT_NEAR(p.lh[i], b.lh[i], 1e-12);
        EXPECT_NEAR(p.hl[i], b.hl[i], 1e-12);
        EXPECT_NEAR(p.hh[i], b.hh[i], 1e-12);
    }
}

TEST(Haar, ConstantMapHasNoDetail) {
    const WaveletPyramid p = haar_dwt2(Tensor::filled({4, 4}, 3));
    EXPECT_EQ(energy(p.lh) + energy(p.hl) + energy(p.hh), 0);
    EXPECT_DOUBLE_EQ(p.ll[0], 6);
    const FrequencyEnergies e = relative_energy(p);
    EXPECT_EQ(e.p_high, 0);
    EXPECT_EQ(e.p_low, 1);
}

TEST(Haar, CheckerboardIsPureDiagonal) {
    Tensor m({2, 2}, {1, -1, -1, 1});
    const WaveletPyramid p = haar_dwt2(m);
    EXPECT_DOUBLE_EQ(p.hh[0], 2);
    EXPECT_EQ(p.ll[0], 0);
}

TEST(Haar, ParsevalAndReconstruction) {
    std::mt19937_64 rng(10);
    for (auto shape : {Shape{4, 6}, Shape{3, 4, 8}, Shape{5, 7}, Shape{2, 3}}) {
        const Tensor m = oracle::random_normal(shape, rng);
        const WaveletPyramid p = haar_dwt2(m);
        const Tensor back = haar_idwt2(p);
        ASSERT_EQ(back.shape(), m.shape());
        for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(back[i], m[i], 1e-12);
        EXPECT_NEAR(energy(p.ll) + energy(p.lh) + energy(p.hl) + energy(p.hh), energy(m), 1e-9);
    }
}

TEST(Haar, ZeroMapYieldsZeroShares) {
    const FrequencyEnergies e = relative_energy(haar_dwt2(Tensor({4, 4})));
    EXPECT_EQ(e.p_high + e.p_low, 0);
}

TEST(Haar, TooSmallMapThrows) {
    EXPECT_THROW(haar_dwt2(Tensor({1, 4})), InvalidArgument);
    EXPECT_THROW(haar_dwt2(Tensor({4})), InvalidArgument);
}

TEST(SplitFrequency, ComponentsSumToInputAndAdjointHolds) {
    std::mt19937_64 rng(11);
    for (auto shape : {Shape{6, 8}, Shape{5, 7}}) {
        const Tensor r = oracle::random_normal(shape, rng);
        auto [hi, lo] = split_frequency(r);
        for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(hi[i] + lo[i], r[i], 1e-12);
        // <split(r), (gh, gl)> == <r, adjoint(gh, gl)>
        const Tensor gh = oracle::random_normal(shape, rng), gl = oracle::random_normal(shape, rng);
        const Tensor adj = split_frequency_adjoint(gh, gl);
        Real lhs = 0, rhs = 0;
        for (std::size_t i = 0; i < r.size(); ++i) {
            lhs += hi[i] * gh[i] + lo[i] * gl[i];
            rhs += r[i] * adj[i];
        }
        EXPECT_NEAR(lhs, rhs, 1e-9);
    }
}

TEST(Fid, IdenticalAndScaledMapsHaveZeroLoss) {
    std::mt19937_64 rng(12);
    const Tensor a = oracle::random_normal({6, 8}, rng);
    Tensor b = a;
    for (Real& v : b.storage()) v *= -3;  // squares are scale-invariant after normalization
    const FidPairCache c = fid_pair_forward(a, b);
    EXPECT_NEAR(c.loss, 0, 1e-12);
    const Tensor g = fid_pair_backward(fid_pair_forward(a, a));
    EXPECT_EQ(energy(g), 0);
}

TEST(Fid, ZeroStudentHasFiniteLossAndGradient) {
    std::mt19937_64 rng(13);
    const Tensor t = oracle::random_normal({4, 4}, rng);
    const FidPairCache c = fid_pair_forward(Tensor({4, 4}), t);
    EXPECT_NEAR(c.loss, 2, 1e-12);  // two unit-norm teacher components against zero vectors
    const Tensor g = fid_pair_backward(c);
    for (Real v : g.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Fid, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(14);
    Tensor s = oracle::random_normal({6, 6}, rng);
    const Tensor t = oracle::random_normal({6, 6}, rng);
    const Tensor g = fid_pair_backward(fid_pair_forward(s, t));
    for (std::size_t i = 0; i < s.size(); ++i) {
        const Real num = oracle::central_difference([&] { return fid_pair_forward(s, t).loss; }, s[i], 1e-6);
        EXPECT_LT(oracle::relative_error(g[i], num, 1e-8), 1e-5) << i;
    }
}

TEST(Fid, LossSumsPairsAndChecksAlignment) {
    std::mt19937_64 rng(15);
    std::vector<Tensor> s{oracle::random_normal({4, 4}, rng), oracle::random_normal({4, 4}, rng)};
    std::vector<Tensor> t{oracle::random_normal({4, 4}, rng), oracle::random_normal({4, 4}, rng)};
    EXPECT_NEAR(fid_loss(s, t), fid_pair_forward(s[0], t[0]).loss + fid_pair_forward(s[1], t[1]).loss, 1e-12);
    EXPECT_EQ(fid_loss_backward(s, t).size(), 2u);
    EXPECT_THROW(fid_loss(s, std::span<const Tensor>(t).first(1)), ShapeMismatch);
    EXPECT_THROW(fid_pair_forward(s[0], Tensor({4, 6})), ShapeMismatch);
}

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace binspot;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.num_blocks = 4;
    c.delta_set = {1, 2, 4};
    c.backbone_dim = 8;
    c.hidden_dim = 8;
    c.time_steps = 10;
    c.freq_bins = 10;
    c.num_classes = 3;
    c.head_channels = 2;
    c.memory = {2, 1, 1, 1};
    return c;
}

void jitter(DtaModel& m, std::uint64_t seed, Real scale = 0.1) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<Real> n(0, scale);
    for (Param* p : m.params())
        if (p->trainable)
            for (Real& v : p->value) v += n(rng);
}

}  // namespace

TEST(Linear, BinarizedForwardMatchesKernelPath) {
    std::mt19937_64 rng(20);
    Linear lin("l", 70, 5, true);
    lin.init(rng);
    for (Real& b : lin.bias.value) b = 0;
    const Tensor x = oracle::random_normal({3, 70}, rng);
    Linear::Cache c;
    const Tensor y = lin.forward(x, 3, {true, false, false}, c);
    const Tensor w({5, 70}, lin.weight.value);
    const IntMatrix raw = bgemm_reference(pack_signs(sign_binarize(x)), pack_signs(sign_binarize(w)));
    const Tensor expect = assemble_scaled_output(raw, weight_scale(w));
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], expect[i], 1e-12);
}

TEST(Linear, DualScaleAddsScaledResidualProduct) {
    std::mt19937_64 rng(21);
    Linear lin("l", 6, 2, true);
    lin.init(rng);
    const Tensor x = oracle::random_normal({1, 6}, rng);
    Linear::Cache c;
    const Tensor y = lin.forward(x, 1, {true, true, false}, c);
    const DualScaleResult d = dual_scale_binarize(x.reshaped({6}));
    const auto alpha = weight_scale(Tensor({2, 6}, lin.weight.value));
    for (std::size_t o = 0; o < 2; ++o) {
        Real s = lin.bias.value[o];
        for (std::size_t k = 0; k < 6; ++k) s += alpha[o] * sign_of(lin.weight.value[o * 6 + k]) * d.reconstruct()[k];
        EXPECT_NEAR(y[o], s, 1e-12);
    }
}

TEST(Linear, WidthMismatchThrows) {
    Linear lin("l", 4, 2, false);
    Linear::Cache c;
    EXPECT_THROW(lin.forward(Tensor({2, 5}), 1, {}, c), ShapeMismatch);
}

TEST(MemoryBlock, SingleTapCase) {
    MemoryBlock mb("m", 3, {0, 0, 1, 1}, true);
    mb.taps.value = {0.5, -2.0, 1.0};
    const Tensor p({2, 3}, {0.3, -0.7, 1.2, -0.1, 0.2, 0.0});
    MemoryBlock::Cache c;
    const Tensor y = mb.forward(p, Tensor({2, 3}), 2, {true, false, false}, c);
    const Real alpha = (0.5 + 2.0 + 1.0) / 3;
    for (std::size_t i = 0; i < 6; ++i) {
        const Real tap = sign_of(mb.taps.value[i % 3]);
        EXPECT_NEAR(y[i], alpha * tap * sign_of(p[i]) + p[i], 1e-12);
    }
}

TEST(MemoryBlock, TapSumOnShortSequence) {
    MemoryBlock mb("m", 2, {2, 1, 1, 1}, true);
    std::fill(mb.taps.value.begin(), mb.taps.value.end(), 1.0);
    const Real c = 0.7;
    const Tensor p = Tensor::filled({3, 2}, c);
    const Tensor skip = Tensor::filled({3, 2}, 0.25);
    MemoryBlock::Cache cache;
    const Tensor y = mb.forward(p, skip, 3, {true, false, false}, cache);
    // Taps cover t, t-1, t-2 and t+1; count those inside [0, 3).
    const Real in_range[3] = {2, 3, 3};
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t d = 0; d < 2; ++d) EXPECT_NEAR(y.at(t, d), in_range[t] + 0.25 + c, 1e-12);
}

TEST(MemoryBlock, StridesSelectSources) {
    MemoryBlock mb("m", 1, {2, 2, 2, 3}, false);
    EXPECT_EQ(mb.source(0, 5, 20), 5);
    EXPECT_EQ(mb.source(2, 5, 20), 1);
    EXPECT_EQ(mb.source(3, 5, 20), 8);
    EXPECT_EQ(mb.source(4, 5, 20), 11);
    EXPECT_EQ(mb.source(2, 3, 20), -1);
    EXPECT_EQ(mb.source(4, 15, 20), -1);
    EXPECT_THROW((MemoryBlockConfig{1, 1, 0, 1}.validate()), InvalidArgument);
}

TEST(BatchNorm, TrainingStatisticsAndCommit) {
    BatchNorm bn("bn", 2);
    const Tensor x({3, 2}, {1, 10, 2, 20, 6, 30});
    BatchNorm::Cache c;
    const Tensor y = bn.forward(x, {3, 2, 1}, true, c);
    EXPECT_NEAR(c.batch_mean[0], 3, 1e-12);
    EXPECT_NEAR(c.batch_var[0], 14.0 / 3, 1e-12);
    Real s = 0;
    for (std::size_t r = 0; r < 3; ++r) s += y.at(r, 1);
    EXPECT_NEAR(s, 0, 1e-12);
    bn.commit(c);
    EXPECT_NEAR(bn.running_mean.value[0], 0.1 * 3, 1e-12);
    EXPECT_NEAR(bn.running_var.value[0], 0.9 + 0.1 * 7, 1e-12);  // unbiased variance 14/2
}

TEST(BatchNorm, IdentityInInferenceWithUnitStats) {
    BatchNorm bn("bn", 1);
    BatchNorm::Cache c;
    const Tensor y = bn.forward(Tensor({2, 1}, {0.5, -1.5}), {2, 1, 1}, false, c);
    EXPECT_NEAR(y[0], 0.5 / std::sqrt(1 + BatchNorm::kEps), 1e-15);
}

TEST(PRelu, NegativeSideUsesSlope) {
    PRelu act("a", 1);
    PRelu::Cache c;
    const Tensor y = act.forward(Tensor({2, 1}, {-2, 3}), {2, 1, 1}, c);
    EXPECT_DOUBLE_EQ(y[0], -0.5);
    EXPECT_DOUBLE_EQ(y[1], 3);
}

TEST(ModelConfig, Validation) {
    ModelConfig c;
    EXPECT_NO_THROW(c.validate());
    c.delta_set = {1, 3};
    EXPECT_THROW(c.validate(), InvalidArgument);
    c.delta_set = {2, 4};
    EXPECT_THROW(c.validate(), InvalidArgument);
    c.delta_set = {};
    EXPECT_THROW(c.validate(), InvalidArgument);
    c = ModelConfig{};
    c.time_steps = 3;
    EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(ModelConfig, ActiveBlocks) {
    const ModelConfig c;
    EXPECT_EQ(c.active_blocks(1), (std::vector<std::size_t>{1, 2, 3, 4}));
    EXPECT_EQ(c.active_blocks(2), (std::vector<std::size_t>{2, 4}));
    EXPECT_EQ(c.active_blocks(4), (std::vector<std::size_t>{4}));
    EXPECT_THROW(c.active_blocks(3), InvalidArgument);
}

TEST(DtaModel, FirstAndLastLayersStayFullPrecision) {
    const DtaModel m(ModelConfig{}, 1);
    EXPECT_FALSE(m.conv1().binarized);
    EXPECT_FALSE(m.classifier().binarized);
    EXPECT_TRUE(m.conv2().binarized);
    EXPECT_TRUE(m.neck().binarized);
    for (const auto& b : m.blocks()) EXPECT_EQ(b.bns.size(), 3u);
}

TEST(DtaModel, TraceFollowsExecutedBlocks) {
    const DtaModel m(tiny_config(), 2);
    std::mt19937_64 rng(22);
    const Tensor x = oracle::random_normal({2, 10, 10}, rng);
    EXPECT_EQ(m.forward(x, 1).tail.blocks.size(), 4u);
    const ForwardTrace f4 = m.forward(x, 4);
    ASSERT_EQ(f4.tail.blocks.size(), 1u);
    EXPECT_EQ(f4.tail.blocks[0].block, 4u);
    EXPECT_THROW(m.forward(x, 3), InvalidArgument);
    EXPECT_THROW(m.forward(Tensor({2, 10, 9}), 1), ShapeMismatch);

    const DtaModel teacher(tiny_config().teacher(), 3);
    EXPECT_EQ(teacher.forward(x, 1).tail.blocks.size(), 4u);
}

TEST(DtaModel, ThinnableVariantEqualsExplicitSubnetwork) {
    DtaModel m(tiny_config(), 4);
    jitter(m, 5);
    std::mt19937_64 rng(23);
    const Tensor x = oracle::random_normal({3, 10, 10}, rng);
    for (std::size_t d : {1u, 2u, 4u}) {
        const DtaModel sub = m.subnetwork(d);
        EXPECT_EQ(sub.config().num_blocks, 4 / d);
        EXPECT_EQ(m.logits(x, d), sub.logits(x, 1));
    }
}

TEST(DtaModel, BatchNormBanksAreIsolated) {
    DtaModel m(tiny_config(), 6);
    std::mt19937_64 rng(24);
    const Tensor x = oracle::random_normal({4, 10, 10}, rng);
    auto stats = [&](std::size_t bank) {
        std::vector<Real> s;
        for (const auto& b : m.blocks()) {
            s.insert(s.end(), b.bns[bank].running_mean.value.begin(), b.bns[bank].running_mean.value.end());
            s.insert(s.end(), b.bns[bank].running_var.value.begin(), b.bns[bank].running_var.value.end());
        }
        return s;
    };
    const auto before1 = stats(0), before2 = stats(1), before4 = stats(2);
    const ForwardOptions train{true, false};
    const StemTrace st = m.forward_stem(x, train);
    m.commit_batch_stats(m.forward_tail(st.out, 4, 2, train));
    EXPECT_EQ(stats(0), before1);
    EXPECT_EQ(stats(2), before4);
    EXPECT_NE(stats(1), before2);
}

TEST(DtaModel, ZeroUpstreamGradientGivesZeroParameterGradients) {
    DtaModel m(tiny_config(), 7);
    std::mt19937_64 rng(25);
    const Tensor x = oracle::random_normal({2, 10, 10}, rng);
    const ForwardTrace f = m.forward(x, 1, {true, false});
    m.zero_grad();
    m.backward(f, Tensor({2, 3}));
    m.for_each_param([](const Param& p) {
        for (Real g : p.grad) EXPECT_EQ(g, 0) << p.name;
    });
}

TEST(DtaModel, AnalyticGradientsMatchCentralDifferences) {
    ModelConfig c = tiny_config();
    c.num_blocks = 1;
    c.delta_set = {1};
    c.backbone_dim = 4;
    c.hidden_dim = 4;
    c.time_steps = 8;
    c.freq_bins = 8;
    DtaModel student(c, 8);
    jitter(student, 9);
    const DtaModel teacher(c.teacher(), 10);
    std::mt19937_64 rng(26);
    const Tensor x = oracle::random_normal({3, 8, 8}, rng);
    const std::vector<std::size_t> y{0, 2, 1};
    const Real gamma = 0.5;
    const ForwardTrace tt = teacher.forward(x, 1);

    auto loss = [&](bool with_grad) {
        const ForwardTrace f = student.forward(x, 1, {true, true});
        Tensor dl;
        const Real ce = cross_entropy(f.tail.logits, y, &dl);
        std::vector<Tensor> dr;
        const Real fid = fid_for_delta(student, f.tail, tt.tail, with_grad ? &dr : nullptr);
        if (with_grad) {
            for (Tensor& g : dr)
                for (Real& v : g.storage()) v *= gamma;
            student.backward(f, dl, dr);
        }
        return ce + gamma * fid;
    };
    BranchTape tape;
    TapeScope scope(tape);
    tape.start_record();
    student.zero_grad();
    loss(true);
    Real worst = 0;
    for (Param* p : student.params()) {
        if (!p->trainable) continue;
        for (std::size_t i = 0; i < p->size(); ++i) {
            const Real num = oracle::central_difference(
                [&] {
                    tape.start_replay();
                    return loss(false);
                },
                p->value[i], 1e-6);
            worst = std::max(worst, oracle::relative_error(p->grad[i], num));
        }
    }
    EXPECT_LE(worst, 1e-3);
}

TEST(DtaModel, TeacherIsNeverBinarized) {
    const ModelConfig t = ModelConfig{}.teacher();
    EXPECT_FALSE(t.binarized);
    EXPECT_EQ(t.delta_set, std::vector<std::size_t>{1});
    const DtaModel m(t, 1);
    EXPECT_FALSE(m.conv2().binarized);
    EXPECT_FALSE(m.blocks()[0].u.binarized);
}

TEST(PackedModel, AgreesWithFloatSimulatedForward) {
    ModelConfig c = tiny_config();
    c.backbone_dim = 70;  // crosses a word boundary
    DtaModel m(c, 11);
    jitter(m, 12, 0.05);
    std::mt19937_64 rng(27);
    const Tensor x = oracle::random_normal({3, 10, 10}, rng);
    const PackedModel pm(m);
    for (std::size_t d : c.delta_set) {
        const Tensor a = m.logits(x, d), b = pm.logits(x, d);
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
    }
    ModelConfig single = c;
    single.dual_scale = false;
    DtaModel ms(single, 13);
    const PackedModel ps(ms);
    const Tensor a = ms.logits(x, 1), b = ps.logits(x, 1);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
    EXPECT_THROW(PackedModel(DtaModel(c.teacher(), 1)), InvalidArgument);
}

TEST(Loss, CrossEntropyIsStableAndMatchesDefinition) {
    const Tensor logits({2, 3}, {1000, 0, -1000, 0.1, 0.2, 0.3});
    const std::vector<std::size_t> y{0, 2};
    Tensor g;
    const Real l = cross_entropy(logits, y, &g);
    const Real second = -0.3 + std::log(std::exp(0.1) + std::exp(0.2) + std::exp(0.3));
    EXPECT_NEAR(l, second / 2, 1e-12);
    EXPECT_NEAR(g.at(0, 0), 0, 1e-12);
    Real row = 0;
    for (std::size_t j = 0; j < 3; ++j) row += g.at(1, j);
    EXPECT_NEAR(row, 0, 1e-12);
    const std::vector<std::size_t> bad{0, 3};
    EXPECT_THROW(cross_entropy(logits, bad), InvalidArgument);
}

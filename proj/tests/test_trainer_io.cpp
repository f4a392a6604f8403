#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <sstream>

using namespace binspot;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.backbone_dim = 8;
    c.hidden_dim = 8;
    c.head_channels = 2;
    c.time_steps = 12;
    c.freq_bins = 12;
    c.memory = {2, 1, 1, 1};
    return c;
}

TrainConfig quick_train(std::size_t epochs = 1) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 16;
    return t;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("binspot_test_" + name)).string();
}

}  // namespace

TEST(TotalLoss, WeightsHalveWithDelta) {
    EXPECT_EQ(delta_weight(1), 1);
    EXPECT_EQ(delta_weight(2), 0.5);
    EXPECT_EQ(delta_weight(4), 0.125);
    const std::vector<std::size_t> d{1, 2, 4};
    const std::vector<Real> ones{1, 1, 1};
    EXPECT_DOUBLE_EQ(total_loss(ones, ones, d, 0.01), 1.64125);
    const std::vector<Real> ce{0.2, 0.4, 0.8}, fid{9, 9, 9};
    EXPECT_DOUBLE_EQ(total_loss(ce, fid, d, 0), 0.2 + 0.2 + 0.1);
    EXPECT_THROW(total_loss(std::vector<Real>{1, 1}, ones, d, 0.01), ShapeMismatch);
}

TEST(CosineLr, EndpointsMidpointAndMonotone) {
    EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 0.05), 0.05);
    EXPECT_NEAR(cosine_lr(100, 100, 0.05), 0, 1e-18);
    EXPECT_NEAR(cosine_lr(50, 100, 0.05), 0.025, 1e-15);
    for (std::size_t s = 1; s <= 100; ++s) EXPECT_LE(cosine_lr(s, 100, 1), cosine_lr(s - 1, 100, 1));
    EXPECT_THROW(cosine_lr(101, 100, 0.05), InvalidArgument);
}

TEST(TrainConfig, Validation) {
    TrainConfig t;
    EXPECT_NO_THROW(t.validate());
    t.gamma = -1;
    EXPECT_THROW(t.validate(), InvalidArgument);
    t = TrainConfig{};
    t.base_lr = 0;
    EXPECT_THROW(t.validate(), InvalidArgument);
    t = TrainConfig{};
    t.epochs = 0;
    EXPECT_THROW(t.validate(), InvalidArgument);
}

TEST(ToyData, DeterministicAndLabelled) {
    const FeatureDataset a = gen_toy_dataset(3, 4, 5, 12, 12);
    const FeatureDataset b = gen_toy_dataset(3, 4, 5, 12, 12);
    EXPECT_EQ(a.features, b.features);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_EQ(a.size(), 20u);
    EXPECT_NE(gen_toy_dataset(4, 4, 5, 12, 12).features, a.features);
    for (std::size_t l : a.labels) EXPECT_LT(l, 4u);
}

TEST(ToyData, NoiselessClassesSeparateByPeakBand) {
    const FeatureDataset ds = gen_toy_dataset(1, 4, 3, 32, 40, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::vector<Real> band(40, 0);
        const auto x = ds.example(i);
        for (std::size_t t = 0; t < 32; ++t)
            for (std::size_t f = 0; f < 40; ++f) band[f] += x[t * 40 + f];
        const auto peak = static_cast<std::size_t>(std::max_element(band.begin(), band.end()) - band.begin());
        EXPECT_EQ(peak, (ds.labels[i] + 1) * 8);
    }
}

TEST(TrainStep, ZeroLearningRateLeavesParametersUnchanged) {
    DtaModel m(small_config(), 1);
    const FeatureDataset ds = gen_toy_dataset(2, 4, 4, 12, 12);
    std::vector<std::size_t> idx(8), labels;
    std::iota(idx.begin(), idx.end(), 0);
    const std::uint64_t before = parameter_hash(m);
    std::vector<Real> weights_before = m.blocks()[0].u.weight.value;
    TrainConfig t = quick_train();
    t.momentum = 0;
    const Tensor x = ds.batch(idx, &labels);
    train_step(m, nullptr, x, labels, t, 0.0);
    EXPECT_EQ(m.blocks()[0].u.weight.value, weights_before);
    // Running BN estimates are the only state that moves.
    EXPECT_NE(parameter_hash(m), before);
}

TEST(TrainStep, StationaryGradientLeavesParametersUnchanged) {
    DtaModel m(small_config(), 1);
    m.zero_grad();
    const std::uint64_t before = parameter_hash(m);
    sgd_update(m, 0.1, 0.9);  // zero gradient and zero velocity
    EXPECT_EQ(parameter_hash(m), before);
}

TEST(TrainStep, RecordsEveryDeltaAndClampsRatios) {
    DtaModel student(small_config(), 2);
    const DtaModel teacher(small_config().teacher(), 3);
    const FeatureDataset ds = gen_toy_dataset(2, 4, 4, 12, 12);
    std::vector<std::size_t> idx(8), labels;
    std::iota(idx.begin(), idx.end(), 0);
    student.for_each_lpb([](Param& p) { p.value[1] = 50; });
    const std::uint64_t teacher_hash = parameter_hash(teacher);
    const Tensor x = ds.batch(idx, &labels);
    const StepMetrics m = train_step(student, &teacher, x, labels, quick_train(), 0.01, 7);
    EXPECT_EQ(m.step, 7u);
    EXPECT_EQ(m.deltas, (std::vector<std::size_t>{1, 2, 4}));
    ASSERT_EQ(m.ce.size(), 3u);
    for (Real f : m.fid) EXPECT_GT(f, 0);
    EXPECT_EQ(m.total, total_loss(m.ce, m.fid, m.deltas, quick_train().gamma));
    student.for_each_lpb([](Param& p) { EXPECT_LE(p.value[1], LpbParams::kMaxRatio); });
    EXPECT_EQ(parameter_hash(teacher), teacher_hash);
}

TEST(Train, SameSeedGivesIdenticalMetrics) {
    const FeatureDataset ds = gen_toy_dataset(5, 4, 6, 12, 12);
    const DtaModel teacher(small_config().teacher(), 4);
    auto run = [&] {
        DtaModel m(small_config(), 9);
        std::ostringstream os;
        train(m, &teacher, ds, quick_train(2), &os);
        return os.str();
    };
    const std::string a = run();
    EXPECT_EQ(a, run());
    EXPECT_EQ(a.substr(0, a.find('\n')),
              "step,lr,loss_total,loss_ce_d1,loss_fid_d1,loss_ce_d2,loss_fid_d2,loss_ce_d4,loss_fid_d4");
}

TEST(Train, RejectsMismatchedData) {
    DtaModel m(small_config(), 1);
    EXPECT_THROW(train(m, nullptr, gen_toy_dataset(1, 4, 2, 12, 10), quick_train()), InvalidArgument);
    EXPECT_THROW(train(m, nullptr, gen_toy_dataset(1, 3, 2, 12, 12), quick_train()), InvalidArgument);
}

TEST(Evaluate, MatchesDirectRecount) {
    DtaModel m(small_config(), 3);
    const FeatureDataset ds = gen_toy_dataset(6, 4, 10, 12, 12);
    for (std::size_t d : {1u, 2u, 4u}) {
        std::size_t correct = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const std::vector<std::size_t> one{i};
            const Tensor lg = m.logits(ds.batch(one), d);
            const auto row = lg.row(0);
            correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == ds.labels[i];
        }
        EXPECT_DOUBLE_EQ(evaluate(m, ds, d, 7), static_cast<Real>(correct) / ds.size());
    }
    EXPECT_THROW(evaluate(m, FeatureDataset{}, 1), InvalidArgument);
    EXPECT_THROW(evaluate(m, ds, 3), InvalidArgument);
}

TEST(Evaluate, ConstantPredictorOnSingleClassData) {
    ModelConfig c = small_config();
    DtaModel m(c, 1);
    Param* bias = m.find_param("classifier.bias");
    ASSERT_NE(bias, nullptr);
    bias->value = {0, 0, 100, 0};
    FeatureDataset ds;
    ds.time_steps = 12, ds.freq_bins = 12, ds.num_classes = 4;
    std::vector<Real> x(144, 0.1);
    for (int i = 0; i < 5; ++i) ds.add(x, 2);
    EXPECT_EQ(evaluate(m, ds, 1), 1.0);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    DtaModel m(small_config(), 11);
    std::mt19937_64 rng(1);
    std::normal_distribution<Real> n(0, 1);
    for (Param* p : m.params())
        for (std::size_t i = 0; i < p->size(); ++i) {
            p->value[i] += n(rng);
            p->velocity[i] = n(rng);
        }
    const std::vector<char> first = serialize_checkpoint(m, 12, 345);
    const Checkpoint ck = deserialize_checkpoint(first);
    EXPECT_EQ(ck.epoch, 12u);
    EXPECT_EQ(ck.step, 345u);
    EXPECT_EQ(ck.model.config(), m.config());
    EXPECT_EQ(serialize_checkpoint(ck.model, ck.epoch, ck.step), first);
}

TEST(Checkpoint, RoundedModelReloadsExactly) {
    DtaModel m(small_config(), 12);
    m.round_to_float32();
    Checkpoint ck = deserialize_checkpoint(serialize_checkpoint(m, 1));
    EXPECT_EQ(parameter_hash(ck.model), parameter_hash(m));
    for (Param* p : ck.model.params()) EXPECT_EQ(p->trainable, m.find_param(p->name)->trainable);
}

TEST(Checkpoint, CorruptionIsReported) {
    const std::vector<char> good = serialize_checkpoint(DtaModel(small_config(), 1), 0);
    std::vector<char> bad = good;
    bad[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint(bad), FormatError);
    bad = good;
    bad[4] = 9;  // version
    EXPECT_THROW(deserialize_checkpoint(bad), FormatError);
    bad.assign(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() - 3));
    EXPECT_THROW(deserialize_checkpoint(bad), FormatError);
    EXPECT_THROW(deserialize_checkpoint({}), FormatError);
    EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.ckpt")), Error);
}

TEST(Features, RoundTripAndHeaderChecks) {
    const FeatureDataset ds = gen_toy_dataset(2, 3, 4, 6, 5);
    const std::string path = temp_path("features.bftr");
    save_features(path, ds);
    const FeatureDataset back = load_features(path);
    EXPECT_EQ(back.features, ds.features);
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.num_classes, 3u);
    std::filesystem::remove(path);

    std::vector<char> bytes = serialize_features(ds);
    bytes.pop_back();
    EXPECT_THROW(deserialize_features(bytes), FormatError);
    bytes = serialize_features(ds);
    bytes[8] = 100;  // count no longer matches the payload
    EXPECT_THROW(deserialize_features(bytes), FormatError);
    bytes = serialize_features(ds);
    bytes[0] = 'Z';
    EXPECT_THROW(deserialize_features(bytes), FormatError);
    bytes = serialize_features(ds);
    bytes[24] = 7;  // first label
    EXPECT_THROW(deserialize_features(bytes), FormatError);
}

TEST(Bundle, RoundTripPreservesPackedInference) {
    ModelConfig c = small_config();
    DtaModel m(c, 13);
    const PackedModel pm(m);
    const std::vector<char> bytes = serialize_bundle(pm);
    const PackedModel back = deserialize_bundle(bytes);
    EXPECT_TRUE(back == pm);
    EXPECT_EQ(serialize_bundle(back), bytes);
    const FeatureDataset ds = gen_toy_dataset(1, 4, 2, 12, 12);
    std::vector<std::size_t> idx{0, 1, 2};
    const Tensor x = ds.batch(idx);
    EXPECT_EQ(back.logits(x, 2), pm.logits(x, 2));
    std::vector<char> bad = bytes;
    bad.push_back(0);
    EXPECT_THROW(deserialize_bundle(bad), FormatError);
}

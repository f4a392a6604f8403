#pragma once

#include <binspot/data.hpp>
#include <binspot/model.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <vector>

namespace binspot {

struct TrainConfig {
    std::size_t epochs = 30;
    Real base_lr = 0.05;
    Real momentum = 0.9;
    Real gamma = 0.01;  ///< distillation weight
    std::size_t batch_size = 32;
    std::uint64_t seed = 42;

    void validate() const {
        detail::require(epochs >= 1, "epochs must be >= 1");
        detail::require(base_lr > 0 && std::isfinite(base_lr), "base_lr must be > 0");
        detail::require(momentum >= 0 && momentum < 1, "momentum must be in [0, 1)");
        detail::require(gamma >= 0 && std::isfinite(gamma), "gamma must be >= 0");
        detail::require(batch_size >= 1, "batch_size must be >= 1");
    }
};

/// Weight of the delta variant in the joint objective: 1 / 2^(delta-1).
inline Real delta_weight(std::size_t delta) {
    detail::require(delta >= 1, "delta must be >= 1");
    return std::ldexp(Real{1}, -static_cast<int>(delta - 1));
}

/// Σ_δ w_δ · (ce_δ + gamma · fid_δ), summed in the order of `deltas`.
inline Real total_loss(std::span<const Real> ce, std::span<const Real> fid, std::span<const std::size_t> deltas,
                       Real gamma) {
    detail::require_shape(ce.size() == deltas.size() && fid.size() == deltas.size(),
                          "total_loss: need one ce and one fid entry per delta");
    Real total = 0;
    for (std::size_t i = 0; i < deltas.size(); ++i) total += delta_weight(deltas[i]) * (ce[i] + gamma * fid[i]);
    return total;
}

inline Real cosine_lr(std::size_t step, std::size_t total_steps, Real base_lr) {
    detail::require(total_steps >= 1, "cosine_lr: total_steps must be >= 1");
    detail::require(step <= total_steps, "cosine_lr: step exceeds total_steps");
    const Real phase = std::numbers::pi * static_cast<Real>(step) / static_cast<Real>(total_steps);
    return base_lr * (1 + std::cos(phase)) / 2;
}

struct StepMetrics {
    std::size_t step = 0;
    Real lr = 0;
    Real total = 0;
    std::vector<std::size_t> deltas;
    std::vector<Real> ce;
    std::vector<Real> fid;
};

inline void write_metrics_header(std::ostream& os, std::span<const std::size_t> deltas) {
    os << "step,lr,loss_total";
    for (std::size_t d : deltas) os << ",loss_ce_d" << d << ",loss_fid_d" << d;
    os << '\n';
}

inline void write_metrics_row(std::ostream& os, const StepMetrics& m) {
    char buf[64];
    auto put = [&](Real v) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        os << buf;
    };
    os << m.step;
    put(m.lr);
    put(m.total);
    for (std::size_t i = 0; i < m.deltas.size(); ++i) {
        put(m.ce[i]);
        put(m.fid[i]);
    }
    os << '\n';
}

/// v ← μ·v + g; p ← p − lr·v for every trainable parameter.
inline void sgd_update(DtaModel& model, Real lr, Real momentum) {
    model.for_each_param([&](Param& p) {
        if (!p.trainable) return;
        for (std::size_t i = 0; i < p.size(); ++i) {
            p.velocity[i] = momentum * p.velocity[i] + p.grad[i];
            p.value[i] -= lr * p.velocity[i];
        }
    });
}

/// One joint update: a single teacher forward, then every delta variant in
/// ascending order contributes weighted CE and FID gradients; the parameters
/// move once after all variants are accumulated.
inline StepMetrics train_step(DtaModel& model, const DtaModel* teacher, const Tensor& x,
                              std::span<const std::size_t> labels, const TrainConfig& cfg, Real lr,
                              std::size_t step = 0) {
    const ModelConfig& mc = model.config();
    StepMetrics m;
    m.step = step;
    m.lr = lr;
    m.deltas = mc.delta_set;

    ForwardTrace tt;
    if (teacher) tt = teacher->forward(x, 1, {false, false});

    model.zero_grad();
    const ForwardOptions opt{true, false};
    const StemTrace stem = model.forward_stem(x, opt);
    Tensor d_stem(stem.out.shape());
    for (std::size_t delta : mc.delta_set) {
        const TailTrace tail = model.forward_tail(stem.out, stem.batch, delta, opt);
        Tensor dlogits;
        const Real ce = cross_entropy(tail.logits, labels, &dlogits);
        std::vector<Tensor> d_repr;
        Real fid = 0;
        if (teacher) fid = fid_for_delta(model, tail, tt.tail, cfg.gamma > 0 ? &d_repr : nullptr);
        const Real w = delta_weight(delta);
        for (Real& v : dlogits.storage()) v *= w;
        for (Tensor& g : d_repr)
            for (Real& v : g.storage()) v *= w * cfg.gamma;
        const Tensor ds = model.backward_tail(tail, dlogits, d_repr);
        for (std::size_t i = 0; i < ds.size(); ++i) d_stem[i] += ds[i];
        model.commit_batch_stats(tail);
        m.ce.push_back(ce);
        m.fid.push_back(fid);
    }
    model.backward_stem(stem, d_stem);
    model.commit_batch_stats(stem);
    sgd_update(model, lr, cfg.momentum);
    model.clamp_lpb();
    m.total = total_loss(m.ce, m.fid, m.deltas, cfg.gamma);
    return m;
}

/// Fraction of argmax-correct predictions of the delta variant (BN in inference mode).
inline Real evaluate(const DtaModel& model, const FeatureDataset& ds, std::size_t delta, std::size_t batch = 64) {
    detail::require(ds.size() > 0, "evaluate: empty dataset");
    detail::require(model.config().has_delta(delta), "evaluate: delta " + std::to_string(delta) +
                                                         " is not in the delta set");
    std::size_t correct = 0;
    std::vector<std::size_t> idx, labels;
    for (std::size_t b0 = 0; b0 < ds.size(); b0 += batch) {
        idx.resize(std::min(batch, ds.size() - b0));
        std::iota(idx.begin(), idx.end(), b0);
        const Tensor logits = model.logits(ds.batch(idx, &labels), delta);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto row = logits.row(i);
            const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
            if (best == labels[i]) ++correct;
        }
    }
    return static_cast<Real>(correct) / static_cast<Real>(ds.size());
}

struct TrainResult {
    std::size_t steps = 0;
    std::vector<StepMetrics> history;
};

using EpochCallback = std::function<void(std::size_t epoch, const StepMetrics& last)>;

/// Runs cfg.epochs epochs of train_step over shuffled mini-batches. When a
/// metrics stream is given it receives the header and one row per step.
/// Parameters are rounded to float32 at the end so in-memory evaluation
/// matches what a checkpoint stores.
inline TrainResult train(DtaModel& model, const DtaModel* teacher, const FeatureDataset& ds, const TrainConfig& cfg,
                         std::ostream* metrics = nullptr, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    ds.validate();
    const ModelConfig& mc = model.config();
    detail::require(ds.time_steps == mc.time_steps && ds.freq_bins == mc.freq_bins,
                    "train: dataset feature shape does not match the model input");
    detail::require(ds.num_classes == mc.num_classes, "train: dataset class count does not match the model");
    detail::require(ds.size() > 0, "train: empty dataset");
    if (teacher) {
        const ModelConfig& tc = teacher->config();
        detail::require(!tc.binarized && tc.num_blocks == mc.num_blocks && tc.backbone_dim == mc.backbone_dim &&
                            tc.time_steps == mc.time_steps && tc.freq_bins == mc.freq_bins,
                        "train: teacher topology does not match the student");
    }
    const std::size_t per_epoch = (ds.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = per_epoch * cfg.epochs;
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::size_t> labels;
    TrainResult res;
    if (metrics) write_metrics_header(*metrics, mc.delta_set);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        StepMetrics last;
        for (std::size_t b = 0; b < per_epoch; ++b) {
            const std::size_t begin = b * cfg.batch_size;
            const std::size_t end = std::min(ds.size(), begin + cfg.batch_size);
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            const Tensor x = ds.batch(idx, &labels);
            last = train_step(model, teacher, x, labels, cfg, cosine_lr(res.steps, total_steps, cfg.base_lr),
                              res.steps);
            if (metrics) write_metrics_row(*metrics, last);
            res.history.push_back(last);
            ++res.steps;
        }
        if (on_epoch) on_epoch(epoch + 1, last);
    }
    model.round_to_float32();
    return res;
}

/// Trains the full-precision counterpart of `student_cfg` without distillation.
inline DtaModel pretrain_teacher(const ModelConfig& student_cfg, const FeatureDataset& ds, const TrainConfig& cfg,
                                 std::ostream* metrics = nullptr, const EpochCallback& on_epoch = {}) {
    DtaModel teacher(student_cfg.teacher(), cfg.seed + 1);
    train(teacher, nullptr, ds, cfg, metrics, on_epoch);
    return teacher;
}

/// FNV-1a over every parameter value; used to confirm a model was not modified.
inline std::uint64_t parameter_hash(const DtaModel& model) {
    std::uint64_t h = 1469598103934665603ull;
    model.for_each_param([&](const Param& p) {
        for (Real v : p.value) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xFF;
                h *= 1099511628211ull;
            }
        }
    });
    return h;
}

}  // namespace binspot

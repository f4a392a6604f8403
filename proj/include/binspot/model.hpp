#pragma once

#include <binspot/layers.hpp>
#include <binspot/wavelet.hpp>

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace binspot {

struct ModelConfig {
    std::size_t num_blocks = 4;
    std::vector<std::size_t> delta_set{1, 2, 4};
    std::size_t backbone_dim = 128;
    std::size_t hidden_dim = 224;
    std::size_t time_steps = 32;
    std::size_t freq_bins = 40;
    std::size_t num_classes = 4;
    std::size_t head_channels = 8;
    std::size_t head_kernel = 3;
    MemoryBlockConfig memory{};
    bool binarized = true;      ///< false: full-precision teacher
    bool dual_scale = true;     ///< second-scale residual on binarized activations
    bool learnable_lpb = true;  ///< false: theta = 0, r = 1 frozen (plain STE)

    // Head geometry: conv1 is stride 2 with padding 1, conv2 is a valid conv.
    std::size_t conv1_h() const { return (time_steps + 2 - head_kernel) / 2 + 1; }
    std::size_t conv1_w() const { return (freq_bins + 2 - head_kernel) / 2 + 1; }
    std::size_t frames() const { return conv1_h() - head_kernel + 1; }
    std::size_t conv2_w() const { return conv1_w() - head_kernel + 1; }
    std::size_t neck_in() const { return head_channels * conv2_w(); }

    bool has_delta(std::size_t d) const {
        return std::find(delta_set.begin(), delta_set.end(), d) != delta_set.end();
    }

    /// Block indices (1-based) executed by the variant with interval delta.
    std::vector<std::size_t> active_blocks(std::size_t delta) const {
        detail::require(has_delta(delta), "delta " + std::to_string(delta) + " is not in the delta set");
        std::vector<std::size_t> out;
        for (std::size_t l = delta; l <= num_blocks; l += delta) out.push_back(l);
        return out;
    }

    std::size_t bank_index(std::size_t delta) const {
        auto it = std::find(delta_set.begin(), delta_set.end(), delta);
        detail::require(it != delta_set.end(), "delta " + std::to_string(delta) + " is not in the delta set");
        return static_cast<std::size_t>(it - delta_set.begin());
    }

    void validate() const {
        detail::require(num_blocks >= 1, "num_blocks must be >= 1");
        detail::require(!delta_set.empty(), "delta set must be non-empty");
        detail::require(std::is_sorted(delta_set.begin(), delta_set.end()) &&
                            std::adjacent_find(delta_set.begin(), delta_set.end()) == delta_set.end(),
                        "delta set must be sorted and unique");
        detail::require(delta_set.front() == 1, "delta set must contain 1");
        for (std::size_t d : delta_set) {
            detail::require(d >= 1 && num_blocks % d == 0,
                            "delta " + std::to_string(d) + " does not divide num_blocks");
        }
        detail::require(backbone_dim >= 2 && hidden_dim >= 1 && num_classes >= 1 && head_channels >= 1,
                        "model dims must be positive (backbone_dim >= 2)");
        detail::require(head_kernel >= 1 && time_steps + 2 >= head_kernel && freq_bins + 2 >= head_kernel,
                        "input too small for the head kernel");
        detail::require(conv1_h() >= head_kernel && conv1_w() >= head_kernel, "input too small for the head");
        detail::require(frames() >= 2, "input too short: the backbone needs at least 2 frames");
        memory.validate();
    }

    /// Full-precision counterpart used as the distillation teacher.
    ModelConfig teacher() const {
        ModelConfig t = *this;
        t.binarized = false;
        t.delta_set = {1};
        return t;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Options for a forward pass.
struct ForwardOptions {
    bool train = false;      ///< batch statistics in BN (otherwise running estimates)
    bool surrogate = false;  ///< differentiable surrogate binarizers (gradient checking)
};

struct StemTrace {
    std::size_t batch = 0;
    bool train = false;
    Conv2d::Cache conv1;
    BatchNorm::Cache bn1;
    PRelu::Cache act1;
    Conv2d::Cache conv2;
    BatchNorm::Cache bn2;
    PRelu::Cache act2;
    Linear::Cache neck;
    Tensor out;  // (B·frames) × backbone_dim
};

struct BlockTrace {
    std::size_t block = 0;  // 1-based index
    std::size_t bank = 0;
    Linear::Cache u;
    BatchNorm::Cache bn;
    PRelu::Cache act;
    Linear::Cache v;
    MemoryBlock::Cache mem;
    Tensor out;  // R^block, (B·frames) × backbone_dim
};

struct TailTrace {
    std::size_t delta = 1;
    std::size_t batch = 0;
    bool train = false;
    std::vector<BlockTrace> blocks;  // executed blocks in order
    Tensor pooled;                   // B × backbone_dim
    Tensor logits;                   // B × classes
};

struct ForwardTrace {
    StemTrace stem;
    TailTrace tail;

    const Tensor& logits() const { return tail.logits; }
};

class FsmnBlock {
public:
    Linear u;                    // backbone → hidden (binarized)
    std::vector<BatchNorm> bns;  // one bank per delta
    PRelu act;
    Linear v;                    // hidden → backbone (binarized)
    MemoryBlock mem;

    FsmnBlock() = default;
    FsmnBlock(const std::string& name, const ModelConfig& cfg)
        : u(name + ".U", cfg.backbone_dim, cfg.hidden_dim, cfg.binarized), act(name + ".prelu", cfg.hidden_dim),
          v(name + ".V", cfg.hidden_dim, cfg.backbone_dim, cfg.binarized),
          mem(name + ".mem", cfg.backbone_dim, cfg.memory, cfg.binarized) {
        for (std::size_t d : cfg.delta_set) bns.emplace_back(name + ".bn.d" + std::to_string(d), cfg.hidden_dim);
    }

    template <class Fn>
    void for_each_param(Fn&& fn) {
        fn(u.weight), fn(u.bias), fn(u.lpb);
        for (auto& bn : bns) fn(bn.gamma), fn(bn.beta), fn(bn.running_mean), fn(bn.running_var);
        fn(act.slope);
        fn(v.weight), fn(v.bias), fn(v.lpb);
        fn(mem.taps), fn(mem.lpb);
    }

    /// R_in → hidden update → projection → memory with skip.
    Tensor forward(const Tensor& r_in, std::size_t frames, std::size_t bank, const QuantMode& q, bool train,
                   BlockTrace& t) const {
        t.bank = bank;
        const std::size_t rows = r_in.rows();
        Tensor a = u.forward(r_in, frames, q, t.u);
        const ChannelLayout lay{rows, a.cols(), 1};
        Tensor n = bns.at(bank).forward(a, lay, train, t.bn);
        Tensor h = act.forward(n, lay, t.act);
        Tensor p = v.forward(h, frames, q, t.v);
        return mem.forward(p, r_in, frames, q, t.mem);
    }

    /// Returns dL/dR_in.
    Tensor backward(const BlockTrace& t, const Tensor& dout) {
        Tensor dp = mem.backward(t.mem, dout);
        Tensor dh = v.backward(t.v, dp);
        Tensor dn = act.backward(t.act, dh);
        Tensor da = bns.at(t.bank).backward(t.bn, dn);
        Tensor dr = u.backward(t.u, da);
        for (std::size_t i = 0; i < dr.size(); ++i) dr[i] += dout[i];
        return dr;
    }
};

/// Dual-scale thinnable binarized FSMN (or its full-precision counterpart).
///
/// Layout: head (full-precision conv1, binarized conv2), binarized neck to
/// backbone_dim, N FSMN blocks with per-delta BN banks, full-precision
/// classifier over the time-averaged final representation.
class DtaModel {
public:
    DtaModel() = default;

    DtaModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        build();
        std::mt19937_64 rng(seed);
        conv1_.init(rng);
        conv2_.init(rng);
        neck_.init(rng);
        for (auto& b : blocks_) {
            b.u.init(rng);
            b.v.init(rng);
            b.mem.init(rng);
        }
        init_uniform(classifier_.weight, 1 / std::sqrt(static_cast<Real>(cfg_.backbone_dim)), rng);
        apply_lpb_policy();
    }

    const ModelConfig& config() const noexcept { return cfg_; }

    template <class Fn>
    void for_each_param(Fn&& fn) {
        fn(conv1_.weight), fn(conv1_.bias);
        fn(bn1_.gamma), fn(bn1_.beta), fn(bn1_.running_mean), fn(bn1_.running_var);
        fn(act1_.slope);
        fn(conv2_.weight), fn(conv2_.bias), fn(conv2_.lpb);
        fn(bn2_.gamma), fn(bn2_.beta), fn(bn2_.running_mean), fn(bn2_.running_var);
        fn(act2_.slope);
        fn(neck_.weight), fn(neck_.bias), fn(neck_.lpb);
        for (auto& b : blocks_) b.for_each_param(fn);
        fn(classifier_.weight), fn(classifier_.bias);
    }

    template <class Fn>
    void for_each_param(Fn&& fn) const {
        const_cast<DtaModel*>(this)->for_each_param([&](Param& p) { fn(static_cast<const Param&>(p)); });
    }

    std::vector<Param*> params() {
        std::vector<Param*> out;
        for_each_param([&](Param& p) { out.push_back(&p); });
        return out;
    }

    Param* find_param(const std::string& name) {
        Param* hit = nullptr;
        for_each_param([&](Param& p) {
            if (p.name == name) hit = &p;
        });
        return hit;
    }

    void zero_grad() {
        for_each_param([](Param& p) { p.zero_grad(); });
    }

    // --- forward ------------------------------------------------------------

    QuantMode quant_mode(const ForwardOptions& o) const { return {cfg_.binarized, cfg_.dual_scale, o.surrogate}; }

    /// x is B × T × F.
    StemTrace forward_stem(const Tensor& x, const ForwardOptions& o) const {
        detail::require_shape(x.rank() == 3 && x.dim(1) == cfg_.time_steps && x.dim(2) == cfg_.freq_bins,
                              "model input must be B x " + std::to_string(cfg_.time_steps) + " x " +
                                  std::to_string(cfg_.freq_bins) + ", got " + shape_string(x.shape()));
        const QuantMode q = quant_mode(o);
        StemTrace s;
        s.batch = x.dim(0);
        s.train = o.train;
        const Tensor img = x.reshaped({s.batch, 1, cfg_.time_steps, cfg_.freq_bins});
        Tensor c1 = conv1_.forward(img, q, s.conv1);
        const ChannelLayout l1{s.batch, cfg_.head_channels, c1.dim(2) * c1.dim(3)};
        Tensor a1 = act1_.forward(bn1_.forward(c1, l1, o.train, s.bn1), l1, s.act1);
        Tensor c2 = conv2_.forward(a1, q, s.conv2);
        const ChannelLayout l2{s.batch, cfg_.head_channels, c2.dim(2) * c2.dim(3)};
        Tensor a2 = act2_.forward(bn2_.forward(c2, l2, o.train, s.bn2), l2, s.act2);
        s.out = neck_.forward(frames_from_map(a2), cfg_.frames(), q, s.neck);
        return s;
    }

    TailTrace forward_tail(const Tensor& stem_out, std::size_t batch, std::size_t delta,
                           const ForwardOptions& o) const {
        const std::size_t frames = cfg_.frames();
        detail::require_shape(stem_out.rank() == 2 && stem_out.rows() == batch * frames &&
                                  stem_out.cols() == cfg_.backbone_dim,
                              "tail input shape mismatch");
        const QuantMode q = quant_mode(o);
        const std::size_t bank = cfg_.bank_index(delta);
        TailTrace t;
        t.delta = delta;
        t.batch = batch;
        t.train = o.train;
        const Tensor* r = &stem_out;
        const std::vector<std::size_t> active = cfg_.active_blocks(delta);
        t.blocks.reserve(active.size());
        for (std::size_t l : active) {
            BlockTrace& bt = t.blocks.emplace_back();
            bt.block = l;
            bt.out = blocks_[l - 1].forward(*r, frames, bank, q, o.train, bt);
            r = &bt.out;
        }
        t.pooled = Tensor({batch, cfg_.backbone_dim});
        const Real inv_t = Real{1} / static_cast<Real>(frames);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t f = 0; f < frames; ++f)
                for (std::size_t d = 0; d < cfg_.backbone_dim; ++d) t.pooled.at(b, d) += r->at(b * frames + f, d);
        for (Real& v : t.pooled.storage()) v *= inv_t;
        Linear::Cache cc;
        t.logits = classifier_.forward(t.pooled, 1, q, cc);
        return t;
    }

    ForwardTrace forward(const Tensor& x, std::size_t delta, const ForwardOptions& o = {}) const {
        ForwardTrace f;
        f.stem = forward_stem(x, o);
        f.tail = forward_tail(f.stem.out, f.stem.batch, delta, o);
        return f;
    }

    Tensor logits(const Tensor& x, std::size_t delta) const { return forward(x, delta).tail.logits; }

    /// Per-example representation maps (frames × backbone_dim) of one executed block.
    std::vector<Tensor> representation_maps(const Tensor& block_out, std::size_t batch) const {
        const std::size_t frames = cfg_.frames(), d = cfg_.backbone_dim;
        std::vector<Tensor> maps;
        maps.reserve(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            Tensor m({frames, d});
            std::copy_n(block_out.data().begin() + static_cast<std::ptrdiff_t>(b * frames * d), frames * d,
                        m.data().begin());
            maps.push_back(std::move(m));
        }
        return maps;
    }

    // --- backward -----------------------------------------------------------

    /// Accumulates parameter gradients of the tail. `d_repr[i]` (optional,
    /// may be empty) is an extra gradient on the output of the i-th executed block.
    /// Returns dL/d(stem output).
    Tensor backward_tail(const TailTrace& t, const Tensor& dlogits, const std::vector<Tensor>& d_repr = {}) {
        detail::require_shape(dlogits.rank() == 2 && dlogits.rows() == t.batch && dlogits.cols() == cfg_.num_classes,
                              "dlogits shape mismatch");
        detail::require_shape(d_repr.empty() || d_repr.size() == t.blocks.size(), "d_repr misaligned with trace");
        const std::size_t frames = cfg_.frames();
        Linear::Cache cc;
        cc.binarized = false;
        cc.xq = t.pooled;
        cc.weff = classifier_.weight.value;
        cc.act.spec.binarize = false;
        Tensor dpooled = classifier_.backward(cc, dlogits);
        Tensor dr({t.batch * frames, cfg_.backbone_dim});
        const Real inv_t = Real{1} / static_cast<Real>(frames);
        for (std::size_t b = 0; b < t.batch; ++b)
            for (std::size_t f = 0; f < frames; ++f)
                for (std::size_t d = 0; d < cfg_.backbone_dim; ++d) dr.at(b * frames + f, d) = dpooled.at(b, d) * inv_t;
        for (std::size_t i = t.blocks.size(); i-- > 0;) {
            if (!d_repr.empty() && !d_repr[i].empty()) {
                detail::require_shape(d_repr[i].size() == dr.size(), "d_repr entry shape mismatch");
                for (std::size_t k = 0; k < dr.size(); ++k) dr[k] += d_repr[i][k];
            }
            dr = blocks_[t.blocks[i].block - 1].backward(t.blocks[i], dr);
        }
        return dr;
    }

    void backward_stem(const StemTrace& s, const Tensor& dout) {
        Tensor dmap = map_from_frames(neck_.backward(s.neck, dout), s.batch);
        Tensor d2 = bn2_.backward(s.bn2, act2_.backward(s.act2, dmap));
        Tensor da1 = conv2_.backward(s.conv2, d2);
        Tensor d1 = bn1_.backward(s.bn1, act1_.backward(s.act1, da1));
        conv1_.backward(s.conv1, d1);
    }

    void backward(const ForwardTrace& f, const Tensor& dlogits, const std::vector<Tensor>& d_repr = {}) {
        backward_stem(f.stem, backward_tail(f.tail, dlogits, d_repr));
    }

    /// Folds batch statistics of training forwards into running BN estimates.
    void commit_batch_stats(const StemTrace& s) {
        bn1_.commit(s.bn1);
        bn2_.commit(s.bn2);
    }
    void commit_batch_stats(const TailTrace& t) {
        for (const auto& b : t.blocks) blocks_[b.block - 1].bns.at(b.bank).commit(b.bn);
    }

    // --- structure ----------------------------------------------------------

    /// Explicit sub-network holding only blocks {delta, 2·delta, ..., N} with
    /// the delta BN bank, as a standalone model with delta set {1}.
    DtaModel subnetwork(std::size_t delta) const {
        const std::vector<std::size_t> keep = cfg_.active_blocks(delta);
        ModelConfig sub = cfg_;
        sub.num_blocks = keep.size();
        sub.delta_set = {1};
        DtaModel m;
        m.cfg_ = sub;
        m.conv1_ = conv1_, m.bn1_ = bn1_, m.act1_ = act1_;
        m.conv2_ = conv2_, m.bn2_ = bn2_, m.act2_ = act2_;
        m.neck_ = neck_;
        m.classifier_ = classifier_;
        const std::size_t bank = cfg_.bank_index(delta);
        for (std::size_t l : keep) {
            FsmnBlock b = blocks_[l - 1];
            b.bns = {blocks_[l - 1].bns[bank]};
            m.blocks_.push_back(std::move(b));
        }
        return m;
    }

    /// Rounds every parameter to float32 so in-memory values match a saved checkpoint.
    void round_to_float32() {
        for_each_param([](Param& p) {
            for (Real& v : p.value) v = static_cast<Real>(static_cast<float>(v));
            for (Real& v : p.velocity) v = static_cast<Real>(static_cast<float>(v));
        });
    }

    /// Keeps LPB ratios inside their admissible interval.
    void clamp_lpb() {
        for_each_lpb([](Param& p) { p.value[1] = std::clamp(p.value[1], LpbParams::kMinRatio, LpbParams::kMaxRatio); });
    }

    template <class Fn>
    void for_each_lpb(Fn&& fn) {
        fn(conv2_.lpb), fn(neck_.lpb);
        for (auto& b : blocks_) fn(b.u.lpb), fn(b.v.lpb), fn(b.mem.lpb);
    }

    // Read access for the packed exporter and the analysis reports.
    const Conv2d& conv1() const { return conv1_; }
    const BatchNorm& bn1() const { return bn1_; }
    const PRelu& act1() const { return act1_; }
    const Conv2d& conv2() const { return conv2_; }
    const BatchNorm& bn2() const { return bn2_; }
    const PRelu& act2() const { return act2_; }
    const Linear& neck() const { return neck_; }
    const std::vector<FsmnBlock>& blocks() const { return blocks_; }
    const Linear& classifier() const { return classifier_; }

    /// (B, C, frames, W) feature map → rows (b, t) × (c, w).
    Tensor frames_from_map(const Tensor& m) const {
        const std::size_t batch = m.dim(0), ch = m.dim(1), h = m.dim(2), w = m.dim(3);
        Tensor out({batch * h, ch * w});
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < ch; ++c)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x) out.at(b * h + y, c * w + x) = m[((b * ch + c) * h + y) * w + x];
        return out;
    }

    Tensor map_from_frames(const Tensor& f, std::size_t batch) const {
        const std::size_t ch = cfg_.head_channels, h = cfg_.frames(), w = cfg_.conv2_w();
        Tensor out({batch, ch, h, w});
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < ch; ++c)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x) out[((b * ch + c) * h + y) * w + x] = f.at(b * h + y, c * w + x);
        return out;
    }

private:
    void build() {
        const bool bin = cfg_.binarized;
        conv1_ = Conv2d("head.conv1", 1, cfg_.head_channels, cfg_.head_kernel, 2, 1, false);
        bn1_ = BatchNorm("head.bn1", cfg_.head_channels);
        act1_ = PRelu("head.prelu1", cfg_.head_channels);
        conv2_ = Conv2d("head.conv2", cfg_.head_channels, cfg_.head_channels, cfg_.head_kernel, 1, 0, bin);
        bn2_ = BatchNorm("head.bn2", cfg_.head_channels);
        act2_ = PRelu("head.prelu2", cfg_.head_channels);
        neck_ = Linear("neck", cfg_.neck_in(), cfg_.backbone_dim, bin);
        blocks_.clear();
        for (std::size_t l = 1; l <= cfg_.num_blocks; ++l) blocks_.emplace_back("block" + std::to_string(l), cfg_);
        classifier_ = Linear("classifier", cfg_.backbone_dim, cfg_.num_classes, false);
    }

    void apply_lpb_policy() {
        const bool learn = cfg_.binarized && cfg_.learnable_lpb;
        for_each_lpb([&](Param& p) { p.trainable = learn; });
    }

    friend class ModelAccess;

    ModelConfig cfg_;
    Conv2d conv1_;
    BatchNorm bn1_;
    PRelu act1_;
    Conv2d conv2_;
    BatchNorm bn2_;
    PRelu act2_;
    Linear neck_;
    std::vector<FsmnBlock> blocks_;
    Linear classifier_;
};

/// Builds a model shell from a config without random initialization; used by loaders.
class ModelAccess {
public:
    static DtaModel blank(const ModelConfig& cfg) {
        DtaModel m;
        m.cfg_ = cfg;
        m.cfg_.validate();
        m.build();
        m.apply_lpb_policy();
        return m;
    }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
inline Real cross_entropy(const Tensor& logits, std::span<const std::size_t> labels, Tensor* dlogits = nullptr) {
    const std::size_t batch = logits.rows(), k = logits.cols();
    detail::require_shape(labels.size() == batch, "cross_entropy: label count mismatch");
    if (dlogits) *dlogits = Tensor({batch, k});
    Real loss = 0;
    for (std::size_t b = 0; b < batch; ++b) {
        detail::require(labels[b] < k, "cross_entropy: label out of range");
        const auto row = logits.row(b);
        const Real mx = *std::max_element(row.begin(), row.end());
        Real z = 0;
        for (Real v : row) z += std::exp(v - mx);
        const Real lse = mx + std::log(z);
        loss += lse - row[labels[b]];
        if (dlogits) {
            for (std::size_t j = 0; j < k; ++j) {
                dlogits->at(b, j) = (std::exp(row[j] - lse) - (j == labels[b] ? 1 : 0)) / static_cast<Real>(batch);
            }
        }
    }
    return loss / static_cast<Real>(batch);
}

/// FID between a student tail and the teacher's full trace under the uniform
/// mapping student block iδ ↔ teacher block iδ. Averaged over the batch.
/// When `d_repr` is given it receives dL/dR for every executed student block.
inline Real fid_for_delta(const DtaModel& student, const TailTrace& st, const TailTrace& teacher,
                          std::vector<Tensor>* d_repr = nullptr) {
    detail::require(st.batch == teacher.batch, "fid: batch size mismatch between student and teacher");
    const std::size_t batch = st.batch;
    if (d_repr) d_repr->clear();
    Real loss = 0;
    for (const BlockTrace& sb : st.blocks) {
        auto it = std::find_if(teacher.blocks.begin(), teacher.blocks.end(),
                               [&](const BlockTrace& tb) { return tb.block == sb.block; });
        detail::require(it != teacher.blocks.end(),
                        "fid: teacher trace lacks block " + std::to_string(sb.block));
        detail::require_shape(it->out.shape() == sb.out.shape(), "fid: representation shape mismatch");
        const auto smaps = student.representation_maps(sb.out, batch);
        const auto tmaps = student.representation_maps(it->out, batch);
        Tensor grad(sb.out.shape());
        const std::size_t per = smaps.empty() ? 0 : smaps[0].size();
        for (std::size_t b = 0; b < batch; ++b) {
            FidPairCache c = fid_pair_forward(smaps[b], tmaps[b]);
            loss += c.loss / static_cast<Real>(batch);
            if (d_repr) {
                Tensor g = fid_pair_backward(c);
                for (std::size_t i = 0; i < per; ++i) grad[b * per + i] = g[i] / static_cast<Real>(batch);
            }
        }
        if (d_repr) d_repr->push_back(std::move(grad));
    }
    return loss;
}

}  // namespace binspot

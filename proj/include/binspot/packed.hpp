#pragma once

#include <binspot/bitkernel.hpp>
#include <binspot/model.hpp>

#include <cmath>
#include <string>
#include <vector>

namespace binspot {

/// A binarized unit with its weight signs packed and per-row scales precomputed.
struct PackedUnit {
    std::string name;
    BitTensor weight_signs;      // rows = output channels (or taps), cols = fan-in (or dim)
    std::vector<Real> alpha_w;   // one per row
    std::vector<Real> bias;      // empty for memory taps
    Real theta = 0;

    std::size_t rows() const { return weight_signs.rows(); }
    std::size_t cols() const { return weight_signs.logical_cols(); }

    friend bool operator==(const PackedUnit&, const PackedUnit&) = default;
};

inline PackedUnit pack_unit(const std::string& name, const Param& weight, std::size_t rows, std::size_t cols,
                            const Param* bias, const Param& lpb) {
    PackedUnit u;
    u.name = name;
    Tensor signs({rows, cols});
    u.alpha_w.assign(rows, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        Real s = 0;
        for (std::size_t k = 0; k < cols; ++k) {
            const Real w = weight.value[r * cols + k];
            signs.at(r, k) = sign_of(w);
            s += std::abs(w);
        }
        u.alpha_w[r] = s / static_cast<Real>(cols);
    }
    u.weight_signs = pack_signs(signs);
    if (bias) u.bias = bias->value;
    u.theta = lpb.value[0];
    return u;
}

/// Packed bits of one quantization group: first-scale signs, residual signs and alpha2.
struct PackedActivations {
    BitTensor first;
    BitTensor second;
    Real alpha2 = 0;
};

/// Binarizes `rows` × `cols` activations (one group) into packed sign planes.
inline PackedActivations pack_activations(std::span<const Real> a, std::size_t rows, std::size_t cols, Real theta,
                                          bool dual) {
    Tensor s1({rows, cols}), s2({rows, cols});
    Real sum_abs = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Real x = a[i] - theta;
        const Real b1 = sign_of(x);
        const Real e = x - b1;
        s1[i] = b1;
        s2[i] = sign_of(e);
        sum_abs += std::abs(e);
    }
    PackedActivations p;
    p.first = pack_signs(s1);
    if (dual) {
        p.second = pack_signs(s2);
        p.alpha2 = sum_abs / static_cast<Real>(a.size());
    }
    return p;
}

/// Inference engine that evaluates every binarized unit with XNOR/popcount
/// kernels. Full-precision layers (first conv, BN, PReLU, classifier) run in
/// double precision with running statistics.
class PackedModel {
public:
    PackedModel() = default;

    explicit PackedModel(const DtaModel& m) : model_(m) {
        const ModelConfig& c = m.config();
        detail::require(c.binarized, "packed inference needs a binarized model");
        conv2_ = pack_unit("head.conv2", m.conv2().weight, c.head_channels, m.conv2().patch_len(), &m.conv2().bias,
                           m.conv2().lpb);
        neck_ = pack_unit("neck", m.neck().weight, c.backbone_dim, c.neck_in(), &m.neck().bias, m.neck().lpb);
        for (const FsmnBlock& b : m.blocks()) {
            BlockUnits u;
            u.u = pack_unit(b.u.weight.name, b.u.weight, c.hidden_dim, c.backbone_dim, &b.u.bias, b.u.lpb);
            u.v = pack_unit(b.v.weight.name, b.v.weight, c.backbone_dim, c.hidden_dim, &b.v.bias, b.v.lpb);
            u.mem = pack_unit(b.mem.taps.name, b.mem.taps, c.memory.taps(), c.backbone_dim, nullptr, b.mem.lpb);
            blocks_.push_back(std::move(u));
        }
    }

    struct BlockUnits {
        PackedUnit u, v, mem;
        friend bool operator==(const BlockUnits&, const BlockUnits&) = default;
    };

    const ModelConfig& config() const { return model_.config(); }
    const DtaModel& float_layers() const { return model_; }
    const PackedUnit& conv2() const { return conv2_; }
    const PackedUnit& neck() const { return neck_; }
    const std::vector<BlockUnits>& blocks() const { return blocks_; }

    /// Assembles a packed model from deserialized parts.
    static PackedModel from_parts(DtaModel float_part, PackedUnit conv2, PackedUnit neck,
                                  std::vector<BlockUnits> blocks) {
        detail::require_shape(blocks.size() == float_part.config().num_blocks, "packed bundle: block count mismatch");
        PackedModel p;
        p.model_ = std::move(float_part);
        p.conv2_ = std::move(conv2);
        p.neck_ = std::move(neck);
        p.blocks_ = std::move(blocks);
        return p;
    }

    /// x is B × T × F; returns B × classes.
    Tensor logits(const Tensor& x, std::size_t delta) const {
        const ModelConfig& c = config();
        const DtaModel& m = model_;
        detail::require_shape(x.rank() == 3 && x.dim(1) == c.time_steps && x.dim(2) == c.freq_bins,
                              "packed: input must be B x T x F");
        const std::size_t batch = x.dim(0), frames = c.frames();
        const bool dual = c.dual_scale;
        const QuantMode fp{false, false, false};

        Conv2d::Cache c1;
        const Tensor c1o = m.conv1().forward(x.reshaped({batch, 1, c.time_steps, c.freq_bins}), fp, c1);
        const ChannelLayout l1{batch, c.head_channels, c1o.dim(2) * c1o.dim(3)};
        BatchNorm::Cache bc;
        PRelu::Cache pc;
        const Tensor a1 = m.act1().forward(m.bn1().forward(c1o, l1, false, bc), l1, pc);

        const Tensor c2o = conv2_forward(a1, dual);
        const ChannelLayout l2{batch, c.head_channels, c2o.dim(2) * c2o.dim(3)};
        const Tensor a2 = m.act2().forward(m.bn2().forward(c2o, l2, false, bc), l2, pc);

        Tensor r = linear_forward(neck_, m.frames_from_map(a2), frames, dual);
        const std::size_t bank = c.bank_index(delta);
        for (std::size_t l : c.active_blocks(delta)) {
            const BlockUnits& bu = blocks_[l - 1];
            const FsmnBlock& fb = m.blocks()[l - 1];
            const Tensor a = linear_forward(bu.u, r, frames, dual);
            const ChannelLayout lay{a.rows(), a.cols(), 1};
            const Tensor h = fb.act.forward(fb.bns.at(bank).forward(a, lay, false, bc), lay, pc);
            const Tensor p = linear_forward(bu.v, h, frames, dual);
            r = memory_forward(bu.mem, p, r, frames, dual);
        }
        Tensor pooled({batch, c.backbone_dim});
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t f = 0; f < frames; ++f)
                for (std::size_t d = 0; d < c.backbone_dim; ++d) pooled.at(b, d) += r.at(b * frames + f, d);
        for (Real& v : pooled.storage()) v *= Real{1} / static_cast<Real>(frames);
        Linear::Cache lc;
        return m.classifier().forward(pooled, 1, fp, lc);
    }

    friend bool operator==(const PackedModel& a, const PackedModel& b) {
        return a.conv2_ == b.conv2_ && a.neck_ == b.neck_ && a.blocks_ == b.blocks_ &&
               a.model_.config() == b.model_.config();
    }

private:
    /// y = alpha_w·(raw1 + alpha2·raw2) + bias per group of `rows_per_group` rows.
    static Tensor linear_forward(const PackedUnit& u, const Tensor& x, std::size_t rows_per_group, bool dual) {
        detail::require_shape(x.rank() == 2 && x.cols() == u.cols(), "packed linear: width mismatch");
        const std::size_t rows = x.rows();
        Tensor y({rows, u.rows()});
        for (std::size_t g0 = 0; g0 < rows; g0 += rows_per_group) {
            const std::size_t n = std::min(rows_per_group, rows - g0);
            const auto slice = x.data().subspan(g0 * u.cols(), n * u.cols());
            const PackedActivations pa = pack_activations(slice, n, u.cols(), u.theta, dual);
            const IntMatrix raw1 = bgemm_blocked(pa.first, u.weight_signs);
            const Tensor part = dual ? assemble_scaled_output(raw1, bgemm_blocked(pa.second, u.weight_signs),
                                                              u.alpha_w, pa.alpha2)
                                     : assemble_scaled_output(raw1, u.alpha_w);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t o = 0; o < u.rows(); ++o) y.at(g0 + i, o) = part.at(i, o) + u.bias[o];
        }
        return y;
    }

    Tensor conv2_forward(const Tensor& x, bool dual) const {
        const Conv2d& conv = model_.conv2();
        detail::require(conv.pad == 0, "packed conv needs a valid (unpadded) convolution");
        const std::size_t batch = x.dim(0), per = x.size() / batch;
        Conv2d::Geometry g = conv.geometry(x);
        g.batch = 1;
        const std::size_t kl = conv.patch_len(), patches = g.patches(), out = conv2_.rows();
        Tensor o({batch, out, g.ho, g.wo});
        for (std::size_t b = 0; b < batch; ++b) {
            const auto slice = x.data().subspan(b * per, per);
            const PackedActivations pa = pack_activations(slice, 1, per, conv2_.theta, dual);
            auto patch_bits = [&](const BitTensor& plane) {
                const Tensor signs = unpack_signs(plane);
                std::vector<Real> cols(patches * kl);
                conv.im2col<Real>(signs.data(), g, cols);
                return pack_signs(Tensor({patches, kl}, std::move(cols)));
            };
            const IntMatrix raw1 = bgemm_blocked(patch_bits(pa.first), conv2_.weight_signs);
            const Tensor part = dual ? assemble_scaled_output(raw1,
                                                              bgemm_blocked(patch_bits(pa.second),
                                                                            conv2_.weight_signs),
                                                              conv2_.alpha_w, pa.alpha2)
                                     : assemble_scaled_output(raw1, conv2_.alpha_w);
            for (std::size_t p = 0; p < patches; ++p)
                for (std::size_t oc = 0; oc < out; ++oc)
                    o[(b * out + oc) * patches + p] = part.at(p, oc) + conv2_.bias[oc];
        }
        return o;
    }

    /// Depthwise taps realized as XNOR of packed tap signs with packed frame signs.
    Tensor memory_forward(const PackedUnit& taps, const Tensor& p, const Tensor& skip, std::size_t frames,
                          bool dual) const {
        const MemoryBlock& ref = model_.blocks().front().mem;
        const std::size_t dim = taps.cols(), batch = p.rows() / frames;
        Tensor y(p.shape());
        for (std::size_t b = 0; b < batch; ++b) {
            const auto slice = p.data().subspan(b * frames * dim, frames * dim);
            const PackedActivations pa = pack_activations(slice, frames, dim, taps.theta, dual);
            for (std::size_t t = 0; t < frames; ++t) {
                Real* yr = y.data().data() + (b * frames + t) * dim;
                for (std::size_t k = 0; k < taps.rows(); ++k) {
                    const std::ptrdiff_t s = ref.source(k, t, frames);
                    if (s < 0) continue;
                    const auto tw = taps.weight_signs.row(k);
                    const auto f1 = pa.first.row(static_cast<std::size_t>(s));
                    for (std::size_t w = 0; w < tw.size(); ++w) {
                        const std::uint64_t agree1 = ~(tw[w] ^ f1[w]);
                        const std::uint64_t agree2 = dual ? ~(tw[w] ^ pa.second.row(static_cast<std::size_t>(s))[w]) : 0;
                        const std::size_t lim = std::min<std::size_t>(64, dim - w * 64);
                        for (std::size_t bit = 0; bit < lim; ++bit) {
                            Real v = ((agree1 >> bit) & 1u) ? 1 : -1;
                            if (dual) v += pa.alpha2 * (((agree2 >> bit) & 1u) ? 1 : -1);
                            yr[w * 64 + bit] += taps.alpha_w[k] * v;
                        }
                    }
                }
                const std::size_t r = b * frames + t;
                for (std::size_t d = 0; d < dim; ++d) yr[d] += skip.at(r, d) + p.at(r, d);
            }
        }
        return y;
    }

    DtaModel model_;
    PackedUnit conv2_;
    PackedUnit neck_;
    std::vector<BlockUnits> blocks_;
};

}  // namespace binspot

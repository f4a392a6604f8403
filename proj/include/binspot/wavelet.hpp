#pragma once

#include <binspot/tensor.hpp>

#include <cmath>
#include <span>
#include <utility>
#include <vector>

namespace binspot {

/// One-level orthonormal 2-D Haar decomposition.
///
/// Inputs are (H, W) maps or (C, H, W) stacks; each subband has the same
/// leading dims with spatial extent (ceil(H/2), ceil(W/2)). Odd extents are
/// zero-padded before analysis and cropped after synthesis.
struct WaveletPyramid {
    Tensor ll, lh, hl, hh;
    std::size_t orig_h = 0;
    std::size_t orig_w = 0;
};

struct FrequencyEnergies {
    Real e_high = 0;
    Real e_low = 0;
    Real p_high = 0;
    Real p_low = 0;
};

namespace detail {

struct MapGeometry {
    std::size_t channels, h, w, h2, w2;
};

inline MapGeometry map_geometry(const Shape& shape) {
    require(shape.size() == 2 || shape.size() == 3, "wavelet: expected an (H,W) or (C,H,W) map");
    MapGeometry g{};
    g.channels = shape.size() == 3 ? shape[0] : 1;
    g.h = shape[shape.size() - 2];
    g.w = shape[shape.size() - 1];
    require(g.h >= 2 && g.w >= 2, "wavelet: spatial dims must be at least 2x2");
    g.h2 = (g.h + 1) / 2;
    g.w2 = (g.w + 1) / 2;
    return g;
}

inline Shape band_shape(const Shape& input, std::size_t h2, std::size_t w2) {
    return input.size() == 3 ? Shape{input[0], h2, w2} : Shape{h2, w2};
}

}  // namespace detail

inline WaveletPyramid haar_dwt2(const Tensor& r) {
    const auto g = detail::map_geometry(r.shape());
    const Shape bs = detail::band_shape(r.shape(), g.h2, g.w2);
    WaveletPyramid p{Tensor(bs), Tensor(bs), Tensor(bs), Tensor(bs), g.h, g.w};
    auto px = [&](std::size_t c, std::size_t y, std::size_t x) -> Real {
        return (y < g.h && x < g.w) ? r[(c * g.h + y) * g.w + x] : Real{0};
    };
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t i = 0; i < g.h2; ++i) {
            for (std::size_t j = 0; j < g.w2; ++j) {
                const Real a = px(c, 2 * i, 2 * j), b = px(c, 2 * i, 2 * j + 1);
                const Real cc = px(c, 2 * i + 1, 2 * j), d = px(c, 2 * i + 1, 2 * j + 1);
                const std::size_t o = (c * g.h2 + i) * g.w2 + j;
                p.ll[o] = (a + b + cc + d) * Real{0.5};
                p.lh[o] = (a + b - cc - d) * Real{0.5};
                p.hl[o] = (a - b + cc - d) * Real{0.5};
                p.hh[o] = (a - b - cc + d) * Real{0.5};
            }
        }
    }
    return p;
}

inline Tensor haar_idwt2(const WaveletPyramid& p) {
    const Shape& bs = p.ll.shape();
    detail::require(bs.size() == 2 || bs.size() == 3, "haar_idwt2: malformed pyramid");
    detail::require_shape(p.lh.shape() == bs && p.hl.shape() == bs && p.hh.shape() == bs,
                          "haar_idwt2: subband shapes differ");
    const std::size_t channels = bs.size() == 3 ? bs[0] : 1;
    const std::size_t h2 = bs[bs.size() - 2], w2 = bs[bs.size() - 1];
    const std::size_t h = p.orig_h, w = p.orig_w;
    detail::require(h <= 2 * h2 && w <= 2 * w2 && h + 1 >= 2 * h2 && w + 1 >= 2 * w2,
                    "haar_idwt2: orig dims inconsistent with subbands");
    Tensor out(bs.size() == 3 ? Shape{channels, h, w} : Shape{h, w});
    auto put = [&](std::size_t c, std::size_t y, std::size_t x, Real v) {
        if (y < h && x < w) out[(c * h + y) * w + x] = v;
    };
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < h2; ++i) {
            for (std::size_t j = 0; j < w2; ++j) {
                const std::size_t o = (c * h2 + i) * w2 + j;
                const Real ll = p.ll[o], lh = p.lh[o], hl = p.hl[o], hh = p.hh[o];
                put(c, 2 * i, 2 * j, (ll + lh + hl + hh) * Real{0.5});
                put(c, 2 * i, 2 * j + 1, (ll + lh - hl - hh) * Real{0.5});
                put(c, 2 * i + 1, 2 * j, (ll - lh + hl - hh) * Real{0.5});
                put(c, 2 * i + 1, 2 * j + 1, (ll - lh - hl + hh) * Real{0.5});
            }
        }
    }
    return out;
}

inline FrequencyEnergies relative_energy(const WaveletPyramid& p) {
    auto energy = [](const Tensor& t) {
        Real s = 0;
        for (Real v : t.data()) s += v * v;
        return s;
    };
    FrequencyEnergies e;
    e.e_low = energy(p.ll);
    e.e_high = energy(p.lh) + energy(p.hl) + energy(p.hh);
    const Real total = e.e_low + e.e_high;
    if (total > 0) {
        e.p_high = e.e_high / total;
        e.p_low = e.e_low / total;
    }
    return e;
}

/// Returns {R_high, R_low}: the synthesis of the detail subbands and of LL alone.
inline std::pair<Tensor, Tensor> split_frequency(const Tensor& r) {
    WaveletPyramid p = haar_dwt2(r);
    WaveletPyramid low{p.ll, Tensor(p.ll.shape()), Tensor(p.ll.shape()), Tensor(p.ll.shape()), p.orig_h, p.orig_w};
    p.ll = Tensor(p.ll.shape());
    return {haar_idwt2(p), haar_idwt2(low)};
}

/// Adjoint of the linear map R -> (R_high, R_low) applied to (g_high, g_low).
/// Analysis and synthesis are mutual transposes under orthonormal scaling,
/// and cropping is the transpose of zero-padding.
inline Tensor split_frequency_adjoint(const Tensor& g_high, const Tensor& g_low) {
    detail::require_shape(g_high.shape() == g_low.shape(), "split_frequency_adjoint: shape mismatch");
    WaveletPyramid ph = haar_dwt2(g_high);
    const WaveletPyramid pl = haar_dwt2(g_low);
    ph.ll = pl.ll;
    return haar_idwt2(ph);
}

// ---------------------------------------------------------------------------
// Frequency independent distillation
// ---------------------------------------------------------------------------

/// Forward values for one (student, teacher) representation pair.
struct FidPairCache {
    struct Component {
        Tensor student;           // R_X of the student
        std::vector<Real> u_s;    // normalized squared student map
        std::vector<Real> u_t;    // normalized squared teacher map
        Real norm_s = 0;          // ||R_X^2|| for the student
        Real distance = 0;
    };
    Component high, low;
    Shape shape;
    Real loss = 0;
};

namespace detail {

inline std::vector<Real> normalized_square(const Tensor& v, Real& norm) {
    std::vector<Real> q(v.size());
    Real s = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        q[i] = v[i] * v[i];
        s += q[i] * q[i];
    }
    norm = std::sqrt(s);
    if (norm > 0) {
        for (Real& x : q) x /= norm;
    } else {
        std::fill(q.begin(), q.end(), Real{0});
    }
    return q;
}

inline FidPairCache::Component fid_component(Tensor student, const Tensor& teacher) {
    FidPairCache::Component c;
    Real norm_t = 0;
    c.u_s = normalized_square(student, c.norm_s);
    c.u_t = normalized_square(teacher, norm_t);
    Real s = 0;
    for (std::size_t i = 0; i < c.u_s.size(); ++i) {
        const Real d = c.u_s[i] - c.u_t[i];
        s += d * d;
    }
    c.distance = std::sqrt(s);
    c.student = std::move(student);
    return c;
}

inline Tensor fid_component_backward(const FidPairCache::Component& c) {
    Tensor g(c.student.shape());
    if (c.distance == 0 || c.norm_s == 0) return g;
    const std::size_t n = c.u_s.size();
    std::vector<Real> gu(n);
    Real dot = 0;
    for (std::size_t i = 0; i < n; ++i) {
        gu[i] = (c.u_s[i] - c.u_t[i]) / c.distance;
        dot += c.u_s[i] * gu[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
        const Real gq = (gu[i] - c.u_s[i] * dot) / c.norm_s;
        g[i] = 2 * c.student[i] * gq;
    }
    return g;
}

}  // namespace detail

/// ||u_s^H − u_t^H|| + ||u_s^L − u_t^L|| for one mapped block, where u is the
/// L2-normalized elementwise square of a frequency component.
inline FidPairCache fid_pair_forward(const Tensor& student, const Tensor& teacher) {
    detail::require_shape(student.shape() == teacher.shape(), "fid: student/teacher representation shapes differ");
    auto [sh, sl] = split_frequency(student);
    auto [th, tl] = split_frequency(teacher);
    FidPairCache c;
    c.shape = student.shape();
    c.high = detail::fid_component(std::move(sh), th);
    c.low = detail::fid_component(std::move(sl), tl);
    c.loss = c.high.distance + c.low.distance;
    return c;
}

/// Gradient of the pair loss with respect to the student representation.
inline Tensor fid_pair_backward(const FidPairCache& c) {
    return split_frequency_adjoint(detail::fid_component_backward(c.high),
                                   detail::fid_component_backward(c.low));
}

/// Sum of pair losses over aligned block representations.
inline Real fid_loss(std::span<const Tensor> student, std::span<const Tensor> teacher) {
    detail::require_shape(student.size() == teacher.size(), "fid_loss: trace misalignment");
    Real loss = 0;
    for (std::size_t i = 0; i < student.size(); ++i) loss += fid_pair_forward(student[i], teacher[i]).loss;
    return loss;
}

/// Gradients of fid_loss with respect to each student representation.
inline std::vector<Tensor> fid_loss_backward(std::span<const Tensor> student, std::span<const Tensor> teacher) {
    detail::require_shape(student.size() == teacher.size(), "fid_loss_backward: trace misalignment");
    std::vector<Tensor> grads;
    grads.reserve(student.size());
    for (std::size_t i = 0; i < student.size(); ++i) {
        grads.push_back(fid_pair_backward(fid_pair_forward(student[i], teacher[i])));
    }
    return grads;
}

}  // namespace binspot

#pragma once

#include <binspot/model.hpp>
#include <binspot/wavelet.hpp>

#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

namespace binspot {

// ---------------------------------------------------------------------------
// FLOPs accounting
// ---------------------------------------------------------------------------

enum class FlopsMode { full, single_scale, dual_scale };

inline FlopsMode parse_flops_mode(const std::string& s) {
    if (s == "full") return FlopsMode::full;
    if (s == "single_scale") return FlopsMode::single_scale;
    if (s == "dual_scale") return FlopsMode::dual_scale;
    throw InvalidArgument("unknown FLOPs mode '" + s + "' (expected full, single_scale or dual_scale)");
}

inline const char* to_string(FlopsMode m) {
    switch (m) {
        case FlopsMode::full: return "full";
        case FlopsMode::single_scale: return "single_scale";
        case FlopsMode::dual_scale: return "dual_scale";
    }
    return "?";
}

enum class FlopsKind { matmul, elementwise };

struct FlopsRow {
    std::string part;  // head, neck, backbone, classifier
    std::string name;
    FlopsKind kind = FlopsKind::matmul;
    double float_flops = 0;  // cost when the unit runs in full precision
    double bin_flops = 0;    // cost under the requested mode
};

struct FlopsReport {
    FlopsMode mode = FlopsMode::full;
    std::size_t delta = 1;
    std::vector<FlopsRow> rows;

    double total_float() const {
        double s = 0;
        for (const auto& r : rows) s += r.float_flops;
        return s;
    }
    double total_bin() const {
        double s = 0;
        for (const auto& r : rows) s += r.bin_flops;
        return s;
    }
    double ratio() const { return total_float() > 0 ? total_bin() / total_float() : 0; }

    /// Sum of one column restricted to a part and/or kind (empty part means any).
    double sum(const std::string& part, FlopsKind kind, bool binarized_column) const {
        double s = 0;
        for (const auto& r : rows)
            if ((part.empty() || r.part == part) && r.kind == kind) s += binarized_column ? r.bin_flops : r.float_flops;
        return s;
    }
};

/// Per-example FLOPs. Float matmuls cost 2 FLOPs per MAC; a binarized matmul
/// costs 1/64 of that. Dual-scale units run two binary matmuls plus one pass
/// over the activations for alpha2 and a multiply-add per output. Elementwise
/// ops cost 1 FLOP per scalar op.
inline FlopsReport flops_report(const ModelConfig& cfg, FlopsMode mode, std::size_t delta) {
    cfg.validate();
    detail::require(cfg.has_delta(delta), "flops: delta " + std::to_string(delta) + " is not in the delta set");
    FlopsReport rep;
    rep.mode = mode;
    rep.delta = delta;
    const bool bin = mode != FlopsMode::full;
    const bool dual = mode == FlopsMode::dual_scale;

    auto elementwise = [&](const std::string& part, const std::string& name, double ops) {
        rep.rows.push_back({part, name, FlopsKind::elementwise, ops, ops});
    };
    // macs: multiply-accumulates; in_elems: activations entering the binarizer; outs: outputs.
    auto unit = [&](const std::string& part, const std::string& name, double macs, double in_elems, double outs,
                    bool binarizable) {
        const double f = 2 * macs;
        if (!bin || !binarizable) {
            rep.rows.push_back({part, name, FlopsKind::matmul, f, f});
            return;
        }
        rep.rows.push_back({part, name, FlopsKind::matmul, f, (dual ? 2 : 1) * f / 64});
        elementwise(part, name + ".alpha_w", outs);
        if (dual) {
            elementwise(part, name + ".alpha2", in_elems);
            elementwise(part, name + ".scaled_add", 2 * outs);
        }
    };

    const double ch = static_cast<double>(cfg.head_channels), k2 = static_cast<double>(cfg.head_kernel * cfg.head_kernel);
    const double h1 = static_cast<double>(cfg.conv1_h() * cfg.conv1_w());
    const double h2 = static_cast<double>(cfg.frames() * cfg.conv2_w());
    const double in_map = static_cast<double>(cfg.time_steps * cfg.freq_bins);
    const double frames = static_cast<double>(cfg.frames());
    const double d = static_cast<double>(cfg.backbone_dim), hd = static_cast<double>(cfg.hidden_dim);
    const double taps = static_cast<double>(cfg.memory.taps());

    unit("head", "head.conv1", h1 * ch * k2, in_map, h1 * ch, false);
    elementwise("head", "head.bn1", 2 * h1 * ch);
    elementwise("head", "head.prelu1", h1 * ch);
    unit("head", "head.conv2", h2 * ch * ch * k2, h1 * ch, h2 * ch, true);
    elementwise("head", "head.bn2", 2 * h2 * ch);
    elementwise("head", "head.prelu2", h2 * ch);

    unit("neck", "neck", frames * static_cast<double>(cfg.neck_in()) * d, frames * static_cast<double>(cfg.neck_in()),
         frames * d, true);

    for (std::size_t l : cfg.active_blocks(delta)) {
        const std::string b = "block" + std::to_string(l);
        unit("backbone", b + ".U", frames * d * hd, frames * d, frames * hd, true);
        elementwise("backbone", b + ".bn", 2 * frames * hd);
        elementwise("backbone", b + ".prelu", frames * hd);
        unit("backbone", b + ".V", frames * hd * d, frames * hd, frames * d, true);
        unit("backbone", b + ".mem", frames * d * taps, frames * d, frames * d, true);
        elementwise("backbone", b + ".skip", 2 * frames * d);
    }

    elementwise("classifier", "pool", frames * d);
    unit("classifier", "classifier", d * static_cast<double>(cfg.num_classes), d,
         static_cast<double>(cfg.num_classes), false);
    return rep;
}

inline void write_flops_csv(std::ostream& os, const FlopsReport& r) {
    os << "part,name,float_flops,bin_flops\n";
    char buf[256];
    for (const auto& row : r.rows) {
        std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g\n", row.part.c_str(), row.name.c_str(), row.float_flops,
                      row.bin_flops);
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "total,total,%.17g,%.17g\n", r.total_float(), r.total_bin());
    os << buf;
}

// ---------------------------------------------------------------------------
// Frequency energy of block representations
// ---------------------------------------------------------------------------

struct FreqRow {
    std::string model;  // "student" or "teacher"
    std::size_t layer = 0;
    Real p_low = 0;
    Real p_high = 0;
};

namespace detail {

inline void append_freq_rows(const DtaModel& m, const TailTrace& t, const std::string& tag,
                             std::vector<FreqRow>& out) {
    for (const BlockTrace& b : t.blocks) {
        FreqRow row{tag, b.block, 0, 0};
        for (const Tensor& map : m.representation_maps(b.out, t.batch)) {
            const FrequencyEnergies e = relative_energy(haar_dwt2(map));
            row.p_low += e.p_low;
            row.p_high += e.p_high;
        }
        row.p_low /= static_cast<Real>(t.batch);
        row.p_high /= static_cast<Real>(t.batch);
        out.push_back(row);
    }
}

}  // namespace detail

/// Mean relative wavelet energy per executed block for the student (variant
/// delta) and the teacher blocks it is distilled from.
inline std::vector<FreqRow> freq_energy_report(const DtaModel& student, const DtaModel& teacher, const Tensor& x,
                                               std::size_t delta) {
    const ForwardTrace s = student.forward(x, delta);
    const ForwardTrace t = teacher.forward(x, 1);
    std::vector<FreqRow> rows;
    detail::append_freq_rows(student, s.tail, "student", rows);
    TailTrace matched = t.tail;
    std::erase_if(matched.blocks, [&](const BlockTrace& b) { return b.block % delta != 0; });
    detail::append_freq_rows(teacher, matched, "teacher", rows);
    return rows;
}

inline void write_freq_csv(std::ostream& os, const std::vector<FreqRow>& rows) {
    os << "model,layer,p_low,p_high\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g\n", r.model.c_str(), r.layer, r.p_low, r.p_high);
        os << buf;
    }
}

// ---------------------------------------------------------------------------
// Activation quantization error
// ---------------------------------------------------------------------------

struct QuantErrorRow {
    std::size_t layer = 0;
    std::string name;
    Real mse_single = 0;
    Real mse_dual = 0;
    Real mean_alpha2_sq = 0;  // mean over groups of alpha2²
};

/// MSE of sign(x) and of sign(x) + alpha2·sign(x − sign(x)) against the
/// shifted activations x seen by each binarizer, averaged over groups.
inline QuantErrorRow quant_error_of(const ActQuantCache& c, std::size_t layer, const std::string& name) {
    QuantErrorRow row{layer, name, 0, 0, 0};
    const std::size_t gs = c.group_size, groups = c.x.size() / gs;
    for (std::size_t g = 0; g < groups; ++g) {
        Real a2 = 0;
        for (std::size_t i = g * gs; i < (g + 1) * gs; ++i) a2 += std::abs(c.x[i] - sign_of(c.x[i]));
        a2 /= static_cast<Real>(gs);
        Real s = 0, d = 0;
        for (std::size_t i = g * gs; i < (g + 1) * gs; ++i) {
            const Real e = c.x[i] - sign_of(c.x[i]);
            const Real r = e - a2 * sign_of(e);
            s += e * e;
            d += r * r;
        }
        row.mse_single += s / static_cast<Real>(gs);
        row.mse_dual += d / static_cast<Real>(gs);
        row.mean_alpha2_sq += a2 * a2;
    }
    row.mse_single /= static_cast<Real>(groups);
    row.mse_dual /= static_cast<Real>(groups);
    row.mean_alpha2_sq /= static_cast<Real>(groups);
    return row;
}

/// One row per binarized unit executed by the delta variant on `x`.
inline std::vector<QuantErrorRow> quant_error_report(const DtaModel& model, const Tensor& x, std::size_t delta) {
    detail::require(model.config().binarized, "quant_error_report: model is not binarized");
    const ForwardTrace f = model.forward(x, delta);
    std::vector<QuantErrorRow> rows;
    auto add = [&](const ActQuantCache& c, const std::string& name) {
        rows.push_back(quant_error_of(c, rows.size(), name));
    };
    add(f.stem.conv2.act, "head.conv2");
    add(f.stem.neck.act, "neck");
    for (const BlockTrace& b : f.tail.blocks) {
        const std::string n = "block" + std::to_string(b.block);
        add(b.u.act, n + ".U");
        add(b.v.act, n + ".V");
        add(b.mem.act, n + ".mem");
    }
    return rows;
}

inline void write_qerr_csv(std::ostream& os, const std::vector<QuantErrorRow>& rows) {
    os << "layer,mse_single,mse_dual\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", r.layer, r.mse_single, r.mse_dual);
        os << buf;
    }
}

}  // namespace binspot

#pragma once

#include <binspot/data.hpp>
#include <binspot/model.hpp>
#include <binspot/packed.hpp>

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

namespace binspot {

// ---------------------------------------------------------------------------
// Little-endian byte streams
// ---------------------------------------------------------------------------

class ByteWriter {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void magic(const char (&m)[5]) { bytes(m, 4); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) { le(v); }
    void u64(std::uint64_t v) { le(v); }
    void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(checked_u32(s.size()));
        bytes(s.data(), s.size());
    }

    const std::vector<char>& buffer() const noexcept { return buf_; }

    static std::uint32_t checked_u32(std::size_t v) {
        detail::require(v <= 0xFFFFFFFFu, "value does not fit in 32 bits");
        return static_cast<std::uint32_t>(v);
    }

private:
    template <class U>
    void le(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    std::vector<char> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<char> data, std::string what) : buf_(std::move(data)), what_(std::move(what)) {}

    bool at_end() const noexcept { return pos_ == buf_.size(); }
    std::size_t remaining() const noexcept { return buf_.size() - pos_; }

    void expect_magic(const char (&m)[5]) {
        need(4);
        if (std::memcmp(buf_.data() + pos_, m, 4) != 0) fail("bad magic (expected '" + std::string(m) + "')");
        pos_ += 4;
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::uint32_t u32() { return le<std::uint32_t>(); }
    std::uint64_t u64() { return le<std::uint64_t>(); }
    float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
    double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
    std::string str(std::size_t max_len = 1u << 20) {
        const std::uint32_t n = u32();
        if (n > max_len) fail("string length " + std::to_string(n) + " exceeds limit");
        need(n);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }

    /// Guards a payload of `count` elements of `width` bytes against overflow and truncation.
    void need_elements(std::uint64_t count, std::size_t width) {
        if (count > remaining() / width) fail("payload of " + std::to_string(count) + " elements exceeds file size");
    }

    [[noreturn]] void fail(const std::string& msg) const { throw FormatError(what_ + ": " + msg); }

private:
    void need(std::size_t n) {
        if (remaining() < n) fail("truncated file");
    }
    template <class U>
    U le() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }

    std::vector<char> buf_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Config <-> JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"num_blocks", c.num_blocks},
            {"delta_set", c.delta_set},
            {"backbone_dim", c.backbone_dim},
            {"hidden_dim", c.hidden_dim},
            {"time_steps", c.time_steps},
            {"freq_bins", c.freq_bins},
            {"num_classes", c.num_classes},
            {"head_channels", c.head_channels},
            {"head_kernel", c.head_kernel},
            {"memory", {{"n1", c.memory.n1}, {"n2", c.memory.n2}, {"s1", c.memory.s1}, {"s2", c.memory.s2}}},
            {"binarized", c.binarized},
            {"dual_scale", c.dual_scale},
            {"learnable_lpb", c.learnable_lpb}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig c;
        c.num_blocks = j.at("num_blocks").get<std::size_t>();
        c.delta_set = j.at("delta_set").get<std::vector<std::size_t>>();
        c.backbone_dim = j.at("backbone_dim").get<std::size_t>();
        c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
        c.time_steps = j.at("time_steps").get<std::size_t>();
        c.freq_bins = j.at("freq_bins").get<std::size_t>();
        c.num_classes = j.at("num_classes").get<std::size_t>();
        c.head_channels = j.at("head_channels").get<std::size_t>();
        c.head_kernel = j.at("head_kernel").get<std::size_t>();
        const auto& m = j.at("memory");
        c.memory = {m.at("n1").get<std::size_t>(), m.at("n2").get<std::size_t>(), m.at("s1").get<std::size_t>(),
                    m.at("s2").get<std::size_t>()};
        c.binarized = j.at("binarized").get<bool>();
        c.dual_scale = j.at("dual_scale").get<bool>();
        c.learnable_lpb = j.at("learnable_lpb").get<bool>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kVelocitySuffix = "#velocity";

struct Checkpoint {
    DtaModel model;
    std::uint64_t epoch = 0;
    std::uint64_t step = 0;
};

namespace detail {

inline void write_tensor_record(ByteWriter& w, const std::string& name, const Shape& shape,
                                std::span<const Real> values) {
    w.str(name);
    w.u32(ByteWriter::checked_u32(shape.size()));
    for (std::size_t d : shape) w.u32(ByteWriter::checked_u32(d));
    for (Real v : values) w.f32(static_cast<float>(v));
}

struct TensorRecord {
    std::string name;
    Shape shape;
    std::vector<Real> values;
};

inline TensorRecord read_tensor_record(ByteReader& r) {
    TensorRecord t;
    t.name = r.str(4096);
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("record '" + t.name + "' has rank " + std::to_string(rank));
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint32_t d = r.u32();
        t.shape.push_back(d);
        if (d != 0 && count > (std::uint64_t{1} << 40) / d) r.fail("record '" + t.name + "' dimension overflow");
        count *= d;
    }
    r.need_elements(count, 4);
    t.values.resize(count);
    for (Real& v : t.values) v = r.f32();
    return t;
}

}  // namespace detail

inline std::vector<char> serialize_checkpoint(const DtaModel& model, std::uint64_t epoch, std::uint64_t step = 0) {
    ByteWriter w;
    w.magic("BFS2");
    w.u32(kCheckpointVersion);
    const nlohmann::json cfg = {{"model", to_json(model.config())}, {"epoch", epoch}, {"step", step}};
    w.str(cfg.dump());
    model.for_each_param([&](const Param& p) { detail::write_tensor_record(w, p.name, p.shape, p.value); });
    model.for_each_param([&](const Param& p) {
        if (p.trainable) detail::write_tensor_record(w, p.name + kVelocitySuffix, p.shape, p.velocity);
    });
    return w.buffer();
}

inline Checkpoint deserialize_checkpoint(std::vector<char> bytes, const std::string& what = "checkpoint") {
    ByteReader r(std::move(bytes), what);
    r.expect_magic("BFS2");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
    nlohmann::json cfg;
    try {
        cfg = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("config is not valid JSON: ") + e.what());
    }
    Checkpoint ck;
    try {
        ck.epoch = cfg.at("epoch").get<std::uint64_t>();
        ck.step = cfg.at("step").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("config: ") + e.what());
    }
    ck.model = ModelAccess::blank(model_config_from_json(cfg.at("model")));
    std::map<std::string, detail::TensorRecord> records;
    while (!r.at_end()) {
        detail::TensorRecord t = detail::read_tensor_record(r);
        const std::string name = t.name;
        if (!records.emplace(name, std::move(t)).second) r.fail("duplicate record '" + name + "'");
    }
    ck.model.for_each_param([&](Param& p) {
        auto take = [&](const std::string& name, std::vector<Real>& dst) {
            auto it = records.find(name);
            if (it == records.end()) r.fail("missing record '" + name + "'");
            if (it->second.shape != p.shape)
                r.fail("record '" + name + "' has shape " + shape_string(it->second.shape) + ", expected " +
                       shape_string(p.shape));
            dst = std::move(it->second.values);
            records.erase(it);
        };
        take(p.name, p.value);
        if (p.trainable) take(p.name + kVelocitySuffix, p.velocity);
    });
    if (!records.empty()) r.fail("unexpected record '" + records.begin()->first + "'");
    return ck;
}

inline void save_checkpoint(const std::string& path, const DtaModel& model, std::uint64_t epoch,
                            std::uint64_t step = 0) {
    write_file(path, serialize_checkpoint(model, epoch, step));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path), path); }

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::vector<char> serialize_features(const FeatureDataset& ds) {
    ds.validate();
    ByteWriter w;
    w.magic("BFTR");
    w.u32(kFeatureVersion);
    w.u32(ByteWriter::checked_u32(ds.size()));
    w.u32(ByteWriter::checked_u32(ds.time_steps));
    w.u32(ByteWriter::checked_u32(ds.freq_bins));
    w.u32(ByteWriter::checked_u32(ds.num_classes));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        w.u32(static_cast<std::uint32_t>(ds.labels[i]));
        for (Real v : ds.example(i)) w.f32(static_cast<float>(v));
    }
    return w.buffer();
}

inline FeatureDataset deserialize_features(std::vector<char> bytes, const std::string& what = "features") {
    ByteReader r(std::move(bytes), what);
    r.expect_magic("BFTR");
    const std::uint32_t version = r.u32();
    if (version != kFeatureVersion) r.fail("unsupported version " + std::to_string(version));
    FeatureDataset ds;
    const std::uint32_t count = r.u32();
    ds.time_steps = r.u32();
    ds.freq_bins = r.u32();
    ds.num_classes = r.u32();
    if (ds.time_steps == 0 || ds.freq_bins == 0 || ds.num_classes == 0) r.fail("zero dimension in header");
    const std::uint64_t per = std::uint64_t{ds.time_steps} * ds.freq_bins;
    const std::uint64_t expected = std::uint64_t{count} * (4 + 4 * per);
    if (expected != r.remaining())
        r.fail("header promises " + std::to_string(expected) + " payload bytes, file has " +
               std::to_string(r.remaining()));
    ds.features.reserve(count * per);
    ds.labels.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t label = r.u32();
        if (label >= ds.num_classes) r.fail("label " + std::to_string(label) + " out of range");
        ds.labels.push_back(label);
        for (std::uint64_t k = 0; k < per; ++k) {
            const float v = r.f32();
            if (!std::isfinite(v)) r.fail("non-finite feature value");
            ds.features.push_back(v);
        }
    }
    return ds;
}

inline void save_features(const std::string& path, const FeatureDataset& ds) {
    write_file(path, serialize_features(ds));
}

inline FeatureDataset load_features(const std::string& path) { return deserialize_features(read_file(path), path); }

// ---------------------------------------------------------------------------
// Packed inference bundle
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kBundleVersion = 1;

namespace detail {

inline bool is_packed_param(const std::string& name) {
    auto ends = [&](const char* s) {
        const std::size_t n = std::strlen(s);
        return name.size() >= n && name.compare(name.size() - n, n, s) == 0;
    };
    return name.rfind("head.conv2.", 0) == 0 || name.rfind("neck.", 0) == 0 || ends(".U.weight") ||
           ends(".U.bias") || ends(".U.lpb") || ends(".V.weight") || ends(".V.bias") || ends(".V.lpb") ||
           ends(".mem.taps") || ends(".mem.lpb");
}

inline void write_unit(ByteWriter& w, const PackedUnit& u) {
    w.str(u.name);
    w.u32(ByteWriter::checked_u32(u.rows()));
    w.u32(ByteWriter::checked_u32(u.cols()));
    for (std::uint64_t word : u.weight_signs.words()) w.u64(word);
    for (Real a : u.alpha_w) w.f64(a);
    w.u32(ByteWriter::checked_u32(u.bias.size()));
    for (Real b : u.bias) w.f64(b);
    w.f64(u.theta);
}

inline PackedUnit read_unit(ByteReader& r, const std::string& expected, std::size_t rows, std::size_t cols) {
    PackedUnit u;
    u.name = r.str(4096);
    if (u.name != expected) r.fail("expected packed unit '" + expected + "', found '" + u.name + "'");
    if (r.u32() != rows || r.u32() != cols) r.fail("packed unit '" + u.name + "' has unexpected dimensions");
    const std::size_t words = rows * BitTensor::words_for(cols);
    r.need_elements(words, 8);
    std::vector<std::uint64_t> bits(words);
    for (auto& b : bits) b = r.u64();
    try {
        u.weight_signs = BitTensor::from_words(rows, cols, std::move(bits));
    } catch (const InvalidArgument& e) {
        r.fail(e.what());
    }
    r.need_elements(rows, 8);
    u.alpha_w.resize(rows);
    for (Real& a : u.alpha_w) a = r.f64();
    const std::uint32_t nb = r.u32();
    if (nb != 0 && nb != rows) r.fail("packed unit '" + u.name + "' has a bias of the wrong length");
    r.need_elements(nb, 8);
    u.bias.resize(nb);
    for (Real& b : u.bias) b = r.f64();
    u.theta = r.f64();
    return u;
}

}  // namespace detail

/// Bundle layout: magic, version, config JSON, full-precision tensors
/// (count-prefixed, float64 payloads) and packed units in model order.
inline std::vector<char> serialize_bundle(const PackedModel& pm) {
    ByteWriter w;
    w.magic("BFSP");
    w.u32(kBundleVersion);
    w.str(to_json(pm.config()).dump());
    std::vector<const Param*> fp;
    pm.float_layers().for_each_param([&](const Param& p) {
        if (!detail::is_packed_param(p.name)) fp.push_back(&p);
    });
    w.u32(ByteWriter::checked_u32(fp.size()));
    for (const Param* p : fp) {
        w.str(p->name);
        w.u32(ByteWriter::checked_u32(p->size()));
        for (Real v : p->value) w.f64(v);
    }
    detail::write_unit(w, pm.conv2());
    detail::write_unit(w, pm.neck());
    for (const auto& b : pm.blocks()) {
        detail::write_unit(w, b.u);
        detail::write_unit(w, b.v);
        detail::write_unit(w, b.mem);
    }
    return w.buffer();
}

inline PackedModel deserialize_bundle(std::vector<char> bytes, const std::string& what = "bundle") {
    ByteReader r(std::move(bytes), what);
    r.expect_magic("BFSP");
    const std::uint32_t version = r.u32();
    if (version != kBundleVersion) r.fail("unsupported version " + std::to_string(version));
    nlohmann::json cfg;
    try {
        cfg = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("config is not valid JSON: ") + e.what());
    }
    const ModelConfig c = model_config_from_json(cfg);
    if (!c.binarized) r.fail("bundle config is not binarized");
    DtaModel m = ModelAccess::blank(c);
    std::vector<Param*> fp;
    m.for_each_param([&](Param& p) {
        if (!detail::is_packed_param(p.name)) fp.push_back(&p);
    });
    if (r.u32() != fp.size()) r.fail("full-precision tensor count mismatch");
    for (Param* p : fp) {
        if (r.str(4096) != p->name) r.fail("expected tensor '" + p->name + "'");
        if (r.u32() != p->size()) r.fail("tensor '" + p->name + "' has the wrong length");
        r.need_elements(p->size(), 8);
        for (Real& v : p->value) v = r.f64();
    }
    PackedUnit conv2 = detail::read_unit(r, "head.conv2", c.head_channels, m.conv2().patch_len());
    PackedUnit neck = detail::read_unit(r, "neck", c.backbone_dim, c.neck_in());
    std::vector<PackedModel::BlockUnits> blocks;
    for (std::size_t l = 1; l <= c.num_blocks; ++l) {
        const std::string b = "block" + std::to_string(l);
        PackedModel::BlockUnits u;
        u.u = detail::read_unit(r, b + ".U.weight", c.hidden_dim, c.backbone_dim);
        u.v = detail::read_unit(r, b + ".V.weight", c.backbone_dim, c.hidden_dim);
        u.mem = detail::read_unit(r, b + ".mem.taps", c.memory.taps(), c.backbone_dim);
        blocks.push_back(std::move(u));
    }
    if (!r.at_end()) r.fail("trailing bytes after bundle");
    return PackedModel::from_parts(std::move(m), std::move(conv2), std::move(neck), std::move(blocks));
}

inline void save_bundle(const std::string& path, const PackedModel& pm) { write_file(path, serialize_bundle(pm)); }

inline PackedModel load_bundle(const std::string& path) { return deserialize_bundle(read_file(path), path); }

}  // namespace binspot

#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "privdiff/accountant.hpp"
#include "privdiff/autoencoder.hpp"
#include "privdiff/diffusion.hpp"
#include "privdiff/errors.hpp"
#include "privdiff/fid.hpp"
#include "privdiff/model.hpp"

namespace privdiff {

// Versioned binary checkpoint container: named parameter tensors plus the
// configuration and accounting metadata each section needs. Round-trips are
// bit-exact (doubles stored verbatim).

class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void i32(int32_t v) { raw(&v, 4); }
    void i64(int64_t v) { raw(&v, 8); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        u8(static_cast<uint8_t>(t.ndim()));
        for (int d : t.shape) i32(d);
        raw(t.data.data(), t.data.size() * sizeof(double));
    }
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    const std::vector<uint8_t>& bytes() const { return buf_; }

private:
    std::vector<uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(const uint8_t* p, size_t n) : p_(p), n_(n) {}
    uint8_t u8() { return *take(1); }
    uint32_t u32() { return read<uint32_t>(); }
    uint64_t u64() { return read<uint64_t>(); }
    int32_t i32() { return read<int32_t>(); }
    int64_t i64() { return read<int64_t>(); }
    double f64() { return read<double>(); }
    std::string str() {
        uint32_t len = u32();
        const uint8_t* p = take(len);
        return std::string(reinterpret_cast<const char*>(p), len);
    }
    Tensor tensor() {
        int nd = u8();
        Shape shape;
        for (int i = 0; i < nd; ++i) shape.push_back(i32());
        Tensor t(shape);
        const uint8_t* p = take(t.data.size() * sizeof(double));
        std::memcpy(t.data.data(), p, t.data.size() * sizeof(double));
        return t;
    }
    bool exhausted() const { return pos_ == n_; }

private:
    template <typename T>
    T read() {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return v;
    }
    const uint8_t* take(size_t n) {
        if (pos_ + n > n_) throw FormatError("checkpoint: truncated data");
        const uint8_t* p = p_ + pos_;
        pos_ += n;
        return p;
    }
    const uint8_t* p_;
    size_t n_, pos_ = 0;
};

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

struct AutoencoderSection {
    AutoencoderConfig cfg;
    std::map<std::string, Tensor> tensors;
    uint64_t config_hash = 0;
    std::string config_text;
};

struct DiffusionSection {
    UNetConfig cfg;
    LoraSpec lora;
    int T = 0;
    double beta_start = 0, beta_end = 0;
    std::map<std::string, Tensor> tensors;
    uint64_t config_hash = 0;
    std::string config_text;
    uint64_t ae_hash = 0;
    // DP accounting (fine-tuned checkpoints only)
    bool has_ledger = false;
    accounting::PrivacyLedger ledger;
    bool dp_stamped = false;
    double stamped_epsilon = 0;
    // resume state
    uint64_t run_seed = 0;
    int64_t next_step = 0;
    int64_t total_steps = 0;
};

struct StatsSection {
    FeatureStats stats;
    uint64_t config_hash = 0;
};

namespace detail {

inline void write_tensor_map(ByteWriter& w, const std::map<std::string, Tensor>& m) {
    w.u32(static_cast<uint32_t>(m.size()));
    for (const auto& [name, t] : m) {
        w.str(name);
        w.tensor(t);
    }
}

inline std::map<std::string, Tensor> read_tensor_map(ByteReader& r) {
    std::map<std::string, Tensor> m;
    uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        m[name] = r.tensor();
    }
    return m;
}

inline void encode_ae_core(ByteWriter& w, const AutoencoderSection& s) {
    w.i32(s.cfg.f);
    w.i32(s.cfg.latent_channels);
    w.i32(s.cfg.width);
    w.i32(s.cfg.in_channels);
    w.i32(s.cfg.image_hw);
    w.u64(s.cfg.init_seed);
    write_tensor_map(w, s.tensors);
}

inline void encode_ae(ByteWriter& w, const AutoencoderSection& s) {
    encode_ae_core(w, s);
    w.u64(s.config_hash);
    w.str(s.config_text);
}

inline AutoencoderSection decode_ae(ByteReader& r) {
    AutoencoderSection s;
    s.cfg.f = r.i32();
    s.cfg.latent_channels = r.i32();
    s.cfg.width = r.i32();
    s.cfg.in_channels = r.i32();
    s.cfg.image_hw = r.i32();
    s.cfg.init_seed = r.u64();
    s.tensors = read_tensor_map(r);
    s.config_hash = r.u64();
    s.config_text = r.str();
    return s;
}

inline void encode_diffusion(ByteWriter& w, const DiffusionSection& s) {
    w.i32(s.cfg.latent_channels);
    w.i32(s.cfg.latent_hw);
    w.i32(s.cfg.base_width);
    w.i32(s.cfg.heads);
    w.u8(s.cfg.conditional ? 1 : 0);
    w.i32(s.cfg.num_classes);
    w.i32(s.cfg.cond_dim);
    w.u64(s.cfg.init_seed);
    w.u8(s.lora.enabled ? 1 : 0);
    w.i32(s.lora.rank);
    w.f64(s.lora.scale);
    uint8_t mask = 0;
    if (s.lora.targets.count("wq")) mask |= 1;
    if (s.lora.targets.count("wk")) mask |= 2;
    if (s.lora.targets.count("wv")) mask |= 4;
    w.u8(mask);
    w.i32(s.T);
    w.f64(s.beta_start);
    w.f64(s.beta_end);
    write_tensor_map(w, s.tensors);
    w.u64(s.config_hash);
    w.str(s.config_text);
    w.u64(s.ae_hash);
    w.u8(s.has_ledger ? 1 : 0);
    w.f64(s.ledger.q);
    w.f64(s.ledger.sigma);
    w.i64(s.ledger.steps);
    w.f64(s.ledger.delta);
    w.f64(s.ledger.clip);
    w.u8(s.dp_stamped ? 1 : 0);
    w.f64(s.stamped_epsilon);
    w.u64(s.run_seed);
    w.i64(s.next_step);
    w.i64(s.total_steps);
}

inline DiffusionSection decode_diffusion(ByteReader& r) {
    DiffusionSection s;
    s.cfg.latent_channels = r.i32();
    s.cfg.latent_hw = r.i32();
    s.cfg.base_width = r.i32();
    s.cfg.heads = r.i32();
    s.cfg.conditional = r.u8() != 0;
    s.cfg.num_classes = r.i32();
    s.cfg.cond_dim = r.i32();
    s.cfg.init_seed = r.u64();
    s.lora.enabled = r.u8() != 0;
    s.lora.rank = r.i32();
    s.lora.scale = r.f64();
    uint8_t mask = r.u8();
    if (mask & 1) s.lora.targets.insert("wq");
    if (mask & 2) s.lora.targets.insert("wk");
    if (mask & 4) s.lora.targets.insert("wv");
    s.T = r.i32();
    s.beta_start = r.f64();
    s.beta_end = r.f64();
    s.tensors = read_tensor_map(r);
    s.config_hash = r.u64();
    s.config_text = r.str();
    s.ae_hash = r.u64();
    s.has_ledger = r.u8() != 0;
    s.ledger.q = r.f64();
    s.ledger.sigma = r.f64();
    s.ledger.steps = r.i64();
    s.ledger.delta = r.f64();
    s.ledger.clip = r.f64();
    s.dp_stamped = r.u8() != 0;
    s.stamped_epsilon = r.f64();
    s.run_seed = r.u64();
    s.next_step = r.i64();
    s.total_steps = r.i64();
    return s;
}

inline void encode_stats(ByteWriter& w, const StatsSection& s) {
    w.i64(s.stats.n);
    w.tensor(s.stats.mu);
    w.tensor(s.stats.m_sec);
    w.u8(s.stats.privatized ? 1 : 0);
    w.f64(s.stats.eps1);
    w.f64(s.stats.delta1);
    w.f64(s.stats.eps2);
    w.f64(s.stats.delta2);
    w.u64(s.config_hash);
}

inline StatsSection decode_stats(ByteReader& r) {
    StatsSection s;
    s.stats.n = r.i64();
    s.stats.mu = r.tensor();
    s.stats.m_sec = r.tensor();
    s.stats.privatized = r.u8() != 0;
    s.stats.eps1 = r.f64();
    s.stats.delta1 = r.f64();
    s.stats.eps2 = r.f64();
    s.stats.delta2 = r.f64();
    s.config_hash = r.u64();
    return s;
}

}  // namespace detail

// Content identity of an autoencoder (config + parameters); diffusion
// checkpoints reference their autoencoder through this hash.
inline uint64_t ae_content_hash(const AutoencoderSection& s) {
    ByteWriter w;
    detail::encode_ae_core(w, s);
    return fnv1a64(w.bytes().data(), w.bytes().size());
}

struct CheckpointContainer {
    static constexpr uint32_t kMagic = 0x4B435044;  // "PDCK"
    static constexpr uint32_t kVersion = 1;
    enum SectionId : uint32_t { kAutoencoder = 1, kDiffusion = 2, kStats = 3 };

    std::optional<AutoencoderSection> autoencoder;
    std::optional<DiffusionSection> diffusion;
    std::optional<StatsSection> stats;

    void save(const std::string& path) const {
        ByteWriter w;
        w.u32(kMagic);
        w.u32(kVersion);
        uint32_t count = (autoencoder ? 1 : 0) + (diffusion ? 1 : 0) + (stats ? 1 : 0);
        w.u32(count);
        auto emit = [&](uint32_t id, const ByteWriter& payload) {
            w.u32(id);
            w.u64(payload.bytes().size());
            w.raw(payload.bytes().data(), payload.bytes().size());
        };
        if (autoencoder) {
            ByteWriter p;
            detail::encode_ae(p, *autoencoder);
            emit(kAutoencoder, p);
        }
        if (diffusion) {
            ByteWriter p;
            detail::encode_diffusion(p, *diffusion);
            emit(kDiffusion, p);
        }
        if (stats) {
            ByteWriter p;
            detail::encode_stats(p, *stats);
            emit(kStats, p);
        }
        std::string tmp = path + ".tmp";
        {
            std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
            if (!os) throw StateError("checkpoint: cannot open " + tmp);
            os.write(reinterpret_cast<const char*>(w.bytes().data()),
                     static_cast<std::streamsize>(w.bytes().size()));
            if (!os) throw StateError("checkpoint: write failed for " + tmp);
        }
        std::filesystem::rename(tmp, path);
    }

    static CheckpointContainer load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw StateError("checkpoint: cannot open " + path);
        std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
        ByteReader r(bytes.data(), bytes.size());
        if (r.u32() != kMagic) throw FormatError("checkpoint: bad magic in " + path);
        if (r.u32() != kVersion) throw FormatError("checkpoint: unsupported version in " + path);
        uint32_t count = r.u32();
        CheckpointContainer c;
        for (uint32_t i = 0; i < count; ++i) {
            uint32_t id = r.u32();
            uint64_t len = r.u64();
            (void)len;
            switch (id) {
                case kAutoencoder: c.autoencoder = detail::decode_ae(r); break;
                case kDiffusion: c.diffusion = detail::decode_diffusion(r); break;
                case kStats: c.stats = detail::decode_stats(r); break;
                default: throw FormatError("checkpoint: unknown section id");
            }
        }
        return c;
    }
};

// ---------------------------------------------------------------------------
// Model <-> section conversion
// ---------------------------------------------------------------------------

inline AutoencoderSection ae_to_section(const Autoencoder& ae, uint64_t config_hash,
                                        std::string config_text) {
    AutoencoderSection s;
    s.cfg = ae.cfg;
    for (const auto& [name, e] : ae.params.all()) s.tensors[name] = e.value;
    s.config_hash = config_hash;
    s.config_text = std::move(config_text);
    return s;
}

inline Autoencoder ae_from_section(const AutoencoderSection& s) {
    Autoencoder ae = Autoencoder::build(s.cfg);
    for (const auto& [name, t] : s.tensors) {
        if (!ae.params.has(name)) throw FormatError("checkpoint: unknown AE parameter " + name);
        if (!ae.params.tensor(name).same_shape(t))
            throw FormatError("checkpoint: AE parameter shape mismatch for " + name);
        ae.params.tensor(name) = t;
    }
    for (const auto& [name, e] : ae.params.all())
        if (!s.tensors.count(name)) throw FormatError("checkpoint: missing AE parameter " + name);
    return ae;
}

inline DiffusionSection diffusion_to_section(const DiffusionModel& model, double beta_start,
                                             double beta_end, uint64_t config_hash,
                                             std::string config_text, uint64_t ae_hash) {
    DiffusionSection s;
    s.cfg = model.unet.cfg;
    s.lora = model.unet.lora;
    s.T = model.schedule.T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    for (const auto& [name, e] : model.unet.params.all()) s.tensors[name] = e.value;
    s.config_hash = config_hash;
    s.config_text = std::move(config_text);
    s.ae_hash = ae_hash;
    return s;
}

inline DiffusionModel diffusion_from_section(const DiffusionSection& s) {
    UNetLite unet = UNetLite::build(s.cfg);
    if (s.lora.enabled) attach_lora(unet, s.lora.targets, s.lora.rank, s.lora.scale);
    for (const auto& [name, t] : s.tensors) {
        if (!unet.params.has(name))
            throw FormatError("checkpoint: unknown diffusion parameter " + name);
        if (!unet.params.tensor(name).same_shape(t))
            throw FormatError("checkpoint: diffusion parameter shape mismatch for " + name);
        unet.params.tensor(name) = t;
    }
    for (const auto& [name, e] : unet.params.all())
        if (!s.tensors.count(name))
            throw FormatError("checkpoint: missing diffusion parameter " + name);
    return DiffusionModel{std::move(unet), make_schedule(s.T, s.beta_start, s.beta_end)};
}

}  // namespace privdiff

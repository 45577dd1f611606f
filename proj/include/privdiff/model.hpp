#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "privdiff/autodiff.hpp"
#include "privdiff/params.hpp"
#include "privdiff/rng.hpp"

namespace privdiff {

inline int norm_groups(int channels) {
    for (int g = std::min(8, channels); g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

// Sinusoidal features of integer timesteps, [b, dim].
inline Tensor sinusoidal_embedding(const std::vector<int>& ts, int dim) {
    int half = dim / 2;
    Tensor out({static_cast<int>(ts.size()), dim});
    for (size_t i = 0; i < ts.size(); ++i) {
        for (int j = 0; j < half; ++j) {
            double f = std::exp(-std::log(10000.0) * j / half);
            out[static_cast<int64_t>(i) * dim + j] = std::sin(ts[i] * f);
            out[static_cast<int64_t>(i) * dim + half + j] = std::cos(ts[i] * f);
        }
    }
    return out;
}

enum class AttnLocation : uint8_t { Input = 0, Middle = 1, Out = 2 };

inline const char* attn_location_name(AttnLocation l) {
    switch (l) {
        case AttnLocation::Input: return "input";
        case AttnLocation::Middle: return "middle";
        default: return "out";
    }
}

struct AttnInfo {
    int index = 0;  // 1-based, fixed layout order
    AttnLocation location = AttnLocation::Input;
    int channels = 0;
    bool cross = false;  // cross-attention over conditioning tokens
};

struct LoraSpec {
    bool enabled = false;
    int rank = 0;
    double scale = 1.0;
    std::set<std::string> targets;  // subset of {"wq","wk","wv"}
};

struct UNetConfig {
    int latent_channels = 4;
    int latent_hw = 8;   // square latent extent; must be even and >= 4
    int base_width = 16; // channels at the outer level; doubled at the inner level
    int heads = 1;
    bool conditional = false;
    int num_classes = 0;
    int cond_dim = 8;
    uint64_t init_seed = 1234;
};

// Epsilon-prediction UNet on latents, two resolution levels, attention after
// every residual block plus one in the middle: modules 1-2 in the input
// blocks, 3 in the middle block, 4-7 in the out blocks.
struct UNetLite {
    UNetConfig cfg;
    ParamStore params;
    std::vector<AttnInfo> attn_modules;
    LoraSpec lora;

    int temb_dim() const { return 4 * cfg.base_width; }

    static UNetLite build(const UNetConfig& cfg) {
        if (cfg.latent_hw < 4 || cfg.latent_hw % 2 != 0)
            throw ConfigError("unet: latent extent must be even and at least 4");
        if (cfg.base_width % 2 != 0) throw ConfigError("unet: base width must be even");
        if (cfg.conditional && cfg.num_classes < 2)
            throw ConfigError("unet: conditional model needs at least 2 classes");
        UNetLite m;
        m.cfg = cfg;
        int w = cfg.base_width, w2 = 2 * w, td = 4 * w;

        auto init = [&](const std::string& name, Shape shape, double stddev, ParamGroup group,
                        int attn_index = 0) {
            Rng rng(rng_key(cfg.init_seed, "init", fnv1a64(name)));
            m.params.add(name, Tensor::randn(std::move(shape), rng, stddev), group, attn_index);
        };
        auto zeros = [&](const std::string& name, Shape shape, ParamGroup group, int k = 0) {
            m.params.add(name, Tensor::zeros(std::move(shape)), group, k);
        };
        auto ones = [&](const std::string& name, Shape shape, ParamGroup group) {
            m.params.add(name, Tensor::full(std::move(shape), 1.0), group);
        };
        auto conv_init = [&](const std::string& name, int co, int ci, int k) {
            init(name + ".w", {co, ci, k, k}, std::sqrt(2.0 / (ci * k * k)), ParamGroup::Backbone);
            zeros(name + ".b", {co}, ParamGroup::Backbone);
        };
        auto resblock_init = [&](const std::string& p, int ci, int co) {
            ones(p + ".gn1.g", {ci}, ParamGroup::Backbone);
            zeros(p + ".gn1.b", {ci}, ParamGroup::Backbone);
            conv_init(p + ".conv1", co, ci, 3);
            init(p + ".temb.w", {co, td}, std::sqrt(1.0 / td), ParamGroup::Backbone);
            zeros(p + ".temb.b", {co}, ParamGroup::Backbone);
            ones(p + ".gn2.g", {co}, ParamGroup::Backbone);
            zeros(p + ".gn2.b", {co}, ParamGroup::Backbone);
            conv_init(p + ".conv2", co, co, 3);
            if (ci != co) conv_init(p + ".skip", co, ci, 1);
        };

        conv_init("unet.conv_in", w, cfg.latent_channels, 3);
        init("unet.temb.fc1.w", {td, w}, std::sqrt(1.0 / w), ParamGroup::Backbone);
        zeros("unet.temb.fc1.b", {td}, ParamGroup::Backbone);
        init("unet.temb.fc2.w", {td, td}, std::sqrt(1.0 / td), ParamGroup::Backbone);
        zeros("unet.temb.fc2.b", {td}, ParamGroup::Backbone);

        resblock_init("unet.rb1", w, w);
        conv_init("unet.down", w, w, 3);
        resblock_init("unet.rb2", w, w2);
        resblock_init("unet.rb3", w2, w2);
        resblock_init("unet.rb4", w2, w2);
        resblock_init("unet.rb5", w2 + w2, w2);
        resblock_init("unet.rb6", w2 + w, w2);
        conv_init("unet.up", w2, w2, 3);
        resblock_init("unet.rb7", w2 + w, w);
        resblock_init("unet.rb8", w + w, w);
        ones("unet.out.gn.g", {w}, ParamGroup::Backbone);
        zeros("unet.out.gn.b", {w}, ParamGroup::Backbone);
        // Zero-init final conv: the untrained model predicts zero noise.
        zeros("unet.out.conv.w", {cfg.latent_channels, w, 3, 3}, ParamGroup::Backbone);
        zeros("unet.out.conv.b", {cfg.latent_channels}, ParamGroup::Backbone);

        const int attn_ch[7] = {w, w2, w2, w2, w2, w, w};
        const AttnLocation attn_loc[7] = {AttnLocation::Input, AttnLocation::Input,
                                          AttnLocation::Middle, AttnLocation::Out,
                                          AttnLocation::Out,    AttnLocation::Out,
                                          AttnLocation::Out};
        for (int k = 1; k <= 7; ++k) {
            int d = attn_ch[k - 1];
            int dc = cfg.conditional ? cfg.cond_dim : d;
            std::string p = "attn" + std::to_string(k);
            ones("unet.anorm" + std::to_string(k) + ".g", {d}, ParamGroup::Backbone);
            zeros("unet.anorm" + std::to_string(k) + ".b", {d}, ParamGroup::Backbone);
            init(p + ".wq", {d, d}, std::sqrt(1.0 / d), ParamGroup::Attention, k);
            init(p + ".wk", {d, dc}, std::sqrt(1.0 / dc), ParamGroup::Attention, k);
            init(p + ".wv", {d, dc}, std::sqrt(1.0 / dc), ParamGroup::Attention, k);
            init(p + ".wo", {d, d}, std::sqrt(1.0 / d), ParamGroup::Attention, k);
            m.attn_modules.push_back(AttnInfo{k, attn_loc[k - 1], d, cfg.conditional});
        }
        if (cfg.conditional)
            init("cond.embed", {cfg.num_classes, cfg.cond_dim}, 0.2, ParamGroup::Conditioning);
        return m;
    }

    Val bind(Tape& t, std::map<std::string, Val>& bound, const std::string& name,
             bool frozen_all) const {
        auto it = bound.find(name);
        if (it != bound.end()) return it->second;
        const ParamEntry& e = params.entry(name);
        Val v = t.leaf(e.value, frozen_all ? false : e.trainable);
        bound.emplace(name, v);
        return v;
    }

    // Effective attention weight: base (or base + scale * B A with LoRA).
    Val attn_weight(Tape& t, std::map<std::string, Val>& bound, int k, const std::string& which,
                    bool frozen_all) const {
        std::string base = "attn" + std::to_string(k) + "." + which;
        Val w = bind(t, bound, base, frozen_all);
        if (lora.enabled && lora.targets.count(which)) {
            Val a = bind(t, bound, base + ".lora_a", frozen_all);
            Val b = bind(t, bound, base + ".lora_b", frozen_all);
            w = add(w, scale(matmul(b, a), lora.scale));
        }
        return w;
    }

    Val resblock(Tape& t, std::map<std::string, Val>& bound, const std::string& p, Val x, Val temb,
                 int ci, int co, bool fa) const {
        Val h = group_norm(x, bind(t, bound, p + ".gn1.g", fa), bind(t, bound, p + ".gn1.b", fa),
                           norm_groups(ci));
        h = conv2d(silu(h), bind(t, bound, p + ".conv1.w", fa), bind(t, bound, p + ".conv1.b", fa),
                   1, 1);
        Val tb = linear(silu(temb), bind(t, bound, p + ".temb.w", fa),
                        bind(t, bound, p + ".temb.b", fa));
        h = add_channel_bias(h, tb);
        h = group_norm(h, bind(t, bound, p + ".gn2.g", fa), bind(t, bound, p + ".gn2.b", fa),
                       norm_groups(co));
        h = conv2d(silu(h), bind(t, bound, p + ".conv2.w", fa), bind(t, bound, p + ".conv2.b", fa),
                   1, 1);
        Val sk = (ci == co) ? x
                            : conv2d(x, bind(t, bound, p + ".skip.w", fa),
                                     bind(t, bound, p + ".skip.b", fa), 1, 0);
        return add(h, sk);
    }

    Val attn_block(Tape& t, std::map<std::string, Val>& bound, int k, Val x, Val cond, int ch,
                   int h, int w, bool fa) const {
        std::string an = "unet.anorm" + std::to_string(k);
        Val n = group_norm(x, bind(t, bound, an + ".g", fa), bind(t, bound, an + ".b", fa),
                           norm_groups(ch));
        Val tok = chw_to_tokens(n);
        Val o = attention(tok, cfg.conditional ? cond : Val{},
                          attn_weight(t, bound, k, "wq", fa), attn_weight(t, bound, k, "wk", fa),
                          attn_weight(t, bound, k, "wv", fa), cfg.heads);
        int b = t.value(x).dim(0);
        Val o2 = linear(reshape(o, {b * h * w, ch}),
                        bind(t, bound, "attn" + std::to_string(k) + ".wo", fa));
        return add(x, tokens_to_chw(reshape(o2, {b, h * w, ch}), h, w));
    }

    // Epsilon prediction tau_theta(z_t, t, y); output shape equals z_t.
    Val forward(Tape& t, std::map<std::string, Val>& bound, Val z,
                const std::vector<int>& ts, const std::vector<int>& ys,
                bool frozen_all = false) const {
        const Tensor& zv = t.value(z);
        if (zv.ndim() != 4 || zv.dim(1) != cfg.latent_channels || zv.dim(2) != cfg.latent_hw ||
            zv.dim(3) != cfg.latent_hw)
            throw ShapeError("unet: latent shape mismatch, got " + shape_str(zv.shape));
        int b = zv.dim(0);
        if (static_cast<int>(ts.size()) != b) throw ContractError("unet: one timestep per sample");

        Val cond{};
        if (cfg.conditional) {
            if (static_cast<int>(ys.size()) != b)
                throw ContractError("unet: conditional model needs one label per sample");
            Val table = bind(t, bound, "cond.embed", frozen_all);
            cond = reshape(embed_rows(table, ys), {b, 1, cfg.cond_dim});
        } else if (!ys.empty()) {
            throw ContractError("unet: labels supplied to an unconditional model");
        }

        Val temb = linear(t.constant(sinusoidal_embedding(ts, cfg.base_width)),
                          bind(t, bound, "unet.temb.fc1.w", frozen_all),
                          bind(t, bound, "unet.temb.fc1.b", frozen_all));
        temb = linear(silu(temb), bind(t, bound, "unet.temb.fc2.w", frozen_all),
                      bind(t, bound, "unet.temb.fc2.b", frozen_all));

        int w = cfg.base_width, w2 = 2 * w;
        int s = cfg.latent_hw, s2 = s / 2;
        bool fa = frozen_all;

        Val h0 = conv2d(z, bind(t, bound, "unet.conv_in.w", fa),
                        bind(t, bound, "unet.conv_in.b", fa), 1, 1);
        Val h1 = attn_block(t, bound, 1, resblock(t, bound, "unet.rb1", h0, temb, w, w, fa), cond,
                            w, s, s, fa);
        Val h2 = conv2d(h1, bind(t, bound, "unet.down.w", fa), bind(t, bound, "unet.down.b", fa),
                        2, 1);
        Val h3 = attn_block(t, bound, 2, resblock(t, bound, "unet.rb2", h2, temb, w, w2, fa), cond,
                            w2, s2, s2, fa);

        Val mid = resblock(t, bound, "unet.rb3", h3, temb, w2, w2, fa);
        mid = attn_block(t, bound, 3, mid, cond, w2, s2, s2, fa);
        mid = resblock(t, bound, "unet.rb4", mid, temb, w2, w2, fa);

        Val o1 = attn_block(
            t, bound, 4,
            resblock(t, bound, "unet.rb5", concat_channels(mid, h3), temb, w2 + w2, w2, fa), cond,
            w2, s2, s2, fa);
        Val o2 = attn_block(
            t, bound, 5,
            resblock(t, bound, "unet.rb6", concat_channels(o1, h2), temb, w2 + w, w2, fa), cond,
            w2, s2, s2, fa);
        Val u = conv2d(upsample2x(o2), bind(t, bound, "unet.up.w", fa),
                       bind(t, bound, "unet.up.b", fa), 1, 1);
        Val o3 = attn_block(
            t, bound, 6,
            resblock(t, bound, "unet.rb7", concat_channels(u, h1), temb, w2 + w, w, fa), cond, w,
            s, s, fa);
        Val o4 = attn_block(
            t, bound, 7,
            resblock(t, bound, "unet.rb8", concat_channels(o3, h0), temb, w + w, w, fa), cond, w,
            s, s, fa);

        Val out = group_norm(o4, bind(t, bound, "unet.out.gn.g", fa),
                             bind(t, bound, "unet.out.gn.b", fa), norm_groups(w));
        return conv2d(silu(out), bind(t, bound, "unet.out.conv.w", fa),
                      bind(t, bound, "unet.out.conv.b", fa), 1, 1);
    }

    // Single attention module forward on plain tensors: psi [N, d_i], cond
    // [M, d_c] for cross modules (must be absent for self modules).
    Tensor attention_forward(int k, const Tensor& psi, const Tensor* cond) const {
        if (k < 1 || k > static_cast<int>(attn_modules.size()))
            throw ConfigError("attention_forward: no module with index " + std::to_string(k));
        const AttnInfo& info = attn_modules[static_cast<size_t>(k - 1)];
        if (info.cross && cond == nullptr)
            throw ContractError("attention_forward: cross module needs conditioning tokens");
        if (!info.cross && cond != nullptr)
            throw ContractError("attention_forward: conditioning supplied to self-attention module");
        if (psi.ndim() != 2) throw ShapeError("attention_forward: psi must be [N,d]");
        Tape t;
        std::map<std::string, Val> bound;
        Val pv = t.constant(Tensor({1, psi.dim(0), psi.dim(1)}, psi.data));
        Val cv{};
        if (cond != nullptr)
            cv = t.constant(Tensor({1, cond->dim(0), cond->dim(1)}, cond->data));
        Val o = attention(pv, cv, attn_weight(t, bound, k, "wq", true),
                          attn_weight(t, bound, k, "wk", true),
                          attn_weight(t, bound, k, "wv", true), cfg.heads);
        const Tensor& ov = t.value(o);
        return Tensor({ov.dim(1), ov.dim(2)}, ov.data);
    }
};

// ---------------------------------------------------------------------------
// Trainable-subset selection
// ---------------------------------------------------------------------------

struct TrainableSpec {
    enum class Mode { None, AllAttn, AttnIndices, AttnFrom, AttnInBlocks, Parts };
    Mode mode = Mode::None;
    std::vector<int> indices;          // AttnIndices
    int from_index = -1;               // AttnFrom
    std::vector<std::string> blocks;   // AttnInBlocks: input|middle|out
    std::vector<std::string> parts;    // Parts: resblocks|input_blocks|middle_block|out_blocks
    bool include_conditioning = false;

    // Grammar: "none" | "all-attn" | "attn:1,4,7" | "attn-from:4" |
    //          "attn-in:out[,input,middle]" | "parts:resblocks[,...]"
    // with an optional "+cond" suffix.
    static TrainableSpec parse(std::string s) {
        TrainableSpec spec;
        if (auto pos = s.find("+cond"); pos != std::string::npos) {
            spec.include_conditioning = true;
            s.erase(pos, 5);
        }
        auto split_list = [](const std::string& body) {
            std::vector<std::string> out;
            std::stringstream ss(body);
            std::string item;
            while (std::getline(ss, item, ','))
                if (!item.empty()) out.push_back(item);
            return out;
        };
        if (s.empty() || s == "none") {
            spec.mode = Mode::None;
        } else if (s == "all-attn") {
            spec.mode = Mode::AllAttn;
        } else if (s.rfind("attn-from:", 0) == 0) {
            spec.mode = Mode::AttnFrom;
            spec.from_index = std::stoi(s.substr(10));
        } else if (s.rfind("attn-in:", 0) == 0) {
            spec.mode = Mode::AttnInBlocks;
            spec.blocks = split_list(s.substr(8));
        } else if (s.rfind("attn:", 0) == 0) {
            spec.mode = Mode::AttnIndices;
            for (const auto& tok : split_list(s.substr(5))) spec.indices.push_back(std::stoi(tok));
        } else if (s.rfind("parts:", 0) == 0) {
            spec.mode = Mode::Parts;
            spec.parts = split_list(s.substr(6));
        } else {
            throw ConfigError("unrecognized trainable spec: " + s);
        }
        return spec;
    }

    std::string str() const {
        std::string body;
        switch (mode) {
            case Mode::None: body = "none"; break;
            case Mode::AllAttn: body = "all-attn"; break;
            case Mode::AttnFrom: body = "attn-from:" + std::to_string(from_index); break;
            case Mode::AttnIndices: {
                body = "attn:";
                for (size_t i = 0; i < indices.size(); ++i)
                    body += (i ? "," : "") + std::to_string(indices[i]);
                break;
            }
            case Mode::AttnInBlocks: {
                body = "attn-in:";
                for (size_t i = 0; i < blocks.size(); ++i) body += (i ? "," : "") + blocks[i];
                break;
            }
            case Mode::Parts: {
                body = "parts:";
                for (size_t i = 0; i < parts.size(); ++i) body += (i ? "," : "") + parts[i];
                break;
            }
        }
        return include_conditioning ? body + "+cond" : body;
    }
};

struct TrainableReport {
    int64_t trainable = 0;
    int64_t total = 0;
    double fraction() const { return total ? static_cast<double>(trainable) / total : 0.0; }
};

namespace detail {

inline bool name_in_part(const std::string& name, const std::string& part,
                         const std::vector<AttnInfo>& mods) {
    auto is_attn_of = [&](AttnLocation loc) {
        for (const AttnInfo& m : mods) {
            if (m.location != loc) continue;
            std::string k = std::to_string(m.index);
            if (name.rfind("attn" + k + ".", 0) == 0) return true;
            if (name.rfind("unet.anorm" + k + ".", 0) == 0) return true;
        }
        return false;
    };
    auto starts_with_any = [&](std::initializer_list<const char*> prefixes) {
        for (const char* p : prefixes)
            if (name.rfind(p, 0) == 0) return true;
        return false;
    };
    if (part == "resblocks")
        return starts_with_any({"unet.rb1.", "unet.rb2.", "unet.rb3.", "unet.rb4.", "unet.rb5.",
                                "unet.rb6.", "unet.rb7.", "unet.rb8."});
    if (part == "input_blocks")
        return starts_with_any({"unet.conv_in.", "unet.rb1.", "unet.down.", "unet.rb2."}) ||
               is_attn_of(AttnLocation::Input);
    if (part == "middle_block")
        return starts_with_any({"unet.rb3.", "unet.rb4."}) || is_attn_of(AttnLocation::Middle);
    if (part == "out_blocks")
        return starts_with_any({"unet.rb5.", "unet.rb6.", "unet.up.", "unet.rb7.", "unet.rb8.",
                                "unet.out."}) ||
               is_attn_of(AttnLocation::Out);
    throw ConfigError("unknown part group: " + part);
}

}  // namespace detail

// Flags exactly the requested parameter subset as trainable. With LoRA
// attached, selecting attention modules selects their adapters only.
inline TrainableReport select_trainable(UNetLite& model, const TrainableSpec& spec) {
    std::set<int> selected;
    auto all_indices = [&] {
        for (const AttnInfo& m : model.attn_modules) selected.insert(m.index);
    };
    switch (spec.mode) {
        case TrainableSpec::Mode::None:
            break;
        case TrainableSpec::Mode::AllAttn:
            all_indices();
            break;
        case TrainableSpec::Mode::AttnIndices:
            for (int i : spec.indices) {
                if (i < 1 || i > static_cast<int>(model.attn_modules.size()))
                    throw ConfigError("trainable spec: no attention module " + std::to_string(i));
                selected.insert(i);
            }
            break;
        case TrainableSpec::Mode::AttnFrom:
            if (spec.from_index < 1 ||
                spec.from_index > static_cast<int>(model.attn_modules.size()))
                throw ConfigError("trainable spec: bad start index");
            for (const AttnInfo& m : model.attn_modules)
                if (m.index >= spec.from_index) selected.insert(m.index);
            break;
        case TrainableSpec::Mode::AttnInBlocks:
            for (const std::string& b : spec.blocks) {
                AttnLocation loc;
                if (b == "input")
                    loc = AttnLocation::Input;
                else if (b == "middle")
                    loc = AttnLocation::Middle;
                else if (b == "out")
                    loc = AttnLocation::Out;
                else
                    throw ConfigError("trainable spec: unknown block group " + b);
                for (const AttnInfo& m : model.attn_modules)
                    if (m.location == loc) selected.insert(m.index);
            }
            break;
        case TrainableSpec::Mode::Parts:
            for (const std::string& p : spec.parts)
                detail::name_in_part("unet.rb1.x", p, model.attn_modules);  // validates the name
            break;
    }

    model.params.freeze_all();
    for (auto& [name, e] : model.params.all()) {
        bool on = false;
        if (spec.mode == TrainableSpec::Mode::Parts) {
            for (const std::string& p : spec.parts)
                on = on || detail::name_in_part(name, p, model.attn_modules);
        } else if (e.group == ParamGroup::Attention && selected.count(e.attn_index)) {
            on = model.lora.enabled ? e.lora_adapter : !e.lora_adapter;
        }
        if (spec.include_conditioning && e.group == ParamGroup::Conditioning) on = true;
        e.trainable = on;
    }
    return TrainableReport{model.params.trainable_scalar_count(),
                           model.params.total_scalar_count()};
}

// Reparameterizes the chosen attention weights as W + scale * B A with only
// A, B trainable (B zero-initialized, so the forward pass is unchanged at
// attach time). Freezes everything else.
inline TrainableReport attach_lora(UNetLite& model, const std::set<std::string>& targets,
                                   int rank, double lora_scale) {
    if (model.lora.enabled) throw ContractError("attach_lora: adapters already attached");
    if (rank < 1) throw ConfigError("attach_lora: rank must be at least 1");
    for (const std::string& tgt : targets)
        if (tgt != "wq" && tgt != "wk" && tgt != "wv")
            throw ConfigError("attach_lora: unknown target " + tgt);
    for (const AttnInfo& m : model.attn_modules) {
        for (const std::string& tgt : targets) {
            std::string base = "attn" + std::to_string(m.index) + "." + tgt;
            const Tensor& w = model.params.tensor(base);
            int dout = w.dim(0), din = w.dim(1);
            if (rank > std::min(din, dout))
                throw ConfigError("attach_lora: rank exceeds min(d_in,d_out) for " + base);
            Rng rng(rng_key(model.cfg.init_seed, "lora", fnv1a64(base)));
            model.params.add(base + ".lora_a", Tensor::randn({rank, din}, rng, 1.0 / std::sqrt(din)),
                             ParamGroup::Attention, m.index, true);
            model.params.add(base + ".lora_b", Tensor::zeros({dout, rank}),
                             ParamGroup::Attention, m.index, true);
        }
    }
    model.lora.enabled = true;
    model.lora.rank = rank;
    model.lora.scale = lora_scale;
    model.lora.targets = targets;

    model.params.freeze_all();
    for (auto& [name, e] : model.params.all())
        if (e.lora_adapter) e.trainable = true;
    return TrainableReport{model.params.trainable_scalar_count(),
                           model.params.total_scalar_count()};
}

}  // namespace privdiff

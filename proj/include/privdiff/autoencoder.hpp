#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "privdiff/autodiff.hpp"
#include "privdiff/optim.hpp"
#include "privdiff/params.hpp"
#include "privdiff/rng.hpp"

namespace privdiff {

struct AutoencoderConfig {
    int f = 2;               // downsampling factor, power of two
    int latent_channels = 4;
    int width = 16;
    int in_channels = 1;
    int image_hw = 16;       // training image extent (square)
    uint64_t init_seed = 99;

    int levels() const {
        int m = 0, v = f;
        while (v > 1) {
            v >>= 1;
            ++m;
        }
        return m;
    }

    void validate() const {
        if (f < 2 || (f & (f - 1)) != 0)
            throw ConfigError("autoencoder: f must be a power of two and at least 2");
        if (image_hw % f != 0)
            throw ConfigError("autoencoder: image extent not divisible by f");
        if (latent_channels < 1 || width < 2 || in_channels < 1)
            throw ConfigError("autoencoder: bad channel configuration");
    }
};

// Convolutional encoder/decoder between pixels [n,ch,H,W] and latents
// [n,c,H/f,W/f]. Trained non-privately; frozen everywhere else.
struct Autoencoder {
    AutoencoderConfig cfg;
    ParamStore params;

    static Autoencoder build(const AutoencoderConfig& cfg) {
        cfg.validate();
        Autoencoder ae;
        ae.cfg = cfg;
        auto conv = [&](const std::string& name, int co, int ci, int k, ParamGroup g) {
            Rng rng(rng_key(cfg.init_seed, "ae-init", fnv1a64(name)));
            ae.params.add(name + ".w", Tensor::randn({co, ci, k, k}, rng, std::sqrt(2.0 / (ci * k * k))),
                          g);
            ae.params.add(name + ".b", Tensor::zeros({co}), g);
        };
        int w = cfg.width;
        conv("ae.enc.in", w, cfg.in_channels, 3, ParamGroup::Encoder);
        for (int l = 0; l < cfg.levels(); ++l)
            conv("ae.enc.down" + std::to_string(l + 1), w, w, 3, ParamGroup::Encoder);
        conv("ae.enc.out", cfg.latent_channels, w, 3, ParamGroup::Encoder);
        conv("ae.dec.in", w, cfg.latent_channels, 3, ParamGroup::Decoder);
        for (int l = 0; l < cfg.levels(); ++l)
            conv("ae.dec.up" + std::to_string(l + 1), w, w, 3, ParamGroup::Decoder);
        conv("ae.dec.out", cfg.in_channels, w, 3, ParamGroup::Decoder);
        return ae;
    }

    Val bind(Tape& t, std::map<std::string, Val>& bound, const std::string& name,
             bool frozen) const {
        auto it = bound.find(name);
        if (it != bound.end()) return it->second;
        const ParamEntry& e = params.entry(name);
        Val v = t.leaf(e.value, frozen ? false : e.trainable);
        bound.emplace(name, v);
        return v;
    }

    Val encode_graph(Tape& t, std::map<std::string, Val>& bound, Val x, bool frozen) const {
        const Tensor& xv = t.value(x);
        if (xv.ndim() != 4 || xv.dim(1) != cfg.in_channels)
            throw ShapeError("encode: expected [n," + std::to_string(cfg.in_channels) + ",H,W]");
        if (xv.dim(2) % cfg.f != 0 || xv.dim(3) % cfg.f != 0)
            throw ConfigError("encode: extents not divisible by f");
        Val h = conv2d(x, bind(t, bound, "ae.enc.in.w", frozen), bind(t, bound, "ae.enc.in.b", frozen),
                       1, 1);
        for (int l = 0; l < cfg.levels(); ++l) {
            std::string n = "ae.enc.down" + std::to_string(l + 1);
            h = conv2d(silu(h), bind(t, bound, n + ".w", frozen), bind(t, bound, n + ".b", frozen), 2,
                       1);
        }
        return conv2d(silu(h), bind(t, bound, "ae.enc.out.w", frozen),
                      bind(t, bound, "ae.enc.out.b", frozen), 1, 1);
    }

    Val decode_graph(Tape& t, std::map<std::string, Val>& bound, Val z, bool frozen) const {
        const Tensor& zv = t.value(z);
        if (zv.ndim() != 4 || zv.dim(1) != cfg.latent_channels)
            throw ShapeError("decode: expected [n," + std::to_string(cfg.latent_channels) + ",h,w]");
        Val h = conv2d(z, bind(t, bound, "ae.dec.in.w", frozen), bind(t, bound, "ae.dec.in.b", frozen),
                       1, 1);
        for (int l = 0; l < cfg.levels(); ++l) {
            std::string n = "ae.dec.up" + std::to_string(l + 1);
            h = conv2d(upsample2x(silu(h)), bind(t, bound, n + ".w", frozen),
                       bind(t, bound, n + ".b", frozen), 1, 1);
        }
        return tanh_act(conv2d(silu(h), bind(t, bound, "ae.dec.out.w", frozen),
                               bind(t, bound, "ae.dec.out.b", frozen), 1, 1));
    }

    Tensor encode(const Tensor& x) const {
        Tape t;
        std::map<std::string, Val> bound;
        return t.value(encode_graph(t, bound, t.constant(x), /*frozen=*/true));
    }

    Tensor decode(const Tensor& z) const {
        Tape t;
        std::map<std::string, Val> bound;
        return t.value(decode_graph(t, bound, t.constant(z), /*frozen=*/true));
    }
};

struct AeTrainLog {
    std::vector<double> epoch_loss;
};

// Non-private reconstruction training: MSE plus a small L2 penalty on latent
// activations. Deterministic under a fixed seed.
inline AeTrainLog train_autoencoder(Autoencoder& ae, const Tensor& images, int epochs, int batch,
                                    double lr, uint64_t seed, double latent_penalty = 1e-6) {
    if (images.ndim() != 4 || images.dim(0) == 0) throw DataError("train_autoencoder: empty dataset");
    int n = images.dim(0);
    int64_t per = images.numel() / n;
    for (auto& [name, e] : ae.params.all()) e.trainable = true;

    SgdMomentum opt{lr, 0.9, {}};
    AeTrainLog log;
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < epochs; ++epoch) {
        Rng shuffle_rng = keyed_rng(seed, "ae-shuffle", static_cast<uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);
        double epoch_loss = 0.0;
        int steps = 0;
        Tape tape;
        for (int start = 0; start < n; start += batch) {
            int m = std::min(batch, n - start);
            Tensor xb({m, images.dim(1), images.dim(2), images.dim(3)});
            for (int i = 0; i < m; ++i)
                std::copy(images.ptr() + order[static_cast<size_t>(start + i)] * per,
                          images.ptr() + (order[static_cast<size_t>(start + i)] + 1) * per,
                          xb.ptr() + static_cast<int64_t>(i) * per);
            tape.clear();
            std::map<std::string, Val> bound;
            Val x = tape.constant(std::move(xb));
            Val z = ae.encode_graph(tape, bound, x, false);
            Val xhat = ae.decode_graph(tape, bound, z, false);
            Val loss = add(mse(xhat, x), scale(mean_all(mul(z, z)), latent_penalty));
            tape.backward(loss);
            epoch_loss += tape.value(loss).data[0];
            ++steps;
            opt.step(ae.params, collect_grads(tape, bound));
        }
        log.epoch_loss.push_back(epoch_loss / steps);
    }
    for (auto& [name, e] : ae.params.all()) e.trainable = false;
    return log;
}

}  // namespace privdiff

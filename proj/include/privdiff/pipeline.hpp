#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "privdiff/checkpoint.hpp"
#include "privdiff/config.hpp"
#include "privdiff/dataset.hpp"
#include "privdiff/dp_sgd.hpp"

namespace privdiff {

// One stage process at a time per output directory.
class StageLock {
public:
    explicit StageLock(const std::string& out_dir) {
        std::filesystem::create_directories(out_dir);
        path_ = out_dir + "/.lock";
        int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw StateError("output directory is locked by another stage: " + path_);
        ::close(fd);
        owned_ = true;
    }
    ~StageLock() {
        if (owned_) ::unlink(path_.c_str());
    }
    StageLock(const StageLock&) = delete;
    StageLock& operator=(const StageLock&) = delete;

private:
    std::string path_;
    bool owned_ = false;
};

inline void append_jsonl(const std::string& path, const nlohmann::json& record) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw StateError("metrics: cannot open " + path);
    os << record.dump() << "\n";
}

inline Tensor encode_dataset(const Autoencoder& ae, const Tensor& images, int chunk = 64) {
    int n = images.dim(0);
    int64_t per = images.numel() / std::max(n, 1);
    int lh = images.dim(2) / ae.cfg.f, lw = images.dim(3) / ae.cfg.f;
    Tensor latents({n, ae.cfg.latent_channels, lh, lw});
    int64_t lper = latents.numel() / std::max(n, 1);
    for (int start = 0; start < n; start += chunk) {
        int m = std::min(chunk, n - start);
        Tensor xb({m, images.dim(1), images.dim(2), images.dim(3)});
        std::copy(images.ptr() + start * per, images.ptr() + (start + m) * per, xb.ptr());
        Tensor z = ae.encode(xb);
        std::copy(z.data.begin(), z.data.end(), latents.ptr() + start * lper);
    }
    return latents;
}

inline Tensor decode_latents(const Autoencoder& ae, const Tensor& latents, int chunk = 64) {
    int n = latents.dim(0);
    int64_t per = latents.numel() / std::max(n, 1);
    int h = latents.dim(2) * ae.cfg.f, w = latents.dim(3) * ae.cfg.f;
    Tensor images({n, ae.cfg.in_channels, h, w});
    int64_t iper = images.numel() / std::max(n, 1);
    for (int start = 0; start < n; start += chunk) {
        int m = std::min(chunk, n - start);
        Tensor zb({m, latents.dim(1), latents.dim(2), latents.dim(3)});
        std::copy(latents.ptr() + start * per, latents.ptr() + (start + m) * per, zb.ptr());
        Tensor x = ae.decode(zb);
        std::copy(x.data.begin(), x.data.end(), images.ptr() + start * iper);
    }
    return images;
}

// ---------------------------------------------------------------------------
// Stage: train-ae
// ---------------------------------------------------------------------------

inline void run_train_ae(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("train-ae: run.out_dir required");
    if (cfg.public_path.empty()) throw ConfigError("train-ae: data.public required");
    StageLock lock(cfg.out_dir);
    DatasetArchive pub = DatasetArchive::load(cfg.public_path);
    if (pub.height != pub.width) throw ConfigError("train-ae: images must be square");

    AutoencoderConfig acfg;
    acfg.f = cfg.ae_f;
    acfg.latent_channels = cfg.ae_latent_channels;
    acfg.width = cfg.ae_width;
    acfg.in_channels = pub.channels;
    acfg.image_hw = pub.height;
    acfg.init_seed = rng_key(cfg.seed, "ae-model");
    Autoencoder ae = Autoencoder::build(acfg);

    AeTrainLog log = train_autoencoder(ae, pub.to_tensor(), cfg.ae_epochs, cfg.ae_batch, cfg.ae_lr,
                                       rng_key(cfg.seed, "ae-train"));
    std::string metrics = cfg.out_dir + "/metrics_ae.jsonl";
    std::filesystem::remove(metrics);
    for (size_t e = 0; e < log.epoch_loss.size(); ++e)
        append_jsonl(metrics, {{"epoch", e + 1}, {"loss", log.epoch_loss[e]}});

    CheckpointContainer c;
    c.autoencoder = ae_to_section(ae, cfg.hash(), cfg.canonical());
    c.save(cfg.out_dir + "/ae.ckpt");
}

// ---------------------------------------------------------------------------
// Stage: pretrain-dm
// ---------------------------------------------------------------------------

struct LoadedAe {
    Autoencoder ae;
    uint64_t content_hash = 0;
};

inline LoadedAe load_ae_checkpoint(const std::string& path) {
    CheckpointContainer c = CheckpointContainer::load(path);
    if (!c.autoencoder) throw StateError("checkpoint has no autoencoder section: " + path);
    return LoadedAe{ae_from_section(*c.autoencoder), ae_content_hash(*c.autoencoder)};
}

inline void run_pretrain_dm(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("pretrain-dm: run.out_dir required");
    if (cfg.public_path.empty()) throw ConfigError("pretrain-dm: data.public required");
    StageLock lock(cfg.out_dir);
    LoadedAe loaded = load_ae_checkpoint(cfg.out_dir + "/ae.ckpt");
    DatasetArchive pub = DatasetArchive::load(cfg.public_path);
    if (cfg.conditional && !pub.labeled())
        throw ConfigError("pretrain-dm: conditional model needs a labeled dataset");

    Tensor latents = encode_dataset(loaded.ae, pub.to_tensor());
    std::vector<int> labels = cfg.conditional ? pub.labels_int() : std::vector<int>{};

    UNetConfig ucfg;
    ucfg.latent_channels = loaded.ae.cfg.latent_channels;
    ucfg.latent_hw = pub.height / loaded.ae.cfg.f;
    ucfg.base_width = cfg.base_width;
    ucfg.heads = cfg.heads;
    ucfg.conditional = cfg.conditional;
    ucfg.num_classes = cfg.conditional ? pub.class_count : 0;
    ucfg.cond_dim = cfg.cond_dim;
    ucfg.init_seed = rng_key(cfg.seed, "dm-model");
    DiffusionModel model{UNetLite::build(ucfg), make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)};
    for (auto& [name, e] : model.unet.params.all()) e.trainable = true;

    SgdMomentum opt{cfg.pre_lr, 0.9, {}};
    int n = latents.dim(0);
    int64_t per = latents.numel() / n;
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::string metrics = cfg.out_dir + "/metrics_pretrain.jsonl";
    std::filesystem::remove(metrics);

    Tape tape;
    int64_t global_step = 0;
    for (int epoch = 0; epoch < cfg.pre_epochs; ++epoch) {
        Rng shuffle_rng = keyed_rng(cfg.seed, "pre-shuffle", static_cast<uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);
        double epoch_loss = 0;
        int steps = 0;
        for (int start = 0; start < n; start += cfg.pre_batch) {
            int m = std::min(cfg.pre_batch, n - start);
            Tensor z0({m, latents.dim(1), latents.dim(2), latents.dim(3)});
            std::vector<int> ys;
            for (int i = 0; i < m; ++i) {
                int src = order[static_cast<size_t>(start + i)];
                std::copy(latents.ptr() + src * per, latents.ptr() + (src + 1) * per,
                          z0.ptr() + static_cast<int64_t>(i) * per);
                if (cfg.conditional) ys.push_back(labels[static_cast<size_t>(src)]);
            }
            Rng draw = keyed_rng(cfg.seed, "pre-draw", static_cast<uint64_t>(global_step));
            std::vector<int> ts(static_cast<size_t>(m));
            for (int i = 0; i < m; ++i)
                ts[static_cast<size_t>(i)] = static_cast<int>(draw.uniform_int(1, cfg.T));
            Tensor noise(z0.shape);
            draw.normal_fill(noise.ptr(), static_cast<size_t>(noise.numel()));

            tape.clear();
            std::map<std::string, Val> bound;
            Val loss = ldm_loss_graph(tape, bound, model, z0, ys, ts, noise);
            tape.backward(loss);
            epoch_loss += tape.value(loss).data[0];
            ++steps;
            ++global_step;
            opt.step(model.unet.params, collect_grads(tape, bound));
        }
        append_jsonl(metrics, {{"epoch", epoch + 1}, {"loss", epoch_loss / steps}});
    }
    model.unet.params.freeze_all();

    CheckpointContainer c;
    c.diffusion = diffusion_to_section(model, cfg.beta_start, cfg.beta_end, cfg.hash(),
                                       cfg.canonical(), loaded.content_hash);
    c.save(cfg.out_dir + "/dm.ckpt");
}

// ---------------------------------------------------------------------------
// Stage: finetune-dp
// ---------------------------------------------------------------------------

struct FinetuneOutcome {
    double epsilon = 0;
    double sigma = 0;
    int64_t steps = 0;
    bool stamped = false;
    int64_t trainable = 0;
    int64_t total = 0;
};

// `abort_after_step` is a crash-injection hook for resume tests: the stage
// raises after streaming that step (partial checkpoints already on disk).
inline FinetuneOutcome run_finetune_dp(const RunConfig& cfg, int64_t abort_after_step = 0) {
    if (cfg.out_dir.empty()) throw ConfigError("finetune-dp: run.out_dir required");
    if (cfg.private_path.empty()) throw ConfigError("finetune-dp: data.private required");
    StageLock lock(cfg.out_dir);
    LoadedAe loaded = load_ae_checkpoint(cfg.out_dir + "/ae.ckpt");
    CheckpointContainer dm = CheckpointContainer::load(cfg.out_dir + "/dm.ckpt");
    if (!dm.diffusion) throw StateError("finetune-dp: dm.ckpt has no diffusion section");
    if (dm.diffusion->ae_hash != loaded.content_hash)
        throw StateError("finetune-dp: autoencoder hash does not match the pre-trained model");

    DatasetArchive priv = DatasetArchive::load(cfg.private_path);
    if (priv.height != loaded.ae.cfg.image_hw)
        throw ConfigError("finetune-dp: private image extent differs from the autoencoder's");
    Tensor latents = encode_dataset(loaded.ae, priv.to_tensor());
    int n = latents.dim(0);

    // Resume from a partial checkpoint when present.
    std::string partial_path = cfg.out_dir + "/dm_dp.partial.ckpt";
    std::optional<DiffusionSection> resume;
    if (std::filesystem::exists(partial_path)) {
        CheckpointContainer pc = CheckpointContainer::load(partial_path);
        if (!pc.diffusion) throw FormatError("finetune-dp: partial checkpoint is malformed");
        if (pc.diffusion->config_hash != cfg.hash())
            throw StateError("finetune-dp: partial checkpoint belongs to a different config");
        resume = std::move(pc.diffusion);
    }

    DiffusionModel model =
        resume ? diffusion_from_section(*resume) : diffusion_from_section(*dm.diffusion);
    if (!resume && cfg.lora_rank > 0)
        attach_lora(model.unet, {"wq", "wk", "wv"}, cfg.lora_rank, cfg.lora_scale);

    TrainableSpec tspec = TrainableSpec::parse(cfg.dp_trainable);
    TrainableReport treport = select_trainable(model.unet, tspec);
    if (model.unet.cfg.conditional && !priv.labeled())
        throw ConfigError("finetune-dp: conditional model needs labeled private data");

    DPConfig dpc;
    dpc.batch = cfg.dp_batch;
    dpc.clip = cfg.dp_clip;
    dpc.lr = cfg.dp_lr;
    dpc.delta = cfg.dp_delta;
    dpc.seed = rng_key(cfg.seed, "dp-run");
    dpc.microbatch = cfg.dp_microbatch;
    dpc.steps = cfg.dp_steps > 0
                    ? cfg.dp_steps
                    : cfg.dp_epochs * static_cast<int>((n + cfg.dp_batch - 1) / cfg.dp_batch);
    if (dpc.steps < 1) throw ConfigError("finetune-dp: configure dp.steps or dp.epochs");
    double q = static_cast<double>(cfg.dp_batch) / n;

    if (cfg.dp_sigma > 0) {
        dpc.sigma = cfg.dp_sigma;
        if (cfg.dp_target_eps > 0) {
            double eps = accounting::epsilon_at_delta(q, dpc.sigma, dpc.steps, cfg.dp_delta);
            if (std::abs(eps - cfg.dp_target_eps) / cfg.dp_target_eps > 0.01)
                throw BudgetError("finetune-dp: configured sigma yields epsilon " +
                                  std::to_string(eps) + ", target is " +
                                  std::to_string(cfg.dp_target_eps) +
                                  "; refusing to stamp the run as DP");
        }
    } else if (cfg.dp_target_eps > 0) {
        dpc.sigma = accounting::calibrate_sigma(q, dpc.steps, cfg.dp_delta, cfg.dp_target_eps);
    } else {
        throw ConfigError("finetune-dp: set dp.sigma or dp.target_epsilon");
    }

    std::string metrics = cfg.out_dir + "/metrics_dp.jsonl";
    int64_t start_step = resume ? resume->next_step : 0;
    if (!resume) std::filesystem::remove(metrics);

    std::vector<int> labels = model.unet.cfg.conditional ? priv.labels_int() : std::vector<int>{};
    auto save_partial = [&](int64_t step) {
        CheckpointContainer pc;
        pc.diffusion = diffusion_to_section(model, cfg.beta_start, cfg.beta_end, cfg.hash(),
                                            cfg.canonical(), loaded.content_hash);
        pc.diffusion->has_ledger = true;
        pc.diffusion->ledger =
            accounting::PrivacyLedger{q, dpc.sigma, step, cfg.dp_delta, cfg.dp_clip};
        pc.diffusion->run_seed = dpc.seed;
        pc.diffusion->next_step = step;
        pc.diffusion->total_steps = dpc.steps;
        pc.save(partial_path);
    };
    DpSgdResult res = dp_sgd_run(
        model, latents, labels, dpc, start_step, [&](const StepReport& r) {
            append_jsonl(metrics, {{"step", r.step},
                                   {"realized_batch", r.realized_batch},
                                   {"microbatches", r.physical_microbatches},
                                   {"preclip_min", r.preclip_min},
                                   {"preclip_mean", r.preclip_mean},
                                   {"preclip_max", r.preclip_max},
                                   {"fraction_clipped", r.fraction_clipped},
                                   {"noise_norm", r.noise_norm},
                                   {"trainable", r.trainable_count},
                                   {"clip_violations", r.clip_violations}});
            if (cfg.save_every > 0 && r.step % cfg.save_every == 0 && r.step < dpc.steps)
                save_partial(r.step);
            if (abort_after_step > 0 && r.step == abort_after_step)
                throw StateError("finetune-dp: aborted by test hook after step " +
                                 std::to_string(r.step));
        });

    FinetuneOutcome out;
    out.sigma = dpc.sigma;
    out.steps = res.ledger.steps;
    out.epsilon = res.ledger.epsilon();
    out.trainable = treport.trainable;
    out.total = treport.total;
    out.stamped = cfg.dp_target_eps <= 0 ||
                  std::abs(out.epsilon - cfg.dp_target_eps) / cfg.dp_target_eps <= 0.01;

    CheckpointContainer c;
    c.diffusion = diffusion_to_section(model, cfg.beta_start, cfg.beta_end, cfg.hash(),
                                       cfg.canonical(), loaded.content_hash);
    c.diffusion->has_ledger = true;
    c.diffusion->ledger = res.ledger;
    c.diffusion->dp_stamped = out.stamped;
    c.diffusion->stamped_epsilon = out.epsilon;
    c.diffusion->run_seed = dpc.seed;
    c.diffusion->next_step = res.ledger.steps;
    c.diffusion->total_steps = dpc.steps;
    c.save(cfg.out_dir + "/dm_dp.ckpt");
    std::filesystem::remove(partial_path);

    if (!out.stamped)
        throw BudgetError("finetune-dp: accountant epsilon " + std::to_string(out.epsilon) +
                          " misses target " + std::to_string(cfg.dp_target_eps) +
                          " by more than 1%; checkpoint saved without DP stamp");
    return out;
}

// ---------------------------------------------------------------------------
// Stage: sample
// ---------------------------------------------------------------------------

// Re-verify a DP-stamped checkpoint: the stamped epsilon must reproduce
// exactly from the stored ledger.
inline void verify_dp_stamp(const DiffusionSection& s) {
    if (!s.dp_stamped) return;
    if (!s.has_ledger) throw StateError("checkpoint stamped DP but carries no ledger");
    double eps = s.ledger.epsilon();
    if (eps != s.stamped_epsilon)
        throw StateError("checkpoint ledger re-verification failed: recomputed epsilon differs");
}

inline std::string run_sample(const RunConfig& cfg, const std::string& checkpoint_file,
                              int count, int fixed_label, const std::string& out_file,
                              uint64_t sample_seed) {
    if (cfg.out_dir.empty()) throw ConfigError("sample: run.out_dir required");
    StageLock lock(cfg.out_dir);
    LoadedAe loaded = load_ae_checkpoint(cfg.out_dir + "/ae.ckpt");
    CheckpointContainer c = CheckpointContainer::load(cfg.out_dir + "/" + checkpoint_file);
    if (!c.diffusion) throw StateError("sample: checkpoint has no diffusion section");
    if (c.diffusion->ae_hash != loaded.content_hash)
        throw StateError("sample: autoencoder hash does not match the model checkpoint");
    verify_dp_stamp(*c.diffusion);
    DiffusionModel model = diffusion_from_section(*c.diffusion);

    std::vector<int> ys;
    if (model.unet.cfg.conditional) {
        int k = model.unet.cfg.num_classes;
        for (int i = 0; i < count; ++i)
            ys.push_back(fixed_label >= 0 ? fixed_label : i % k);
        if (fixed_label >= k) throw ConfigError("sample: label out of range");
    } else if (fixed_label >= 0) {
        throw ConfigError("sample: labels requested from an unconditional model");
    }

    Tensor latents = ddpm_sample(model, count, ys, sample_seed, cfg.sample_chunk);
    Tensor images = decode_latents(loaded.ae, latents);
    DatasetArchive out = DatasetArchive::from_tensor(
        images, ys, model.unet.cfg.conditional ? model.unet.cfg.num_classes : 0);
    std::string path = cfg.out_dir + "/" + out_file;
    out.save(path);
    return path;
}

// ---------------------------------------------------------------------------
// Stage: eval
// ---------------------------------------------------------------------------

inline FeatureStats stats_for_archive(const DatasetArchive& archive, const FeatureExtractor& fe,
                                      bool cache, const std::string& cache_path) {
    uint64_t cfg_hash = rng_key(fe.cfg.seed, "fe-cfg", static_cast<uint64_t>(fe.cfg.dim),
                                static_cast<uint64_t>(fe.cfg.in_channels));
    if (cache && std::filesystem::exists(cache_path)) {
        CheckpointContainer c = CheckpointContainer::load(cache_path);
        if (c.stats && c.stats->config_hash == cfg_hash) return c.stats->stats;
    }
    FeatureStats s = compute_stats(fe.extract(archive.to_tensor()));
    if (cache) {
        CheckpointContainer c;
        c.stats = StatsSection{s, cfg_hash};
        c.save(cache_path);
    }
    return s;
}

inline double eval_fid_archives(const std::string& path_a, const std::string& path_b, int fe_dim,
                                uint64_t fe_seed, bool cache = false) {
    DatasetArchive a = DatasetArchive::load(path_a);
    DatasetArchive b = DatasetArchive::load(path_b);
    if (a.channels != b.channels) throw DataError("eval fid: channel counts differ");
    FeatureExtractor fe = FeatureExtractor::build({a.channels, fe_dim, fe_seed});
    FeatureStats sa = stats_for_archive(a, fe, cache, path_a + ".stats.ckpt");
    FeatureStats sb = stats_for_archive(b, fe, cache, path_b + ".stats.ckpt");
    return fid(sa, sb);
}

inline DpFidResult eval_dpfid_archives(const std::string& private_path,
                                       const std::string& public_path, double eps, double delta,
                                       int fe_dim, uint64_t fe_seed, uint64_t noise_seed,
                                       const DpFidOptions& opt = {}) {
    DatasetArchive priv = DatasetArchive::load(private_path);
    DatasetArchive pub = DatasetArchive::load(public_path);
    if (priv.channels != pub.channels) throw DataError("eval dpfid: channel counts differ");
    FeatureExtractor fe = FeatureExtractor::build({priv.channels, fe_dim, fe_seed});
    FeatureStats sp = compute_stats(fe.extract(priv.to_tensor()));
    FeatureStats sq = compute_stats(fe.extract(pub.to_tensor()));
    // Even budget split between the mean and the second moment.
    return dp_fid(sp, sq, eps / 2, delta / 2, eps / 2, delta / 2, noise_seed, opt);
}

inline double eval_classifier_archives(const std::string& synth_path, const std::string& real_path,
                                       const ClassifierConfig& ccfg = {}) {
    DatasetArchive synth = DatasetArchive::load(synth_path);
    DatasetArchive real = DatasetArchive::load(real_path);
    if (!synth.labeled() || !real.labeled())
        throw DataError("eval classifier: both archives must be labeled");
    return train_eval_classifier(synth.to_tensor(), synth.labels_int(), real.to_tensor(),
                                 real.labels_int(), ccfg);
}

}  // namespace privdiff

// privdiff: differentially private latent diffusion at desk scale.
//
// Stages: ingest -> train-ae -> pretrain-dm -> finetune-dp -> sample -> eval,
// plus account/calibrate utilities for the privacy accountant.
//
// Exit codes: 0 ok, 2 configuration error, 3 data/artifact error,
// 4 privacy-budget refusal.

#include <CLI11.hpp>
#include <cstdio>
#include <json.hpp>

#include "privdiff/accountant.hpp"
#include "privdiff/dataset.hpp"
#include "privdiff/pipeline.hpp"

using namespace privdiff;

int main(int argc, char** argv) {
    CLI::App app{"privdiff: DP fine-tuning of latent diffusion models"};
    app.require_subcommand(1);

    // ---------------------------------------------------------------- ingest
    auto* ingest = app.add_subcommand("ingest", "Build a dataset archive");
    std::string ingest_dir, idx_images, idx_labels, ingest_out, shapes_domain;
    int shapes_count = 1024, shapes_size = 16;
    uint64_t shapes_seed = 1;
    ingest->add_option("--dir", ingest_dir, "Directory of 8-bit .pgm files");
    ingest->add_option("--idx-images", idx_images, "IDX image file (MNIST format)");
    ingest->add_option("--idx-labels", idx_labels, "IDX label file");
    ingest->add_option("--shapes", shapes_domain,
                       "Built-in shapes generator domain: public | private");
    ingest->add_option("--count", shapes_count, "Synthetic image count");
    ingest->add_option("--size", shapes_size, "Synthetic image extent");
    ingest->add_option("--seed", shapes_seed, "Synthetic generator seed");
    ingest->add_option("--out", ingest_out, "Output archive path")->required();

    // ---------------------------------------------------------------- stages
    std::string config_path;
    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "Run configuration file")->required();
    };
    auto* train_ae = app.add_subcommand("train-ae", "Train the autoencoder on public data");
    add_config(train_ae);
    auto* pretrain = app.add_subcommand("pretrain-dm", "Pre-train the diffusion model (public)");
    add_config(pretrain);
    auto* finetune = app.add_subcommand("finetune-dp", "DP-SGD fine-tune on private data");
    add_config(finetune);

    auto* sample = app.add_subcommand("sample", "Sample images from a checkpoint");
    add_config(sample);
    std::string sample_ckpt = "dm_dp.ckpt", sample_out = "samples.pdda";
    int sample_count = -1, sample_label = -1;
    uint64_t sample_seed = 0;
    bool sample_seed_set = false;
    sample->add_option("--checkpoint", sample_ckpt, "Checkpoint file inside out_dir");
    sample->add_option("--count", sample_count, "Number of samples");
    sample->add_option("--label", sample_label, "Fixed class label (conditional models)");
    sample->add_option("--out", sample_out, "Output archive file inside out_dir");
    sample->add_option("--seed", sample_seed, "Sampling seed (default: run seed)")
        ->each([&](const std::string&) { sample_seed_set = true; });

    // ------------------------------------------------------------------ eval
    auto* eval = app.add_subcommand("eval", "Evaluation metrics");
    eval->require_subcommand(1);
    auto* eval_fid = eval->add_subcommand("fid", "Frechet distance between two archives");
    std::string fid_a, fid_b;
    int fe_dim = 32;
    uint64_t fe_seed = 2024;
    bool fid_cache = false;
    eval_fid->add_option("--a", fid_a)->required();
    eval_fid->add_option("--b", fid_b)->required();
    eval_fid->add_option("--dim", fe_dim, "Feature dimension");
    eval_fid->add_option("--fe-seed", fe_seed, "Feature extractor seed");
    eval_fid->add_flag("--cache", fid_cache, "Cache feature statistics next to the archives");

    auto* eval_dpfid = eval->add_subcommand("dpfid", "Privatized Frechet distance");
    std::string dp_priv, dp_pub, neighboring = "add_remove";
    double dpfid_eps = 1.0, dpfid_delta = 1e-5;
    uint64_t dpfid_seed = 0;
    bool mean_only = false;
    eval_dpfid->add_option("--private", dp_priv)->required();
    eval_dpfid->add_option("--public", dp_pub)->required();
    eval_dpfid->add_option("--epsilon", dpfid_eps, "Total epsilon budget");
    eval_dpfid->add_option("--delta", dpfid_delta, "Total delta budget");
    eval_dpfid->add_option("--neighboring", neighboring, "add_remove | replace");
    eval_dpfid->add_flag("--mean-only", mean_only, "Privatize the mean only");
    eval_dpfid->add_option("--seed", dpfid_seed, "Noise seed");
    eval_dpfid->add_option("--dim", fe_dim, "Feature dimension");
    eval_dpfid->add_option("--fe-seed", fe_seed, "Feature extractor seed");

    auto* eval_cls = eval->add_subcommand("classifier", "Train on synthetic, test on real");
    std::string cls_synth, cls_real;
    int cls_epochs = 20;
    uint64_t cls_seed = 7;
    eval_cls->add_option("--synth", cls_synth)->required();
    eval_cls->add_option("--real", cls_real)->required();
    eval_cls->add_option("--epochs", cls_epochs);
    eval_cls->add_option("--seed", cls_seed);

    // ------------------------------------------------------- account utility
    auto* account = app.add_subcommand("account", "Epsilon for (q, sigma, steps, delta)");
    double acc_q = 0, acc_sigma = 0, acc_delta = 1e-5, cal_eps = 0;
    int64_t acc_steps = 0;
    account->add_option("--q", acc_q, "Sampling rate B/N")->required();
    account->add_option("--sigma", acc_sigma, "Noise multiplier")->required();
    account->add_option("--steps", acc_steps, "Step count")->required();
    account->add_option("--delta", acc_delta, "Delta");

    auto* calibrate = app.add_subcommand("calibrate", "Sigma for a target epsilon");
    calibrate->add_option("--q", acc_q, "Sampling rate B/N")->required();
    calibrate->add_option("--steps", acc_steps, "Step count")->required();
    calibrate->add_option("--delta", acc_delta, "Delta");
    calibrate->add_option("--epsilon", cal_eps, "Target epsilon")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest) {
            int sources = (!ingest_dir.empty()) + (!idx_images.empty()) + (!shapes_domain.empty());
            if (sources != 1)
                throw ConfigError("ingest: pick exactly one of --dir, --idx-images, --shapes");
            DatasetArchive a;
            if (!ingest_dir.empty()) {
                a = ingest_directory(ingest_dir);
            } else if (!idx_images.empty()) {
                a = ingest_idx(idx_images, idx_labels);
            } else {
                if (shapes_domain != "public" && shapes_domain != "private")
                    throw ConfigError("ingest: --shapes must be public or private");
                a = generate_shapes(ShapesConfig::domain(shapes_domain == "private", shapes_count,
                                                         shapes_size, shapes_seed));
            }
            a.save(ingest_out);
            std::printf("wrote %s: n=%d %dx%dx%d classes=%d\n", ingest_out.c_str(), a.n, a.height,
                        a.width, a.channels, a.class_count);
        } else if (*train_ae) {
            RunConfig cfg = RunConfig::from_file(config_path);
            run_train_ae(cfg);
            std::printf("train-ae: wrote %s/ae.ckpt\n", cfg.out_dir.c_str());
        } else if (*pretrain) {
            RunConfig cfg = RunConfig::from_file(config_path);
            run_pretrain_dm(cfg);
            std::printf("pretrain-dm: wrote %s/dm.ckpt\n", cfg.out_dir.c_str());
        } else if (*finetune) {
            RunConfig cfg = RunConfig::from_file(config_path);
            FinetuneOutcome out = run_finetune_dp(cfg);
            std::printf(
                "finetune-dp: (epsilon, delta) = (%.6g, %.3g) sigma=%.6g steps=%lld "
                "trainable=%lld/%lld (%.1f%%) stamped=%s\n",
                out.epsilon, cfg.dp_delta, out.sigma, static_cast<long long>(out.steps),
                static_cast<long long>(out.trainable), static_cast<long long>(out.total),
                100.0 * out.trainable / std::max<int64_t>(1, out.total),
                out.stamped ? "yes" : "no");
        } else if (*sample) {
            RunConfig cfg = RunConfig::from_file(config_path);
            int count = sample_count > 0 ? sample_count : cfg.sample_count;
            uint64_t seed = sample_seed_set ? sample_seed : rng_key(cfg.seed, "sample-stage");
            std::string path = run_sample(cfg, sample_ckpt, count, sample_label, sample_out, seed);
            std::printf("sample: wrote %s (%d samples)\n", path.c_str(), count);
        } else if (*eval_fid) {
            double v = eval_fid_archives(fid_a, fid_b, fe_dim, fe_seed, fid_cache);
            nlohmann::json j{{"fid", v}};
            std::printf("%s\n", j.dump().c_str());
        } else if (*eval_dpfid) {
            DpFidOptions opt;
            if (neighboring == "replace")
                opt.neighboring = Neighboring::Replace;
            else if (neighboring != "add_remove")
                throw ConfigError("eval dpfid: unknown neighboring definition");
            opt.mean_only = mean_only;
            DpFidResult r = eval_dpfid_archives(dp_priv, dp_pub, dpfid_eps, dpfid_delta, fe_dim,
                                                fe_seed, dpfid_seed, opt);
            nlohmann::json j{
                {"dp_fid", r.value}, {"epsilon", r.eps_total}, {"delta", r.delta_total}};
            std::printf("%s\n", j.dump().c_str());
        } else if (*eval_cls) {
            ClassifierConfig ccfg;
            ccfg.epochs = cls_epochs;
            ccfg.seed = cls_seed;
            double acc = eval_classifier_archives(cls_synth, cls_real, ccfg);
            nlohmann::json j{{"accuracy", acc}};
            std::printf("%s\n", j.dump().c_str());
        } else if (*account) {
            double eps = accounting::epsilon_at_delta(acc_q, acc_sigma, acc_steps, acc_delta);
            std::printf("epsilon = %.6g at delta = %.3g (q=%.6g sigma=%.6g steps=%lld)\n", eps,
                        acc_delta, acc_q, acc_sigma, static_cast<long long>(acc_steps));
        } else if (*calibrate) {
            double sigma = accounting::calibrate_sigma(acc_q, acc_steps, acc_delta, cal_eps);
            std::printf("sigma = %.6g for epsilon = %.6g at delta = %.3g (q=%.6g steps=%lld)\n",
                        sigma, cal_eps, acc_delta, acc_q, static_cast<long long>(acc_steps));
        }
    } catch (const BudgetError& e) {
        std::fprintf(stderr, "privacy budget refusal: %s\n", e.what());
        return 4;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const CalibrationError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const StateError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

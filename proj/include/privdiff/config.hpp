#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "privdiff/errors.hpp"
#include "privdiff/rng.hpp"

namespace privdiff {

// Flat "key = value" configuration with [section] headers and '#' comments.
// Keys are stored as "section.key".
inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            size_t a = s.find_first_not_of(" \t\r");
            size_t b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("config: bad section at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected key = value at line " + std::to_string(lineno));
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: empty key at line " + std::to_string(lineno));
        std::string full = section.empty() ? key : section + "." + key;
        if (out.count(full)) throw ConfigError("config: duplicate key " + full);
        out[full] = value;
    }
    return out;
}

// Run configuration for the five pipeline stages. One master seed; stage
// streams are derived from it by purpose tags.
struct RunConfig {
    // [run]
    std::string out_dir;
    uint64_t seed = 1;
    // [data]
    std::string public_path;
    std::string private_path;
    // [ae]
    int ae_f = 2;
    int ae_latent_channels = 4;
    int ae_width = 16;
    int ae_epochs = 6;
    int ae_batch = 64;
    double ae_lr = 0.05;
    // [model]
    int base_width = 16;
    int T = 200;
    double beta_start = 1e-4;
    double beta_end = 0.05;
    int heads = 1;
    bool conditional = true;
    int cond_dim = 8;
    // [pretrain]
    int pre_epochs = 20;
    int pre_batch = 64;
    double pre_lr = 0.02;
    // [dp]
    int dp_batch = 256;
    int dp_epochs = 0;     // steps = epochs * ceil(N/B) when dp_steps == 0
    int dp_steps = 0;
    double dp_clip = 1.0;
    double dp_sigma = 0.0;       // 0: calibrate from target epsilon
    double dp_target_eps = 0.0;  // 0: use dp_sigma as-is
    double dp_delta = 1e-5;
    double dp_lr = 0.05;
    std::string dp_trainable = "all-attn+cond";
    int dp_microbatch = 0;
    int lora_rank = 0;  // 0 disables
    double lora_scale = 1.0;
    int save_every = 0;  // periodic partial checkpoint, in steps
    // [sample]
    int sample_count = 256;
    int sample_chunk = 16;
    // [eval]
    int fe_dim = 32;
    uint64_t fe_seed = 2024;

    static RunConfig from_text(const std::string& text) {
        auto kv = parse_kv_text(text);
        RunConfig c;
        std::set<std::string> seen;
        auto take = [&](const std::string& key) -> const std::string* {
            auto it = kv.find(key);
            if (it == kv.end()) return nullptr;
            seen.insert(key);
            return &it->second;
        };
        auto get_str = [&](const std::string& key, std::string& dst) {
            if (const std::string* v = take(key)) dst = *v;
        };
        auto get_int = [&](const std::string& key, int& dst) {
            if (const std::string* v = take(key)) {
                try {
                    dst = std::stoi(*v);
                } catch (...) {
                    throw ConfigError("config: bad integer for " + key);
                }
            }
        };
        auto get_u64 = [&](const std::string& key, uint64_t& dst) {
            if (const std::string* v = take(key)) {
                try {
                    dst = std::stoull(*v);
                } catch (...) {
                    throw ConfigError("config: bad integer for " + key);
                }
            }
        };
        auto get_f64 = [&](const std::string& key, double& dst) {
            if (const std::string* v = take(key)) {
                try {
                    dst = std::stod(*v);
                } catch (...) {
                    throw ConfigError("config: bad number for " + key);
                }
            }
        };
        auto get_bool = [&](const std::string& key, bool& dst) {
            if (const std::string* v = take(key)) {
                if (*v == "true" || *v == "1")
                    dst = true;
                else if (*v == "false" || *v == "0")
                    dst = false;
                else
                    throw ConfigError("config: bad boolean for " + key);
            }
        };

        int version = 1;
        get_int("version", version);
        if (version != 1) throw ConfigError("config: unsupported version");
        get_str("run.out_dir", c.out_dir);
        get_u64("run.seed", c.seed);
        get_str("data.public", c.public_path);
        get_str("data.private", c.private_path);
        get_int("ae.f", c.ae_f);
        get_int("ae.latent_channels", c.ae_latent_channels);
        get_int("ae.width", c.ae_width);
        get_int("ae.epochs", c.ae_epochs);
        get_int("ae.batch", c.ae_batch);
        get_f64("ae.lr", c.ae_lr);
        get_int("model.base_width", c.base_width);
        get_int("model.T", c.T);
        get_f64("model.beta_start", c.beta_start);
        get_f64("model.beta_end", c.beta_end);
        get_int("model.heads", c.heads);
        get_bool("model.conditional", c.conditional);
        get_int("model.cond_dim", c.cond_dim);
        get_int("pretrain.epochs", c.pre_epochs);
        get_int("pretrain.batch", c.pre_batch);
        get_f64("pretrain.lr", c.pre_lr);
        get_int("dp.batch", c.dp_batch);
        get_int("dp.epochs", c.dp_epochs);
        get_int("dp.steps", c.dp_steps);
        get_f64("dp.clip", c.dp_clip);
        get_f64("dp.sigma", c.dp_sigma);
        get_f64("dp.target_epsilon", c.dp_target_eps);
        get_f64("dp.delta", c.dp_delta);
        get_f64("dp.lr", c.dp_lr);
        get_str("dp.trainable", c.dp_trainable);
        get_int("dp.microbatch", c.dp_microbatch);
        get_int("dp.lora_rank", c.lora_rank);
        get_f64("dp.lora_scale", c.lora_scale);
        get_int("dp.save_every", c.save_every);
        get_int("sample.count", c.sample_count);
        get_int("sample.chunk", c.sample_chunk);
        get_int("eval.fe_dim", c.fe_dim);
        get_u64("eval.fe_seed", c.fe_seed);

        for (const auto& [key, value] : kv)
            if (!seen.count(key)) throw ConfigError("config: unknown key " + key);
        return c;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("config: cannot open " + path);
        std::stringstream ss;
        ss << is.rdbuf();
        return from_text(ss.str());
    }

    // Normalized echo of every field; hashed into artifacts.
    std::string canonical() const {
        std::ostringstream os;
        os.precision(17);
        os << "version = 1\n";
        os << "[run]\nout_dir = " << out_dir << "\nseed = " << seed << "\n";
        os << "[data]\npublic = " << public_path << "\nprivate = " << private_path << "\n";
        os << "[ae]\nf = " << ae_f << "\nlatent_channels = " << ae_latent_channels
           << "\nwidth = " << ae_width << "\nepochs = " << ae_epochs << "\nbatch = " << ae_batch
           << "\nlr = " << ae_lr << "\n";
        os << "[model]\nbase_width = " << base_width << "\nT = " << T
           << "\nbeta_start = " << beta_start << "\nbeta_end = " << beta_end
           << "\nheads = " << heads << "\nconditional = " << (conditional ? "true" : "false")
           << "\ncond_dim = " << cond_dim << "\n";
        os << "[pretrain]\nepochs = " << pre_epochs << "\nbatch = " << pre_batch
           << "\nlr = " << pre_lr << "\n";
        os << "[dp]\nbatch = " << dp_batch << "\nepochs = " << dp_epochs
           << "\nsteps = " << dp_steps << "\nclip = " << dp_clip << "\nsigma = " << dp_sigma
           << "\ntarget_epsilon = " << dp_target_eps << "\ndelta = " << dp_delta
           << "\nlr = " << dp_lr << "\ntrainable = " << dp_trainable
           << "\nmicrobatch = " << dp_microbatch << "\nlora_rank = " << lora_rank
           << "\nlora_scale = " << lora_scale << "\nsave_every = " << save_every << "\n";
        os << "[sample]\ncount = " << sample_count << "\nchunk = " << sample_chunk << "\n";
        os << "[eval]\nfe_dim = " << fe_dim << "\nfe_seed = " << fe_seed << "\n";
        return os.str();
    }

    uint64_t hash() const { return fnv1a64(canonical()); }
};

}  // namespace privdiff

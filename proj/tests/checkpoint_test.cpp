#include "privdiff/checkpoint.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace privdiff {
namespace {

namespace fs = std::filesystem;

std::vector<uint8_t> slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct TempDir {
    fs::path path;
    TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

Autoencoder make_ae() {
    AutoencoderConfig cfg;
    cfg.f = 2;
    cfg.latent_channels = 3;
    cfg.width = 8;
    cfg.in_channels = 1;
    cfg.image_hw = 16;
    cfg.init_seed = 13;
    return Autoencoder::build(cfg);
}

DiffusionModel make_dm(bool with_lora) {
    UNetConfig cfg;
    cfg.latent_channels = 3;
    cfg.latent_hw = 8;
    cfg.base_width = 8;
    cfg.conditional = true;
    cfg.num_classes = 2;
    cfg.cond_dim = 4;
    cfg.init_seed = 21;
    UNetLite unet = UNetLite::build(cfg);
    if (with_lora) attach_lora(unet, {"wq", "wv"}, 2, 0.5);
    return DiffusionModel{std::move(unet), make_schedule(12, 1e-3, 0.08)};
}

TEST(Checkpoint, AutoencoderRoundTripBitExact) {
    TempDir dir("privdiff_ckpt_ae");
    Autoencoder ae = make_ae();
    CheckpointContainer c;
    c.autoencoder = ae_to_section(ae, 42, "config text");
    std::string p1 = dir.str() + "/a.ckpt", p2 = dir.str() + "/b.ckpt";
    c.save(p1);
    CheckpointContainer d = CheckpointContainer::load(p1);
    d.save(p2);
    EXPECT_EQ(slurp(p1), slurp(p2));
    Autoencoder restored = ae_from_section(*d.autoencoder);
    for (const auto& [name, e] : ae.params.all())
        EXPECT_EQ(e.value.data, restored.params.entry(name).value.data) << name;
    EXPECT_EQ(d.autoencoder->config_text, "config text");
}

TEST(Checkpoint, DiffusionWithLoraAndLedgerRoundTrip) {
    TempDir dir("privdiff_ckpt_dm");
    DiffusionModel model = make_dm(true);
    CheckpointContainer c;
    c.diffusion = diffusion_to_section(model, 1e-3, 0.08, 77, "cfg", 0xABCD);
    c.diffusion->has_ledger = true;
    c.diffusion->ledger = accounting::PrivacyLedger{0.1, 1.3, 250, 1e-5, 0.5};
    c.diffusion->dp_stamped = true;
    c.diffusion->stamped_epsilon = c.diffusion->ledger.epsilon();
    c.diffusion->run_seed = 5;
    c.diffusion->next_step = 250;
    c.diffusion->total_steps = 250;
    std::string p1 = dir.str() + "/a.ckpt", p2 = dir.str() + "/b.ckpt";
    c.save(p1);
    CheckpointContainer d = CheckpointContainer::load(p1);
    d.save(p2);
    EXPECT_EQ(slurp(p1), slurp(p2));

    DiffusionModel restored = diffusion_from_section(*d.diffusion);
    EXPECT_TRUE(restored.unet.lora.enabled);
    EXPECT_EQ(restored.unet.lora.rank, 2);
    EXPECT_EQ(restored.unet.lora.targets, (std::set<std::string>{"wq", "wv"}));
    EXPECT_EQ(restored.schedule.alpha_bar, model.schedule.alpha_bar);
    // forward pass of the restored model is bit-identical
    Rng rng(3);
    Tensor z = Tensor::randn({2, 3, 8, 8}, rng);
    auto run = [&](const DiffusionModel& m) {
        Tape t;
        std::map<std::string, Val> bound;
        return t.value(m.unet.forward(t, bound, t.constant(z), {3, 7}, {0, 1}, true)).data;
    };
    EXPECT_EQ(run(model), run(restored));
    EXPECT_EQ(d.diffusion->ledger.steps, 250);
    EXPECT_DOUBLE_EQ(d.diffusion->stamped_epsilon, c.diffusion->stamped_epsilon);
}

TEST(Checkpoint, StatsSectionRoundTrip) {
    TempDir dir("privdiff_ckpt_stats");
    FeatureStats s;
    s.n = 100;
    Rng rng(4);
    s.mu = Tensor::randn({6}, rng);
    s.m_sec = Tensor::randn({6, 6}, rng);
    s.privatized = true;
    s.eps1 = 0.5;
    s.delta1 = 1e-6;
    s.eps2 = 0.5;
    s.delta2 = 1e-6;
    CheckpointContainer c;
    c.stats = StatsSection{s, 99};
    std::string p = dir.str() + "/s.ckpt";
    c.save(p);
    CheckpointContainer d = CheckpointContainer::load(p);
    ASSERT_TRUE(d.stats.has_value());
    EXPECT_EQ(d.stats->stats.mu.data, s.mu.data);
    EXPECT_EQ(d.stats->stats.m_sec.data, s.m_sec.data);
    EXPECT_TRUE(d.stats->stats.privatized);
    EXPECT_EQ(d.stats->config_hash, 99u);
}

TEST(Checkpoint, ContentHashTracksParameters) {
    Autoencoder ae = make_ae();
    AutoencoderSection s1 = ae_to_section(ae, 1, "");
    ae.params.tensor("ae.enc.in.w")[0] += 1e-9;
    AutoencoderSection s2 = ae_to_section(ae, 1, "");
    EXPECT_NE(ae_content_hash(s1), ae_content_hash(s2));
    // config hash/text do not affect the content identity
    AutoencoderSection s3 = ae_to_section(ae, 999, "different echo");
    EXPECT_EQ(ae_content_hash(s2), ae_content_hash(s3));
}

TEST(Checkpoint, CorruptionDetected) {
    TempDir dir("privdiff_ckpt_bad");
    Autoencoder ae = make_ae();
    CheckpointContainer c;
    c.autoencoder = ae_to_section(ae, 1, "");
    std::string p = dir.str() + "/a.ckpt";
    c.save(p);
    auto bytes = slurp(p);
    bytes.resize(bytes.size() / 2);
    {
        std::ofstream os(p, std::ios::binary | std::ios::trunc);
        os.write(reinterpret_cast<const char*>(bytes.data()),
                 static_cast<std::streamsize>(bytes.size()));
    }
    EXPECT_THROW(CheckpointContainer::load(p), FormatError);
    {
        std::ofstream os(p, std::ios::binary | std::ios::trunc);
        os << "not a checkpoint at all";
    }
    EXPECT_THROW(CheckpointContainer::load(p), FormatError);
    EXPECT_THROW(CheckpointContainer::load(dir.str() + "/missing.ckpt"), StateError);
}

TEST(Checkpoint, MissingParameterRejected) {
    DiffusionModel model = make_dm(false);
    DiffusionSection s = diffusion_to_section(model, 1e-3, 0.08, 1, "", 2);
    s.tensors.erase("attn3.wq");
    EXPECT_THROW(diffusion_from_section(s), FormatError);
    DiffusionSection s2 = diffusion_to_section(model, 1e-3, 0.08, 1, "", 2);
    s2.tensors["unet.bogus.w"] = Tensor({1});
    EXPECT_THROW(diffusion_from_section(s2), FormatError);
}

}  // namespace
}  // namespace privdiff

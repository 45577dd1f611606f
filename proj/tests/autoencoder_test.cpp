#include "privdiff/autoencoder.hpp"

#include <gtest/gtest.h>

#include "privdiff/rng.hpp"

namespace privdiff {
namespace {

// Soft blobs with per-image offsets; enough structure to reconstruct.
Tensor blob_images(int n, int hw, uint64_t seed) {
    Tensor imgs({n, 1, hw, hw});
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        double cx = 0.25 * hw + rng.uniform() * hw / 2, cy = 0.25 * hw + rng.uniform() * hw / 2;
        double amp = 0.4 + 0.5 * rng.uniform();
        double r = hw / 5.0;
        for (int y = 0; y < hw; ++y)
            for (int x = 0; x < hw; ++x) {
                double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                imgs[((static_cast<int64_t>(i)) * hw + y) * hw + x] =
                    amp * std::exp(-d2 / (2 * r * r)) * 2.0 - amp;
            }
    }
    return imgs;
}

AutoencoderConfig small_cfg(int f) {
    AutoencoderConfig cfg;
    cfg.f = f;
    cfg.latent_channels = 3;
    cfg.width = 12;
    cfg.in_channels = 1;
    cfg.image_hw = 16;
    cfg.init_seed = 5;
    return cfg;
}

TEST(Autoencoder, ShapeArithmetic) {
    Autoencoder ae = Autoencoder::build(small_cfg(2));
    Rng rng(1);
    Tensor x = Tensor::randn({2, 1, 8, 8}, rng, 0.3);
    Tensor z = ae.encode(x);
    EXPECT_EQ(z.shape, (Shape{2, 3, 4, 4}));
    Tensor xhat = ae.decode(z);
    EXPECT_EQ(xhat.shape, x.shape);

    AutoencoderConfig c4 = small_cfg(4);
    c4.image_hw = 32;
    Autoencoder ae4 = Autoencoder::build(c4);
    Tensor x32 = Tensor::randn({1, 1, 32, 32}, rng, 0.3);
    EXPECT_EQ(ae4.encode(x32).shape, (Shape{1, 3, 8, 8}));
}

TEST(Autoencoder, DecodeStaysInUnitRange) {
    Autoencoder ae = Autoencoder::build(small_cfg(2));
    Rng rng(2);
    Tensor z = Tensor::randn({2, 3, 8, 8}, rng, 3.0);
    Tensor x = ae.decode(z);
    for (double v : x.data) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Autoencoder, IndivisibleExtentsRejected) {
    Autoencoder ae = Autoencoder::build(small_cfg(2));
    Rng rng(3);
    Tensor odd = Tensor::randn({1, 1, 7, 7}, rng);
    EXPECT_THROW(ae.encode(odd), ConfigError);
    AutoencoderConfig bad = small_cfg(2);
    bad.f = 3;
    EXPECT_THROW(Autoencoder::build(bad), ConfigError);
    AutoencoderConfig bad2 = small_cfg(2);
    bad2.image_hw = 10;
    bad2.f = 4;
    EXPECT_THROW(Autoencoder::build(bad2), ConfigError);
}

TEST(Autoencoder, TrainingReducesLossAndIsDeterministic) {
    Tensor imgs = blob_images(64, 16, 9);
    auto run = [&]() {
        Autoencoder ae = Autoencoder::build(small_cfg(2));
        AeTrainLog log = train_autoencoder(ae, imgs, /*epochs=*/3, /*batch=*/16, /*lr=*/0.05,
                                           /*seed=*/42);
        return std::pair{std::move(ae), log};
    };
    auto [ae1, log1] = run();
    auto [ae2, log2] = run();
    EXPECT_LT(log1.epoch_loss.back(), log1.epoch_loss.front());
    EXPECT_EQ(log1.epoch_loss, log2.epoch_loss);
    for (const auto& [name, e] : ae1.params.all())
        EXPECT_EQ(e.value.data, ae2.params.entry(name).value.data) << name;
}

TEST(Autoencoder, EmptyDatasetRejected) {
    Autoencoder ae = Autoencoder::build(small_cfg(2));
    Tensor empty({0, 1, 16, 16});
    EXPECT_THROW(train_autoencoder(ae, empty, 1, 8, 0.05, 1), DataError);
}

TEST(Autoencoder, TrainedReconstructionBeatsThresholdAndMildDownsamplingWins) {
    Tensor imgs = blob_images(96, 16, 10);
    auto recon_err = [&](int f, int epochs) {
        Autoencoder ae = Autoencoder::build(small_cfg(f));
        train_autoencoder(ae, imgs, epochs, 16, 0.05, 7);
        Tensor xhat = ae.decode(ae.encode(imgs));
        double mse = 0;
        for (int64_t i = 0; i < imgs.numel(); ++i) {
            double d = xhat[i] - imgs[i];
            mse += d * d;
        }
        return mse / imgs.numel();
    };
    double e2 = recon_err(2, 12);
    double e4 = recon_err(4, 12);
    EXPECT_LT(e2, 0.02);  // convergence threshold for the desk-scale task
    EXPECT_LE(e2, e4);    // mild downsampling reconstructs at least as well
}

TEST(Autoencoder, FrozenAfterTraining) {
    Tensor imgs = blob_images(16, 16, 11);
    Autoencoder ae = Autoencoder::build(small_cfg(2));
    train_autoencoder(ae, imgs, 1, 8, 0.05, 3);
    EXPECT_TRUE(ae.params.trainable_names().empty());
}

}  // namespace
}  // namespace privdiff

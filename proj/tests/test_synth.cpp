#include <algorithm>
#include <numeric>
#include <set>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "mer/synth.hpp"
#include "oracles/spectral.hpp"
#include "test_util.hpp"

using namespace mer;

namespace {

SynthConfig short_config() {
    SynthConfig cfg;
    cfg.clip_len_s = 5.0;
    cfg.sample_rate_hz = 22050;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST(Synth, DeterministicAndSeedSensitive) {
    const SynthConfig cfg = short_config();
    const AudioClip a = synth_clip(Emotion::happy, 5, cfg);
    const AudioClip b = synth_clip(Emotion::happy, 5, cfg);
    const AudioClip c = synth_clip(Emotion::happy, 6, cfg);
    EXPECT_EQ(a.samples, b.samples);
    EXPECT_NE(a.samples, c.samples);
    EXPECT_NE(synth_clip(Emotion::sad, 5, cfg).samples, a.samples);
}

TEST(Synth, LengthRangeAndPeak) {
    const SynthConfig cfg = short_config();
    for (Emotion e : {Emotion::happy, Emotion::sad}) {
        const AudioClip clip = synth_clip(e, 1, cfg);
        EXPECT_EQ(clip.samples.size(), 5u * 22050u);
        EXPECT_EQ(clip.label, e);
        const auto [lo, hi] = std::minmax_element(clip.samples.begin(), clip.samples.end());
        EXPECT_GE(*lo, -0.9);
        EXPECT_LE(*hi, 0.9);
        EXPECT_NEAR(std::max(-*lo, *hi), 0.9, 1e-12);
        EXPECT_NO_THROW(validate(clip));
    }
}

// Happy clips are brighter: a single spectral-centroid threshold separates the
// classes for at least 90% of clips.
TEST(Synth, SpectralCentroidSeparatesClasses) {
    const SynthConfig cfg = short_config();
    std::vector<double> happy, sad;
    for (std::size_t i = 0; i < 20; ++i) {
        const auto h = synth_clip(Emotion::happy, synth_clip_seed(cfg.seed, Emotion::happy, i), cfg);
        const auto s = synth_clip(Emotion::sad, synth_clip_seed(cfg.seed, Emotion::sad, i), cfg);
        happy.push_back(oracle::mean_spectral_centroid(h.samples, cfg.sample_rate_hz));
        sad.push_back(oracle::mean_spectral_centroid(s.samples, cfg.sample_rate_hz));
    }
    const auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
    EXPECT_GT(mean(happy), mean(sad));

    std::size_t best = 0;
    std::vector<double> all = happy;
    all.insert(all.end(), sad.begin(), sad.end());
    for (double t : all) {
        std::size_t correct = 0;
        for (double v : happy) correct += v > t;
        for (double v : sad) correct += v <= t;
        best = std::max(best, correct);
    }
    EXPECT_GE(best, 36u) << "best threshold accuracy " << best << "/40";
}

TEST(Synth, ClipSeedsAreDistinct) {
    std::set<std::uint64_t> seen;
    for (std::size_t i = 0; i < 200; ++i) {
        seen.insert(synth_clip_seed(0, Emotion::happy, i));
        seen.insert(synth_clip_seed(0, Emotion::sad, i));
    }
    EXPECT_EQ(seen.size(), 400u);
}

TEST(Synth, GenerateDatasetWritesFilesAndManifest) {
    testutil::TempDir tmp;
    SynthConfig cfg = short_config();
    cfg.n_per_class = 1;
    const DatasetManifest m = generate_dataset(cfg, tmp / "a");
    ASSERT_EQ(m.entries.size(), 2u);
    EXPECT_TRUE(std::filesystem::exists(tmp / "a/happy/happy_0000.wav"));
    EXPECT_TRUE(std::filesystem::exists(tmp / "a/sad/sad_0000.wav"));
    const DatasetManifest loaded = load_manifest(tmp / "a/manifest.json");
    EXPECT_EQ(loaded.entries[1].path, "sad/sad_0000.wav");
    EXPECT_EQ(loaded.entries[1].label, Emotion::sad);
    EXPECT_EQ(loaded.metadata.sample_rate, 22050u);
    const AudioClip clip = read_wav(loaded.resolve(loaded.entries[0]));
    EXPECT_EQ(clip.samples.size(), 5u * 22050u);

    generate_dataset(cfg, tmp / "b");
    for (const char* rel : {"happy/happy_0000.wav", "sad/sad_0000.wav", "manifest.json"}) {
        EXPECT_EQ(testutil::slurp(tmp / "a" / rel), testutil::slurp(tmp / "b" / rel)) << rel;
    }
}

TEST(Synth, RejectsBadConfig) {
    SynthConfig cfg;
    cfg.n_per_class = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.clip_len_s = -1.0;
    EXPECT_THROW(synth_clip(Emotion::happy, 1, cfg), std::invalid_argument);
}

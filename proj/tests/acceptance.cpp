// Release criteria. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mer/cli.hpp"
#include "oracles/param_count.hpp"

using namespace mer;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool passed = true;
    std::ostringstream detail;

    void check(bool ok, const std::string& what) {
        if (!ok) {
            passed = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int run_cli(std::vector<std::string> args, std::string* out = nullptr) {
    args.insert(args.begin(), "mer");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream o, e;
    const int code = dispatch(static_cast<int>(argv.size()), argv.data(), o, e);
    if (out) *out = o.str();
    if (code != 0) std::cerr << e.str();
    return code;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------

void dsp_golden(Outcome& o) {
    const std::vector<double> zeros(220500, 0.0);
    const SpectrogramParams p;
    const ComplexMatrix z = stft(zeros, p);
    o.check(z.rows == 427, "frame count " + std::to_string(z.rows) + " != 427");
    o.check(std::all_of(z.values.begin(), z.values.end(), [](auto v) { return v == std::complex<double>{}; }),
            "zero-signal STFT not zero");

    double worst_share = 1.0;
    for (std::size_t k : {3u, 50u, 200u, 700u, 1020u}) {
        const double f = static_cast<double>(k) * 44100.0 / 2048.0;
        std::vector<double> x(220500);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.5 * std::sin(2.0 * std::numbers::pi * f * i / 44100.0);
        const PowerSpectrogram s = power_spectrogram(stft(x, p));
        for (std::size_t t = 0; t < s.values.rows; ++t) {
            const auto row = s.values.row(t);
            const double total = std::accumulate(row.begin(), row.end(), 0.0);
            worst_share = std::min(worst_share, (row[k - 1] + row[k] + row[k + 1]) / total);
        }
    }
    o.check(worst_share >= 0.999, "sine concentration");
    o.detail << "min +-1 bin power share " << std::setprecision(8) << worst_share << "; ";

    std::mt19937_64 rng(5);
    std::vector<double> noise(220500);
    for (double& v : noise) v = 2.0 * uniform01(rng) - 1.0;
    const PowerSpectrogram s = power_spectrogram(stft(noise, p));
    const MelFilterbank fb = build_mel_filterbank(p, 44100);
    const MelSpectrogram mel = mel_spectrogram(s, fb);
    double worst = 0.0;
    for (std::size_t t = 0; t < s.values.rows; ++t) {
        for (std::size_t m = 0; m < fb.weights.rows; ++m) {
            double acc = 0.0;
            for (std::size_t k = 0; k < s.values.cols; ++k) acc += s.values(t, k) * fb.weights(m, k);
            worst = std::max(worst, std::abs(mel.values(t, m) - acc) / std::abs(acc));
        }
    }
    o.check(worst < 1e-6, "mel product vs naive matmul");
    o.detail << "mel max rel err " << std::scientific << std::setprecision(2) << worst << "; ";
}

void gradient_verification(Outcome& o) {
    VerifyOptions opt;
    double worst = 0.0;
    std::string worst_name;
    for (const VerifyRow& r : run_gradient_suite(opt)) {
        o.check(r.passed && r.max_rel_error < 1e-4, r.name);
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            worst_name = r.name;
        }
    }
    o.detail << "worst " << worst_name << " " << std::scientific << std::setprecision(2) << worst << "; ";
}

void architecture_fidelity(Outcome& o) {
    const std::uint64_t expected[] = {oracle::vgg16_params(1.0, 224), oracle::resnet18_params(1.0),
                                      oracle::squeezenet_v10_params(1.0), oracle::mobilenet_v2_params(1.0)};
    for (std::size_t i = 0; i < kAllArchs.size(); ++i) {
        auto m = build_model<float>({kAllArchs[i], 1.0, 224});
        const std::size_t n = m.parameter_count();
        o.check(n == expected[i], std::string(arch_name(kAllArchs[i])) + " count");
        m.append_emotion_head();
        o.check(m.parameter_count() - n == 2002, std::string(arch_name(kAllArchs[i])) + " head");
        o.detail << arch_display_name(kAllArchs[i]) << " " << n << "; ";
    }
    o.check(expected[0] == 138357544u && expected[1] == 11689512u, "reference counts");
    bool rejected = false;
    try {
        Fire<float>(64, 16, 8, 8);
    } catch (const ArchError&) {
        rejected = true;
    }
    o.check(rejected, "fire constraint");
}

FeatureSet synth_features(std::size_t per_class, std::uint64_t seed) {
    SynthConfig cfg;
    cfg.clip_len_s = 5.0;
    cfg.seed = seed;
    FeatureSet fs;
    for (std::size_t i = 0; i < per_class; ++i) {
        for (Emotion e : {Emotion::happy, Emotion::sad}) {
            const AudioClip clip = synth_clip(e, synth_clip_seed(seed, e, i), cfg);
            fs.add(extract_features(clip, SpectrogramParams{}, 64, 64), e, std::string(to_string(e)) + std::to_string(i));
        }
    }
    return fs;
}

void memorization(Outcome& o) {
    const FeatureSet data = synth_features(8, 21);
    for (Arch a : kAllArchs) {
        const auto t0 = Clock::now();
        TrainConfig cfg;
        cfg.arch = {a, 0.125, 64};
        cfg.batch_size = 16;
        cfg.epochs = 200;  // one batch per epoch: 200 iterations
        cfg.seed = 1;
        const TrainResult r = train(cfg, data, nullptr);
        const auto& loss = r.report.iteration_loss;
        const auto hit = std::find_if(loss.begin(), loss.end(), [](double v) { return v < 0.05; });
        const double secs = seconds_since(t0);
        o.check(hit != loss.end(), std::string(arch_name(a)) + " never below 0.05");
        o.check(secs < 300.0, std::string(arch_name(a)) + " over 5 min");
        o.detail << arch_display_name(a) << " <0.05 at it "
                 << (hit == loss.end() ? std::string("-") : std::to_string(hit - loss.begin() + 1)) << " (final "
                 << std::fixed << std::setprecision(4) << loss.back() << ", " << std::setprecision(0) << secs << " s); ";
    }
}

struct EndToEnd {
    fs::path corpus;
    fs::path run;
    std::string table;
};

bool end_to_end(const fs::path& dir, EndToEnd& e, Outcome& o) {
    e.corpus = dir / "corpus";
    e.run = dir / "run";
    fs::remove_all(dir);
    if (run_cli({"synth", "--out", e.corpus.string(), "--n-per-class", "40", "--clip-len", "30", "--seed", "7"}) != 0) {
        o.check(false, "synth");
        return false;
    }
    if (run_cli({"train", "--manifest", (e.corpus / "manifest.json").string(), "--out", e.run.string(), "--width-mult",
                 "0.125", "--input-hw", "64", "--epochs", "10", "--split-level", "clip", "--split-ratio", "0.85",
                 "--seed", "7", "--deterministic"},
                &e.table) != 0) {
        o.check(false, "train");
        return false;
    }
    return true;
}

void end_to_end_run(const fs::path& work, EndToEnd& e, Outcome& o) {
    if (!end_to_end(work / "e2e_a", e, o)) return;
    const DatasetManifest split = load_manifest(e.run / "split_manifest.json");
    o.check(straddling_sources(split).empty(), "clip-level split leaked a source");
    o.detail << "train/val " << split.count(Split::train) << "/" << split.count(Split::val) << "; ";
    for (Arch a : kAllArchs) {
        const fs::path d = e.run / std::string(arch_name(a));
        const auto report = nlohmann::json::parse(slurp(d / "report.json"));
        const double acc = report.at("best_val_accuracy").get<double>();
        o.check(acc >= 0.95, std::string(arch_name(a)) + " val accuracy");
        o.check(fs::exists(d / "loss.csv") && fs::exists(d / "loss.svg"), std::string(arch_name(a)) + " loss curve");
        o.detail << arch_display_name(a) << " " << std::fixed << std::setprecision(3) << acc << "; ";
    }
    o.check(fs::exists(e.run / "loss_curves.csv") && fs::exists(e.run / "loss_curves.svg"), "merged curves");
    o.check(e.table.rfind("Model\tAccuracy\n", 0) == 0 && slurp(e.run / "accuracy_table.txt") == e.table,
            "accuracy table");
}

void determinism(const fs::path& work, const EndToEnd& first, Outcome& o) {
    EndToEnd second;
    if (!end_to_end(work / "e2e_b", second, o)) return;
    o.check(slurp(first.corpus / "manifest.json") == slurp(second.corpus / "manifest.json"), "manifest");
    o.check(slurp(first.corpus / "happy/happy_0013.wav") == slurp(second.corpus / "happy/happy_0013.wav"), "audio");
    o.check(slurp(first.run / "loss_curves.csv") == slurp(second.run / "loss_curves.csv"), "loss sequences");
    o.check(first.table == second.table, "accuracy table");
    for (Arch a : kAllArchs) {
        const std::string n(arch_name(a));
        o.check(slurp(first.run / n / "report.json") == slurp(second.run / n / "report.json"), n + " report");
        o.check(slurp(first.run / n / "checkpoint.bin") == slurp(second.run / n / "checkpoint.bin"), n + " weights");
    }
    o.detail << "loss curves, reports, checkpoints byte-identical; ";
}

void formula_spot_values(Outcome& o) {
    const std::size_t targets[] = {0, 1};
    const double ce = cross_entropy(Tensor<double>({2, 2}, {0.3, 0.3, -2.0, -2.0}), targets).item();
    o.check(std::abs(ce - std::numbers::ln2) <= 1e-6, "cross-entropy");
    const double one_hot[] = {1.0, 0.0};
    const double half[] = {0.5, 0.5};
    o.check(entropy(one_hot) == 0.0, "entropy([1,0])");
    o.check(std::abs(entropy(half) - std::numbers::ln2) <= 1e-9, "entropy([.5,.5])");
    const Tensor<double> z({2, 3}, {0.1, -1.2, 3.0, 5.0, 5.5, -4.0});
    Tensor<double> shifted = z.detach();
    for (double& v : shifted.values()) v += 1000.0;
    const auto p = softmax(z), q = softmax(shifted);
    double worst = 0.0;
    for (std::size_t i = 0; i < 6; ++i) worst = std::max(worst, std::abs(p[i] - q[i]));
    o.check(worst <= 1e-6, "softmax shift invariance");
    o.detail << "CE " << std::setprecision(12) << ce << "; H(.5,.5) " << entropy(half) << "; shift diff "
             << std::scientific << std::setprecision(1) << worst << "; ";
}

void split_hygiene(Outcome& o) {
    DatasetManifest m;
    for (Emotion e : {Emotion::happy, Emotion::sad}) {
        for (std::size_t i = 0; i < 200; ++i) {
            std::ostringstream id;
            id << to_string(e) << '_' << std::setw(4) << std::setfill('0') << i;
            m.entries.push_back({std::string(to_string(e)) + "/" + id.str() + ".wav", e, id.str(), Split::unassigned,
                                 std::nullopt, std::nullopt});
        }
    }
    const DatasetManifest sliced = slice_manifest(m);
    std::set<std::string> val_sets;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const DatasetManifest s = split_dataset(sliced, 0.85, SplitLevel::clip, seed);
        o.check(straddling_sources(s).empty(), "seed " + std::to_string(seed) + " straddles");
        std::string ids;
        for (const auto& e : s.entries) {
            if (e.split == Split::val) ids += e.key();
        }
        val_sets.insert(ids);
    }
    o.check(val_sets.size() == 10, "seeds gave repeated splits");
    const DatasetManifest sub = split_dataset(sliced, 0.85, SplitLevel::subclip, 3);
    o.check(sub.entries.size() == 2000 && sub.count(Split::train) == 1700 && sub.count(Split::val) == 300,
            "subclip counts");
    o.detail << "10 clip-level seeds clean; subclip " << sub.count(Split::train) << "/" << sub.count(Split::val)
             << "; ";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app("Release acceptance checks", "acceptance");
    std::string work = (fs::temp_directory_path() / "mer_acceptance").string();
    std::vector<int> only;
    app.add_option("--work-dir", work, "Scratch directory for the end-to-end runs");
    app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 8));
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work);

    EndToEnd first;
    struct Criterion {
        int id;
        const char* name;
        double budget_s;
        std::function<void(Outcome&)> run;
    };
    const std::vector<Criterion> criteria{
        {1, "dsp golden suite", 10.0, dsp_golden},
        {2, "gradient verification", 300.0, gradient_verification},
        {3, "architecture fidelity", 1e9, architecture_fidelity},
        {4, "memorization", 1e9, memorization},
        {5, "end-to-end synthetic run", 1800.0, [&](Outcome& o) { end_to_end_run(work, first, o); }},
        {6, "determinism", 1800.0,
         [&](Outcome& o) {
             if (first.table.empty()) end_to_end(fs::path(work) / "e2e_a", first, o);
             determinism(work, first, o);
         }},
        {7, "formula spot values", 1e9, formula_spot_values},
        {8, "split hygiene", 1e9, split_hygiene},
    };

    bool all = true;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        Outcome o;
        const auto t0 = Clock::now();
        try {
            c.run(o);
        } catch (const std::exception& e) {
            o.check(false, std::string("exception: ") + e.what());
        }
        const double secs = seconds_since(t0);
        o.check(secs < c.budget_s, "runtime budget");
        all = all && o.passed;
        std::cout << "criterion " << c.id << " " << c.name << ": " << (o.passed ? "PASS" : "FAIL") << " ("
                  << std::fixed << std::setprecision(1) << secs << " s) " << o.detail.str() << std::endl;
    }
    return all ? 0 : 1;
}

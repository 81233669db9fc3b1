#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mer/arch.hpp"
#include "mer/audio.hpp"
#include "mer/checkpoint.hpp"
#include "mer/dsp.hpp"
#include "mer/image_io.hpp"
#include "mer/manifest.hpp"
#include "mer/synth.hpp"
#include "mer/trainer.hpp"
#include "mer/verify.hpp"

namespace mer {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CliOptions {
    std::string config_path;
    std::uint64_t seed = 0;
    std::vector<std::string> archs;
    double width_mult = 1.0;
    std::size_t input_hw = 224;
    std::size_t epochs = 10;
    std::size_t batch = 16;
    double lr = 1e-3;
    std::string optimizer = "adam";
    double momentum = 0.0;
    std::string split_level = "clip";
    double split_ratio = 0.85;
    bool deterministic = true;
    std::string out;
    bool verbose = false;

    std::size_t n_per_class = 200;
    double clip_len_s = 30.0;
    std::uint32_t sample_rate = 44100;
    std::string dir;
    std::string manifest;
    std::string wav;
    std::vector<std::string> checkpoints;
    std::string split = "val";
    double offset_s = 0.0;
    std::optional<double> duration_s;
    std::size_t n_mels = 128;
    std::size_t win = 2048;
    std::size_t hop = 512;
    std::size_t trials = 20;
    bool skip_archs = false;
};

namespace cli_detail {

inline const std::vector<std::string>& arch_choices() {
    static const std::vector<std::string> v{"vgg16", "resnet18", "squeezenet", "squeezenet_v10", "mobilenet_v2"};
    return v;
}

inline void add_common(CLI::App* sub, CliOptions& o) {
    sub->add_option("--config", o.config_path, "JSON file of option values; explicit flags take precedence")
        ->check(CLI::ExistingFile);
    sub->add_flag("--verbose", o.verbose, "Print the resolved configuration and progress");
}

inline void add_model_flags(CLI::App* sub, CliOptions& o) {
    sub->add_option("--arch", o.archs, "Architecture (repeatable)")->check(CLI::IsMember(arch_choices()));
    sub->add_option("--width-mult", o.width_mult, "Channel width multiplier")->check(CLI::PositiveNumber);
    sub->add_option("--input-hw", o.input_hw, "Square input image size")->check(CLI::PositiveNumber);
}

inline void add_seed(CLI::App* sub, CliOptions& o) { sub->add_option("--seed", o.seed, "Random seed"); }

inline std::unique_ptr<CLI::App> make_app(CliOptions& o) {
    auto app = std::make_unique<CLI::App>("Music emotion recognition on mel-spectrograms", "mer");
    app->require_subcommand(1);
    app->failure_message(CLI::FailureMessage::help);
    app->option_defaults()->always_capture_default();

    auto* synth = app->add_subcommand("synth", "Generate a synthetic happy/sad corpus");
    add_common(synth, o);
    add_seed(synth, o);
    synth->add_option("--out", o.out, "Output directory")->required();
    synth->add_option("--n-per-class", o.n_per_class, "Clips per class")->check(CLI::PositiveNumber);
    synth->add_option("--clip-len", o.clip_len_s, "Clip length in seconds")->check(CLI::PositiveNumber);
    synth->add_option("--sample-rate", o.sample_rate, "Sample rate in Hz")->check(CLI::PositiveNumber);

    auto* ingest = app->add_subcommand("ingest", "Build a manifest from happy/ and sad/ subdirectories of WAVs");
    add_common(ingest, o);
    add_seed(ingest, o);
    ingest->add_option("--dir", o.dir, "Corpus root")->required()->check(CLI::ExistingDirectory);
    ingest->add_option("--out", o.out, "Manifest path (default <dir>/manifest.json)");
    ingest->add_option("--sample-rate", o.sample_rate, "Pipeline sample rate in Hz")->check(CLI::PositiveNumber);

    auto* spect = app->add_subcommand("spectrogram", "Write the log-mel spectrogram of one WAV as CSV and PNG");
    add_common(spect, o);
    spect->add_option("--wav", o.wav, "Input WAV")->required()->check(CLI::ExistingFile);
    spect->add_option("--out", o.out, "Output directory")->required();
    spect->add_option("--offset", o.offset_s, "Window start in seconds")->check(CLI::NonNegativeNumber);
    spect->add_option("--duration", o.duration_s, "Window length in seconds (default: to the end)")
        ->check(CLI::PositiveNumber);
    spect->add_option("--n-mels", o.n_mels, "Mel bands")->check(CLI::PositiveNumber);
    spect->add_option("--win", o.win, "Window length in samples")->check(CLI::PositiveNumber);
    spect->add_option("--hop", o.hop, "Hop in samples")->check(CLI::PositiveNumber);

    auto* train = app->add_subcommand("train", "Train one or more models on a manifest");
    add_common(train, o);
    add_seed(train, o);
    add_model_flags(train, o);
    train->add_option("--manifest", o.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    train->add_option("--out", o.out, "Output directory")->required();
    train->add_option("--epochs", o.epochs, "Training epochs");
    train->add_option("--batch", o.batch, "Mini-batch size")->check(CLI::PositiveNumber);
    train->add_option("--lr", o.lr, "Learning rate")->check(CLI::PositiveNumber);
    train->add_option("--optimizer", o.optimizer, "Optimizer")->check(CLI::IsMember({"adam", "sgd"}));
    train->add_option("--momentum", o.momentum, "SGD momentum")->check(CLI::Range(0.0, 0.999999));
    train->add_option("--split-level", o.split_level, "Split granularity")->check(CLI::IsMember({"clip", "subclip"}));
    train->add_option("--split-ratio", o.split_ratio, "Training fraction")->check(CLI::Range(1e-9, 1.0 - 1e-9));
    train->add_flag("--deterministic,!--no-deterministic", o.deterministic, "Serialize all work");

    auto* eval = app->add_subcommand("eval", "Score checkpoints on a manifest split");
    add_common(eval, o);
    eval->add_option("--checkpoint", o.checkpoints, "Checkpoint (repeatable)")->required()->check(CLI::ExistingFile);
    eval->add_option("--manifest", o.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    eval->add_option("--split", o.split, "Split to score")->check(CLI::IsMember({"train", "val", "all"}));
    eval->add_option("--out", o.out, "Also write the table to this file");

    auto* predict = app->add_subcommand("predict", "Classify one WAV");
    add_common(predict, o);
    predict->add_option("--checkpoint", o.checkpoints, "Checkpoint")->required()->expected(1)->check(
        CLI::ExistingFile);
    predict->add_option("--wav", o.wav, "Input WAV")->required()->check(CLI::ExistingFile);
    predict->add_option("--offset", o.offset_s, "Window start in seconds")->check(CLI::NonNegativeNumber);

    auto* grad = app->add_subcommand("gradcheck", "Run the finite-difference gradient verification suite");
    add_common(grad, o);
    add_seed(grad, o);
    add_model_flags(grad, o);
    grad->add_option("--trials", o.trials, "Random trials per op")->check(CLI::PositiveNumber);
    grad->add_flag("--skip-archs", o.skip_archs, "Check ops only");
    return app;
}

inline std::string option_key(const CLI::Option* opt) {
    const auto& l = opt->get_lnames();
    return l.empty() ? opt->get_name() : l.front();
}

/// Command-line tokens for one config entry.
inline std::vector<std::string> config_tokens(const CLI::Option* opt, const nlohmann::json& v) {
    const std::string flag = "--" + option_key(opt);
    if (opt->get_expected_max() == 0) {
        if (!v.is_boolean()) throw UsageError("config key '" + option_key(opt) + "' expects true or false");
        if (v.get<bool>()) return {flag};
        if (opt->check_fname("no-" + option_key(opt))) return {"--no-" + option_key(opt)};
        return {};
    }
    const auto scalar = [&](const nlohmann::json& s) {
        if (s.is_string()) return s.get<std::string>();
        if (s.is_number() || s.is_boolean()) return s.dump();
        throw UsageError("config key '" + option_key(opt) + "' has an unsupported value");
    };
    std::vector<std::string> out;
    if (v.is_array()) {
        for (const auto& e : v) {
            out.push_back(flag);
            out.push_back(scalar(e));
        }
    } else {
        out.push_back(flag);
        out.push_back(scalar(v));
    }
    return out;
}

inline nlohmann::json effective_config(const CLI::App* sub) {
    nlohmann::json j = nlohmann::json::object();
    for (const CLI::Option* opt : sub->get_options()) {
        const std::string key = option_key(opt);
        if (key == "help" || key == "config") continue;
        if (opt->get_expected_max() == 0) {
            j[key] = opt->count() > 0 ? opt->as<bool>() : (opt->get_default_str() == "true");
        } else if (opt->count() > 0) {
            const auto& r = opt->results();
            j[key] = opt->get_items_expected_max() > 1 ? nlohmann::json(r) : nlohmann::json(r.back());
        } else {
            j[key] = opt->get_default_str();
        }
    }
    return j;
}

inline std::filesystem::path ensure_dir(const std::string& p) {
    std::filesystem::create_directories(p);
    return p;
}

inline std::vector<Arch> selected_archs(const CliOptions& o) {
    std::vector<Arch> out;
    if (o.archs.empty()) return {kAllArchs.begin(), kAllArchs.end()};
    for (const auto& name : o.archs) {
        const auto a = parse_arch(name);
        if (!a) throw UsageError("unknown architecture '" + name + "'");
        if (std::find(out.begin(), out.end(), *a) == out.end()) out.push_back(*a);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int run_synth(const CliOptions& o, std::ostream& out) {
    SynthConfig cfg{o.n_per_class, o.clip_len_s, o.sample_rate, o.seed};
    const auto m = generate_dataset(cfg, ensure_dir(o.out));
    out << "wrote " << m.entries.size() << " clips and manifest.json to " << o.out << '\n';
    return 0;
}

inline int run_ingest(const CliOptions& o, std::ostream& out) {
    const std::filesystem::path root(o.dir);
    const std::filesystem::path manifest_path = o.out.empty() ? root / "manifest.json" : std::filesystem::path(o.out);
    DatasetManifest m;
    m.metadata = {o.sample_rate, "mer ingest", o.seed};
    m.base_dir = manifest_path.parent_path();
    for (std::size_t c = 0; c < kNumEmotions; ++c) {
        const auto label = static_cast<Emotion>(c);
        const auto dir = root / std::string(to_string(label));
        if (!std::filesystem::is_directory(dir)) throw ManifestError("missing label directory " + dir.string());
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::directory_iterator(dir)) {
            auto ext = e.path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
            if (e.is_regular_file() && ext == ".wav") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const AudioClip clip = read_wav(f);
            validate(clip);
            const auto abs = std::filesystem::absolute(f);
            const auto base = std::filesystem::absolute(m.base_dir.empty() ? "." : m.base_dir);
            m.entries.push_back({abs.lexically_proximate(base).generic_string(), label,
                                 std::string(to_string(label)) + "/" + f.stem().string(), Split::unassigned,
                                 std::nullopt, std::nullopt});
        }
    }
    m.validate();
    if (!m.base_dir.empty()) std::filesystem::create_directories(m.base_dir);
    save_manifest(m, manifest_path);
    out << "wrote " << m.entries.size() << " entries to " << manifest_path.string() << '\n';
    return 0;
}

inline int run_spectrogram(const CliOptions& o, std::ostream& out) {
    AudioClip clip = read_wav(o.wav);
    if (o.offset_s > 0.0 || o.duration_s) {
        const auto first = static_cast<std::size_t>(std::llround(o.offset_s * clip.sample_rate_hz));
        const std::size_t len = o.duration_s
                                    ? static_cast<std::size_t>(std::llround(*o.duration_s * clip.sample_rate_hz))
                                    : clip.samples.size() - std::min(first, clip.samples.size());
        if (first + len > clip.samples.size() || len == 0) throw AudioError(o.wav + ": window exceeds the clip");
        clip.samples = std::vector<double>(clip.samples.begin() + static_cast<std::ptrdiff_t>(first),
                                           clip.samples.begin() + static_cast<std::ptrdiff_t>(first + len));
    }
    SpectrogramParams p;
    p.n_mels = o.n_mels;
    p.win = o.win;
    p.hop = o.hop;
    const MelSpectrogram mel = log_mel_spectrogram(clip, p);
    const auto dir = ensure_dir(o.out);
    const std::string stem = std::filesystem::path(o.wav).stem().string();
    write_matrix_csv(dir / (stem + "_mel.csv"), mel.values);
    write_spectrogram_png(dir / (stem + "_mel.png"), mel.values);
    out << "wrote " << mel.values.rows << " frames x " << mel.values.cols << " mel bands to "
        << (dir / (stem + "_mel.csv")).string() << " and .png\n";
    return 0;
}

inline int run_train(const CliOptions& o, std::ostream& out, std::ostream& err) {
    DatasetManifest m = load_manifest(o.manifest);
    const bool sliced = std::all_of(m.entries.begin(), m.entries.end(), [](const auto& e) { return e.offset_s.has_value(); });
    if (!sliced) m = slice_manifest(m);
    const auto level = parse_split_level(o.split_level);
    if (!level) throw UsageError("unknown split level '" + o.split_level + "'");
    if (m.count(Split::unassigned) == m.entries.size()) {
        m = split_dataset(m, o.split_ratio, *level, o.seed);
    } else if (m.count(Split::unassigned) != 0) {
        throw ManifestError(o.manifest + ": manifest is partially split");
    }
    const auto dir = ensure_dir(o.out);
    save_manifest(rebase_manifest(m, dir), dir / "split_manifest.json");

    TrainConfig base;
    base.optimizer.kind = o.optimizer == "sgd" ? OptimizerConfig::Kind::sgd : OptimizerConfig::Kind::adam;
    base.optimizer.lr = o.lr;
    base.optimizer.momentum = o.momentum;
    base.batch_size = o.batch;
    base.epochs = o.epochs;
    base.seed = o.seed;
    base.split_ratio = o.split_ratio;
    base.split_level = *level;
    base.deterministic = o.deterministic;
    base.arch = ArchSpec{Arch::vgg16, o.width_mult, o.input_hw};
    base.validate();

    const FeatureSet train_set = load_features(m, Split::train, base.dsp, o.input_hw);
    const FeatureSet val_set = load_features(m, Split::val, base.dsp, o.input_hw);
    if (o.verbose) {
        err << "train " << train_set.size() << " / val " << val_set.size() << " sub-clips\n";
    }
    const InputPipeline pipeline{base.dsp, 5.0, m.metadata.sample_rate};

    std::vector<LossCurve> curves;
    std::vector<std::pair<std::string, double>> table;
    for (Arch a : selected_archs(o)) {
        TrainConfig cfg = base;
        cfg.arch.arch = a;
        ProgressFn progress;
        if (o.verbose) progress = [&err](const std::string& line) { err << line << '\n'; };
        TrainResult r = train(cfg, train_set, &val_set, progress);
        const auto mdir = ensure_dir((dir / std::string(arch_name(a))).string());
        save_checkpoint(r.model, mdir / "checkpoint.bin", pipeline);
        if (!r.report.empty()) export_loss_curve(r.report, mdir / "loss.csv", mdir / "loss.svg");
        write_accuracy_csv(r.report, mdir / "val_accuracy.csv");
        {
            std::ofstream rep(mdir / "report.json");
            rep << to_json(r.report).dump(2) << '\n';
            std::ofstream timing(mdir / "epoch_seconds.csv");
            timing << "epoch,seconds\n";
            for (std::size_t i = 0; i < r.report.epoch_seconds.size(); ++i) {
                timing << i + 1 << ',' << r.report.epoch_seconds[i] << '\n';
            }
        }
        curves.push_back({r.report.model_name, r.report.iteration_loss});
        table.emplace_back(r.report.model_name, r.report.best_val_accuracy);
    }
    if (std::all_of(curves.begin(), curves.end(), [](const auto& c) { return !c.losses.empty(); })) {
        export_merged_loss_curves(curves, dir / "loss_curves.csv", dir / "loss_curves.svg");
    }
    const std::string text = format_accuracy_table(table);
    std::ofstream(dir / "accuracy_table.txt") << text;
    out << text;
    return 0;
}

inline int run_eval(const CliOptions& o, std::ostream& out) {
    const DatasetManifest loaded = load_manifest(o.manifest);
    std::vector<std::pair<std::string, double>> table;
    for (const auto& path : o.checkpoints) {
        auto ck = load_checkpoint<float>(path);
        DatasetManifest m = loaded;
        if (!std::all_of(m.entries.begin(), m.entries.end(), [](const auto& e) { return e.offset_s.has_value(); })) {
            m = slice_manifest(m, ck.pipeline.sub_clip_s);
        }
        const std::optional<Split> split = o.split == "all" ? std::nullopt : std::optional(parse_split(o.split));
        const FeatureSet fs = load_features(m, split, ck.pipeline.dsp, ck.model.spec().input_hw);
        if (fs.size() == 0) throw TrainError(o.manifest + ": split '" + o.split + "' is empty");
        const Evaluation ev = evaluate(ck.model, fs);
        table.emplace_back(std::string(arch_display_name(ck.model.spec().arch)), ev.accuracy);
    }
    const std::string text = format_accuracy_table(table);
    out << text;
    if (!o.out.empty()) {
        std::ofstream f(o.out);
        if (!f) throw TrainError("cannot write " + o.out);
        f << text;
    }
    return 0;
}

inline int run_predict(const CliOptions& o, std::ostream& out) {
    auto ck = load_checkpoint<float>(o.checkpoints.front());
    AudioClip clip = read_wav(o.wav);
    if (clip.sample_rate_hz != ck.pipeline.sample_rate_hz) clip = resample(clip, ck.pipeline.sample_rate_hz);
    const auto first = static_cast<std::size_t>(std::llround(o.offset_s * clip.sample_rate_hz));
    const auto len = static_cast<std::size_t>(std::llround(ck.pipeline.sub_clip_s * clip.sample_rate_hz));
    if (first + len > clip.samples.size()) {
        throw AudioError(o.wav + ": clip too short for a " + std::to_string(ck.pipeline.sub_clip_s) +
                         " s window at offset " + std::to_string(o.offset_s) + " s");
    }
    clip.samples = std::vector<double>(clip.samples.begin() + static_cast<std::ptrdiff_t>(first),
                                       clip.samples.begin() + static_cast<std::ptrdiff_t>(first + len));
    const ModelInput in = extract_features(clip, ck.pipeline.dsp, ck.model.spec().input_hw, ck.model.spec().input_hw);
    const Prediction p = predict(ck.model, in);
    out << std::fixed << std::setprecision(6);
    out << "label: " << to_string(p.label) << '\n';
    out << "p(happy): " << p.probabilities[0] << '\n';
    out << "p(sad): " << p.probabilities[1] << '\n';
    out << "entropy_nats: " << p.entropy_nats << '\n';
    return 0;
}

inline int run_gradcheck(const CliOptions& o, const CLI::App* sub, std::ostream& out) {
    VerifyOptions v;
    v.trials = o.trials;
    v.seed = o.seed == 0 ? 1 : o.seed;
    v.archs = !o.skip_archs;
    v.arch_width = sub->get_option("--width-mult")->count() ? o.width_mult : 0.125;
    v.arch_input_hw = sub->get_option("--input-hw")->count() ? o.input_hw : 64;
    const auto archs = selected_archs(o);
    bool ok = true;
    const auto print = [&](const VerifyRow& r) {
        out << std::left << std::setw(20) << r.name << std::scientific << std::setprecision(3) << r.max_rel_error
            << "  " << (r.passed ? "PASS" : "FAIL") << '\n';
        ok = ok && r.passed;
    };
    v.on_row = print;
    if (v.archs && !o.archs.empty()) {
        v.archs = false;
        run_gradient_suite(v);
        for (Arch a : archs) print(verify_architecture(a, v));
    } else {
        run_gradient_suite(v);
    }
    return ok ? 0 : 2;
}

}  // namespace cli_detail

/// Parses argv and runs the chosen subcommand.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CliOptions o;
    auto app = cli_detail::make_app(o);
    try {
        app->parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app->exit(e, out, err) == 0 ? 0 : 1;
    }

    try {
        CLI::App* sub = app->get_subcommands().front();
        if (!o.config_path.empty()) {
            nlohmann::json cfg;
            {
                std::ifstream in(o.config_path);
                try {
                    cfg = nlohmann::json::parse(in);
                } catch (const nlohmann::json::exception& e) {
                    throw UsageError(o.config_path + ": " + e.what());
                }
            }
            if (!cfg.is_object()) throw UsageError(o.config_path + ": config must be a JSON object");
            std::vector<std::string> args{argv[0], sub->get_name()};
            for (const auto& [key, value] : cfg.items()) {
                std::string flag = key;
                std::replace(flag.begin(), flag.end(), '_', '-');
                const CLI::Option* opt = sub->get_option_no_throw("--" + flag);
                if (!opt || flag == "config" || flag == "help") {
                    throw UsageError(o.config_path + ": unknown config key '" + key + "' for " + sub->get_name());
                }
                if (opt->count() > 0) continue;  // explicit flag wins
                for (auto& t : cli_detail::config_tokens(opt, value)) args.push_back(std::move(t));
            }
            for (int i = 2; i < argc; ++i) args.emplace_back(argv[i]);
            std::vector<const char*> merged;
            for (const auto& a : args) merged.push_back(a.c_str());
            o = CliOptions{};
            app = cli_detail::make_app(o);
            try {
                app->parse(static_cast<int>(merged.size()), merged.data());
            } catch (const CLI::ParseError& e) {
                err << o.config_path << ": ";
                return app->exit(e, out, err) == 0 ? 0 : 1;
            }
            sub = app->get_subcommands().front();
        }
        if (o.verbose) err << "config " << cli_detail::effective_config(sub).dump() << '\n';

        const std::string name = sub->get_name();
        if (name == "synth") return cli_detail::run_synth(o, out);
        if (name == "ingest") return cli_detail::run_ingest(o, out);
        if (name == "spectrogram") return cli_detail::run_spectrogram(o, out);
        if (name == "train") return cli_detail::run_train(o, out, err);
        if (name == "eval") return cli_detail::run_eval(o, out);
        if (name == "predict") return cli_detail::run_predict(o, out);
        if (name == "gradcheck") return cli_detail::run_gradcheck(o, sub, out);
        err << app->help();
        return 1;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
}

}  // namespace mer

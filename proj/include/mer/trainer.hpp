#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mer/arch.hpp"
#include "mer/audio.hpp"
#include "mer/checkpoint.hpp"
#include "mer/dsp.hpp"
#include "mer/manifest.hpp"
#include "mer/metrics.hpp"
#include "mer/optim.hpp"

namespace mer {

class TrainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    ArchSpec arch{Arch::squeezenet_v10, 0.125, 64};
    OptimizerConfig optimizer;
    std::size_t batch_size = 16;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    double split_ratio = 0.85;
    SplitLevel split_level = SplitLevel::clip;
    SpectrogramParams dsp;
    // Every stage already runs serially, so this is always honoured; the flag is
    // kept so configs and reports record the requested mode.
    bool deterministic = true;

    void validate() const {
        arch.validate();
        optimizer.validate();
        if (batch_size == 0) throw TrainError("batch size must be positive");
        if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw TrainError("split ratio must lie in (0, 1)");
    }
};

struct TrainReport {
    std::string model_name;
    std::vector<double> iteration_loss;
    std::vector<double> epoch_val_accuracy;
    std::vector<double> epoch_seconds;
    ConfusionMatrix confusion{};
    std::size_t best_epoch = 0;  // 1-based; 0 when nothing was selected
    double best_val_accuracy = 0.0;

    bool empty() const { return iteration_loss.empty(); }
};

// ---------------------------------------------------------------------------
// Features

/// Single-channel standardized images with their labels. Batches replicate
/// the channel three times on the way into the network.
struct FeatureSet {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> images;  // size() x height x width
    std::vector<Emotion> labels;
    std::vector<std::string> source_ids;

    std::size_t size() const { return labels.size(); }
    std::size_t plane() const { return height * width; }

    void add(const ModelInput& in, Emotion label, std::string source_id) {
        if (size() == 0) {
            height = in.height;
            width = in.width;
        } else if (in.height != height || in.width != width) {
            throw ShapeError("feature set images differ in size");
        }
        const auto c0 = in.channel(0);
        images.insert(images.end(), c0.begin(), c0.end());
        labels.push_back(label);
        source_ids.push_back(std::move(source_id));
    }

    ModelInput input(std::size_t i) const {
        ModelInput in{height, width, std::vector<float>(3 * plane())};
        for (std::size_t c = 0; c < 3; ++c) {
            std::copy_n(images.begin() + static_cast<std::ptrdiff_t>(i * plane()), plane(),
                        in.pixels.begin() + static_cast<std::ptrdiff_t>(c * plane()));
        }
        return in;
    }

    template <typename T>
    Tensor<T> batch(std::span<const std::size_t> idx) const {
        if (idx.empty()) throw ShapeError("empty batch");
        std::vector<T> v(idx.size() * 3 * plane());
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const float* src = images.data() + idx[b] * plane();
            for (std::size_t c = 0; c < 3; ++c) {
                std::copy_n(src, plane(), v.begin() + static_cast<std::ptrdiff_t>((b * 3 + c) * plane()));
            }
        }
        return Tensor<T>({idx.size(), 3, height, width}, std::move(v));
    }

    FeatureSet subset(std::span<const std::size_t> idx) const {
        FeatureSet out;
        out.height = height;
        out.width = width;
        for (std::size_t i : idx) {
            out.images.insert(out.images.end(), images.begin() + static_cast<std::ptrdiff_t>(i * plane()),
                              images.begin() + static_cast<std::ptrdiff_t>((i + 1) * plane()));
            out.labels.push_back(labels[i]);
            out.source_ids.push_back(source_ids[i]);
        }
        return out;
    }
};

/// Decodes the audio behind one manifest entry at the manifest's sample rate,
/// cut to the entry's window when it has one. `cache` keeps the most recently
/// decoded file so consecutive sub-clips of one file decode it once.
inline AudioClip load_entry_audio(const DatasetManifest& m, const ManifestEntry& e,
                                  std::pair<std::string, AudioClip>* cache = nullptr) {
    const auto path = m.resolve(e);
    AudioClip full;
    if (cache && cache->first == path.string()) {
        full = cache->second;
    } else {
        try {
            full = read_wav(path);
            if (full.sample_rate_hz != m.metadata.sample_rate) full = resample(full, m.metadata.sample_rate);
        } catch (const AudioError& err) {
            throw TrainError(path.string() + ": " + err.what());
        }
        if (cache) *cache = {path.string(), full};
    }
    full.label = e.label;
    full.source_id = e.source_id;
    if (!e.offset_s) return full;

    const double dur = e.duration_s.value_or(full.duration_s() - *e.offset_s);
    const auto first = static_cast<std::size_t>(std::llround(*e.offset_s * full.sample_rate_hz));
    const auto len = static_cast<std::size_t>(std::llround(dur * full.sample_rate_hz));
    if (len == 0 || first + len > full.samples.size()) {
        throw TrainError(path.string() + ": clip too short for window at " + std::to_string(*e.offset_s) + " s");
    }
    AudioClip sub;
    sub.sample_rate_hz = full.sample_rate_hz;
    sub.label = e.label;
    sub.source_id = e.source_id;
    sub.offset_s = *e.offset_s;
    sub.samples.assign(full.samples.begin() + static_cast<std::ptrdiff_t>(first),
                       full.samples.begin() + static_cast<std::ptrdiff_t>(first + len));
    return sub;
}

/// Features for every entry in `split` (all entries when nullopt).
inline FeatureSet load_features(const DatasetManifest& m, std::optional<Split> split, const SpectrogramParams& dsp,
                                std::size_t input_hw) {
    FeatureSet fs;
    std::pair<std::string, AudioClip> cache;
    for (const auto& e : m.entries) {
        if (split && e.split != *split) continue;
        const AudioClip clip = load_entry_audio(m, e, &cache);
        try {
            fs.add(extract_features(clip, dsp, input_hw, input_hw), e.label, e.source_id);
        } catch (const DspError& err) {
            throw TrainError(m.resolve(e).string() + ": " + err.what());
        }
    }
    return fs;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Scores a model in eval mode over a feature set.
template <typename T>
Evaluation evaluate(Model<T>& model, const FeatureSet& data, std::size_t batch_size = 32) {
    if (model.mode() != Mode::eval) throw ModeError("evaluate needs a model in eval mode");
    if (data.size() == 0) throw TrainError("evaluate: empty split");
    NoGradGuard guard;
    std::vector<std::array<double, 2>> logits;
    logits.reserve(data.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        idx.resize(std::min(batch_size, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const Tensor<T> y = model.forward(data.template batch<T>(idx));
        for (std::size_t b = 0; b < idx.size(); ++b) {
            logits.push_back({static_cast<double>(y[2 * b]), static_cast<double>(y[2 * b + 1])});
        }
    }
    return evaluate_logits(logits, data.labels);
}

template <typename T>
Evaluation evaluate(Model<T>& model, const DatasetManifest& m, Split split, const SpectrogramParams& dsp) {
    const FeatureSet fs = load_features(m, split, dsp, model.spec().input_hw);
    if (fs.size() == 0) throw TrainError("evaluate: split '" + std::string(to_string(split)) + "' is empty");
    return evaluate(model, fs);
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
    Model<float> model;
    TrainReport report;
};

using ProgressFn = std::function<void(const std::string&)>;

namespace detail {

/// Consecutive slices of `order`; a trailing batch of one joins the previous
/// batch because batch normalization cannot train on a single sample.
inline std::vector<std::span<const std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                               std::size_t batch_size) {
    std::vector<std::span<const std::size_t>> out;
    const std::span<const std::size_t> all(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::size_t len = std::min(batch_size, order.size() - start);
        if (order.size() - start - len == 1) ++len;
        out.push_back(all.subspan(start, len));
        if (start + len == order.size()) break;
    }
    return out;
}

}  // namespace detail

/// Trains a fresh emotion model. Without a validation set the final epoch's
/// weights are kept; with one, the epoch with the best validation accuracy
/// (earliest on ties).
inline TrainResult train(const TrainConfig& cfg, const FeatureSet& train_set, const FeatureSet* val_set,
                         const ProgressFn& progress = {}) {
    cfg.validate();
    if (train_set.size() == 0) throw TrainError("training split is empty");
    if (train_set.height != cfg.arch.input_hw || train_set.width != cfg.arch.input_hw) {
        throw TrainError("features are " + std::to_string(train_set.height) + "x" + std::to_string(train_set.width) +
                         " but the model expects " + std::to_string(cfg.arch.input_hw));
    }

    TrainResult result{build_emotion_model<float>(cfg.arch, cfg.seed), {}};
    Model<float>& model = result.model;
    TrainReport& report = result.report;
    report.model_name = std::string(arch_display_name(cfg.arch.arch));
    model.reseed(cfg.seed + 1);
    Optimizer<float> opt(model.parameters(), cfg.optimizer);
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5DEECE66DULL);

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<std::size_t> targets;
    auto best = model.snapshot();
    double best_acc = -1.0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        detail::seeded_shuffle(order, shuffle_rng);
        model.set_mode(Mode::train);
        for (auto batch : detail::make_batches(order, cfg.batch_size)) {
            targets.clear();
            for (std::size_t i : batch) targets.push_back(static_cast<std::size_t>(train_set.labels[i]));
            const Tensor<float> loss = cross_entropy(model.forward(train_set.batch<float>(batch)),
                                                     std::span<const std::size_t>(targets));
            const double value = loss.item();
            if (!std::isfinite(value)) {
                throw TrainError("non-finite loss at iteration " + std::to_string(report.iteration_loss.size() + 1));
            }
            opt.zero_grad();
            loss.backward();
            opt.step();
            report.iteration_loss.push_back(value);
        }

        model.set_mode(Mode::eval);
        std::ostringstream msg;
        msg << report.model_name << " epoch " << epoch << "/" << cfg.epochs << " loss "
            << report.iteration_loss.back();
        if (val_set && val_set->size() > 0) {
            const double acc = evaluate(model, *val_set).accuracy;
            report.epoch_val_accuracy.push_back(acc);
            msg << " val_acc " << acc;
            if (acc > best_acc) {
                best_acc = acc;
                best = model.snapshot();
                report.best_epoch = epoch;
            }
        } else {
            best = model.snapshot();
            report.best_epoch = epoch;
        }
        report.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        if (progress) progress(msg.str());
    }

    model.restore(best);
    model.set_mode(Mode::eval);
    if (val_set && val_set->size() > 0 && cfg.epochs > 0) {
        const Evaluation ev = evaluate(model, *val_set);
        report.confusion = ev.confusion;
        report.best_val_accuracy = ev.accuracy;
    }
    return result;
}

/// Trains on the manifest's train split and selects on its val split.
inline TrainResult train(const TrainConfig& cfg, const DatasetManifest& m, const ProgressFn& progress = {}) {
    if (m.count(Split::unassigned) != 0) throw TrainError("manifest split is not assigned");
    const FeatureSet tr = load_features(m, Split::train, cfg.dsp, cfg.arch.input_hw);
    const FeatureSet va = load_features(m, Split::val, cfg.dsp, cfg.arch.input_hw);
    return train(cfg, tr, &va, progress);
}

// ---------------------------------------------------------------------------
// Reports

struct LossCurve {
    std::string name;
    std::vector<double> losses;
};

namespace detail {

inline std::ofstream open_report(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw TrainError("cannot write " + path.string());
    out << std::setprecision(std::numeric_limits<double>::max_digits10);
    return out;
}

}  // namespace detail

inline void write_loss_csv(const std::vector<double>& losses, const std::filesystem::path& path) {
    auto out = detail::open_report(path);
    out << "iteration,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) out << i + 1 << ',' << losses[i] << '\n';
}

inline void write_accuracy_csv(const TrainReport& r, const std::filesystem::path& path) {
    auto out = detail::open_report(path);
    out << "epoch,val_accuracy\n";
    for (std::size_t i = 0; i < r.epoch_val_accuracy.size(); ++i) out << i + 1 << ',' << r.epoch_val_accuracy[i] << '\n';
}

/// Line plot of loss against iteration with one polyline per curve.
inline std::string loss_curves_svg(const std::vector<LossCurve>& curves) {
    constexpr double W = 800, H = 480, left = 70, right = 170, top = 30, bottom = 60;
    constexpr std::array<const char*, 6> colors{"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    std::size_t max_iter = 1;
    double max_loss = 0.0;
    for (const auto& c : curves) {
        max_iter = std::max(max_iter, c.losses.size());
        for (double v : c.losses) max_loss = std::max(max_loss, v);
    }
    if (max_loss <= 0.0) max_loss = 1.0;
    const double pw = W - left - right, ph = H - top - bottom;
    const auto px = [&](std::size_t it) {
        return left + (max_iter > 1 ? pw * static_cast<double>(it - 1) / static_cast<double>(max_iter - 1) : 0.0);
    };
    const auto py = [&](double v) { return top + ph * (1.0 - v / max_loss); };

    std::ostringstream s;
    s << std::fixed << std::setprecision(3);
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">iteration</text>\n";
    s << "<text x=\"20\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 20 "
      << top + ph / 2 << ")\">loss</text>\n";
    s << "<text x=\"" << left << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">1</text>\n";
    s << "<text x=\"" << left + pw << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << max_iter
      << "</text>\n";
    s << "<text x=\"" << left - 6 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\">" << max_loss << "</text>\n";
    s << "<text x=\"" << left - 6 << "\" y=\"" << top + ph + 4 << "\" text-anchor=\"end\">0</text>\n";
    for (std::size_t k = 0; k < curves.size(); ++k) {
        const char* color = colors[k % colors.size()];
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" data-model=\"" << curves[k].name
          << "\" points=\"";
        for (std::size_t i = 0; i < curves[k].losses.size(); ++i) {
            s << (i ? " " : "") << px(i + 1) << ',' << py(curves[k].losses[i]);
        }
        s << "\"/>\n";
        const double ly = top + 20.0 * static_cast<double>(k);
        s << "<line x1=\"" << W - right + 15 << "\" y1=\"" << ly << "\" x2=\"" << W - right + 40 << "\" y2=\"" << ly
          << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        s << "<text x=\"" << W - right + 45 << "\" y=\"" << ly + 4 << "\">" << curves[k].name << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

/// CSV (iteration, loss) and SVG plot for one run.
inline void export_loss_curve(const TrainReport& r, const std::filesystem::path& csv_path,
                              const std::filesystem::path& svg_path) {
    if (r.empty()) throw TrainError("cannot export an empty loss curve");
    write_loss_csv(r.iteration_loss, csv_path);
    auto out = detail::open_report(svg_path);
    out << loss_curves_svg({{r.model_name, r.iteration_loss}});
}

/// One CSV with a model column and one SVG with a polyline per model.
inline void export_merged_loss_curves(const std::vector<LossCurve>& curves, const std::filesystem::path& csv_path,
                                      const std::filesystem::path& svg_path) {
    if (curves.empty()) throw TrainError("cannot export an empty loss curve");
    for (const auto& c : curves) {
        if (c.losses.empty()) throw TrainError("cannot export an empty loss curve for " + c.name);
    }
    auto csv = detail::open_report(csv_path);
    csv << "model,iteration,loss\n";
    for (const auto& c : curves) {
        for (std::size_t i = 0; i < c.losses.size(); ++i) csv << c.name << ',' << i + 1 << ',' << c.losses[i] << '\n';
    }
    auto svg = detail::open_report(svg_path);
    svg << loss_curves_svg(curves);
}

/// Two tab-separated columns, model and percentage accuracy to three decimals.
inline std::string format_accuracy_table(const std::vector<std::pair<std::string, double>>& rows) {
    std::ostringstream s;
    s << "Model\tAccuracy\n";
    for (const auto& [name, acc] : rows) s << name << '\t' << std::fixed << std::setprecision(3) << 100.0 * acc << "%\n";
    return s.str();
}

/// Wall-clock timings are left out so the document is reproducible.
inline nlohmann::json to_json(const TrainReport& r) {
    return {{"model", r.model_name},
            {"iteration_loss", r.iteration_loss},
            {"epoch_val_accuracy", r.epoch_val_accuracy},
            {"confusion", r.confusion},
            {"best_epoch", r.best_epoch},
            {"best_val_accuracy", r.best_val_accuracy}};
}

}  // namespace mer

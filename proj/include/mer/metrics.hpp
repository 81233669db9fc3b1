#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "mer/audio.hpp"

namespace mer {

/// Shannon entropy in nats, -sum p ln p with 0 ln 0 taken as 0.
inline double entropy(std::span<const double> p) {
    double total = 0.0, h = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) throw std::invalid_argument("entropy: negative probability");
        total += v;
        if (v > 0.0) h -= v * std::log(v);
    }
    if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("entropy: probabilities do not sum to 1");
    return h;
}

/// Numerically stable two-class softmax.
inline std::array<double, 2> softmax2(double z0, double z1) {
    const double m = std::max(z0, z1);
    const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
    return {e0 / (e0 + e1), e1 / (e0 + e1)};
}

struct Prediction {
    Emotion label = Emotion::happy;
    std::array<double, 2> probabilities{};
    double entropy_nats = 0.0;
};

/// Argmax of the softmax with ties going to class 0.
inline Prediction prediction_from_logits(double z0, double z1) {
    Prediction p;
    p.probabilities = softmax2(z0, z1);
    p.label = p.probabilities[1] > p.probabilities[0] ? Emotion::sad : Emotion::happy;
    p.entropy_nats = entropy(p.probabilities);
    return p;
}

/// Rows are true labels, columns are predicted labels.
using ConfusionMatrix = std::array<std::array<std::size_t, kNumEmotions>, kNumEmotions>;

struct Evaluation {
    double accuracy = 0.0;
    ConfusionMatrix confusion{};
    double mean_loss = 0.0;
    double mean_entropy = 0.0;
    std::size_t count = 0;
};

/// Scores per-sample logits against labels.
inline Evaluation evaluate_logits(std::span<const std::array<double, 2>> logits, std::span<const Emotion> labels) {
    if (logits.size() != labels.size()) throw std::invalid_argument("evaluate: logits/labels length mismatch");
    if (logits.empty()) throw std::invalid_argument("evaluate: empty split");
    Evaluation ev;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const Prediction p = prediction_from_logits(logits[i][0], logits[i][1]);
        const auto truth = static_cast<std::size_t>(labels[i]);
        ++ev.confusion[truth][static_cast<std::size_t>(p.label)];
        if (p.label == labels[i]) ++correct;
        const double m = std::max(logits[i][0], logits[i][1]);
        const double lse = m + std::log(std::exp(logits[i][0] - m) + std::exp(logits[i][1] - m));
        ev.mean_loss += lse - logits[i][truth];
        ev.mean_entropy += p.entropy_nats;
    }
    ev.count = logits.size();
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(ev.count);
    ev.mean_loss /= static_cast<double>(ev.count);
    ev.mean_entropy /= static_cast<double>(ev.count);
    return ev;
}

}  // namespace mer

#pragma once

// Checkpoint layout: one line of compact JSON (architecture, spectrogram
// settings, parameter manifest with byte offsets into the blob) terminated by
// '\n', then the parameter blob as little-endian float32 in manifest order.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mer/arch.hpp"
#include "mer/dsp.hpp"

namespace mer {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline nlohmann::json spectrogram_params_json(const SpectrogramParams& p) {
    nlohmann::json j{{"win", p.win},
                     {"hop", p.hop},
                     {"window", p.window_fn == WindowFn::hann ? "hann" : "rectangular"},
                     {"n_mels", p.n_mels},
                     {"fmin_hz", p.fmin_hz},
                     {"log_eps", p.log_eps}};
    j["fmax_hz"] = p.fmax_hz ? nlohmann::json(*p.fmax_hz) : nlohmann::json(nullptr);
    return j;
}

inline SpectrogramParams spectrogram_params_from_json(const nlohmann::json& j) {
    SpectrogramParams p;
    p.win = j.value("win", p.win);
    p.hop = j.value("hop", p.hop);
    const std::string w = j.value("window", std::string("hann"));
    if (w != "hann" && w != "rectangular") throw CheckpointError("unknown window function " + w);
    p.window_fn = w == "hann" ? WindowFn::hann : WindowFn::rectangular;
    p.n_mels = j.value("n_mels", p.n_mels);
    p.fmin_hz = j.value("fmin_hz", p.fmin_hz);
    if (j.contains("fmax_hz") && !j["fmax_hz"].is_null()) p.fmax_hz = j["fmax_hz"].get<double>();
    p.log_eps = j.value("log_eps", p.log_eps);
    return p;
}

/// Preprocessing that must match between training and inference.
struct InputPipeline {
    SpectrogramParams dsp;
    double sub_clip_s = 5.0;
    std::uint32_t sample_rate_hz = 44100;
};

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(Model<T>& model, const InputPipeline& pipeline = {}) {
    const ArchSpec& spec = model.spec();
    nlohmann::json header{{"format", "mer-checkpoint"},
                          {"version", 1},
                          {"arch", arch_name(spec.arch)},
                          {"width_mult", spec.width_mult},
                          {"input_hw", spec.input_hw},
                          {"has_head", model.has_head()},
                          {"seed", model.seed()},
                          {"dsp", spectrogram_params_json(pipeline.dsp)},
                          {"sub_clip_s", pipeline.sub_clip_s},
                          {"sample_rate_hz", pipeline.sample_rate_hz}};
    nlohmann::json manifest = nlohmann::json::array();
    std::size_t offset = 0;
    auto state = model.state();
    for (const auto& nt : state) {
        manifest.push_back({{"name", nt.name},
                            {"shape", nt.tensor.shape()},
                            {"offset", offset},
                            {"trainable", nt.trainable}});
        offset += nt.tensor.numel() * sizeof(float);
    }
    header["parameters"] = manifest;
    header["blob_bytes"] = offset;

    const std::string line = header.dump() + "\n";
    std::vector<std::uint8_t> out(line.begin(), line.end());
    out.reserve(out.size() + offset);
    for (const auto& nt : state) {
        for (T v : nt.tensor.data()) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
        }
    }
    return out;
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path, const InputPipeline& pipeline = {}) {
    const auto bytes = encode_checkpoint(model, pipeline);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + path.string());
}

template <typename T>
struct LoadedCheckpoint {
    Model<T> model;
    InputPipeline pipeline;
};

template <typename T>
LoadedCheckpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
    const auto nl = std::find(bytes.begin(), bytes.end(), std::uint8_t{'\n'});
    if (nl == bytes.end()) throw CheckpointError("checkpoint header is not terminated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin(), nl);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }
    if (header.value("format", std::string()) != "mer-checkpoint") throw CheckpointError("not a checkpoint");

    const std::string name = header.at("arch").get<std::string>();
    const auto arch = parse_arch(name);
    if (!arch) throw CheckpointError("unknown architecture '" + name + "'");
    ArchSpec spec{*arch, header.at("width_mult").get<double>(), header.at("input_hw").get<std::size_t>()};
    Model<T> model = build_model<T>(spec, header.value("seed", std::uint64_t{0}));
    if (header.value("has_head", false)) model.append_emotion_head();

    InputPipeline pipeline;
    if (header.contains("dsp")) pipeline.dsp = spectrogram_params_from_json(header["dsp"]);
    pipeline.sub_clip_s = header.value("sub_clip_s", pipeline.sub_clip_s);
    pipeline.sample_rate_hz = header.value("sample_rate_hz", pipeline.sample_rate_hz);

    const auto blob = bytes.subspan(static_cast<std::size_t>(nl - bytes.begin()) + 1);
    const auto blob_bytes = header.at("blob_bytes").get<std::size_t>();
    if (blob.size() != blob_bytes) {
        throw CheckpointError("blob length mismatch: header declares " + std::to_string(blob_bytes) +
                              " bytes, file holds " + std::to_string(blob.size()));
    }
    const auto& manifest = header.at("parameters");
    auto state = model.state();
    if (manifest.size() != state.size()) {
        throw CheckpointError("manifest lists " + std::to_string(manifest.size()) + " tensors, architecture has " +
                              std::to_string(state.size()));
    }
    for (std::size_t i = 0; i < state.size(); ++i) {
        const auto& rec = manifest[i];
        auto& nt = state[i];
        if (rec.at("name").get<std::string>() != nt.name) {
            throw CheckpointError("tensor name mismatch: " + rec.at("name").get<std::string>() + " vs " + nt.name);
        }
        if (rec.at("shape").get<Shape>() != nt.tensor.shape()) {
            throw CheckpointError("shape mismatch for " + nt.name + ": " + shape_string(rec.at("shape").get<Shape>()) +
                                  " vs " + shape_string(nt.tensor.shape()));
        }
        const auto offset = rec.at("offset").get<std::size_t>();
        if (offset + nt.tensor.numel() * sizeof(float) > blob.size()) {
            throw CheckpointError("blob length mismatch: " + nt.name + " extends past the end");
        }
        auto dst = nt.tensor.data();
        for (std::size_t k = 0; k < dst.size(); ++k) {
            const std::uint8_t* p = blob.data() + offset + 4 * k;
            const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                                       (static_cast<std::uint32_t>(p[2]) << 16) |
                                       (static_cast<std::uint32_t>(p[3]) << 24);
            dst[k] = static_cast<T>(std::bit_cast<float>(bits));
        }
    }
    model.set_mode(Mode::eval);
    return {std::move(model), pipeline};
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    try {
        return decode_checkpoint<T>(bytes);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

}  // namespace mer

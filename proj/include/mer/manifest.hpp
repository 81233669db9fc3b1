#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mer/audio.hpp"

namespace mer {

class ManifestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Split { unassigned, train, val };
enum class SplitLevel { clip, subclip };

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::unassigned: break;
    }
    return "unassigned";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "unassigned") return Split::unassigned;
    throw ManifestError("unknown split '" + std::string(s) + "'");
}

inline std::string_view to_string(SplitLevel l) { return l == SplitLevel::clip ? "clip" : "subclip"; }

inline std::optional<SplitLevel> parse_split_level(std::string_view s) {
    if (s == "clip") return SplitLevel::clip;
    if (s == "subclip") return SplitLevel::subclip;
    return std::nullopt;
}

struct ManifestEntry {
    std::string path;
    Emotion label = Emotion::happy;
    std::string source_id;
    Split split = Split::unassigned;
    // Set on sub-clip entries: the window inside the file.
    std::optional<double> offset_s;
    std::optional<double> duration_s;

    std::string key() const {
        return offset_s ? path + "@" + std::to_string(*offset_s) : path;
    }
};

struct ManifestMetadata {
    std::uint32_t sample_rate = 44100;
    std::string created_by;
    std::uint64_t seed = 0;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    ManifestMetadata metadata;
    // Relative entry paths resolve against this directory. Not serialized.
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const ManifestEntry& e) const {
        const std::filesystem::path p(e.path);
        return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
    }

    std::size_t count(Split s) const {
        return static_cast<std::size_t>(
            std::count_if(entries.begin(), entries.end(), [s](const ManifestEntry& e) { return e.split == s; }));
    }

    /// Paths (with offsets for sub-clips) must be unique.
    void validate() const {
        std::set<std::string> keys;
        for (const auto& e : entries) {
            if (!keys.insert(e.key()).second) throw ManifestError("duplicate manifest entry " + e.key());
        }
    }
};

/// Source ids present in both the train and the val split.
inline std::vector<std::string> straddling_sources(const DatasetManifest& m) {
    std::map<std::string, unsigned> sides;
    for (const auto& e : m.entries) {
        if (e.split == Split::train) sides[e.source_id] |= 1u;
        if (e.split == Split::val) sides[e.source_id] |= 2u;
    }
    std::vector<std::string> out;
    for (const auto& [id, mask] : sides) {
        if (mask == 3u) out.push_back(id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const ManifestEntry& e) {
    nlohmann::json j{{"path", e.path},
                     {"label", to_string(e.label)},
                     {"source_id", e.source_id},
                     {"split", to_string(e.split)}};
    if (e.offset_s) j["offset_s"] = *e.offset_s;
    if (e.duration_s) j["duration_s"] = *e.duration_s;
    return j;
}

inline ManifestEntry entry_from_json(const nlohmann::json& j) {
    ManifestEntry e;
    e.path = j.at("path").get<std::string>();
    const auto label = j.at("label").get<std::string>();
    const auto parsed = parse_emotion(label);
    if (!parsed) throw ManifestError("entry " + e.path + ": unknown label '" + label + "'");
    e.label = *parsed;
    e.source_id = j.value("source_id", std::filesystem::path(e.path).stem().string());
    e.split = parse_split(j.value("split", std::string("unassigned")));
    if (j.contains("offset_s")) e.offset_s = j["offset_s"].get<double>();
    if (j.contains("duration_s")) e.duration_s = j["duration_s"].get<double>();
    return e;
}

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) entries.push_back(to_json(e));
    return {{"metadata",
             {{"sample_rate", m.metadata.sample_rate},
              {"created_by", m.metadata.created_by},
              {"seed", m.metadata.seed}}},
            {"entries", std::move(entries)}};
}

/// Accepts either the object form written by to_json or a bare array of entries.
inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    const nlohmann::json* entries = &j;
    if (j.is_object()) {
        if (j.contains("metadata")) {
            const auto& md = j["metadata"];
            m.metadata.sample_rate = md.value("sample_rate", m.metadata.sample_rate);
            m.metadata.created_by = md.value("created_by", std::string());
            m.metadata.seed = md.value("seed", std::uint64_t{0});
        }
        entries = &j.at("entries");
    }
    if (!entries->is_array()) throw ManifestError("manifest entries must be an array");
    for (const auto& rec : *entries) m.entries.push_back(entry_from_json(rec));
    m.validate();
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ManifestError("cannot open manifest " + path.string());
    DatasetManifest m;
    try {
        m = manifest_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError(path.string() + ": " + e.what());
    }
    m.base_dir = path.parent_path();
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw ManifestError("cannot write manifest " + path.string());
    out << to_json(m).dump(2) << '\n';
    if (!out) throw ManifestError("short write to " + path.string());
}

/// Re-expresses entry paths relative to a new manifest location.
inline DatasetManifest rebase_manifest(DatasetManifest m, const std::filesystem::path& new_base) {
    for (auto& e : m.entries) {
        const auto abs = std::filesystem::absolute(m.resolve(e));
        e.path = abs.lexically_proximate(std::filesystem::absolute(new_base)).generic_string();
    }
    m.base_dir = new_base;
    return m;
}

// ---------------------------------------------------------------------------
// Slicing and splitting

/// Expands every whole-clip entry into `count` sub-clip entries of `sub_len_s`
/// taken from the start. Entries that already carry a window are kept.
inline DatasetManifest slice_manifest(const DatasetManifest& m, double sub_len_s = 5.0, std::size_t count = 5) {
    if (!(sub_len_s > 0.0) || count == 0) throw ManifestError("slice_manifest: invalid slicing parameters");
    DatasetManifest out;
    out.metadata = m.metadata;
    out.base_dir = m.base_dir;
    for (const auto& e : m.entries) {
        if (e.offset_s) {
            out.entries.push_back(e);
            continue;
        }
        for (std::size_t k = 0; k < count; ++k) {
            ManifestEntry s = e;
            s.offset_s = static_cast<double>(k) * sub_len_s;
            s.duration_s = sub_len_s;
            out.entries.push_back(std::move(s));
        }
    }
    out.validate();
    return out;
}

namespace detail {

template <typename V>
void seeded_shuffle(V& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace detail

/// Assigns train/val with `ratio` of each label going to train. Clip level
/// moves whole source_id groups; sub-clip level moves individual entries.
inline DatasetManifest split_dataset(DatasetManifest m, double ratio, SplitLevel level, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ManifestError("split ratio must lie in (0, 1)");
    for (const auto& e : m.entries) {
        if (e.split != Split::unassigned) throw ManifestError("split_dataset: entries are already assigned");
    }
    if (level == SplitLevel::clip) {
        std::map<std::string, Emotion> source_label;
        for (const auto& e : m.entries) {
            const auto [it, fresh] = source_label.emplace(e.source_id, e.label);
            if (!fresh && it->second != e.label) {
                throw ManifestError("clip-level split impossible: source_id '" + e.source_id +
                                    "' carries more than one label");
            }
        }
    }
    std::mt19937_64 rng(seed);
    std::size_t total_val = 0;
    for (std::size_t c = 0; c < kNumEmotions; ++c) {
        const auto label = static_cast<Emotion>(c);
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < m.entries.size(); ++i) {
            if (m.entries[i].label == label) members.push_back(i);
        }
        if (members.empty()) throw ManifestError("label class '" + std::string(to_string(label)) + "' is empty");
        const auto target = static_cast<std::size_t>(std::llround(static_cast<double>(members.size()) * (1.0 - ratio)));

        // Groups in first-appearance order, then shuffled.
        std::vector<std::vector<std::size_t>> groups;
        if (level == SplitLevel::subclip) {
            for (std::size_t i : members) groups.push_back({i});
        } else {
            std::map<std::string, std::size_t> index;
            for (std::size_t i : members) {
                const auto& id = m.entries[i].source_id;
                auto [it, fresh] = index.emplace(id, groups.size());
                if (fresh) groups.emplace_back();
                groups[it->second].push_back(i);
            }
        }
        detail::seeded_shuffle(groups, rng);

        std::size_t in_val = 0;
        for (const auto& g : groups) {
            const bool to_val = in_val + g.size() <= target;
            if (to_val) in_val += g.size();
            for (std::size_t i : g) m.entries[i].split = to_val ? Split::val : Split::train;
        }
        total_val += in_val;
    }

    if (level == SplitLevel::clip) {
        const double achieved = 1.0 - static_cast<double>(total_val) / static_cast<double>(m.entries.size());
        if (total_val == 0 || std::abs(achieved - ratio) > 0.05) {
            throw ManifestError("clip-level split impossible within 5% of ratio (too few groups): achieved " +
                                std::to_string(achieved));
        }
    }
    return m;
}

}  // namespace mer

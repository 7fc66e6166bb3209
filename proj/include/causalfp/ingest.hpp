#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "causalfp/common.hpp"
#include "causalfp/csv.hpp"

namespace causalfp {

// One labeled multichannel time-series. data is p x T: rows are channels
// (parcels), columns are time points. Immutable after construction; safe to
// share read-only across threads.
struct Recording {
    std::string subject_id;
    std::string task_id;
    std::string session_tag;
    Eigen::MatrixXd data;  // p x T
    double dt = 1.0;       // seconds per sample

    Eigen::Index channels() const { return data.rows(); }
    Eigen::Index samples() const { return data.cols(); }
};

// Splits the p channels into m state channels and n input channels.
struct PartitionSpec {
    std::vector<Eigen::Index> state_indices;
    std::vector<Eigen::Index> input_indices;

    Eigen::Index m() const { return static_cast<Eigen::Index>(state_indices.size()); }
    Eigen::Index n() const { return static_cast<Eigen::Index>(input_indices.size()); }

    void validate(Eigen::Index p, bool total = true) const {
        if (m() < 2) throw ValidationError("partition needs at least 2 state channels");
        if (n() < 1) throw ValidationError("partition needs at least 1 input channel");
        std::set<Eigen::Index> seen;
        for (const auto& list : {state_indices, input_indices})
            for (Eigen::Index idx : list) {
                if (idx < 0 || idx >= p)
                    throw ValidationError("partition index " + std::to_string(idx) +
                                          " out of range for p=" + std::to_string(p));
                if (!seen.insert(idx).second)
                    throw ValidationError("duplicate channel index " + std::to_string(idx) + " in partition");
            }
        if (m() + n() > p) throw ValidationError("partition references more channels than recording has");
        if (total && m() + n() != p)
            throw ValidationError("total partition must cover all " + std::to_string(p) + " channels");
    }

    // Default split: the last n channels drive the rest.
    static PartitionSpec last_n_inputs(Eigen::Index p, Eigen::Index n) {
        PartitionSpec spec;
        for (Eigen::Index i = 0; i < p - n; ++i) spec.state_indices.push_back(i);
        for (Eigen::Index i = p - n; i < p; ++i) spec.input_indices.push_back(i);
        return spec;
    }
};

enum class Normalization { none, zscore_per_channel };

inline std::string to_string(Normalization n) {
    return n == Normalization::none ? "none" : "zscore_per_channel";
}

inline Normalization normalization_from_string(const std::string& s) {
    if (s == "none") return Normalization::none;
    if (s == "zscore_per_channel") return Normalization::zscore_per_channel;
    throw ValidationError("unknown normalization '" + s + "'");
}

struct ManifestEntry {
    std::string path;
    std::string subject_id;
    std::string task_id;
    std::string session_tag;
    double dt = 1.0;
};

struct CorpusManifest {
    std::vector<ManifestEntry> entries;
    PartitionSpec partition;
    Normalization normalization = Normalization::zscore_per_channel;
    // Directory the manifest was loaded from; relative entry paths resolve
    // against it.
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const ManifestEntry& e) const {
        std::filesystem::path p(e.path);
        return p.is_absolute() ? p : base_dir / p;
    }
};

// Loads one CSV recording: header row of channel names, each subsequent row
// is one time point with p fields. The result is transposed to p x T.
inline Recording load_recording(const std::filesystem::path& path, const ManifestEntry& meta) {
    csv::Table table = csv::read(path);
    if (table.values.rows() < 2)
        throw ValidationError(path.string() + ": needs at least 2 time points, got " +
                              std::to_string(table.values.rows()));
    if (table.header.size() < 2)
        throw ValidationError(path.string() + ": needs at least 2 channels");
    if (!table.values.allFinite())
        throw ValidationError(path.string() + ": contains non-finite values");
    Recording rec;
    rec.subject_id = meta.subject_id;
    rec.task_id = meta.task_id;
    rec.session_tag = meta.session_tag;
    rec.dt = meta.dt;
    rec.data = table.values.transpose();
    if (rec.dt <= 0.0) throw ValidationError(path.string() + ": dt must be positive");
    return rec;
}

inline void write_recording(const std::filesystem::path& path, const Recording& rec) {
    std::vector<std::string> header;
    header.reserve(static_cast<std::size_t>(rec.channels()));
    for (Eigen::Index i = 0; i < rec.channels(); ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "ch%03d", static_cast<int>(i));
        header.emplace_back(buf);
    }
    csv::write(path, header, rec.data.transpose());
}

// Per-channel z-scoring with the sample (n-1) standard deviation. Channels
// with zero variance are mean-centered only and reported back by index.
inline Recording normalize(const Recording& rec, Normalization mode,
                           std::vector<Eigen::Index>* zero_variance_channels = nullptr) {
    if (mode == Normalization::none) return rec;
    Recording out = rec;
    const Eigen::Index T = rec.samples();
    for (Eigen::Index i = 0; i < rec.channels(); ++i) {
        const double mean = rec.data.row(i).mean();
        out.data.row(i).array() -= mean;
        const double var = out.data.row(i).squaredNorm() / static_cast<double>(T - 1);
        const double sd = std::sqrt(var);
        if (sd > 0.0) {
            out.data.row(i) /= sd;
        } else if (zero_variance_channels) {
            zero_variance_channels->push_back(i);
        }
    }
    return out;
}

// Splits a recording into state block X (m x T) and input block U (n x T),
// rows following the index order of the partition.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> partition(const Recording& rec, const PartitionSpec& spec) {
    spec.validate(rec.channels(), /*total=*/false);
    Eigen::MatrixXd X(spec.m(), rec.samples());
    Eigen::MatrixXd U(spec.n(), rec.samples());
    for (Eigen::Index i = 0; i < spec.m(); ++i) X.row(i) = rec.data.row(spec.state_indices[i]);
    for (Eigen::Index i = 0; i < spec.n(); ++i) U.row(i) = rec.data.row(spec.input_indices[i]);
    return {std::move(X), std::move(U)};
}

inline nlohmann::json manifest_to_json(const CorpusManifest& manifest) {
    nlohmann::json j;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : manifest.entries)
        j["entries"].push_back({{"path", e.path},
                                {"subject", e.subject_id},
                                {"task", e.task_id},
                                {"session", e.session_tag},
                                {"dt", e.dt}});
    j["states"] = manifest.partition.state_indices;
    j["inputs"] = manifest.partition.input_indices;
    j["normalization"] = to_string(manifest.normalization);
    return j;
}

inline CorpusManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    CorpusManifest manifest;
    manifest.base_dir = base_dir;
    try {
        for (const auto& e : j.at("entries")) {
            ManifestEntry entry;
            entry.path = e.at("path").get<std::string>();
            entry.subject_id = e.at("subject").get<std::string>();
            entry.task_id = e.at("task").get<std::string>();
            entry.session_tag = e.at("session").get<std::string>();
            entry.dt = e.at("dt").get<double>();
            manifest.entries.push_back(std::move(entry));
        }
        manifest.partition.state_indices = j.at("states").get<std::vector<Eigen::Index>>();
        manifest.partition.input_indices = j.at("inputs").get<std::vector<Eigen::Index>>();
        manifest.normalization = normalization_from_string(j.at("normalization").get<std::string>());
    } catch (const nlohmann::json::exception& ex) {
        throw ValidationError(std::string("malformed manifest: ") + ex.what());
    }
    std::set<std::string> keys;
    for (const auto& e : manifest.entries)
        if (!keys.insert(e.subject_id + "\x1f" + e.task_id + "\x1f" + e.session_tag).second)
            throw ValidationError("duplicate (subject, task, session) in manifest: " + e.subject_id + "/" +
                                  e.task_id + "/" + e.session_tag);
    return manifest;
}

inline CorpusManifest load_manifest(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& ex) {
        throw ValidationError(path.string() + ": invalid JSON: " + ex.what());
    }
    return manifest_from_json(j, path.parent_path());
}

// Loads, validates and normalizes every entry. All referenced files must
// exist and agree on channel count.
inline std::vector<Recording> load_corpus(const CorpusManifest& manifest,
                                          std::vector<Eigen::Index>* zero_variance_channels = nullptr) {
    std::vector<Recording> recs;
    recs.reserve(manifest.entries.size());
    Eigen::Index p = -1;
    for (const auto& e : manifest.entries) {
        const auto path = manifest.resolve(e);
        if (!std::filesystem::exists(path))
            throw ValidationError("manifest references missing file: " + path.string());
        Recording rec = load_recording(path, e);
        if (p < 0) p = rec.channels();
        if (rec.channels() != p)
            throw ValidationError(path.string() + ": has " + std::to_string(rec.channels()) +
                                  " channels, corpus expects " + std::to_string(p));
        recs.push_back(normalize(rec, manifest.normalization, zero_variance_channels));
    }
    if (p >= 0) manifest.partition.validate(p, /*total=*/true);
    return recs;
}

}  // namespace causalfp

#pragma once

// Training-session metrics: per-frame RMSE over non-head vertices, the RMSE
// series, training accuracy R and training time t_min, and report export.

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "corebody/body_model.hpp"

namespace corebody {

struct RmseSample {
    double t = 0.0;
    double value = 0.0;

    friend bool operator==(const RmseSample&, const RmseSample&) = default;
};

// sqrt(mean over non-head k of |current_k - target_k|^2)
inline double compute_rmse(const BodyMesh& current, const BodyMesh& target, const std::vector<bool>& head_mask) {
    const Eigen::Index n = target.vertices.rows();
    if (current.vertices.rows() != n || static_cast<Eigen::Index>(head_mask.size()) != n)
        throw MetricsError("RMSE needs meshes and head mask of identical topology");
    double sum = 0.0;
    std::size_t count = 0;
    for (Eigen::Index k = 0; k < n; ++k) {
        if (head_mask[static_cast<std::size_t>(k)]) continue;
        sum += (current.vertices.row(k) - target.vertices.row(k)).squaredNorm();
        ++count;
    }
    if (count == 0) throw MetricsError("RMSE vertex set is empty (every vertex is masked as head)");
    return std::sqrt(sum / static_cast<double>(count));
}

struct SessionMetrics {
    double rmse_0 = 0.0;
    double rmse_min = 0.0;
    double t_min = 0.0;
    double accuracy_r = 0.0;  // percent
    std::size_t sample_count = 0;
    std::size_t n_rmse = 0;
    bool degenerate = false;  // rmse_0 == 0, R reported as 0

    friend bool operator==(const SessionMetrics&, const SessionMetrics&) = default;
};

// Streaming accumulator for one session. Keeps the full series for export.
class SessionAccumulator {
public:
    explicit SessionAccumulator(std::size_t n_rmse = 0) : n_rmse_(n_rmse) {}

    void update(const RmseSample& sample) {
        if (!std::isfinite(sample.t) || !std::isfinite(sample.value) || sample.value < 0.0)
            throw MetricsError("RMSE sample must be finite and non-negative");
        if (!series_.empty() && sample.t < series_.back().t)
            throw MetricsError("RMSE sample timestamp regression");
        if (series_.empty()) {
            rmse_0_ = sample.value;
            rmse_min_ = sample.value;
            t_min_ = sample.t;
        } else if (sample.value < rmse_min_) {
            // Strict comparison keeps the earliest time on ties.
            rmse_min_ = sample.value;
            t_min_ = sample.t;
        }
        series_.push_back(sample);
    }

    const std::vector<RmseSample>& series() const noexcept { return series_; }
    bool empty() const noexcept { return series_.empty(); }
    std::size_t n_rmse() const noexcept { return n_rmse_; }

    SessionMetrics finalize() const {
        if (series_.empty()) throw MetricsError("session has no samples");
        SessionMetrics m;
        m.rmse_0 = rmse_0_;
        m.rmse_min = rmse_min_;
        m.t_min = t_min_;
        m.sample_count = series_.size();
        m.n_rmse = n_rmse_;
        if (rmse_0_ > 0.0) {
            m.accuracy_r = (rmse_0_ - rmse_min_) / rmse_0_ * 100.0;
        } else {
            m.degenerate = true;
            m.accuracy_r = 0.0;
        }
        return m;
    }

private:
    std::size_t n_rmse_;
    std::vector<RmseSample> series_;
    double rmse_0_ = 0.0;
    double rmse_min_ = 0.0;
    double t_min_ = 0.0;
};

inline SessionAccumulator update_session(SessionAccumulator state, const RmseSample& sample) {
    state.update(sample);
    return state;
}

inline SessionMetrics finalize_metrics(const SessionAccumulator& state) { return state.finalize(); }

// ---------------------------------------------------------------------------
// Reports

enum class GuidanceMode { kSkeleton, kMarkers };

inline const char* mode_name(GuidanceMode m) { return m == GuidanceMode::kSkeleton ? "skeleton" : "markers"; }

inline GuidanceMode mode_from_name(const std::string& s) {
    if (s == "skeleton") return GuidanceMode::kSkeleton;
    if (s == "markers") return GuidanceMode::kMarkers;
    throw InvalidArgument("unknown guidance mode '" + s + "' (expected skeleton or markers)");
}

struct SessionReport {
    GuidanceMode mode = GuidanceMode::kMarkers;
    SessionMetrics metrics;
    std::vector<RmseSample> samples;
    std::size_t skipped_frames = 0;
    bool partial = false;  // stream ended by a transport error

    friend bool operator==(const SessionReport&, const SessionReport&) = default;
};

inline nlohmann::ordered_json report_to_json(const SessionReport& r) {
    nlohmann::ordered_json doc;
    doc["mode"] = mode_name(r.mode);
    doc["rmse0"] = r.metrics.rmse_0;
    doc["rmseMin"] = r.metrics.rmse_min;
    doc["tMin"] = r.metrics.t_min;
    doc["accuracyR"] = r.metrics.accuracy_r;
    doc["nRmse"] = r.metrics.n_rmse;
    doc["sampleCount"] = r.metrics.sample_count;
    doc["degenerate"] = r.metrics.degenerate;
    doc["skippedFrames"] = r.skipped_frames;
    doc["partial"] = r.partial;
    nlohmann::ordered_json samples = nlohmann::ordered_json::array();
    for (const RmseSample& s : r.samples) samples.push_back({{"t", s.t}, {"value", s.value}});
    doc["samples"] = std::move(samples);
    return doc;
}

inline std::string format_report(const SessionReport& r) { return report_to_json(r).dump(2) + "\n"; }

inline SessionReport parse_report(const std::string& text) {
    try {
        const auto doc = nlohmann::json::parse(text);
        SessionReport r;
        r.mode = mode_from_name(doc.at("mode").get<std::string>());
        r.metrics.rmse_0 = doc.at("rmse0").get<double>();
        r.metrics.rmse_min = doc.at("rmseMin").get<double>();
        r.metrics.t_min = doc.at("tMin").get<double>();
        r.metrics.accuracy_r = doc.at("accuracyR").get<double>();
        r.metrics.n_rmse = doc.at("nRmse").get<std::size_t>();
        for (const auto& s : doc.at("samples")) r.samples.push_back({s.at("t").get<double>(), s.at("value").get<double>()});
        r.metrics.sample_count = doc.value("sampleCount", r.samples.size());
        r.metrics.degenerate = doc.value("degenerate", false);
        r.skipped_frames = doc.value("skippedFrames", std::size_t{0});
        r.partial = doc.value("partial", false);
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw MetricsError(std::string("malformed report: ") + e.what());
    }
}

inline std::string format_series_csv(std::span<const RmseSample> samples) {
    std::string out = "t,rmse\n";
    char buf[96];
    for (const RmseSample& s : samples) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", s.t, s.value);
        out += buf;
    }
    return out;
}

struct ModeSummary {
    std::size_t sessions = 0;
    double mean_accuracy_r = 0.0;
    double mean_t_min = 0.0;
};

// Groups finalized reports by guidance mode for A/B comparison.
inline std::map<std::string, ModeSummary> aggregate_by_mode(std::span<const SessionReport> reports) {
    std::map<std::string, ModeSummary> out;
    for (const SessionReport& r : reports) {
        ModeSummary& s = out[mode_name(r.mode)];
        ++s.sessions;
        s.mean_accuracy_r += r.metrics.accuracy_r;
        s.mean_t_min += r.metrics.t_min;
    }
    for (auto& [mode, s] : out) {
        s.mean_accuracy_r /= static_cast<double>(s.sessions);
        s.mean_t_min /= static_cast<double>(s.sessions);
    }
    return out;
}

}  // namespace corebody

#pragma once

// Session orchestration: configuration, target setup, the per-frame pipeline
// and on-disk persistence (append-only session log plus final report).

#include <array>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "corebody/asset_io.hpp"
#include "corebody/body_model.hpp"
#include "corebody/estimator_gateway.hpp"
#include "corebody/evaluation.hpp"
#include "corebody/guidance.hpp"
#include "corebody/test_body.hpp"

namespace corebody {

struct ViewpointSpec {
    double azimuth = 0.0;    // degrees
    double elevation = 0.0;  // degrees
    double distance = 3.0;   // meters
    std::array<double, 3> look_at{};

    void validate() const {
        if (!std::isfinite(azimuth) || !std::isfinite(elevation))
            throw ConfigError("viewpoint angles must be finite");
        if (!(distance > 0.0 && std::isfinite(distance))) throw ConfigError("viewpoint distance must be positive");
        for (double c : look_at)
            if (!std::isfinite(c)) throw ConfigError("viewpoint look-at must be finite");
    }

    friend bool operator==(const ViewpointSpec&, const ViewpointSpec&) = default;
};

using Viewpoints = std::array<ViewpointSpec, 2>;

inline constexpr Viewpoints kDefaultViewpoints = {{
    {0.0, 10.0, 3.0, {0.0, 0.0, 0.0}},
    {90.0, 10.0, 3.0, {0.0, 0.0, 0.0}},
}};

struct SessionConfig {
    std::string asset_path;  // empty: generated test body
    std::optional<EstimatedFrame> target_frame;
    std::string target_poselog;
    std::size_t target_index = 0;
    Viewpoints viewpoints = kDefaultViewpoints;
    GuidanceMode mode = GuidanceMode::kMarkers;
    CameraIntrinsics camera;
    ColorThresholds thresholds;
    double marker_half_width = kDefaultMarkerHalfWidth;
    std::map<std::string, double> site_half_widths;  // per-site overrides
    MarkerRadiusParams radius;
    double confidence_threshold = kDefaultConfidenceThreshold;
    double shape_limit = kDefaultShapeLimit;

    std::array<double, kNumMarkerSites> half_widths() const {
        std::array<double, kNumMarkerSites> out;
        out.fill(marker_half_width);
        for (const auto& [name, w] : site_half_widths) out[site_index(site_from_name(name))] = w;
        return out;
    }

    GuidanceConfig guidance() const { return {thresholds, radius, mode == GuidanceMode::kSkeleton}; }

    void validate() const {
        for (const auto& v : viewpoints) v.validate();
        thresholds.validate();
        try {
            radius.validate();
        } catch (const InvalidArgument& e) {
            throw ConfigError(e.what());
        }
        if (!(camera.f > 0.0)) throw ConfigError("focal length must be positive");
        if (!std::isfinite(camera.cx) || !std::isfinite(camera.cy) || !std::isfinite(camera.z_cam))
            throw ConfigError("camera parameters must be finite");
        if (!(marker_half_width >= 0.0)) throw ConfigError("marker half-width must be non-negative");
        for (const auto& [name, w] : site_half_widths) {
            try {
                site_from_name(name);
            } catch (const InvalidArgument& e) {
                throw ConfigError(e.what());
            }
            if (!(w >= 0.0)) throw ConfigError("marker half-width must be non-negative");
        }
    }
};

inline nlohmann::ordered_json viewpoint_to_json(const ViewpointSpec& v) {
    return {{"azimuth", v.azimuth}, {"elevation", v.elevation}, {"distance", v.distance}, {"lookAt", v.look_at}};
}

inline ViewpointSpec viewpoint_from_json(const nlohmann::json& j) {
    ViewpointSpec v;
    v.azimuth = j.value("azimuth", v.azimuth);
    v.elevation = j.value("elevation", v.elevation);
    v.distance = j.value("distance", v.distance);
    if (j.contains("lookAt")) v.look_at = j.at("lookAt").get<std::array<double, 3>>();
    v.validate();
    return v;
}

inline Viewpoints viewpoints_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 2) throw ConfigError("exactly two viewpoints are required");
    return {viewpoint_from_json(j[0]), viewpoint_from_json(j[1])};
}

inline nlohmann::ordered_json viewpoints_to_json(const Viewpoints& v) {
    return nlohmann::ordered_json::array({viewpoint_to_json(v[0]), viewpoint_to_json(v[1])});
}

inline nlohmann::ordered_json config_to_json(const SessionConfig& c) {
    nlohmann::ordered_json j;
    j["assets"] = c.asset_path;
    nlohmann::ordered_json target = nlohmann::ordered_json::object();
    if (c.target_frame) target["frame"] = frame_to_json(*c.target_frame);
    if (!c.target_poselog.empty()) {
        target["poselog"] = c.target_poselog;
        target["index"] = c.target_index;
    }
    j["target"] = std::move(target);
    j["viewpoints"] = viewpoints_to_json(c.viewpoints);
    j["mode"] = mode_name(c.mode);
    j["camera"] = {{"f", c.camera.f}, {"cx", c.camera.cx}, {"cy", c.camera.cy}, {"zCam", c.camera.z_cam}};
    j["thresholds"] = {c.thresholds.yellow, c.thresholds.orange, c.thresholds.red};
    j["markerHalfWidth"] = c.marker_half_width;
    j["siteHalfWidths"] = c.site_half_widths;
    j["markerRadius"] = {{"rMin", c.radius.r_min}, {"rMax", c.radius.r_max}, {"dRef", c.radius.d_ref}};
    j["confidenceThreshold"] = c.confidence_threshold;
    j["shapeLimit"] = c.shape_limit;
    return j;
}

// Applies the keys present in `j` on top of `base`; absent keys keep their value.
inline SessionConfig config_from_json(const nlohmann::json& j, SessionConfig base = {}) {
    if (!j.is_object()) throw ConfigError("session config must be a JSON object");
    try {
        SessionConfig c = std::move(base);
        if (j.contains("assets")) c.asset_path = j.at("assets").get<std::string>();
        if (j.contains("target")) {
            const auto& t = j.at("target");
            c.target_frame.reset();
            c.target_poselog.clear();
            c.target_index = 0;
            if (t.contains("frame")) c.target_frame = parse_frame_record(t.at("frame").dump(), 0, c.shape_limit);
            if (t.contains("poselog")) c.target_poselog = t.at("poselog").get<std::string>();
            if (t.contains("index")) c.target_index = t.at("index").get<std::size_t>();
        }
        if (j.contains("viewpoints")) c.viewpoints = viewpoints_from_json(j.at("viewpoints"));
        if (j.contains("mode")) c.mode = mode_from_name(j.at("mode").get<std::string>());
        if (j.contains("camera")) {
            const auto& cam = j.at("camera");
            c.camera.f = cam.value("f", c.camera.f);
            c.camera.cx = cam.value("cx", c.camera.cx);
            c.camera.cy = cam.value("cy", c.camera.cy);
            c.camera.z_cam = cam.value("zCam", c.camera.z_cam);
        }
        if (j.contains("thresholds")) {
            const auto t = j.at("thresholds").get<std::vector<double>>();
            if (t.size() != 3) throw ConfigError("thresholds must hold 3 values");
            c.thresholds = {t[0], t[1], t[2]};
        }
        if (j.contains("markerHalfWidth")) c.marker_half_width = j.at("markerHalfWidth").get<double>();
        if (j.contains("siteHalfWidths"))
            c.site_half_widths = j.at("siteHalfWidths").get<std::map<std::string, double>>();
        if (j.contains("markerRadius")) {
            const auto& r = j.at("markerRadius");
            c.radius.r_min = r.value("rMin", c.radius.r_min);
            c.radius.r_max = r.value("rMax", c.radius.r_max);
            c.radius.d_ref = r.value("dRef", c.radius.d_ref);
        }
        c.confidence_threshold = j.value("confidenceThreshold", c.confidence_threshold);
        c.shape_limit = j.value("shapeLimit", c.shape_limit);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed session config: ") + e.what());
    } catch (const FrameError& e) {
        throw ConfigError(std::string("invalid target frame: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
}

inline SessionConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed config " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

inline constexpr int kDefaultTestRing = 8;
inline constexpr std::uint64_t kDefaultTestSeed = 1;

inline BodyModelAssets load_assets_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw AssetError("cannot open assets " + path.string());
    return load_assets(in);
}

// Assets named by the config, or the generated test body when none is given.
inline BodyModelAssets load_session_assets(const SessionConfig& config) {
    if (config.asset_path.empty()) return generate_test_assets(kDefaultTestRing, kDefaultTestSeed);
    return load_assets_file(config.asset_path);
}

inline EstimatedFrame load_target_frame(const std::filesystem::path& poselog, std::size_t index,
                                        double shape_limit = kDefaultShapeLimit) {
    std::ifstream in(poselog);
    if (!in) throw ConfigError("cannot open target " + poselog.string());
    ReplayStream stream(in, shape_limit);
    for (std::size_t i = 0;; ++i) {
        auto f = stream.next();
        if (!f) throw ConfigError("target poselog has no frame at index " + std::to_string(index));
        if (i == index) return *f;
    }
}

inline EstimatedFrame resolve_target_frame(const SessionConfig& config) {
    if (config.target_frame) return *config.target_frame;
    if (!config.target_poselog.empty())
        return load_target_frame(config.target_poselog, config.target_index, config.shape_limit);
    throw ConfigError("session config names no target");
}

// ---------------------------------------------------------------------------
// Target

struct TargetState {
    EstimatedFrame frame;
    BodyMesh mesh;
    MarkerBindings bindings;
    std::vector<SkeletonSegment> skeleton;
};

inline TargetState set_target(const BodyModelAssets& assets, const SessionConfig& config, const EstimatedFrame& frame) {
    validate_frame(frame, 0, config.shape_limit);
    TargetState t;
    t.frame = frame;
    t.mesh = pose_mesh(assets, frame.shape, frame.pose);
    t.bindings = bind_markers(t.mesh, kDefaultSiteJoints, config.camera, config.half_widths());
    t.skeleton = frame.keypoints2d ? skeleton_overlay(*frame.keypoints2d, config.confidence_threshold)
                                   : skeleton_overlay(t.mesh, config.camera);
    return t;
}

// ---------------------------------------------------------------------------
// Wire / log encoding of guidance frames

inline nlohmann::ordered_json markers_to_json(const std::array<MarkerState, kNumMarkerSites>& markers) {
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const MarkerState& m : markers)
        out.push_back({{"site", site_name(m.site)}, {"de", m.distance}, {"color", color_name(m.color)},
                       {"radius", m.radius}});
    return out;
}

inline nlohmann::ordered_json skeleton_to_json(const std::vector<SkeletonSegment>& segments) {
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const SkeletonSegment& s : segments)
        out.push_back({{"from", s.from}, {"to", s.to}, {"a", {s.a.x, s.a.y}}, {"b", {s.b.x, s.b.y}}});
    return out;
}

inline nlohmann::ordered_json guidance_message(const GuidanceFrame& g, std::uint64_t frame_id) {
    nlohmann::ordered_json j;
    j["type"] = "guidance";
    j["frameId"] = frame_id;
    j["t"] = g.timestamp;
    j["rmse"] = g.rmse;
    j["markers"] = markers_to_json(g.markers);
    if (!g.skeleton.empty()) j["skeleton"] = skeleton_to_json(g.skeleton);
    return j;
}

inline nlohmann::ordered_json metrics_message(const SessionReport& r) {
    nlohmann::ordered_json j;
    j["type"] = "metrics";
    const nlohmann::ordered_json report = report_to_json(r);
    for (const auto& [k, v] : report.items())
        if (k != "samples") j[k] = v;
    return j;
}

// One session-log line: the frame record plus a guidance summary. Replays as
// an ordinary .poselog since frame parsing ignores the extra key.
inline std::string format_log_record(const EstimatedFrame& frame, const GuidanceFrame& g, std::uint64_t frame_id) {
    nlohmann::json rec = frame_to_json(frame);
    nlohmann::json summary;
    summary["frameId"] = frame_id;
    summary["rmse"] = g.rmse;
    summary["markers"] = nlohmann::json::parse(markers_to_json(g.markers).dump());
    rec["guidance"] = std::move(summary);
    return rec.dump();
}

// ---------------------------------------------------------------------------
// Session loop

// Called once per processed frame with its sequential id (starting at 0).
using GuidanceObserver = std::function<void(const GuidanceFrame&, const EstimatedFrame&, std::uint64_t)>;
using DiagnosticSink = std::function<void(const std::string&)>;

struct SessionHooks {
    GuidanceObserver on_frame;
    DiagnosticSink on_diagnostic;
    std::ostream* log = nullptr;  // session log destination
    std::function<bool()> should_stop;
};

// Runs frames through pose_mesh -> align -> guidance -> metrics. Bad records
// are skipped and counted; a transport error ends the session with the
// report flagged partial. Throws MetricsError if no frame was processed.
inline SessionReport run_session(const BodyModelAssets& assets, const SessionConfig& config, const TargetState& target,
                                 FrameStream& frames, const SessionHooks& hooks = {}) {
    SessionAccumulator acc(non_head_count(assets.head_vertex_mask));
    const GuidanceConfig guidance = config.guidance();
    SessionReport report;
    report.mode = config.mode;
    std::uint64_t frame_id = 0;
    auto diag = [&](const std::string& msg) {
        if (hooks.on_diagnostic) hooks.on_diagnostic(msg);
    };

    for (;;) {
        if (hooks.should_stop && hooks.should_stop()) break;
        std::optional<EstimatedFrame> frame;
        try {
            frame = frames.next();
        } catch (const FrameError& e) {
            ++report.skipped_frames;
            diag(std::string("skipped frame: ") + e.what());
            continue;
        } catch (const Error& e) {
            report.partial = true;
            diag(std::string("stream ended: ") + e.what());
            break;
        }
        if (!frame) break;

        GuidanceFrame g;
        try {
            validate_frame(*frame, 0, config.shape_limit);
            if (!acc.empty() && frame->timestamp < acc.series().back().t)
                throw MetricsError("timestamp regression");
            const BodyMesh current = pose_mesh(assets, frame->shape, frame->pose);
            g = build_guidance_frame(current, target.mesh, target.bindings, config.camera, guidance,
                                     assets.head_vertex_mask, frame->timestamp);
            acc.update({frame->timestamp, g.rmse});
        } catch (const Error& e) {
            ++report.skipped_frames;
            diag(std::string("skipped frame: ") + e.what());
            continue;
        }
        if (hooks.log) {
            *hooks.log << format_log_record(*frame, g, frame_id) << '\n';
            hooks.log->flush();
        }
        if (hooks.on_frame) hooks.on_frame(g, *frame, frame_id);
        ++frame_id;
    }

    report.metrics = acc.finalize();
    report.samples = acc.series();
    return report;
}

// Paces an inner stream so frames are released at their timestamps' spacing.
class PacedStream final : public FrameStream {
public:
    explicit PacedStream(FrameStream& inner) : inner_(inner) {}

    std::optional<EstimatedFrame> next() override {
        auto f = inner_.next();
        if (!f) return f;
        const auto now = std::chrono::steady_clock::now();
        if (!origin_) {
            origin_ = {now, f->timestamp};
        } else {
            const auto due = origin_->first + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                  std::chrono::duration<double>(f->timestamp - origin_->second));
            if (due > now) std::this_thread::sleep_until(due);
        }
        return f;
    }

private:
    FrameStream& inner_;
    std::optional<std::pair<std::chrono::steady_clock::time_point, double>> origin_;
};

// ---------------------------------------------------------------------------
// Persistence

inline std::filesystem::path sessions_dir() {
    if (const char* env = std::getenv("COREBODY_SESSIONS_DIR"); env && *env) return env;
    return "sessions";
}

// Creates the first unused sessions/session-NNNN directory.
inline std::filesystem::path create_session_dir(const std::filesystem::path& root = sessions_dir()) {
    std::filesystem::create_directories(root);
    for (int i = 1;; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "session-%04d", i);
        const auto dir = root / name;
        if (std::filesystem::create_directory(dir)) return dir;
    }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    out.flush();
    if (!out) throw Error("failed writing " + path.string());
}

// Writes report.json and rmse.csv into `dir`.
inline void export_report(const SessionReport& report, const std::filesystem::path& dir) {
    write_text_file(dir / "report.json", format_report(report));
    write_text_file(dir / "rmse.csv", format_series_csv(report.samples));
}

// Runs a session that appends its log to dir/session.poselog and, once
// finalized, exports report.json and rmse.csv next to it.
inline SessionReport record_session(const BodyModelAssets& assets, const SessionConfig& config,
                                    const TargetState& target, FrameStream& frames, const std::filesystem::path& dir,
                                    SessionHooks hooks = {}) {
    std::ofstream log(dir / "session.poselog", std::ios::binary | std::ios::app);
    if (!log) throw Error("cannot open session log in " + dir.string());
    hooks.log = &log;
    const SessionReport report = run_session(assets, config, target, frames, hooks);
    export_report(report, dir);
    return report;
}

}  // namespace corebody

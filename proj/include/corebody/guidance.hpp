#pragma once

// Per-frame guidance: waist alignment, pinhole projection, marker windows and
// vertex binding, distance-to-color mapping, marker sizing, and the 2D COCO
// skeleton baseline.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "corebody/body_model.hpp"
#include "corebody/estimator_gateway.hpp"
#include "corebody/evaluation.hpp"

namespace corebody {

// x = f X / (Z + z_cam) + cx,  y = f Y / (Z + z_cam) + cy
struct CameraIntrinsics {
    double f = 500.0;
    double cx = 332.50;
    double cy = 325.00;
    double z_cam = 2.0;

    friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

inline constexpr double kMinProjectionDepth = 1e-9;

struct ImagePoint {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const ImagePoint&, const ImagePoint&) = default;
};

inline std::optional<ImagePoint> try_project(const Eigen::Vector3d& v, const CameraIntrinsics& cam) {
    const double depth = v.z() + cam.z_cam;
    if (!(depth > kMinProjectionDepth)) return std::nullopt;
    return ImagePoint{cam.f * v.x() / depth + cam.cx, cam.f * v.y() / depth + cam.cy};
}

inline ImagePoint project_vertex(const Eigen::Vector3d& v, const CameraIntrinsics& cam) {
    if (!(cam.f > 0.0)) throw InvalidArgument("focal length must be positive");
    auto p = try_project(v, cam);
    if (!p) throw InvalidArgument("vertex lies at or behind the camera plane");
    return *p;
}

// ---------------------------------------------------------------------------
// Marker sites

enum class MarkerSite : int {
    kLeftHand,
    kRightHand,
    kLeftElbow,
    kRightElbow,
    kLeftShoulder,
    kRightShoulder,
    kLeftKnee,
    kRightKnee,
    kLeftAnkle,
    kRightAnkle,
};

inline constexpr int kNumMarkerSites = 10;

inline constexpr std::array<MarkerSite, kNumMarkerSites> kAllSites = {
    MarkerSite::kLeftHand,     MarkerSite::kRightHand,     MarkerSite::kLeftElbow, MarkerSite::kRightElbow,
    MarkerSite::kLeftShoulder, MarkerSite::kRightShoulder, MarkerSite::kLeftKnee,  MarkerSite::kRightKnee,
    MarkerSite::kLeftAnkle,    MarkerSite::kRightAnkle,
};

inline constexpr std::array<std::string_view, kNumMarkerSites> kSiteNames = {
    "l_hand", "r_hand", "l_elbow", "r_elbow", "l_shoulder", "r_shoulder", "l_knee", "r_knee", "l_ankle", "r_ankle",
};

inline constexpr int site_index(MarkerSite s) { return static_cast<int>(s); }

inline std::string site_name(MarkerSite s) { return std::string(kSiteNames[site_index(s)]); }

inline MarkerSite site_from_name(std::string_view name) {
    for (int i = 0; i < kNumMarkerSites; ++i)
        if (kSiteNames[i] == name) return kAllSites[i];
    throw InvalidArgument("unknown marker site '" + std::string(name) + "'");
}

// Body joint whose projection centers each site's window, indexed by site.
using SiteJointMap = std::array<int, kNumMarkerSites>;

inline constexpr SiteJointMap kDefaultSiteJoints = {
    kLeftHand, kRightHand, kLeftElbow, kRightElbow, kLeftShoulder, kRightShoulder,
    kLeftKnee, kRightKnee, kLeftAnkle, kRightAnkle,
};

inline constexpr double kDefaultMarkerHalfWidth = 20.0;

struct MarkerWindow {
    MarkerSite site = MarkerSite::kLeftHand;
    double x_s = 0.0;
    double y_s = 0.0;
    double x_e = 0.0;
    double y_e = 0.0;

    friend bool operator==(const MarkerWindow&, const MarkerWindow&) = default;
};

using MarkerWindows = std::array<MarkerWindow, kNumMarkerSites>;

// Square windows [j - w, j + w] around each site's projected joint; one
// half-width per site.
inline MarkerWindows compute_marker_windows(std::span<const ImagePoint, kNumMarkerSites> joints2d,
                                            std::span<const double, kNumMarkerSites> half_widths) {
    MarkerWindows out;
    for (int i = 0; i < kNumMarkerSites; ++i) {
        const double w = half_widths[i];
        if (!(w >= 0.0)) throw InvalidArgument("marker half-width must be non-negative");
        const ImagePoint j = joints2d[i];
        out[i] = {kAllSites[i], j.x - w, j.y - w, j.x + w, j.y + w};
    }
    return out;
}

inline MarkerWindows compute_marker_windows(std::span<const ImagePoint, kNumMarkerSites> joints2d,
                                            double half_width) {
    std::array<double, kNumMarkerSites> widths;
    widths.fill(half_width);
    return compute_marker_windows(joints2d, widths);
}

inline bool inside_window(const ImagePoint& p, const MarkerWindow& w) {
    return w.x_s < p.x && p.x < w.x_e && w.y_s < p.y && p.y < w.y_e;
}

// The window test written directly on model coordinates:
//   X > (x_s - cx) / f * (Z + z_cam),  X < (x_e - cx) / f * (Z + z_cam), same for Y.
// Equivalent to projecting and calling inside_window() whenever Z + z_cam > 0.
inline bool satisfies_window_constraints(const Eigen::Vector3d& v, const MarkerWindow& w,
                                         const CameraIntrinsics& cam) {
    const double depth = v.z() + cam.z_cam;
    return v.x() > (w.x_s - cam.cx) / cam.f * depth && v.x() < (w.x_e - cam.cx) / cam.f * depth &&
           v.y() > (w.y_s - cam.cy) / cam.f * depth && v.y() < (w.y_e - cam.cy) / cam.f * depth;
}

// Indices (ascending) of vertices whose projection falls strictly inside the
// window. Vertices at or behind the camera plane are never selected.
inline std::vector<std::uint32_t> select_marker_vertices(const BodyMesh& mesh, const MarkerWindow& window,
                                                         const CameraIntrinsics& cam) {
    std::vector<std::uint32_t> out;
    for (Eigen::Index k = 0; k < mesh.vertices.rows(); ++k) {
        const auto p = try_project(mesh.vertices.row(k).transpose(), cam);
        if (p && inside_window(*p, window)) out.push_back(static_cast<std::uint32_t>(k));
    }
    return out;
}

struct MarkerBinding {
    MarkerSite site = MarkerSite::kLeftHand;
    std::vector<std::uint32_t> vertex_indices;

    friend bool operator==(const MarkerBinding&, const MarkerBinding&) = default;
};

using MarkerBindings = std::array<MarkerBinding, kNumMarkerSites>;

inline MarkerBindings bind_markers(const BodyMesh& mesh, const SiteJointMap& site_joints, const CameraIntrinsics& cam,
                                   std::span<const double, kNumMarkerSites> half_widths) {
    std::array<ImagePoint, kNumMarkerSites> centers;
    for (int i = 0; i < kNumMarkerSites; ++i) {
        const int joint = site_joints[i];
        if (joint < 0 || joint >= mesh.joints.rows()) throw InvalidArgument("site joint index out of range");
        centers[i] = project_vertex(mesh.joints.row(joint).transpose(), cam);
    }
    const MarkerWindows windows = compute_marker_windows(centers, half_widths);
    MarkerBindings out;
    for (int i = 0; i < kNumMarkerSites; ++i) {
        out[i] = {kAllSites[i], select_marker_vertices(mesh, windows[i], cam)};
        if (out[i].vertex_indices.empty())
            throw BindingError(site_name(kAllSites[i]), "marker site " + site_name(kAllSites[i]) +
                                                            " bound no vertices (half-width too small?)");
    }
    return out;
}

inline MarkerBindings bind_markers(const BodyMesh& mesh, const SiteJointMap& site_joints, const CameraIntrinsics& cam,
                                   double half_width = kDefaultMarkerHalfWidth) {
    std::array<double, kNumMarkerSites> widths;
    widths.fill(half_width);
    return bind_markers(mesh, site_joints, cam, widths);
}

// ---------------------------------------------------------------------------
// Comparison

// Translates `current` so its root joint lands on the target's root joint.
// The root joint is assigned exactly; no rotation or scaling is applied.
inline BodyMesh align_to_target(const BodyMesh& current, const BodyMesh& target) {
    if (current.vertices.rows() != target.vertices.rows() || current.joints.rows() != target.joints.rows())
        throw InvalidArgument("alignment needs meshes of identical topology");
    const Eigen::RowVector3d offset = target.joints.row(0) - current.joints.row(0);
    BodyMesh out = current;
    if (offset.isZero(0.0)) return out;
    out.vertices.rowwise() += offset;
    out.joints.rowwise() += offset;
    out.joints.row(0) = target.joints.row(0);
    return out;
}

inline Eigen::Vector3d binding_centroid(const MarkerBinding& binding, const BodyMesh& mesh) {
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    for (std::uint32_t k : binding.vertex_indices) sum += mesh.vertices.row(k).transpose();
    return sum / static_cast<double>(binding.vertex_indices.size());
}

// Centroid-to-centroid distance of the binding's vertices, meters.
inline double marker_distance(const MarkerBinding& binding, const BodyMesh& current, const BodyMesh& target) {
    if (binding.vertex_indices.empty()) throw BindingError(site_name(binding.site), "marker binding is empty");
    for (std::uint32_t k : binding.vertex_indices)
        if (k >= current.vertices.rows() || k >= target.vertices.rows())
            throw InvalidArgument("binding vertex index out of range");
    return (binding_centroid(binding, current) - binding_centroid(binding, target)).norm();
}

enum class MarkerColor : int { kGreenYellow = 0, kYellow = 1, kOrange = 2, kRed = 3 };

inline int severity(MarkerColor c) { return static_cast<int>(c); }

inline std::string color_name(MarkerColor c) {
    switch (c) {
        case MarkerColor::kGreenYellow: return "green_yellow";
        case MarkerColor::kYellow: return "yellow";
        case MarkerColor::kOrange: return "orange";
        case MarkerColor::kRed: return "red";
    }
    return "red";
}

inline MarkerColor color_from_name(std::string_view s) {
    if (s == "green_yellow") return MarkerColor::kGreenYellow;
    if (s == "yellow") return MarkerColor::kYellow;
    if (s == "orange") return MarkerColor::kOrange;
    if (s == "red") return MarkerColor::kRed;
    throw InvalidArgument("unknown marker color '" + std::string(s) + "'");
}

// Lower edges of the yellow, orange and red bands, meters.
struct ColorThresholds {
    double yellow = 0.1;
    double orange = 0.25;
    double red = 0.5;

    void validate() const {
        if (!(yellow > 0.0 && yellow < orange && orange < red && std::isfinite(red)))
            throw ConfigError("color thresholds must be positive and strictly increasing");
    }

    friend bool operator==(const ColorThresholds&, const ColorThresholds&) = default;
};

// Bands are closed below and open above.
inline MarkerColor color_for_distance(double d_e, const ColorThresholds& t = {}) {
    if (!std::isfinite(d_e) || d_e < 0.0) throw InvalidArgument("marker distance must be finite and non-negative");
    if (d_e >= t.red) return MarkerColor::kRed;
    if (d_e >= t.orange) return MarkerColor::kOrange;
    if (d_e >= t.yellow) return MarkerColor::kYellow;
    return MarkerColor::kGreenYellow;
}

struct MarkerRadiusParams {
    double r_min = 4.0;   // px
    double r_max = 16.0;  // px
    double d_ref = 0.5;   // meters at which r_max is reached

    void validate() const {
        if (!(r_min >= 0.0 && r_min <= r_max && std::isfinite(r_max)))
            throw InvalidArgument("marker radius needs 0 <= r_min <= r_max");
        if (!(d_ref > 0.0 && std::isfinite(d_ref))) throw InvalidArgument("marker radius needs d_ref > 0");
    }

    friend bool operator==(const MarkerRadiusParams&, const MarkerRadiusParams&) = default;
};

// Markers shrink as the trainee closes in: linear in d_e, clamped to [r_min, r_max].
inline double marker_radius(double d_e, const MarkerRadiusParams& p = {}) {
    p.validate();
    if (!std::isfinite(d_e) || d_e < 0.0) throw InvalidArgument("marker distance must be finite and non-negative");
    return std::clamp(p.r_min + (p.r_max - p.r_min) * d_e / p.d_ref, p.r_min, p.r_max);
}

struct MarkerState {
    MarkerSite site = MarkerSite::kLeftHand;
    double distance = 0.0;
    MarkerColor color = MarkerColor::kGreenYellow;
    double radius = 0.0;

    friend bool operator==(const MarkerState&, const MarkerState&) = default;
};

// ---------------------------------------------------------------------------
// Skeleton baseline (OpenPose COCO-18 order)

enum CocoJoint : int {
    kCocoNose = 0,
    kCocoNeck = 1,
    kCocoRightShoulder = 2,
    kCocoRightElbow = 3,
    kCocoRightWrist = 4,
    kCocoLeftShoulder = 5,
    kCocoLeftElbow = 6,
    kCocoLeftWrist = 7,
    kCocoRightHip = 8,
    kCocoRightKnee = 9,
    kCocoRightAnkle = 10,
    kCocoLeftHip = 11,
    kCocoLeftKnee = 12,
    kCocoLeftAnkle = 13,
    kCocoRightEye = 14,
    kCocoLeftEye = 15,
    kCocoRightEar = 16,
    kCocoLeftEar = 17,
};

// OpenPose COCO limbs without the ear-shoulder pairs.
inline constexpr std::array<std::pair<int, int>, 17> kCocoBones = {{
    {kCocoNeck, kCocoRightShoulder}, {kCocoNeck, kCocoLeftShoulder},
    {kCocoRightShoulder, kCocoRightElbow}, {kCocoRightElbow, kCocoRightWrist},
    {kCocoLeftShoulder, kCocoLeftElbow}, {kCocoLeftElbow, kCocoLeftWrist},
    {kCocoNeck, kCocoRightHip}, {kCocoRightHip, kCocoRightKnee}, {kCocoRightKnee, kCocoRightAnkle},
    {kCocoNeck, kCocoLeftHip}, {kCocoLeftHip, kCocoLeftKnee}, {kCocoLeftKnee, kCocoLeftAnkle},
    {kCocoNeck, kCocoNose},
    {kCocoNose, kCocoRightEye}, {kCocoRightEye, kCocoRightEar},
    {kCocoNose, kCocoLeftEye}, {kCocoLeftEye, kCocoLeftEar},
}};

// Body joints for the 13 COCO joints that have a direct counterpart; -1 marks
// face joints, which are placed at fixed offsets from the head joint.
inline constexpr std::array<int, kNumCocoJoints> kCocoFromBodyJoint = {
    -1, kNeck, kRightShoulder, kRightElbow, kRightWrist, kLeftShoulder, kLeftElbow, kLeftWrist,
    kRightHip, kRightKnee, kRightAnkle, kLeftHip, kLeftKnee, kLeftAnkle, -1, -1, -1, -1,
};

// Face offsets from the head joint in model coordinates (y up, +x left, +z front), meters.
inline const std::array<Eigen::Vector3d, kNumCocoJoints>& coco_face_offsets() {
    static const std::array<Eigen::Vector3d, kNumCocoJoints> offsets = [] {
        std::array<Eigen::Vector3d, kNumCocoJoints> o;
        o.fill(Eigen::Vector3d::Zero());
        o[kCocoNose] = {0.0, 0.06, 0.09};
        o[kCocoRightEye] = {-0.03, 0.09, 0.08};
        o[kCocoLeftEye] = {0.03, 0.09, 0.08};
        o[kCocoRightEar] = {-0.07, 0.07, 0.0};
        o[kCocoLeftEar] = {0.07, 0.07, 0.0};
        return o;
    }();
    return offsets;
}

inline std::array<Eigen::Vector3d, kNumCocoJoints> coco_joints_from_body(const PointCloud& joints) {
    if (joints.rows() != kNumJoints) throw InvalidArgument("expected 24 body joints");
    std::array<Eigen::Vector3d, kNumCocoJoints> out;
    const Eigen::Vector3d head = joints.row(kHead).transpose();
    for (int c = 0; c < kNumCocoJoints; ++c) {
        const int j = kCocoFromBodyJoint[c];
        out[c] = j >= 0 ? Eigen::Vector3d(joints.row(j).transpose()) : Eigen::Vector3d(head + coco_face_offsets()[c]);
    }
    return out;
}

struct SkeletonSegment {
    int from = 0;
    int to = 0;
    ImagePoint a;
    ImagePoint b;

    friend bool operator==(const SkeletonSegment&, const SkeletonSegment&) = default;
};

// Bones whose two endpoints both exceed the confidence threshold.
inline std::vector<SkeletonSegment> skeleton_overlay(const CocoKeypoints& keypoints,
                                                     double confidence_threshold = kDefaultConfidenceThreshold) {
    int confident = 0;
    for (const Keypoint& k : keypoints) confident += k.confidence > confidence_threshold ? 1 : 0;
    if (confident < 2) throw InvalidArgument("skeleton overlay needs at least 2 confident joints");
    std::vector<SkeletonSegment> out;
    for (const auto& [from, to] : kCocoBones) {
        const Keypoint& a = keypoints[from];
        const Keypoint& b = keypoints[to];
        if (a.confidence > confidence_threshold && b.confidence > confidence_threshold)
            out.push_back({from, to, {a.x, a.y}, {b.x, b.y}});
    }
    return out;
}

// Projects the body's joints through the 24-to-18 mapping; joints behind the
// camera are treated as missing.
inline CocoKeypoints project_coco_keypoints(const PointCloud& joints, const CameraIntrinsics& cam) {
    const auto coco = coco_joints_from_body(joints);
    CocoKeypoints out;
    for (int c = 0; c < kNumCocoJoints; ++c) {
        if (auto p = try_project(coco[c], cam))
            out[c] = {p->x, p->y, 1.0};
        else
            out[c] = {0.0, 0.0, 0.0};
    }
    return out;
}

inline std::vector<SkeletonSegment> skeleton_overlay(const BodyMesh& mesh, const CameraIntrinsics& cam) {
    return skeleton_overlay(project_coco_keypoints(mesh.joints, cam));
}

// ---------------------------------------------------------------------------
// Frame assembly

struct GuidanceConfig {
    ColorThresholds thresholds;
    MarkerRadiusParams radius;
    bool include_skeleton = false;
};

struct GuidanceFrame {
    double timestamp = 0.0;
    BodyMesh current;  // aligned to target
    BodyMesh target;
    std::array<MarkerState, kNumMarkerSites> markers;
    double rmse = 0.0;
    std::vector<SkeletonSegment> skeleton;  // filled when GuidanceConfig::include_skeleton
};

inline GuidanceFrame build_guidance_frame(const BodyMesh& current, const BodyMesh& target,
                                          const MarkerBindings& bindings, const CameraIntrinsics& cam,
                                          const GuidanceConfig& config, const std::vector<bool>& head_mask,
                                          double timestamp = 0.0) {
    GuidanceFrame frame;
    frame.timestamp = timestamp;
    frame.current = align_to_target(current, target);
    frame.target = target;
    for (int i = 0; i < kNumMarkerSites; ++i) {
        const double d = marker_distance(bindings[i], frame.current, target);
        frame.markers[i] = {kAllSites[i], d, color_for_distance(d, config.thresholds), marker_radius(d, config.radius)};
    }
    frame.rmse = compute_rmse(frame.current, target, head_mask);
    if (config.include_skeleton) frame.skeleton = skeleton_overlay(frame.current, cam);
    return frame;
}

}  // namespace corebody

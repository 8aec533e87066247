#pragma once

// SMPL-compatible parametric body: shape blendshapes, joint regression and
// linear blend skinning over a 24-joint kinematic tree.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "corebody/error.hpp"

namespace corebody {

using PointCloud = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Faces = Eigen::Matrix<std::uint32_t, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline constexpr int kNumJoints = 24;
inline constexpr int kNumShapeCoeffs = 10;
inline constexpr int kNumPoseParams = 3 * kNumJoints;
inline constexpr int kNumPoseBlendshapes = 9 * (kNumJoints - 1);
inline constexpr int kNoParent = -1;

// SMPL joint order.
enum Joint : int {
    kPelvis = 0,
    kLeftHip = 1,
    kRightHip = 2,
    kSpine1 = 3,
    kLeftKnee = 4,
    kRightKnee = 5,
    kSpine2 = 6,
    kLeftAnkle = 7,
    kRightAnkle = 8,
    kSpine3 = 9,
    kLeftFoot = 10,
    kRightFoot = 11,
    kNeck = 12,
    kLeftCollar = 13,
    kRightCollar = 14,
    kHead = 15,
    kLeftShoulder = 16,
    kRightShoulder = 17,
    kLeftElbow = 18,
    kRightElbow = 19,
    kLeftWrist = 20,
    kRightWrist = 21,
    kLeftHand = 22,
    kRightHand = 23,
};

inline constexpr std::array<int, kNumJoints> kSmplParents = {
    kNoParent, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};

struct BodyModelAssets {
    PointCloud template_vertices;         // N x 3, meters
    Faces faces;                          // F x 3
    Eigen::MatrixXd shape_blendshapes;    // 3N x 10; row 3*v + axis
    Eigen::MatrixXd joint_regressor;      // J x N
    Eigen::MatrixXd skinning_weights;     // N x J
    std::vector<int> kinematic_parents;   // J, root holds kNoParent
    std::optional<Eigen::MatrixXd> pose_blendshapes;  // 3N x 9(J-1)
    std::vector<bool> head_vertex_mask;   // N

    // Parents-before-children traversal, filled by validate_assets().
    std::vector<int> joint_order;

    Eigen::Index vertex_count() const { return template_vertices.rows(); }
    Eigen::Index face_count() const { return faces.rows(); }
    Eigen::Index joint_count() const { return joint_regressor.rows(); }
};

struct BodyShape {
    std::array<double, kNumShapeCoeffs> beta{};

    friend bool operator==(const BodyShape&, const BodyShape&) = default;
};

// 72 axis-angle parameters: 3 for the root orientation followed by 3 for each
// of the 23 non-root joints, in SMPL joint order.
struct BodyPose {
    std::array<double, kNumPoseParams> params{};

    Eigen::Vector3d rotation(int joint) const {
        return {params[3 * joint], params[3 * joint + 1], params[3 * joint + 2]};
    }
    void set_rotation(int joint, const Eigen::Vector3d& r) {
        params[3 * joint] = r.x();
        params[3 * joint + 1] = r.y();
        params[3 * joint + 2] = r.z();
    }
    Eigen::Vector3d root_orientation() const { return rotation(0); }

    friend bool operator==(const BodyPose&, const BodyPose&) = default;
};

struct BodyMesh {
    PointCloud vertices;  // N x 3
    PointCloud joints;    // J x 3
};

inline constexpr double kDefaultShapeLimit = 10.0;

inline bool all_finite(const BodyPose& pose) {
    for (double p : pose.params)
        if (!std::isfinite(p)) return false;
    return true;
}

// Checks finiteness and the |beta_i| <= limit sanity bound.
inline void validate_shape(const BodyShape& shape, double limit = kDefaultShapeLimit) {
    for (double b : shape.beta) {
        if (!std::isfinite(b)) throw InvalidArgument("shape coefficient is not finite");
        if (std::abs(b) > limit)
            throw InvalidArgument("shape coefficient magnitude exceeds " + std::to_string(limit));
    }
}

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
    Eigen::Matrix3d k;
    k << 0.0, -v.z(), v.y(),
         v.z(), 0.0, -v.x(),
         -v.y(), v.x(), 0.0;
    return k;
}

// Axis-angle to rotation matrix. Below 1e-8 rad the second-order series is
// used, which returns the identity bit-exactly for a zero vector.
inline Eigen::Matrix3d rodrigues(const Eigen::Vector3d& r) {
    const double angle = r.norm();
    const Eigen::Matrix3d k = skew(r);
    if (angle < 1e-8) return Eigen::Matrix3d::Identity() + k + 0.5 * k * k;
    const double a = std::sin(angle) / angle;
    const double b = (1.0 - std::cos(angle)) / (angle * angle);
    return Eigen::Matrix3d::Identity() + a * k + b * k * k;
}

// Returns a parents-before-children order or throws if `parents` is not a
// single tree rooted at joint 0.
inline std::vector<int> kinematic_order(const std::vector<int>& parents) {
    const int n = static_cast<int>(parents.size());
    if (n == 0) throw AssetError("kinematic tree is empty");
    if (parents[0] != kNoParent) throw AssetError("joint 0 must be the root");
    std::vector<std::vector<int>> children(n);
    for (int j = 1; j < n; ++j) {
        const int p = parents[j];
        if (p == kNoParent) throw AssetError("joint " + std::to_string(j) + " is a second root");
        if (p < 0 || p >= n || p == j)
            throw AssetError("joint " + std::to_string(j) + " has invalid parent " + std::to_string(p));
        children[p].push_back(j);
    }
    std::vector<int> order;
    order.reserve(n);
    order.push_back(0);
    for (std::size_t i = 0; i < order.size(); ++i)
        for (int c : children[order[i]]) order.push_back(c);
    if (static_cast<int>(order.size()) != n)
        throw AssetError("kinematic tree has a cycle or unreachable joints");
    return order;
}

// Checks every asset invariant and fills `joint_order`.
inline void validate_assets(BodyModelAssets& a, double row_tolerance = 1e-6) {
    const Eigen::Index n = a.template_vertices.rows();
    const Eigen::Index j = static_cast<Eigen::Index>(a.kinematic_parents.size());
    if (n == 0) throw AssetError("asset has no vertices");
    if (j != kNumJoints)
        throw AssetError("expected " + std::to_string(kNumJoints) + " joints, got " + std::to_string(j));
    if (a.shape_blendshapes.rows() != 3 * n || a.shape_blendshapes.cols() != kNumShapeCoeffs)
        throw AssetError("shape blendshape dimensions do not match vertex count");
    if (a.joint_regressor.rows() != j || a.joint_regressor.cols() != n)
        throw AssetError("joint regressor dimensions do not match");
    if (a.skinning_weights.rows() != n || a.skinning_weights.cols() != j)
        throw AssetError("skinning weight dimensions do not match");
    if (a.pose_blendshapes &&
        (a.pose_blendshapes->rows() != 3 * n || a.pose_blendshapes->cols() != 9 * (j - 1)))
        throw AssetError("pose blendshape dimensions do not match");
    if (static_cast<Eigen::Index>(a.head_vertex_mask.size()) != n)
        throw AssetError("head mask length does not match vertex count");

    for (Eigen::Index f = 0; f < a.faces.rows(); ++f)
        for (int c = 0; c < 3; ++c)
            if (a.faces(f, c) >= static_cast<std::uint64_t>(n))
                throw AssetError("face " + std::to_string(f) + " references vertex out of range");

    if (!a.template_vertices.allFinite() || !a.shape_blendshapes.allFinite() ||
        !a.joint_regressor.allFinite() || !a.skinning_weights.allFinite() ||
        (a.pose_blendshapes && !a.pose_blendshapes->allFinite()))
        throw AssetError("asset contains non-finite values");

    for (Eigen::Index v = 0; v < n; ++v) {
        if ((a.skinning_weights.row(v).array() < 0.0).any())
            throw AssetError("skinning weights of vertex " + std::to_string(v) + " are negative");
        const double sum = a.skinning_weights.row(v).sum();
        if (std::abs(sum - 1.0) > row_tolerance)
            throw AssetError("skinning weights of vertex " + std::to_string(v) + " sum to " +
                             std::to_string(sum) + ", not 1");
    }
    for (Eigen::Index r = 0; r < j; ++r) {
        if ((a.joint_regressor.row(r).array() < 0.0).any())
            throw AssetError("joint regressor row " + std::to_string(r) + " is negative");
        const double sum = a.joint_regressor.row(r).sum();
        if (std::abs(sum - 1.0) > row_tolerance)
            throw AssetError("joint regressor row " + std::to_string(r) + " sums to " +
                             std::to_string(sum) + ", not 1");
    }
    a.joint_order = kinematic_order(a.kinematic_parents);
}

// Marks vertices whose dominant skinning weight belongs to the head joint
// (optionally also the neck).
inline std::vector<bool> head_mask_from_weights(const Eigen::MatrixXd& weights,
                                                bool include_neck = false) {
    std::vector<bool> mask(static_cast<std::size_t>(weights.rows()), false);
    for (Eigen::Index v = 0; v < weights.rows(); ++v) {
        Eigen::Index best = 0;
        weights.row(v).maxCoeff(&best);
        mask[static_cast<std::size_t>(v)] = best == kHead || (include_neck && best == kNeck);
    }
    return mask;
}

inline std::size_t non_head_count(const std::vector<bool>& mask) {
    std::size_t n = 0;
    for (bool h : mask) n += h ? 0 : 1;
    return n;
}

// template + sum_i beta_i * blendshape_i
inline PointCloud shape_template(const BodyModelAssets& assets, const BodyShape& shape) {
    const Eigen::Index n = assets.vertex_count();
    const Eigen::Map<const Eigen::VectorXd> beta(shape.beta.data(), kNumShapeCoeffs);
    PointCloud out(n, 3);
    Eigen::Map<Eigen::VectorXd> flat(out.data(), 3 * n);
    flat = Eigen::Map<const Eigen::VectorXd>(assets.template_vertices.data(), 3 * n) +
           assets.shape_blendshapes * beta;
    return out;
}

inline PointCloud regress_joints(const BodyModelAssets& assets, const PointCloud& shaped) {
    if (shaped.rows() != assets.vertex_count())
        throw InvalidArgument("shaped vertex count does not match assets");
    return assets.joint_regressor * shaped;
}

// Posed mesh M(beta, theta).
//
// Each joint carries a world rotation W_j and a skinning offset s_j such that
// a rest-space point x bound to j maps to W_j x + s_j. The mesh is evaluated
// in displacement form, v' = v + sum_j w_j ((W_j - I) v + s_j), so the zero
// pose reproduces the rest shape without rounding.
inline BodyMesh pose_mesh(const BodyModelAssets& assets, const BodyShape& shape, const BodyPose& pose) {
    if (!all_finite(pose)) throw InvalidArgument("pose contains non-finite parameters");
    for (double b : shape.beta)
        if (!std::isfinite(b)) throw InvalidArgument("shape contains non-finite coefficients");

    const Eigen::Index n = assets.vertex_count();
    const int j_count = static_cast<int>(assets.joint_count());
    PointCloud rest = shape_template(assets, shape);
    const PointCloud rest_joints = regress_joints(assets, rest);

    std::vector<Eigen::Matrix3d> local(j_count);
    for (int j = 0; j < j_count; ++j) local[j] = rodrigues(pose.rotation(j));

    if (assets.pose_blendshapes) {
        Eigen::VectorXd feature(9 * (j_count - 1));
        for (int j = 1; j < j_count; ++j) {
            const Eigen::Matrix3d d = local[j] - Eigen::Matrix3d::Identity();
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) feature(9 * (j - 1) + 3 * r + c) = d(r, c);
        }
        Eigen::Map<Eigen::VectorXd>(rest.data(), 3 * n) += *assets.pose_blendshapes * feature;
    }

    // Per joint: [W_j - I | s_j]
    std::vector<Eigen::Matrix<double, 3, 4>> delta(j_count);
    std::vector<Eigen::Matrix3d> world(j_count);
    for (int j : assets.joint_order) {
        const int p = assets.kinematic_parents[j];
        const Eigen::Vector3d rest_j = rest_joints.row(j).transpose();
        Eigen::Vector3d offset;
        if (p == kNoParent) {
            world[j] = local[j];
            offset = rest_j - world[j] * rest_j;
        } else {
            world[j] = world[p] * local[j];
            offset = delta[p].col(3) + (world[p] - world[j]) * rest_j;
        }
        delta[j].leftCols<3>() = world[j] - Eigen::Matrix3d::Identity();
        delta[j].col(3) = offset;
    }

    BodyMesh mesh;
    mesh.vertices.resize(n, 3);
    for (Eigen::Index v = 0; v < n; ++v) {
        Eigen::Matrix<double, 3, 4> blend = Eigen::Matrix<double, 3, 4>::Zero();
        for (int j = 0; j < j_count; ++j) {
            const double w = assets.skinning_weights(v, j);
            if (w != 0.0) blend += w * delta[j];
        }
        const Eigen::Vector3d x = rest.row(v).transpose();
        mesh.vertices.row(v) = (x + blend.leftCols<3>() * x + blend.col(3)).transpose();
    }

    mesh.joints.resize(j_count, 3);
    for (int j = 0; j < j_count; ++j) {
        const Eigen::Vector3d x = rest_joints.row(j).transpose();
        mesh.joints.row(j) = (x + delta[j].leftCols<3>() * x + delta[j].col(3)).transpose();
    }
    return mesh;
}

// Componentwise linear blend of the 72 parameters. Only meaningful for small
// rotation differences; t == 1 returns `b` exactly.
inline BodyPose interpolate_pose(const BodyPose& a, const BodyPose& b, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("interpolation fraction must lie in [0, 1]");
    if (t == 1.0) return b;
    BodyPose out;
    for (int i = 0; i < kNumPoseParams; ++i) out.params[i] = a.params[i] + t * (b.params[i] - a.params[i]);
    return out;
}

}  // namespace corebody

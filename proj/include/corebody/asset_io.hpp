#pragma once

// Body asset serialization.
//
// Binary layout (all little-endian):
//   "CBM1"
//   u32 N, F, J, n_shape, has_pose_blendshapes
//   f64 template_vertices[N][3]
//   u32 faces[F][3]
//   f64 shape_blendshapes[N][3][n_shape]
//   f64 joint_regressor[J][N]
//   f64 skinning_weights[N][J]
//   u32 kinematic_parents[J]            root = 0xFFFFFFFF
//   f64 pose_blendshapes[N][3][9(J-1)]  only if has_pose_blendshapes
//   u8  head_mask[ceil(N/8)]            bit v%8 of byte v/8, LSB first
//
// The JSON mirror carries the same arrays under camelCase keys (see
// write_assets_json) and is meant for hand-authored fixtures.

#include <array>
#include <cctype>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <iterator>
#include <ostream>
#include <string>

#include "json.hpp"

#include "corebody/body_model.hpp"

namespace corebody {

inline constexpr std::array<char, 4> kAssetMagic = {'C', 'B', 'M', '1'};
inline constexpr std::uint32_t kBinaryNoParent = 0xFFFFFFFFu;

namespace detail {

class LeReader {
public:
    explicit LeReader(std::istream& in) : in_(in) {}

    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        read(b, 4, what);
        return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
               static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
    }

    double f64(const char* what) {
        unsigned char b[8];
        read(b, 8, what);
        std::uint64_t bits = 0;
        for (int i = 7; i >= 0; --i) bits = bits << 8 | b[i];
        return std::bit_cast<double>(bits);
    }

    void read(unsigned char* dst, std::size_t n, const char* what) {
        in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw AssetError(std::string("truncated asset stream while reading ") + what);
    }

    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

private:
    std::istream& in_;
};

class LeWriter {
public:
    explicit LeWriter(std::ostream& out) : out_(out) {}

    void u32(std::uint32_t v) {
        const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                           static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
        out_.write(b, 4);
    }

    void f64(double d) {
        const auto bits = std::bit_cast<std::uint64_t>(d);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
        out_.write(b, 8);
    }

    void bytes(const std::string& s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

private:
    std::ostream& out_;
};

// Large enough for full SMPL-X meshes; guards allocations on corrupt headers.
inline constexpr std::uint32_t kMaxDimension = 1u << 24;

inline BodyModelAssets read_binary_assets(std::istream& in) {
    LeReader r(in);
    unsigned char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, kAssetMagic.data(), 4) != 0) throw AssetError("bad asset magic");

    const std::uint32_t n = r.u32("header");
    const std::uint32_t f = r.u32("header");
    const std::uint32_t j = r.u32("header");
    const std::uint32_t n_shape = r.u32("header");
    const std::uint32_t has_pose = r.u32("header");
    if (n == 0 || n > kMaxDimension || f > kMaxDimension || j > 1024 || n_shape > 1024)
        throw AssetError("malformed asset header dimensions");
    if (j != kNumJoints) throw AssetError("dimension mismatch: asset declares " + std::to_string(j) + " joints");
    if (n_shape != kNumShapeCoeffs)
        throw AssetError("dimension mismatch: asset declares " + std::to_string(n_shape) + " shape blendshapes");
    if (has_pose > 1) throw AssetError("malformed pose blendshape flag");

    BodyModelAssets a;
    a.template_vertices.resize(n, 3);
    for (Eigen::Index i = 0; i < a.template_vertices.size(); ++i) a.template_vertices.data()[i] = r.f64("vertices");
    a.faces.resize(f, 3);
    for (Eigen::Index i = 0; i < a.faces.size(); ++i) a.faces.data()[i] = r.u32("faces");

    // Stored [N][3][n_shape]; our matrix is 3N x n_shape column-major.
    a.shape_blendshapes.resize(3 * static_cast<Eigen::Index>(n), n_shape);
    for (Eigen::Index row = 0; row < a.shape_blendshapes.rows(); ++row)
        for (Eigen::Index k = 0; k < n_shape; ++k) a.shape_blendshapes(row, k) = r.f64("shape blendshapes");

    a.joint_regressor.resize(j, n);
    for (Eigen::Index row = 0; row < j; ++row)
        for (Eigen::Index col = 0; col < n; ++col) a.joint_regressor(row, col) = r.f64("joint regressor");
    a.skinning_weights.resize(n, j);
    for (Eigen::Index row = 0; row < n; ++row)
        for (Eigen::Index col = 0; col < j; ++col) a.skinning_weights(row, col) = r.f64("skinning weights");

    a.kinematic_parents.resize(j);
    for (auto& p : a.kinematic_parents) {
        const std::uint32_t raw = r.u32("kinematic parents");
        p = raw == kBinaryNoParent ? kNoParent : static_cast<int>(std::min<std::uint32_t>(raw, j));
    }

    if (has_pose) {
        const Eigen::Index cols = 9 * (static_cast<Eigen::Index>(j) - 1);
        Eigen::MatrixXd pb(3 * static_cast<Eigen::Index>(n), cols);
        for (Eigen::Index row = 0; row < pb.rows(); ++row)
            for (Eigen::Index col = 0; col < cols; ++col) pb(row, col) = r.f64("pose blendshapes");
        a.pose_blendshapes = std::move(pb);
    }

    a.head_vertex_mask.assign(n, false);
    for (std::uint32_t byte = 0; byte < (n + 7) / 8; ++byte) {
        unsigned char bits;
        r.read(&bits, 1, "head mask");
        for (std::uint32_t bit = 0; bit < 8 && 8 * byte + bit < n; ++bit)
            a.head_vertex_mask[8 * byte + bit] = (bits >> bit) & 1u;
    }
    if (!r.at_end()) throw AssetError("trailing bytes after asset data");

    validate_assets(a);
    return a;
}

template <typename Matrix>
Matrix json_matrix(const nlohmann::json& rows, Eigen::Index expected_cols, const char* key) {
    if (!rows.is_array()) throw AssetError(std::string(key) + " must be an array");
    Matrix m(static_cast<Eigen::Index>(rows.size()), expected_cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const auto& row = rows[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != expected_cols)
            throw AssetError(std::string("dimension mismatch in ") + key + " row " + std::to_string(r));
        for (Eigen::Index c = 0; c < expected_cols; ++c)
            m(r, c) = row[static_cast<std::size_t>(c)].get<typename Matrix::Scalar>();
    }
    return m;
}

// [N][3][K] nested arrays into a 3N x K matrix.
inline Eigen::MatrixXd json_blendshapes(const nlohmann::json& data, Eigen::Index n, Eigen::Index k, const char* key) {
    if (!data.is_array() || static_cast<Eigen::Index>(data.size()) != n)
        throw AssetError(std::string("dimension mismatch in ") + key);
    Eigen::MatrixXd m(3 * n, k);
    for (Eigen::Index v = 0; v < n; ++v) {
        const auto& vert = data[static_cast<std::size_t>(v)];
        if (!vert.is_array() || vert.size() != 3) throw AssetError(std::string("dimension mismatch in ") + key);
        for (int c = 0; c < 3; ++c) {
            const auto& comps = vert[static_cast<std::size_t>(c)];
            if (!comps.is_array() || static_cast<Eigen::Index>(comps.size()) != k)
                throw AssetError(std::string("dimension mismatch in ") + key);
            for (Eigen::Index i = 0; i < k; ++i) m(3 * v + c, i) = comps[static_cast<std::size_t>(i)].get<double>();
        }
    }
    return m;
}

inline nlohmann::json blendshapes_json(const Eigen::MatrixXd& m) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index v = 0; v < m.rows() / 3; ++v) {
        nlohmann::json vert = nlohmann::json::array();
        for (int c = 0; c < 3; ++c) {
            nlohmann::json comps = nlohmann::json::array();
            for (Eigen::Index i = 0; i < m.cols(); ++i) comps.push_back(m(3 * v + c, i));
            vert.push_back(std::move(comps));
        }
        out.push_back(std::move(vert));
    }
    return out;
}

template <typename Matrix>
nlohmann::json matrix_json(const Matrix& m) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        out.push_back(std::move(row));
    }
    return out;
}

inline BodyModelAssets read_json_assets(std::istream& in) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw AssetError(std::string("malformed asset JSON: ") + e.what());
    }
    try {
        BodyModelAssets a;
        a.template_vertices = json_matrix<PointCloud>(doc.at("vertices"), 3, "vertices");
        const Eigen::Index n = a.template_vertices.rows();
        a.faces = json_matrix<Faces>(doc.at("faces"), 3, "faces");
        a.shape_blendshapes = json_blendshapes(doc.at("shapeBlendshapes"), n, kNumShapeCoeffs, "shapeBlendshapes");
        a.joint_regressor = json_matrix<Eigen::MatrixXd>(doc.at("jointRegressor"), n, "jointRegressor");
        a.skinning_weights =
            json_matrix<Eigen::MatrixXd>(doc.at("skinningWeights"), a.joint_regressor.rows(), "skinningWeights");
        a.kinematic_parents = doc.at("parents").get<std::vector<int>>();
        if (doc.contains("poseBlendshapes"))
            a.pose_blendshapes = json_blendshapes(doc.at("poseBlendshapes"), n,
                                                  9 * (a.joint_regressor.rows() - 1), "poseBlendshapes");
        for (const auto& h : doc.at("headMask")) a.head_vertex_mask.push_back(h.is_boolean() ? h.get<bool>() : h.get<int>() != 0);
        validate_assets(a);
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw AssetError(std::string("malformed asset JSON: ") + e.what());
    }
}

}  // namespace detail

// Reads either format; the first byte decides ('{' selects JSON).
inline BodyModelAssets load_assets(std::istream& in) {
    while (std::isspace(in.peek())) in.get();
    if (in.peek() == '{') return detail::read_json_assets(in);
    return detail::read_binary_assets(in);
}

inline void write_assets_binary(std::ostream& out, const BodyModelAssets& a) {
    detail::LeWriter w(out);
    w.bytes(std::string(kAssetMagic.begin(), kAssetMagic.end()));
    const auto n = static_cast<std::uint32_t>(a.vertex_count());
    const auto j = static_cast<std::uint32_t>(a.joint_count());
    w.u32(n);
    w.u32(static_cast<std::uint32_t>(a.face_count()));
    w.u32(j);
    w.u32(static_cast<std::uint32_t>(a.shape_blendshapes.cols()));
    w.u32(a.pose_blendshapes ? 1u : 0u);
    for (Eigen::Index i = 0; i < a.template_vertices.size(); ++i) w.f64(a.template_vertices.data()[i]);
    for (Eigen::Index i = 0; i < a.faces.size(); ++i) w.u32(a.faces.data()[i]);
    for (Eigen::Index r = 0; r < a.shape_blendshapes.rows(); ++r)
        for (Eigen::Index c = 0; c < a.shape_blendshapes.cols(); ++c) w.f64(a.shape_blendshapes(r, c));
    for (Eigen::Index r = 0; r < a.joint_regressor.rows(); ++r)
        for (Eigen::Index c = 0; c < a.joint_regressor.cols(); ++c) w.f64(a.joint_regressor(r, c));
    for (Eigen::Index r = 0; r < a.skinning_weights.rows(); ++r)
        for (Eigen::Index c = 0; c < a.skinning_weights.cols(); ++c) w.f64(a.skinning_weights(r, c));
    for (int p : a.kinematic_parents) w.u32(p == kNoParent ? kBinaryNoParent : static_cast<std::uint32_t>(p));
    if (a.pose_blendshapes)
        for (Eigen::Index r = 0; r < a.pose_blendshapes->rows(); ++r)
            for (Eigen::Index c = 0; c < a.pose_blendshapes->cols(); ++c) w.f64((*a.pose_blendshapes)(r, c));
    std::string mask((n + 7) / 8, '\0');
    for (std::uint32_t v = 0; v < n; ++v)
        if (a.head_vertex_mask[v]) mask[v / 8] = static_cast<char>(mask[v / 8] | (1u << (v % 8)));
    w.bytes(mask);
    if (!out) throw AssetError("failed writing asset stream");
}

inline nlohmann::json assets_to_json(const BodyModelAssets& a) {
    nlohmann::json doc;
    doc["vertices"] = detail::matrix_json(a.template_vertices);
    doc["faces"] = detail::matrix_json(a.faces);
    doc["shapeBlendshapes"] = detail::blendshapes_json(a.shape_blendshapes);
    doc["jointRegressor"] = detail::matrix_json(a.joint_regressor);
    doc["skinningWeights"] = detail::matrix_json(a.skinning_weights);
    doc["parents"] = a.kinematic_parents;
    if (a.pose_blendshapes) doc["poseBlendshapes"] = detail::blendshapes_json(*a.pose_blendshapes);
    doc["headMask"] = a.head_vertex_mask;
    return doc;
}

inline void write_assets_json(std::ostream& out, const BodyModelAssets& a) {
    out << assets_to_json(a).dump() << '\n';
    if (!out) throw AssetError("failed writing asset stream");
}

}  // namespace corebody

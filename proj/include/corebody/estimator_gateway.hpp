#pragma once

// Seam between the external pose estimator and the engine: the frame record
// protocol, replay streams, and the crop normalization math applied on the
// estimator side.
//
// Frame record, one JSON object per line (UTF-8):
//   {"t": seconds, "theta": [72 numbers], "beta": [10 numbers],
//    "kp": optional [[x, y, confidence] x 18]}
// Unknown keys are ignored so that annotated session logs replay unchanged.

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "corebody/body_model.hpp"

namespace corebody {

inline constexpr int kNumCocoJoints = 18;
inline constexpr double kDefaultConfidenceThreshold = 0.1;
inline constexpr double kDefaultCropDiagonal = 150.0;
inline constexpr int kCropOutputSize = 224;

struct Keypoint {
    double x = 0.0;
    double y = 0.0;
    double confidence = 0.0;

    friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

using CocoKeypoints = std::array<Keypoint, kNumCocoJoints>;

struct EstimatedFrame {
    double timestamp = 0.0;
    BodyPose pose;
    BodyShape shape;
    std::optional<CocoKeypoints> keypoints2d;

    friend bool operator==(const EstimatedFrame&, const EstimatedFrame&) = default;
};

struct BoundingBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double diagonal() const { return std::hypot(width(), height()); }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct CropSpec {
    double scale = 1.0;
    double center_x = 0.0;
    double center_y = 0.0;
    int output_size = kCropOutputSize;
};

inline BoundingBox compute_bounding_box(std::span<const Keypoint> keypoints,
                                        double confidence_threshold = kDefaultConfidenceThreshold) {
    BoundingBox box{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                    -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    bool any = false;
    for (const Keypoint& k : keypoints) {
        if (!(k.confidence > confidence_threshold)) continue;
        box.x_min = std::min(box.x_min, k.x);
        box.y_min = std::min(box.y_min, k.y);
        box.x_max = std::max(box.x_max, k.x);
        box.y_max = std::max(box.y_max, k.y);
        any = true;
    }
    if (!any) throw InvalidArgument("no keypoint above the confidence threshold");
    return box;
}

// Scale that brings the person's bounding-box diagonal to `target_diagonal`
// pixels, centered on the box.
inline CropSpec compute_crop(const BoundingBox& box, double target_diagonal = kDefaultCropDiagonal) {
    const double diagonal = box.diagonal();
    if (!(diagonal > 0.0)) throw InvalidArgument("bounding box has zero diagonal");
    if (!(target_diagonal > 0.0)) throw InvalidArgument("target diagonal must be positive");
    return {target_diagonal / diagonal, 0.5 * (box.x_min + box.x_max), 0.5 * (box.y_min + box.y_max),
            kCropOutputSize};
}

// ---------------------------------------------------------------------------
// Frame records

inline nlohmann::json frame_to_json(const EstimatedFrame& frame) {
    nlohmann::json rec;
    rec["t"] = frame.timestamp;
    rec["theta"] = frame.pose.params;
    rec["beta"] = frame.shape.beta;
    if (frame.keypoints2d) {
        nlohmann::json kp = nlohmann::json::array();
        for (const Keypoint& k : *frame.keypoints2d) kp.push_back({k.x, k.y, k.confidence});
        rec["kp"] = std::move(kp);
    }
    return rec;
}

inline std::string format_frame_record(const EstimatedFrame& frame) { return frame_to_json(frame).dump(); }

// Checks every frame invariant except timestamp ordering; throws FrameError.
inline void validate_frame(const EstimatedFrame& frame, std::size_t line = 0,
                           double shape_limit = kDefaultShapeLimit) {
    if (!std::isfinite(frame.timestamp)) throw FrameError(line, "timestamp is not finite");
    if (!all_finite(frame.pose)) throw FrameError(line, "theta contains non-finite values");
    try {
        validate_shape(frame.shape, shape_limit);
    } catch (const InvalidArgument& e) {
        throw FrameError(line, e.what());
    }
    if (frame.keypoints2d)
        for (const Keypoint& k : *frame.keypoints2d)
            if (!std::isfinite(k.x) || !std::isfinite(k.y) || !std::isfinite(k.confidence))
                throw FrameError(line, "keypoint contains non-finite values");
}

namespace detail {

template <std::size_t N>
std::array<double, N> number_array(const nlohmann::json& rec, const char* key, std::size_t line) {
    const auto it = rec.find(key);
    if (it == rec.end()) throw FrameError(line, std::string("missing \"") + key + "\"");
    if (!it->is_array() || it->size() != N)
        throw FrameError(line, std::string("\"") + key + "\" must hold exactly " + std::to_string(N) + " numbers");
    std::array<double, N> out{};
    for (std::size_t i = 0; i < N; ++i) {
        if (!(*it)[i].is_number()) throw FrameError(line, std::string("\"") + key + "\" holds a non-number");
        out[i] = (*it)[i].get<double>();
    }
    return out;
}

}  // namespace detail

// Parses and validates one record. Does not check timestamp ordering.
inline EstimatedFrame parse_frame_record(const std::string& text, std::size_t line = 0,
                                         double shape_limit = kDefaultShapeLimit) {
    nlohmann::json rec;
    try {
        rec = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FrameError(line, std::string("malformed JSON: ") + e.what());
    }
    if (!rec.is_object()) throw FrameError(line, "record is not a JSON object");

    EstimatedFrame frame;
    const auto t = rec.find("t");
    if (t == rec.end() || !t->is_number()) throw FrameError(line, "missing numeric \"t\"");
    frame.timestamp = t->get<double>();
    frame.pose.params = detail::number_array<kNumPoseParams>(rec, "theta", line);
    frame.shape.beta = detail::number_array<kNumShapeCoeffs>(rec, "beta", line);

    if (const auto kp = rec.find("kp"); kp != rec.end() && !kp->is_null()) {
        if (!kp->is_array() || kp->size() != kNumCocoJoints)
            throw FrameError(line, "\"kp\" must hold exactly 18 keypoints");
        CocoKeypoints points;
        for (std::size_t i = 0; i < kNumCocoJoints; ++i) {
            const auto& k = (*kp)[i];
            if (!k.is_array() || k.size() != 3 || !k[0].is_number() || !k[1].is_number() || !k[2].is_number())
                throw FrameError(line, "keypoint " + std::to_string(i) + " must be [x, y, confidence]");
            points[i] = {k[0].get<double>(), k[1].get<double>(), k[2].get<double>()};
        }
        frame.keypoints2d = points;
    }
    validate_frame(frame, line, shape_limit);
    return frame;
}

// Stateful record decoder shared by replay files and live peers: counts lines
// and enforces non-decreasing timestamps. A rejected record does not advance
// the ordering state.
class FrameDecoder {
public:
    explicit FrameDecoder(double shape_limit = kDefaultShapeLimit) : shape_limit_(shape_limit) {}

    // Returns nullopt for blank lines.
    std::optional<EstimatedFrame> decode(const std::string& raw) {
        ++line_;
        std::string text = raw;
        if (!text.empty() && text.back() == '\r') text.pop_back();
        if (text.find_first_not_of(" \t") == std::string::npos) return std::nullopt;
        EstimatedFrame frame = parse_frame_record(text, line_, shape_limit_);
        if (last_timestamp_ && frame.timestamp < *last_timestamp_)
            throw FrameError(line_, "timestamp regression (" + std::to_string(frame.timestamp) + " after " +
                                        std::to_string(*last_timestamp_) + ")");
        last_timestamp_ = frame.timestamp;
        return frame;
    }

    std::size_t line() const noexcept { return line_; }

private:
    double shape_limit_;
    std::size_t line_ = 0;
    std::optional<double> last_timestamp_;
};

// Pull-based frame stream. next() returns nullopt at end of stream, throws
// FrameError for a bad record (the stream stays readable) and other Error
// types for transport failures (the stream is finished).
class FrameStream {
public:
    virtual ~FrameStream() = default;
    virtual std::optional<EstimatedFrame> next() = 0;
};

// Frames from a .poselog stream, in file order.
class ReplayStream final : public FrameStream {
public:
    explicit ReplayStream(std::istream& in, double shape_limit = kDefaultShapeLimit)
        : in_(in), decoder_(shape_limit) {}

    std::optional<EstimatedFrame> next() override {
        std::string line;
        while (std::getline(in_, line))
            if (auto frame = decoder_.decode(line)) return frame;
        return std::nullopt;
    }

private:
    std::istream& in_;
    FrameDecoder decoder_;
};

inline ReplayStream open_replay(std::istream& in, double shape_limit = kDefaultShapeLimit) {
    return ReplayStream(in, shape_limit);
}

// Reads a whole replay, failing on the first bad record.
inline std::vector<EstimatedFrame> read_replay(std::istream& in, double shape_limit = kDefaultShapeLimit) {
    ReplayStream stream(in, shape_limit);
    std::vector<EstimatedFrame> frames;
    while (auto f = stream.next()) frames.push_back(std::move(*f));
    return frames;
}

inline void write_poselog(std::ostream& out, std::span<const EstimatedFrame> frames) {
    for (const EstimatedFrame& f : frames) out << format_frame_record(f) << '\n';
}

// In-memory frames, for synthesized sessions and tests.
class VectorStream final : public FrameStream {
public:
    explicit VectorStream(std::vector<EstimatedFrame> frames) : frames_(std::move(frames)) {}

    std::optional<EstimatedFrame> next() override {
        if (pos_ >= frames_.size()) return std::nullopt;
        return frames_[pos_++];
    }

private:
    std::vector<EstimatedFrame> frames_;
    std::size_t pos_ = 0;
};

// A synthetic trainee moving linearly from `start` to `target`. Frame i is at
// time i * dt; the last frame carries `target` exactly.
inline std::vector<EstimatedFrame> synthesize_convergence_replay(const BodyPose& start, const BodyPose& target,
                                                                 int frames, double dt,
                                                                 const BodyShape& shape = {}) {
    if (frames < 2) throw InvalidArgument("a convergence replay needs at least 2 frames");
    if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidArgument("dt must be positive");
    std::vector<EstimatedFrame> out;
    out.reserve(static_cast<std::size_t>(frames));
    for (int i = 0; i < frames; ++i) {
        EstimatedFrame f;
        f.timestamp = i * dt;
        f.pose = interpolate_pose(start, target, static_cast<double>(i) / (frames - 1));
        f.shape = shape;
        out.push_back(std::move(f));
    }
    return out;
}

}  // namespace corebody

#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "corebody/estimator_gateway.hpp"
#include "oracles.hpp"

using namespace corebody;

namespace {

std::ifstream fixture(const std::string& name) {
    std::ifstream in(std::string(COREBODY_FIXTURES "/") + name);
    EXPECT_TRUE(in) << name;
    return in;
}

CocoKeypoints random_keypoints(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> pos(-500.0, 1500.0);
    std::uniform_real_distribution<double> conf(0.0, 1.0);
    CocoKeypoints kp;
    for (auto& k : kp) k = {pos(rng), pos(rng), conf(rng)};
    return kp;
}

EstimatedFrame random_frame(std::mt19937_64& rng, double t) {
    EstimatedFrame f;
    f.timestamp = t;
    f.pose = oracle::random_pose(rng, 2.0);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (double& b : f.shape.beta) b = u(rng);
    if (rng() % 2) f.keypoints2d = random_keypoints(rng);
    return f;
}

}  // namespace

TEST(BoundingBox, SinglePointAndCorners) {
    const std::array<Keypoint, 1> one = {{{10.0, 20.0, 1.0}}};
    EXPECT_EQ(compute_bounding_box(one), (BoundingBox{10.0, 20.0, 10.0, 20.0}));
    const std::array<Keypoint, 2> two = {{{0.0, 0.0, 1.0}, {300.0, 400.0, 1.0}}};
    EXPECT_EQ(compute_bounding_box(two), (BoundingBox{0.0, 0.0, 300.0, 400.0}));
}

TEST(BoundingBox, MatchesMinMaxScanAndSkipsLowConfidence) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const CocoKeypoints kp = random_keypoints(rng);
        double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
        bool any = false;
        for (const auto& k : kp) {
            if (k.confidence <= 0.1) continue;
            any = true;
            x0 = std::min(x0, k.x), y0 = std::min(y0, k.y), x1 = std::max(x1, k.x), y1 = std::max(y1, k.y);
        }
        if (!any) continue;
        EXPECT_EQ(compute_bounding_box(kp), (BoundingBox{x0, y0, x1, y1}));
    }
    CocoKeypoints faint{};
    EXPECT_THROW(compute_bounding_box(faint), InvalidArgument);
}

TEST(Crop, NormalizesDiagonalTo150) {
    const CropSpec c = compute_crop({0.0, 0.0, 300.0, 400.0});
    EXPECT_EQ(c.scale, 0.3);
    EXPECT_EQ(c.center_x, 150.0);
    EXPECT_EQ(c.center_y, 200.0);
    EXPECT_EQ(c.output_size, 224);
    EXPECT_EQ(compute_crop({10.0, 20.0, 100.0, 140.0}).scale, 1.0);
    EXPECT_EQ(compute_crop({0.0, 0.0, 300.0, 400.0}, 250.0).scale, 0.5);
    EXPECT_THROW(compute_crop({5.0, 5.0, 5.0, 5.0}), InvalidArgument);
}

TEST(Crop, ScaleCovariantUnderKeypointScaling) {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> factor(0.2, 5.0);
    for (int trial = 0; trial < 100; ++trial) {
        CocoKeypoints kp = random_keypoints(rng);
        for (auto& k : kp) k.confidence = 1.0;
        const double s = factor(rng);
        CocoKeypoints scaled = kp;
        for (auto& k : scaled) k.x *= s, k.y *= s;
        const BoundingBox a = compute_bounding_box(kp);
        const BoundingBox b = compute_bounding_box(scaled);
        EXPECT_NEAR(b.diagonal(), s * a.diagonal(), 1e-12 * s * a.diagonal());
        EXPECT_NEAR(compute_crop(b).scale, compute_crop(a).scale / s, 1e-12 * compute_crop(a).scale / s);
    }
}

TEST(FrameRecord, FormatParseRoundTrip) {
    std::mt19937_64 rng(31);
    for (int i = 0; i < 100; ++i) {
        const EstimatedFrame f = random_frame(rng, 0.1 * i);
        EXPECT_EQ(parse_frame_record(format_frame_record(f)), f);
    }
}

TEST(FrameRecord, ValidationErrors) {
    EstimatedFrame f;
    nlohmann::json rec = frame_to_json(f);
    EXPECT_NO_THROW(parse_frame_record(rec.dump()));

    auto expect_bad = [](const nlohmann::json& j) { EXPECT_THROW(parse_frame_record(j.dump(), 7), FrameError); };
    nlohmann::json j = rec;
    j["theta"].erase(0);
    expect_bad(j);
    j = rec;
    j["beta"].push_back(0.0);
    expect_bad(j);
    j = rec;
    j["theta"][5] = nullptr;  // NaN serializes as null
    expect_bad(j);
    j = rec;
    j.erase("t");
    expect_bad(j);
    j = rec;
    j["kp"] = nlohmann::json::array({{1, 2, 3}});
    expect_bad(j);
    j = rec;
    j["beta"][0] = 11.0;
    expect_bad(j);
    EXPECT_THROW(parse_frame_record("not json", 3), FrameError);
    EXPECT_THROW(parse_frame_record("[1,2,3]", 3), FrameError);

    try {
        parse_frame_record("{", 42);
        FAIL();
    } catch (const FrameError& e) {
        EXPECT_EQ(e.line(), 42u);
    }

    j = rec;
    j["guidance"] = {{"rmse", 1.0}};
    EXPECT_NO_THROW(parse_frame_record(j.dump()));
}

TEST(Replay, ThreeFrameFixtureInOrder) {
    auto in = fixture("three_frames.poselog");
    auto stream = open_replay(in);
    std::vector<EstimatedFrame> frames;
    while (auto f = stream.next()) frames.push_back(*f);
    ASSERT_EQ(frames.size(), 3u);
    EXPECT_EQ(frames[0].timestamp, 0.0);
    EXPECT_EQ(frames[1].timestamp, 0.5);
    EXPECT_EQ(frames[2].timestamp, 1.0);
    ASSERT_TRUE(frames[0].keypoints2d.has_value());
    EXPECT_EQ((*frames[0].keypoints2d)[17].y, 50.0 + 20 * 17);
    EXPECT_FALSE(frames[1].keypoints2d.has_value());
    EXPECT_EQ(frames[2].pose, BodyPose{});
}

TEST(Replay, ShortThetaIsParseErrorWithLineNumber) {
    auto in = fixture("bad_theta.poselog");
    ReplayStream stream(in);
    ASSERT_TRUE(stream.next().has_value());
    try {
        stream.next();
        FAIL() << "expected FrameError";
    } catch (const FrameError& e) {
        EXPECT_EQ(e.line(), 2u);
        EXPECT_NE(std::string(e.what()).find("theta"), std::string::npos);
    }
    // The stream stays readable after a bad record.
    auto third = stream.next();
    ASSERT_TRUE(third.has_value());
    EXPECT_EQ(third->timestamp, 1.0);
}

TEST(Replay, TimestampRegressionAtOffendingRecord) {
    auto in = fixture("regression.poselog");
    ReplayStream stream(in);
    stream.next();
    stream.next();
    try {
        stream.next();
        FAIL() << "expected FrameError";
    } catch (const FrameError& e) {
        EXPECT_EQ(e.line(), 3u);
        EXPECT_NE(std::string(e.what()).find("regression"), std::string::npos);
    }
}

TEST(Replay, BlankLinesAndCrlfAreTolerated) {
    std::mt19937_64 rng(1);
    const auto a = random_frame(rng, 0.0);
    const auto b = random_frame(rng, 1.0);
    std::istringstream in("\n" + format_frame_record(a) + "\r\n\n  \n" + format_frame_record(b));
    const auto frames = read_replay(in);
    ASSERT_EQ(frames.size(), 2u);
    EXPECT_EQ(frames[0], a);
    EXPECT_EQ(frames[1], b);
}

TEST(Replay, WritePoselogRoundTrip) {
    std::mt19937_64 rng(5);
    std::vector<EstimatedFrame> frames;
    for (int i = 0; i < 20; ++i) frames.push_back(random_frame(rng, 0.25 * i));
    std::stringstream io;
    write_poselog(io, frames);
    EXPECT_EQ(read_replay(io), frames);
}

TEST(ConvergenceReplay, TwoFramesAreStartAndTarget) {
    std::mt19937_64 rng(9);
    const BodyPose start = oracle::random_pose(rng, 0.5);
    const BodyPose target = oracle::random_pose(rng, 0.5);
    const auto frames = synthesize_convergence_replay(start, target, 2, 0.5);
    ASSERT_EQ(frames.size(), 2u);
    EXPECT_EQ(frames[0].pose, start);
    EXPECT_EQ(frames[1].pose, target);
    EXPECT_EQ(frames[1].timestamp, 0.5);
}

TEST(ConvergenceReplay, ElevenFramesHitMidpointAndTarget) {
    std::mt19937_64 rng(10);
    const BodyPose target = oracle::random_pose(rng, 0.5);
    const auto frames = synthesize_convergence_replay({}, target, 11, 0.1);
    ASSERT_EQ(frames.size(), 11u);
    for (int i = 0; i < kNumPoseParams; ++i) EXPECT_EQ(frames[5].pose.params[i], target.params[i] / 2);
    EXPECT_EQ(frames[10].pose, target);
    for (int i = 0; i < 11; ++i) EXPECT_EQ(frames[i].timestamp, i * 0.1);
}

TEST(ConvergenceReplay, Preconditions) {
    EXPECT_THROW(synthesize_convergence_replay({}, {}, 1, 0.1), InvalidArgument);
    EXPECT_THROW(synthesize_convergence_replay({}, {}, 5, 0.0), InvalidArgument);
    EXPECT_THROW(synthesize_convergence_replay({}, {}, 5, -1.0), InvalidArgument);
}

#include <random>

#include <gtest/gtest.h>

#include "corebody/evaluation.hpp"
#include "corebody/test_body.hpp"
#include "oracles.hpp"

using namespace corebody;

namespace {

BodyMesh cloud(const PointCloud& v) {
    BodyMesh m;
    m.vertices = v;
    m.joints = PointCloud::Zero(kNumJoints, 3);
    return m;
}

PointCloud random_cloud(std::mt19937_64& rng, Eigen::Index n) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    PointCloud p(n, 3);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
    return p;
}

std::vector<bool> random_mask(std::mt19937_64& rng, Eigen::Index n) {
    std::vector<bool> m(static_cast<std::size_t>(n));
    for (auto&& b : m) b = rng() % 5 == 0;
    m[0] = false;
    return m;
}

SessionMetrics run(const std::vector<double>& values, const std::vector<double>& times) {
    SessionAccumulator acc(100);
    for (std::size_t i = 0; i < values.size(); ++i) acc.update({times[i], values[i]});
    return acc.finalize();
}

}  // namespace

TEST(Rmse, IdenticalIsZero) {
    std::mt19937_64 rng(1);
    const PointCloud a = random_cloud(rng, 500);
    EXPECT_EQ(compute_rmse(cloud(a), cloud(a), random_mask(rng, 500)), 0.0);
}

TEST(Rmse, UniformOffsetEqualsOffsetLength) {
    std::mt19937_64 rng(2);
    const PointCloud a = random_cloud(rng, 700);
    const Eigen::RowVector3d d(0.3, -0.4, 1.2);
    PointCloud b = a;
    b.rowwise() += d;
    EXPECT_NEAR(compute_rmse(cloud(b), cloud(a), random_mask(rng, 700)), 1.3, 1e-12);
}

TEST(Rmse, MatchesExtendedPrecisionOracle) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Eigen::Index n = 10 + static_cast<Eigen::Index>(rng() % 3000);
        const PointCloud a = random_cloud(rng, n), b = random_cloud(rng, n);
        const auto mask = random_mask(rng, n);
        const double expected = oracle::rmse(a, b, mask);
        EXPECT_NEAR(compute_rmse(cloud(a), cloud(b), mask), expected, 1e-12 * expected);
    }
}

TEST(Rmse, HeadVerticesAreIgnored) {
    const BodyModelAssets assets = generate_test_assets(8, 1);
    std::mt19937_64 rng(4);
    const BodyMesh target = pose_mesh(assets, {}, {});
    const BodyMesh current = pose_mesh(assets, {}, oracle::random_pose(rng, 0.3));
    BodyMesh head_moved = current;
    std::normal_distribution<double> noise(0.0, 0.5);
    for (Eigen::Index v = 0; v < head_moved.vertices.rows(); ++v)
        if (assets.head_vertex_mask[v])
            for (int c = 0; c < 3; ++c) head_moved.vertices(v, c) += noise(rng);
    EXPECT_EQ(compute_rmse(head_moved, target, assets.head_vertex_mask),
              compute_rmse(current, target, assets.head_vertex_mask));
}

TEST(Rmse, InvariantUnderCommonRigidTransform) {
    std::mt19937_64 rng(5);
    const PointCloud a = random_cloud(rng, 400), b = random_cloud(rng, 400);
    const auto mask = random_mask(rng, 400);
    const Eigen::Matrix3d R = oracle::axis_angle({0.3, -1.1, 0.7});
    const Eigen::RowVector3d t(2.0, -1.0, 0.5);
    PointCloud ra = a * R.transpose(), rb = b * R.transpose();
    ra.rowwise() += t;
    rb.rowwise() += t;
    EXPECT_NEAR(compute_rmse(cloud(ra), cloud(rb), mask), compute_rmse(cloud(a), cloud(b), mask), 1e-12);
}

TEST(Rmse, Preconditions) {
    std::mt19937_64 rng(6);
    const PointCloud a = random_cloud(rng, 10);
    EXPECT_THROW(compute_rmse(cloud(a), cloud(random_cloud(rng, 11)), std::vector<bool>(10)), MetricsError);
    EXPECT_THROW(compute_rmse(cloud(a), cloud(a), std::vector<bool>(9)), MetricsError);
    EXPECT_THROW(compute_rmse(cloud(a), cloud(a), std::vector<bool>(10, true)), MetricsError);
}

TEST(SessionMetrics, WorkedSeries) {
    const SessionMetrics m = run({2.0, 1.0, 1.0}, {0.0, 1.0, 2.0});
    EXPECT_EQ(m.rmse_0, 2.0);
    EXPECT_EQ(m.rmse_min, 1.0);
    EXPECT_EQ(m.accuracy_r, 50.0);
    EXPECT_EQ(m.t_min, 1.0);
    EXPECT_EQ(m.sample_count, 3u);
    EXPECT_FALSE(m.degenerate);
}

TEST(SessionMetrics, SingleAndConstantSeries) {
    const SessionMetrics one = run({0.7}, {3.0});
    EXPECT_EQ(one.accuracy_r, 0.0);
    EXPECT_EQ(one.t_min, 3.0);

    const SessionMetrics flat = run({0.4, 0.4, 0.4, 0.4}, {1.0, 2.0, 3.0, 4.0});
    EXPECT_EQ(flat.accuracy_r, 0.0);
    EXPECT_EQ(flat.t_min, 1.0);
}

TEST(SessionMetrics, PerfectConvergenceIsHundred) {
    const SessionMetrics m = run({0.8, 0.5, 0.0, 0.2}, {0.0, 0.1, 0.2, 0.3});
    EXPECT_EQ(m.accuracy_r, 100.0);
    EXPECT_EQ(m.t_min, 0.2);
}

TEST(SessionMetrics, ZeroInitialRmseIsDegenerate) {
    const SessionMetrics m = run({0.0, 0.3}, {0.0, 1.0});
    EXPECT_TRUE(m.degenerate);
    EXPECT_EQ(m.accuracy_r, 0.0);
    EXPECT_TRUE(std::isfinite(m.accuracy_r));
}

TEST(SessionMetrics, StreamingEqualsBatchScan) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng() % 200;
        std::vector<double> values(n), times(n);
        double t = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            values[i] = std::floor(u(rng) * 8.0) / 8.0 + 0.125;  // frequent ties
            times[i] = t;
            t += u(rng) < 0.1 ? 0.0 : 0.05;
        }
        const auto it = std::min_element(values.begin(), values.end());
        const SessionMetrics m = run(values, times);
        EXPECT_EQ(m.rmse_min, *it);
        EXPECT_EQ(m.t_min, times[static_cast<std::size_t>(it - values.begin())]);
        EXPECT_EQ(m.accuracy_r, (values[0] - *it) / values[0] * 100.0);
        EXPECT_GE(m.accuracy_r, 0.0);
        EXPECT_LE(m.accuracy_r, 100.0);

        SessionAccumulator functional;
        for (std::size_t i = 0; i < n; ++i) functional = update_session(functional, {times[i], values[i]});
        EXPECT_EQ(finalize_metrics(functional).accuracy_r, m.accuracy_r);
    }
}

TEST(SessionMetrics, RejectsRegressionAndEmpty) {
    SessionAccumulator acc;
    EXPECT_THROW(acc.finalize(), MetricsError);
    acc.update({1.0, 0.5});
    EXPECT_THROW(acc.update({0.5, 0.4}), MetricsError);
    EXPECT_THROW(acc.update({2.0, -1.0}), MetricsError);
    EXPECT_THROW(acc.update({2.0, std::numeric_limits<double>::quiet_NaN()}), MetricsError);
    EXPECT_NO_THROW(acc.update({1.0, 0.4}));
}

TEST(Report, JsonRoundTripAndCsv) {
    SessionReport r;
    r.mode = GuidanceMode::kSkeleton;
    r.samples = {{0.0, 0.3}, {0.1, 0.1}, {0.2, 0.15}};
    SessionAccumulator acc(1008);
    for (const auto& s : r.samples) acc.update(s);
    r.metrics = acc.finalize();
    r.skipped_frames = 2;
    r.partial = true;

    const std::string text = format_report(r);
    EXPECT_EQ(parse_report(text), r);
    EXPECT_EQ(format_report(parse_report(text)), text);
    EXPECT_NE(text.find("\"accuracyR\""), std::string::npos);

    const std::string csv = format_series_csv(r.samples);
    EXPECT_EQ(csv.substr(0, 7), "t,rmse\n");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    EXPECT_NE(csv.find("\n0.10000000000000001,0.10000000000000001\n"), std::string::npos);

    EXPECT_THROW(parse_report("{\"mode\":\"markers\"}"), MetricsError);
    EXPECT_THROW(parse_report("{\"mode\":\"laser\",\"rmse0\":1}"), Error);
}

TEST(Report, AggregateByMode) {
    auto report = [](GuidanceMode mode, double r, double t) {
        SessionReport s;
        s.mode = mode;
        s.metrics.accuracy_r = r;
        s.metrics.t_min = t;
        return s;
    };
    const std::vector<SessionReport> all = {report(GuidanceMode::kMarkers, 80.0, 2.0),
                                            report(GuidanceMode::kMarkers, 60.0, 4.0),
                                            report(GuidanceMode::kSkeleton, 50.0, 5.0)};
    const auto agg = aggregate_by_mode(all);
    ASSERT_EQ(agg.size(), 2u);
    EXPECT_EQ(agg.at("markers").sessions, 2u);
    EXPECT_EQ(agg.at("markers").mean_accuracy_r, 70.0);
    EXPECT_EQ(agg.at("markers").mean_t_min, 3.0);
    EXPECT_EQ(agg.at("skeleton").mean_accuracy_r, 50.0);
}

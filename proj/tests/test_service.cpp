#include <filesystem>
#include <fstream>
#include <thread>

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <gtest/gtest.h>

#include "corebody/service.hpp"
#include "oracles.hpp"

using namespace corebody;

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace asio = boost::asio;
using tcp = asio::ip::tcp;
using json = nlohmann::json;

namespace {

struct Reply {
    int status = 0;
    std::string body;
    json doc() const { return json::parse(body); }
};

Reply request(unsigned short port, http::verb verb, const std::string& target, const std::string& body = {}) {
    asio::io_context ioc;
    tcp::socket socket(ioc);
    socket.connect({asio::ip::make_address("127.0.0.1"), port});
    http::request<http::string_body> req{verb, target, 11};
    req.set(http::field::host, "127.0.0.1");
    if (!body.empty()) {
        req.set(http::field::content_type, "application/json");
        req.body() = body;
    }
    req.prepare_payload();
    http::write(socket, req);
    beast::flat_buffer buf;
    http::response<http::string_body> res;
    http::read(socket, buf, res);
    beast::error_code ec;
    socket.shutdown(tcp::socket::shutdown_both, ec);
    return {static_cast<int>(res.result_int()), res.body()};
}

class WsClient {
public:
    explicit WsClient(unsigned short port) : ws_(ioc_) {
        asio::connect(ws_.next_layer(), std::array{tcp::endpoint(asio::ip::make_address("127.0.0.1"), port)});
        ws_.handshake("127.0.0.1", "/ws");
    }

    // Returns (is_binary, payload).
    std::pair<bool, std::string> read() {
        beast::flat_buffer buf;
        ws_.read(buf);
        return {ws_.got_binary(), beast::buffers_to_string(buf.data())};
    }

    json read_json() {
        auto [binary, text] = read();
        EXPECT_FALSE(binary);
        return json::parse(text);
    }

private:
    asio::io_context ioc_;
    websocket::stream<tcp::socket> ws_;
};

struct Received {
    std::vector<std::uint64_t> frame_ids;
    std::vector<double> rmse;
    std::vector<std::string> colors_last;
    json metrics;
    bool vertices_consistent = true;
};

Received drain_session(WsClient& c, std::size_t vertex_count) {
    Received r;
    for (;;) {
        const json msg = c.read_json();
        if (msg["type"] == "metrics") {
            r.metrics = msg;
            return r;
        }
        if (msg["type"] != "guidance") continue;
        r.frame_ids.push_back(msg["frameId"].get<std::uint64_t>());
        r.rmse.push_back(msg["rmse"].get<double>());
        r.colors_last.clear();
        for (const auto& m : msg["markers"]) r.colors_last.push_back(m["color"]);
        auto [binary, payload] = c.read();
        const DecodedVertices v = decode_vertex_message(payload);
        r.vertices_consistent = r.vertices_consistent && binary && v.frame_id == r.frame_ids.back() &&
                                v.kind == VertexKind::kCurrent && v.xyz.size() == 3 * vertex_count;
    }
}

class ServiceTest : public ::testing::Test {
protected:
    void SetUp() override {
        root = std::filesystem::temp_directory_path() / ("corebody-service-" + std::to_string(::getpid()));
        std::filesystem::remove_all(root);
        std::filesystem::create_directories(root);
        ServiceOptions opts;
        opts.port = 0;
        opts.sessions_root = root / "sessions";
        opts.subscriber_queue = 64;
        service = std::make_unique<Service>(SessionConfig{}, opts);
        service->start();
        port = service->port();
    }

    void TearDown() override {
        service.reset();
        std::filesystem::remove_all(root);
    }

    std::string write_replay(const std::string& name, int frames, double dt) {
        BodyPose start;
        start.set_rotation(kLeftShoulder, {0.0, 0.0, 0.9});
        start.set_rotation(kRightKnee, {0.6, 0.0, 0.0});
        const auto path = root / name;
        std::ofstream out(path);
        write_poselog(out, synthesize_convergence_replay(start, {}, frames, dt));
        return path.string();
    }

    void set_zero_target() {
        const Reply r = request(port, http::verb::post, "/api/target", format_frame_record(EstimatedFrame{}));
        ASSERT_EQ(r.status, 200) << r.body;
    }

    std::filesystem::path root;
    std::unique_ptr<Service> service;
    unsigned short port = 0;
};

}  // namespace

TEST(VertexMessage, EncodeDecodeRoundTrip) {
    PointCloud v(3, 3);
    v << 0.5, -1.25, 2.0, 1.0 / 3.0, 0.0, -0.0, 1e-3, 4.0, -8.0;
    const std::string bytes = encode_vertex_message(v, 77, VertexKind::kTarget);
    ASSERT_EQ(bytes.size(), 16u + 36u);
    EXPECT_EQ(bytes.substr(0, 4), "CBVF");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 77);  // little-endian frame id
    const DecodedVertices d = decode_vertex_message(bytes);
    EXPECT_EQ(d.frame_id, 77u);
    EXPECT_EQ(d.kind, VertexKind::kTarget);
    for (int i = 0; i < 9; ++i) EXPECT_EQ(d.xyz[i], static_cast<float>(v.data()[i]));
    EXPECT_THROW(decode_vertex_message(std::string_view(bytes).substr(0, 20)), ProtocolError);
}

TEST_F(ServiceTest, ViewpointsRoundTrip) {
    const json vps = json::array({{{"azimuth", 30.0}, {"elevation", 10.0}, {"distance", 2.5}, {"lookAt", {0.0, 0.1, 0.0}}},
                                  {{"azimuth", 120.0}, {"elevation", -5.0}, {"distance", 3.5}, {"lookAt", {0.0, 0.0, 0.0}}}});
    const Reply put = request(port, http::verb::put, "/api/viewpoints", vps.dump());
    ASSERT_EQ(put.status, 200) << put.body;
    const Reply get = request(port, http::verb::get, "/api/viewpoints");
    ASSERT_EQ(get.status, 200);
    EXPECT_EQ(get.doc(), vps);
    EXPECT_EQ(request(port, http::verb::get, "/api/config").doc()["viewpoints"], vps);
}

TEST_F(ServiceTest, TopologyMatchesAssets) {
    const BodyModelAssets assets = generate_test_assets(8, 1);
    const Reply r = request(port, http::verb::get, "/api/topology");
    ASSERT_EQ(r.status, 200);
    const json doc = r.doc();
    EXPECT_EQ(doc["faceCount"].get<Eigen::Index>(), assets.face_count());
    EXPECT_EQ(doc["vertexCount"].get<Eigen::Index>(), assets.vertex_count());
    ASSERT_EQ(doc["faces"].size(), static_cast<std::size_t>(3 * assets.face_count()));
    EXPECT_EQ(doc["faces"][5].get<std::uint32_t>(), assets.faces(1, 2));
}

TEST_F(ServiceTest, MalformedRequestsAre4xx) {
    EXPECT_EQ(request(port, http::verb::put, "/api/config", "{not json").status, 400);
    EXPECT_EQ(request(port, http::verb::put, "/api/config", R"({"thresholds":[0.5,0.2,0.1]})").status, 400);
    EXPECT_EQ(request(port, http::verb::put, "/api/viewpoints", "[{}]").status, 400);
    EXPECT_EQ(request(port, http::verb::post, "/api/target", R"({"t":0,"theta":[1,2],"beta":[]})").status, 400);
    EXPECT_EQ(request(port, http::verb::get, "/api/report").status, 404);
    EXPECT_EQ(request(port, http::verb::get, "/api/nothing").status, 404);
    EXPECT_EQ(request(port, http::verb::delete_, "/api/config").status, 405);
    EXPECT_EQ(request(port, http::verb::post, "/api/session", R"({"source":"file:/nonexistent"})").status, 409);
    set_zero_target();
    EXPECT_EQ(request(port, http::verb::post, "/api/session", R"({"source":"ftp://x"})").status, 400);
    EXPECT_EQ(request(port, http::verb::post, "/api/session", R"({"speed":"max"})").status, 400);
    EXPECT_EQ(request(port, http::verb::get, "/../etc/passwd").status, 400);
    const Reply page = request(port, http::verb::get, "/");
    EXPECT_EQ(page.status, 200);
    EXPECT_NE(page.body.find("corebody"), std::string::npos);
}

TEST_F(ServiceTest, TargetBindingFailureNamesSite) {
    ASSERT_EQ(request(port, http::verb::put, "/api/config", R"({"markerHalfWidth":0})").status, 200);
    const Reply r = request(port, http::verb::post, "/api/target", format_frame_record(EstimatedFrame{}));
    EXPECT_EQ(r.status, 422);
    EXPECT_EQ(r.doc()["site"], "l_hand");
}

TEST_F(ServiceTest, TwoSubscribersReceiveEveryFrameInOrder) {
    set_zero_target();
    const std::size_t n = generate_test_assets(8, 1).vertex_count();
    WsClient a(port), b(port);
    for (WsClient* c : {&a, &b}) {
        const json hello = c->read_json();
        EXPECT_EQ(hello["type"], "hello");
        EXPECT_EQ(hello["vertexCount"].get<std::size_t>(), n);
        EXPECT_EQ(c->read_json()["type"], "target");
        const auto [binary, payload] = c->read();
        EXPECT_TRUE(binary);
        EXPECT_EQ(decode_vertex_message(payload).kind, VertexKind::kTarget);
    }

    const std::string replay = write_replay("converge.poselog", 30, 0.1);
    const Reply started = request(port, http::verb::post, "/api/session",
                                  json{{"source", "file:" + replay}, {"speed", "max"}}.dump());
    ASSERT_EQ(started.status, 202) << started.body;

    Received ra, rb;
    std::thread tb([&] { rb = drain_session(b, n); });
    ra = drain_session(a, n);
    tb.join();

    for (const Received* r : {&ra, &rb}) {
        ASSERT_EQ(r->frame_ids.size(), 30u);
        for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(r->frame_ids[i], i);
        EXPECT_TRUE(r->vertices_consistent);
        EXPECT_EQ(r->rmse.back(), 0.0);
        for (const auto& c : r->colors_last) EXPECT_EQ(c, "green_yellow");
        EXPECT_EQ(r->metrics["accuracyR"].get<double>(), 100.0);
    }
    EXPECT_EQ(ra.rmse, rb.rmse);

    service->wait_session();
    const Reply report = request(port, http::verb::get, "/api/report");
    ASSERT_EQ(report.status, 200);
    const json status = request(port, http::verb::get, "/api/session").doc();
    EXPECT_EQ(status["state"], "finished");
    EXPECT_EQ(status["framesProcessed"], 30);
    const std::filesystem::path dir = status["directory"].get<std::string>();
    std::ifstream in(dir / "report.json");
    std::stringstream ss;
    ss << in.rdbuf();
    EXPECT_EQ(report.body, ss.str());
    EXPECT_TRUE(std::filesystem::exists(dir / "session.poselog"));
    EXPECT_TRUE(std::filesystem::exists(dir / "rmse.csv"));
}

TEST_F(ServiceTest, MidSessionOnlyViewpointsMayChange) {
    set_zero_target();
    const std::string replay = write_replay("slow.poselog", 40, 0.05);
    ASSERT_EQ(request(port, http::verb::post, "/api/session",
                      json{{"source", "file:" + replay}, {"speed", "realtime"}}.dump())
                  .status,
              202);
    EXPECT_EQ(request(port, http::verb::put, "/api/config", R"({"mode":"skeleton"})").status, 409);
    EXPECT_EQ(request(port, http::verb::post, "/api/target", format_frame_record(EstimatedFrame{})).status, 409);
    EXPECT_EQ(request(port, http::verb::post, "/api/session", json{{"source", "file:" + replay}}.dump()).status, 409);
    json vps = request(port, http::verb::get, "/api/viewpoints").doc();
    vps[0]["azimuth"] = 45.0;
    EXPECT_EQ(request(port, http::verb::put, "/api/viewpoints", vps.dump()).status, 200);
    EXPECT_EQ(request(port, http::verb::put, "/api/config", json{{"viewpoints", vps}}.dump()).status, 200);
    EXPECT_EQ(request(port, http::verb::get, "/api/session").doc()["state"], "running");

    const json stopped = request(port, http::verb::delete_, "/api/session").doc();
    EXPECT_EQ(stopped["state"], "finished");
    EXPECT_LT(stopped["framesProcessed"].get<int>(), 40);
    EXPECT_EQ(request(port, http::verb::put, "/api/config", R"({"mode":"skeleton"})").status, 200);
}

TEST(ServiceBackpressure, SlowSubscriberDropsOldFramesButKeepsOrderAndMetrics) {
    const auto dir = std::filesystem::temp_directory_path() / ("corebody-backpressure-" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    const BodyModelAssets big = generate_test_assets(40, 1);
    {
        std::ofstream out(dir / "big.cbm", std::ios::binary);
        write_assets_binary(out, big);
    }
    SessionConfig cfg;
    cfg.asset_path = (dir / "big.cbm").string();
    cfg.target_frame = EstimatedFrame{};
    ServiceOptions opts;
    opts.port = 0;
    opts.sessions_root = dir / "sessions";
    opts.subscriber_queue = 1;
    Service service(cfg, opts);
    service.start();

    BodyPose start;
    start.set_rotation(kLeftElbow, {0.0, 0.0, 1.0});
    const int frames = 300;
    {
        std::ofstream out(dir / "long.poselog");
        write_poselog(out, synthesize_convergence_replay(start, {}, frames, 0.01));
    }

    WsClient slow(service.port());
    EXPECT_EQ(slow.read_json()["type"], "hello");
    EXPECT_EQ(slow.read_json()["type"], "target");
    slow.read();
    service.start_session("file:" + (dir / "long.poselog").string());
    service.wait_session();

    const Received r = drain_session(slow, static_cast<std::size_t>(big.vertex_count()));
    ASSERT_FALSE(r.frame_ids.empty());
    EXPECT_TRUE(std::is_sorted(r.frame_ids.begin(), r.frame_ids.end()));
    EXPECT_EQ(std::adjacent_find(r.frame_ids.begin(), r.frame_ids.end()), r.frame_ids.end());
    EXPECT_EQ(r.frame_ids.back(), static_cast<std::uint64_t>(frames - 1));
    EXPECT_LT(r.frame_ids.size(), static_cast<std::size_t>(frames));  // gaps in frameId flag the drops
    EXPECT_TRUE(r.vertices_consistent);
    EXPECT_EQ(r.metrics["sampleCount"], frames);
    EXPECT_EQ(r.metrics["accuracyR"].get<double>(), 100.0);
    service.stop();
    std::filesystem::remove_all(dir);
}

TEST_F(ServiceTest, BindFailureIsReported) {
    ServiceOptions opts;
    opts.port = port;  // already taken by the fixture
    Service second(SessionConfig{}, opts);
    EXPECT_THROW(second.start(), Error);
}

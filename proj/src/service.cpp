#include "corebody/service.hpp"

#include <sys/socket.h>

#include <atomic>
#include <bit>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <fstream>
#include <list>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "corebody/external_stream.hpp"

namespace corebody {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace asio = boost::asio;
using tcp = asio::ip::tcp;
using json = nlohmann::json;

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

}  // namespace

std::string encode_vertex_message(const PointCloud& vertices, std::uint32_t frame_id, VertexKind kind) {
    std::string out;
    out.reserve(kVertexHeaderBytes + 12 * static_cast<std::size_t>(vertices.rows()));
    out.append(kVertexMagic.data(), kVertexMagic.size());
    put_u32(out, frame_id);
    put_u32(out, static_cast<std::uint32_t>(vertices.rows()));
    put_u32(out, static_cast<std::uint32_t>(kind));
    for (Eigen::Index i = 0; i < vertices.rows(); ++i)
        for (int c = 0; c < 3; ++c) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(vertices(i, c))));
    return out;
}

DecodedVertices decode_vertex_message(std::span<const char> bytes) {
    if (bytes.size() < kVertexHeaderBytes || !std::equal(kVertexMagic.begin(), kVertexMagic.end(), bytes.begin()))
        throw ProtocolError("vertex message lacks the CBVF header");
    DecodedVertices d;
    d.frame_id = get_u32(bytes.data() + 4);
    const std::uint32_t count = get_u32(bytes.data() + 8);
    d.kind = static_cast<VertexKind>(get_u32(bytes.data() + 12));
    if (bytes.size() != kVertexHeaderBytes + 12ull * count) throw ProtocolError("vertex message size mismatch");
    d.xyz.resize(3ull * count);
    for (std::size_t i = 0; i < d.xyz.size(); ++i)
        d.xyz[i] = std::bit_cast<float>(get_u32(bytes.data() + kVertexHeaderBytes + 4 * i));
    return d;
}

namespace {

struct WsMessage {
    bool binary = false;
    std::string payload;
};

// One queued delivery. Frames (guidance + vertices) may be dropped under
// backpressure; control items never are.
struct QueueItem {
    bool droppable = false;
    std::vector<WsMessage> parts;
};

class Subscriber {
public:
    explicit Subscriber(std::size_t capacity) : capacity_(std::max<std::size_t>(capacity, 1)) {}

    void push(QueueItem item) {
        {
            std::lock_guard lock(mu_);
            if (closed_) return;
            if (item.droppable) {
                if (pending_frames_ == capacity_) {
                    const auto oldest = std::find_if(queue_.begin(), queue_.end(),
                                                     [](const QueueItem& q) { return q.droppable; });
                    queue_.erase(oldest);
                    --pending_frames_;
                }
                ++pending_frames_;
            }
            queue_.push_back(std::move(item));
        }
        cv_.notify_one();
    }

    // False once closed and drained.
    bool pop(QueueItem& out) {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return closed_ || !queue_.empty(); });
        if (closed_) return false;
        out = std::move(queue_.front());
        queue_.pop_front();
        if (out.droppable) --pending_frames_;
        return true;
    }

    void close() {
        {
            std::lock_guard lock(mu_);
            closed_ = true;
        }
        cv_.notify_all();
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<QueueItem> queue_;
    std::size_t capacity_;
    std::size_t pending_frames_ = 0;
    bool closed_ = false;
};

class Hub {
public:
    void add(const std::shared_ptr<Subscriber>& s) {
        std::lock_guard lock(mu_);
        subs_.insert(s);
    }
    void remove(const std::shared_ptr<Subscriber>& s) {
        std::lock_guard lock(mu_);
        subs_.erase(s);
    }
    void publish(const QueueItem& item) {
        std::lock_guard lock(mu_);
        for (const auto& s : subs_) s->push(item);
    }
    void close_all() {
        std::lock_guard lock(mu_);
        for (const auto& s : subs_) s->close();
    }

private:
    std::mutex mu_;
    std::set<std::shared_ptr<Subscriber>> subs_;
};

struct HttpError {
    http::status status;
    std::string message;
};

std::string mime_type(const std::filesystem::path& p) {
    const std::string ext = p.extension().string();
    if (ext == ".html" || ext == ".htm") return "text/html; charset=utf-8";
    if (ext == ".js" || ext == ".mjs") return "text/javascript";
    if (ext == ".css") return "text/css";
    if (ext == ".json") return "application/json";
    if (ext == ".svg") return "image/svg+xml";
    if (ext == ".png") return "image/png";
    if (ext == ".wasm") return "application/wasm";
    return "application/octet-stream";
}

constexpr const char* kPlaceholderPage =
    "<!doctype html><html><head><title>corebody</title></head><body>"
    "<h1>corebody guidance service</h1><p>No UI bundle is installed. "
    "The REST API is under /api and the guidance stream at /ws.</p></body></html>\n";

json parse_body(const std::string& body) {
    try {
        return json::parse(body);
    } catch (const json::parse_error& e) {
        throw HttpError{http::status::bad_request, std::string("malformed JSON body: ") + e.what()};
    }
}

enum class SessionState { kIdle, kRunning, kFinished, kFailed };

const char* state_name(SessionState s) {
    switch (s) {
        case SessionState::kIdle: return "idle";
        case SessionState::kRunning: return "running";
        case SessionState::kFinished: return "finished";
        case SessionState::kFailed: return "failed";
    }
    return "idle";
}

}  // namespace

struct Service::Impl {
    using Request = http::request<http::string_body>;
    using Response = http::response<http::string_body>;

    Impl(SessionConfig cfg, ServiceOptions opts) : options(std::move(opts)), config(std::move(cfg)) {
        config.validate();
        assets = std::make_shared<const BodyModelAssets>(load_session_assets(config));
        if (config.target_frame || !config.target_poselog.empty())
            target = std::make_shared<const TargetState>(set_target(*assets, config, resolve_target_frame(config)));
    }

    ~Impl() { stop(); }

    // ---- lifecycle

    void start() {
        beast::error_code ec;
        const auto addr = asio::ip::make_address(options.address, ec);
        if (ec) throw Error("invalid bind address '" + options.address + "'");
        const tcp::endpoint ep(addr, options.port);
        acceptor.open(ep.protocol(), ec);
        if (!ec) acceptor.set_option(asio::socket_base::reuse_address(true), ec);
        if (!ec) acceptor.bind(ep, ec);
        if (!ec) acceptor.listen(asio::socket_base::max_listen_connections, ec);
        if (ec) throw Error("cannot bind " + options.address + ":" + std::to_string(options.port) + ": " + ec.message());
        bound_port = acceptor.local_endpoint().port();
        running = true;
        accept_thread = std::thread([this] { accept_loop(); });
    }

    void stop() {
        stop_session.store(true);
        if (running.exchange(false)) shutdown_network();
        wait_session();
    }

    void shutdown_network() {
        ::shutdown(acceptor.native_handle(), SHUT_RDWR);
        if (accept_thread.joinable()) accept_thread.join();
        beast::error_code ec;
        acceptor.close(ec);
        hub.close_all();
        {
            std::lock_guard lock(conn_mu);
            for (int fd : open_fds) ::shutdown(fd, SHUT_RDWR);
        }
        for (auto& c : connections) c.thread.join();
        connections.clear();
    }

    void accept_loop() {
        while (running) {
            beast::error_code ec;
            tcp::socket socket(ioc);
            acceptor.accept(socket, ec);
            if (ec) {
                if (!running) break;
                continue;
            }
            reap_connections();
            auto done = std::make_shared<std::atomic<bool>>(false);
            const int fd = socket.native_handle();
            {
                std::lock_guard lock(conn_mu);
                open_fds.insert(fd);
            }
            connections.push_back({std::thread([this, s = std::move(socket), done, fd]() mutable {
                                       serve_connection(std::move(s));
                                       {
                                           std::lock_guard lock(conn_mu);
                                           open_fds.erase(fd);
                                       }
                                       done->store(true);
                                   }),
                                   done});
        }
    }

    void reap_connections() {
        for (auto it = connections.begin(); it != connections.end();) {
            if (it->done->load()) {
                it->thread.join();
                it = connections.erase(it);
            } else {
                ++it;
            }
        }
    }

    // ---- HTTP

    void serve_connection(tcp::socket socket) {
        beast::flat_buffer buffer;
        beast::error_code ec;
        for (;;) {
            Request req;
            http::read(socket, buffer, req, ec);
            if (ec) break;
            if (websocket::is_upgrade(req)) {
                if (req.target() == "/ws") serve_websocket(std::move(socket), std::move(req));
                else write_error(socket, req, http::status::not_found, "no WebSocket endpoint at this path");
                return;
            }
            Response res = handle(req);
            res.keep_alive(req.keep_alive());
            res.prepare_payload();
            http::write(socket, res, ec);
            if (ec || !res.keep_alive()) break;
        }
        socket.shutdown(tcp::socket::shutdown_both, ec);
    }

    static Response make_response(const Request& req, http::status status, std::string body,
                                  const std::string& content_type) {
        Response res{status, req.version()};
        res.set(http::field::server, "corebody");
        res.set(http::field::content_type, content_type);
        res.set(http::field::cache_control, "no-store");
        res.body() = std::move(body);
        return res;
    }

    static Response json_response(const Request& req, http::status status, const nlohmann::ordered_json& body) {
        return make_response(req, status, body.dump() + "\n", "application/json");
    }

    static void write_error(tcp::socket& socket, const Request& req, http::status status, const std::string& msg) {
        Response res = json_response(req, status, {{"error", msg}});
        res.keep_alive(false);
        res.prepare_payload();
        beast::error_code ec;
        http::write(socket, res, ec);
    }

    Response handle(const Request& req) {
        try {
            return route(req);
        } catch (const HttpError& e) {
            return json_response(req, e.status, {{"error", e.message}});
        } catch (const FrameError& e) {
            return json_response(req, http::status::bad_request, {{"error", e.what()}});
        } catch (const ConfigError& e) {
            return json_response(req, http::status::bad_request, {{"error", e.what()}});
        } catch (const InvalidArgument& e) {
            return json_response(req, http::status::bad_request, {{"error", e.what()}});
        } catch (const json::exception& e) {
            return json_response(req, http::status::bad_request, {{"error", e.what()}});
        } catch (const BindingError& e) {
            return json_response(req, http::status::unprocessable_entity, {{"error", e.what()}, {"site", e.site()}});
        } catch (const Error& e) {
            return json_response(req, http::status::unprocessable_entity, {{"error", e.what()}});
        } catch (const std::exception& e) {
            return json_response(req, http::status::internal_server_error, {{"error", e.what()}});
        }
    }

    static void require_method(const Request& req, std::initializer_list<http::verb> allowed) {
        for (http::verb v : allowed)
            if (req.method() == v) return;
        throw HttpError{http::status::method_not_allowed, "method not allowed on " + std::string(req.target())};
    }

    Response route(const Request& req) {
        std::string path(req.target());
        if (const auto q = path.find('?'); q != std::string::npos) path.resize(q);

        if (path == "/api/config") {
            require_method(req, {http::verb::get, http::verb::put});
            if (req.method() == http::verb::put) return json_response(req, http::status::ok, put_config(parse_body(req.body())));
            std::lock_guard lock(mu);
            return json_response(req, http::status::ok, config_to_json(config));
        }
        if (path == "/api/viewpoints") {
            require_method(req, {http::verb::get, http::verb::put});
            std::lock_guard lock(mu);
            if (req.method() == http::verb::put) config.viewpoints = viewpoints_from_json(parse_body(req.body()));
            return json_response(req, http::status::ok, viewpoints_to_json(config.viewpoints));
        }
        if (path == "/api/target") {
            require_method(req, {http::verb::post});
            return json_response(req, http::status::ok, post_target(req.body()));
        }
        if (path == "/api/topology") {
            require_method(req, {http::verb::get});
            return make_response(req, http::status::ok, topology_json(), "application/json");
        }
        if (path == "/api/report") {
            require_method(req, {http::verb::get});
            std::lock_guard lock(mu);
            if (!report) throw HttpError{http::status::not_found, "no session has been finalized yet"};
            return make_response(req, http::status::ok, format_report(*report), "application/json");
        }
        if (path == "/api/session") {
            require_method(req, {http::verb::get, http::verb::post, http::verb::delete_});
            if (req.method() == http::verb::post) {
                const json body = parse_body(req.body());
                if (!body.is_object() || !body.contains("source") || !body["source"].is_string())
                    throw HttpError{http::status::bad_request, "body must be {\"source\": ..., \"speed\": ...}"};
                const std::string speed = body.value("speed", std::string("max"));
                if (speed != "max" && speed != "realtime")
                    throw HttpError{http::status::bad_request, "speed must be realtime or max"};
                const auto dir = start_session(body["source"].get<std::string>(), speed == "realtime");
                return json_response(req, http::status::accepted, {{"state", "running"}, {"directory", dir.string()}});
            }
            if (req.method() == http::verb::delete_) {
                stop_session.store(true);
                wait_session();
            }
            return json_response(req, http::status::ok, session_status());
        }
        if (path.starts_with("/api/")) throw HttpError{http::status::not_found, "unknown endpoint " + path};

        require_method(req, {http::verb::get});
        return static_file(req, path);
    }

    Response static_file(const Request& req, const std::string& path) {
        if (path.find("..") != std::string::npos) throw HttpError{http::status::bad_request, "invalid path"};
        if (!options.ui_dir.empty()) {
            const auto file = options.ui_dir / (path == "/" ? std::string("index.html") : path.substr(1));
            std::ifstream in(file, std::ios::binary);
            if (in && std::filesystem::is_regular_file(file)) {
                std::stringstream ss;
                ss << in.rdbuf();
                return make_response(req, http::status::ok, ss.str(), mime_type(file));
            }
        }
        if (path == "/" || path == "/index.html")
            return make_response(req, http::status::ok, kPlaceholderPage, "text/html; charset=utf-8");
        throw HttpError{http::status::not_found, "not found: " + path};
    }

    // ---- state changes

    bool session_running() const { return state == SessionState::kRunning; }

    nlohmann::ordered_json put_config(const json& body) {
        std::lock_guard lock(mu);
        SessionConfig next = config_from_json(body, config);
        SessionConfig display_only = next;
        display_only.viewpoints = config.viewpoints;
        const bool substantive = config_to_json(display_only) != config_to_json(config);
        if (!substantive) {
            config = next;
            return config_to_json(config);
        }
        if (session_running())
            throw HttpError{http::status::conflict, "only viewpoints may change while a session is running"};

        auto next_assets = next.asset_path == config.asset_path
                               ? assets
                               : std::make_shared<const BodyModelAssets>(load_session_assets(next));
        std::shared_ptr<const TargetState> next_target;
        const bool source_changed = next.target_poselog != config.target_poselog ||
                                    next.target_index != config.target_index || next.target_frame != config.target_frame;
        if ((next.target_frame || !next.target_poselog.empty()) && (source_changed || !target)) {
            next_target = std::make_shared<const TargetState>(set_target(*next_assets, next, resolve_target_frame(next)));
        } else if (target) {
            next_target = std::make_shared<const TargetState>(set_target(*next_assets, next, target->frame));
        }
        const bool target_changed = next_target != nullptr &&
                                    (!target || next_target->mesh.vertices != target->mesh.vertices ||
                                     next_target->bindings != target->bindings);
        config = std::move(next);
        assets = std::move(next_assets);
        target = std::move(next_target);
        if (target_changed) hub.publish(target_item(*target));
        return config_to_json(config);
    }

    nlohmann::ordered_json post_target(const std::string& body) {
        std::lock_guard lock(mu);
        if (session_running()) throw HttpError{http::status::conflict, "cannot change the target mid-session"};
        const EstimatedFrame frame = parse_frame_record(body, 1, config.shape_limit);
        auto next = std::make_shared<const TargetState>(set_target(*assets, config, frame));
        config.target_frame = frame;
        config.target_poselog.clear();
        config.target_index = 0;
        target = std::move(next);
        hub.publish(target_item(*target));
        return target_summary(*target);
    }

    static nlohmann::ordered_json target_summary(const TargetState& t) {
        nlohmann::ordered_json bindings = nlohmann::ordered_json::object();
        for (const MarkerBinding& b : t.bindings) bindings[site_name(b.site)] = b.vertex_indices.size();
        return {{"t", t.frame.timestamp}, {"bindings", bindings}};
    }

    QueueItem target_item(const TargetState& t) const {
        nlohmann::ordered_json msg = {{"type", "target"}};
        const nlohmann::ordered_json summary = target_summary(t);
        for (const auto& [k, v] : summary.items()) msg[k] = v;
        return {false, {{false, msg.dump()}, {true, encode_vertex_message(t.mesh.vertices, 0, VertexKind::kTarget)}}};
    }

    std::string topology_json() {
        std::shared_ptr<const BodyModelAssets> a;
        {
            std::lock_guard lock(mu);
            a = assets;
        }
        std::string out = "{\"vertexCount\":" + std::to_string(a->vertex_count()) +
                          ",\"faceCount\":" + std::to_string(a->face_count()) + ",\"faces\":[";
        for (Eigen::Index i = 0; i < a->faces.size(); ++i) {
            if (i) out += ',';
            out += std::to_string(a->faces(i / 3, i % 3));
        }
        out += "]}\n";
        return out;
    }

    nlohmann::ordered_json session_status() {
        std::lock_guard lock(mu);
        nlohmann::ordered_json j;
        j["state"] = state_name(state);
        j["mode"] = mode_name(config.mode);
        j["targetSet"] = target != nullptr;
        j["framesProcessed"] = frames_processed.load();
        j["skippedFrames"] = frames_skipped.load();
        if (!session_directory.empty()) j["directory"] = session_directory.string();
        if (!last_error.empty()) j["error"] = last_error;
        return j;
    }

    // ---- sessions

    std::filesystem::path start_session(const std::string& source, bool realtime) {
        std::unique_lock lock(mu);
        if (session_running()) throw HttpError{http::status::conflict, "a session is already running"};
        if (!target) throw HttpError{http::status::conflict, "set a target before starting a session"};
        if (session_thread.joinable()) session_thread.join();

        std::unique_ptr<FrameStream> stream;
        std::shared_ptr<std::ifstream> file;
        if (source.starts_with("file:")) {
            file = std::make_shared<std::ifstream>(source.substr(5));
            if (!*file) throw HttpError{http::status::bad_request, "cannot open " + source.substr(5)};
            stream = std::make_unique<ReplayStream>(*file, config.shape_limit);
        } else if (source.starts_with("tcp://") || source.starts_with("exec:")) {
            stream = connect_external(source, {std::chrono::milliseconds(10000), config.shape_limit});
        } else {
            throw HttpError{http::status::bad_request, "source must be file:<path>, tcp://host:port or exec:<command>"};
        }

        const auto dir = create_session_dir(options.sessions_root);
        write_text_file(dir / "config.json", config_to_json(config).dump(2) + "\n");
        state = SessionState::kRunning;
        session_directory = dir;
        last_error.clear();
        frames_processed = 0;
        frames_skipped = 0;
        stop_session = false;

        session_thread = std::thread([this, dir, realtime, file, stream = std::move(stream), a = assets, t = target,
                                      cfg = config]() mutable {
            std::unique_ptr<PacedStream> paced;
            FrameStream* frames = stream.get();
            if (realtime) {
                paced = std::make_unique<PacedStream>(*stream);
                frames = paced.get();
            }
            SessionHooks hooks;
            hooks.should_stop = [this] { return stop_session.load(); };
            hooks.on_diagnostic = [this](const std::string& msg) {
                if (msg.starts_with("skipped")) ++frames_skipped;
            };
            hooks.on_frame = [this](const GuidanceFrame& g, const EstimatedFrame&, std::uint64_t id) {
                ++frames_processed;
                const auto fid = static_cast<std::uint32_t>(id);
                hub.publish({true,
                             {{false, guidance_message(g, id).dump()},
                              {true, encode_vertex_message(g.current.vertices, fid, VertexKind::kCurrent)}}});
            };
            try {
                SessionReport r = record_session(*a, cfg, *t, *frames, dir, hooks);
                hub.publish({false, {{false, metrics_message(r).dump()}}});
                std::lock_guard guard(mu);
                report = std::move(r);
                state = SessionState::kFinished;
            } catch (const std::exception& e) {
                hub.publish({false, {{false, nlohmann::ordered_json{{"type", "error"}, {"message", e.what()}}.dump()}}});
                std::lock_guard guard(mu);
                last_error = e.what();
                state = SessionState::kFailed;
            }
            session_cv.notify_all();
        });
        return dir;
    }

    void wait_session() {
        std::unique_lock lock(mu);
        session_cv.wait(lock, [&] { return !session_running(); });
        if (session_thread.joinable()) {
            std::thread t = std::move(session_thread);
            lock.unlock();
            t.join();
        }
    }

    // ---- WebSocket

    void serve_websocket(tcp::socket socket, Request req) {
        websocket::stream<tcp::socket> ws(std::move(socket));
        beast::error_code ec;
        ws.set_option(websocket::stream_base::decorator(
            [](websocket::response_type& res) { res.set(http::field::server, "corebody"); }));
        ws.accept(req, ec);
        if (ec) return;

        auto sub = std::make_shared<Subscriber>(options.subscriber_queue);
        {
            std::lock_guard lock(mu);
            nlohmann::ordered_json hello = {{"type", "hello"},
                                            {"vertexCount", assets->vertex_count()},
                                            {"faceCount", assets->face_count()},
                                            {"mode", mode_name(config.mode)},
                                            {"state", state_name(state)},
                                            {"viewpoints", viewpoints_to_json(config.viewpoints)}};
            sub->push({false, {{false, hello.dump()}}});
            if (target) sub->push(target_item(*target));
            hub.add(sub);
        }
        if (!running) sub->close();

        QueueItem item;
        while (sub->pop(item)) {
            for (const WsMessage& m : item.parts) {
                ws.binary(m.binary);
                ws.write(asio::buffer(m.payload), ec);
                if (ec) break;
            }
            if (ec) break;
        }
        hub.remove(sub);
        sub->close();
        if (!ec) ws.close(websocket::close_code::going_away, ec);
    }

    struct Connection {
        std::thread thread;
        std::shared_ptr<std::atomic<bool>> done;
    };

    ServiceOptions options;
    asio::io_context ioc;
    tcp::acceptor acceptor{ioc};
    unsigned short bound_port = 0;
    std::atomic<bool> running{false};
    std::thread accept_thread;
    std::list<Connection> connections;
    std::mutex conn_mu;
    std::set<int> open_fds;
    Hub hub;

    std::mutex mu;  // guards everything below
    std::condition_variable session_cv;
    SessionConfig config;
    std::shared_ptr<const BodyModelAssets> assets;
    std::shared_ptr<const TargetState> target;
    std::optional<SessionReport> report;
    SessionState state = SessionState::kIdle;
    std::filesystem::path session_directory;
    std::string last_error;
    std::thread session_thread;
    std::atomic<bool> stop_session{false};
    std::atomic<std::uint64_t> frames_processed{0};
    std::atomic<std::uint64_t> frames_skipped{0};
};

Service::Service(SessionConfig config, ServiceOptions options)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(options))) {}

Service::~Service() = default;

void Service::start() { impl_->start(); }
void Service::stop() { impl_->stop(); }
unsigned short Service::port() const { return impl_->bound_port; }

std::filesystem::path Service::start_session(const std::string& source, bool realtime) {
    try {
        return impl_->start_session(source, realtime);
    } catch (const HttpError& e) {
        throw Error(e.message);
    }
}

void Service::wait_session() { impl_->wait_session(); }

}  // namespace corebody

#pragma once

// Live guidance service: REST configuration endpoints plus a WebSocket
// guidance stream on one port.
//
//   GET  /api/config            current SessionConfig
//   PUT  /api/config            merge a partial config (409 mid-session unless
//                               only viewpoints change)
//   GET  /api/viewpoints        the two viewpoints
//   PUT  /api/viewpoints        replace them (allowed mid-session)
//   POST /api/target            set the target from a frame record
//   GET  /api/topology          {vertexCount, faceCount, faces}
//   GET  /api/session           session state
//   POST /api/session           {source, speed} start a session
//   DELETE /api/session         stop the running session
//   GET  /api/report            last finalized report (404 before any)
//   GET  /ws                    WebSocket upgrade
//
// WebSocket messages (server to client): a JSON "hello" on subscribe, then
// per processed frame a JSON "guidance" message followed by a binary vertex
// message; "target" + binary on target change; "metrics" on finalize.
// Binary layout: "CBVF", u32 frameId, u32 vertexCount, u32 kind (0 current,
// 1 target), then vertexCount little-endian f32 triplets.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>

#include "corebody/session.hpp"

namespace corebody {

inline constexpr std::array<char, 4> kVertexMagic = {'C', 'B', 'V', 'F'};
inline constexpr std::size_t kVertexHeaderBytes = 16;

enum class VertexKind : std::uint32_t { kCurrent = 0, kTarget = 1 };

std::string encode_vertex_message(const PointCloud& vertices, std::uint32_t frame_id, VertexKind kind);

struct DecodedVertices {
    std::uint32_t frame_id = 0;
    VertexKind kind = VertexKind::kCurrent;
    std::vector<float> xyz;
};
DecodedVertices decode_vertex_message(std::span<const char> bytes);

struct ServiceOptions {
    std::string address = "127.0.0.1";
    unsigned short port = 8080;  // 0 picks a free port
    std::filesystem::path ui_dir;  // empty: placeholder page
    std::filesystem::path sessions_root = sessions_dir();
    std::size_t subscriber_queue = 8;  // pending frames per subscriber before dropping the oldest
};

class Service {
public:
    // Loads assets and, when the config names one, the target.
    Service(SessionConfig config, ServiceOptions options);
    ~Service();

    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Binds and starts accepting; throws Error on bind failure.
    void start();
    void stop();
    unsigned short port() const;

    // Same as POST /api/session; returns the session directory.
    std::filesystem::path start_session(const std::string& source, bool realtime = false);
    // Blocks until the running session (if any) has finished.
    void wait_session();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace corebody

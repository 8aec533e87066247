#pragma once

// Live frame stream from an external estimator process. Endpoints:
//   tcp://host:port   connect and read newline-delimited frame records
//   exec:<command>    run `/bin/sh -c <command>` and read its stdout
// Records use the same format as .poselog replays.

#include <cerrno>
#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "corebody/estimator_gateway.hpp"

namespace corebody {

struct ExternalOptions {
    std::chrono::milliseconds idle_timeout{10000};
    double shape_limit = kDefaultShapeLimit;
};

class LiveStream final : public FrameStream {
public:
    LiveStream(int fd, pid_t child, ExternalOptions options)
        : fd_(fd), child_(child), options_(options), decoder_(options.shape_limit) {}

    LiveStream(const LiveStream&) = delete;
    LiveStream& operator=(const LiveStream&) = delete;

    ~LiveStream() override { close(); }

    std::optional<EstimatedFrame> next() override {
        while (fd_ >= 0) {
            std::optional<std::string> line = read_line();
            if (!line) {
                close();
                return std::nullopt;
            }
            const std::string& text = *line;
            if (text.find_first_not_of(" \t\r") != std::string::npos &&
                !nlohmann::json::accept(text)) {
                close();
                throw ProtocolError("peer sent a line that is not a JSON record (line " +
                                    std::to_string(decoder_.line() + 1) + ")");
            }
            if (auto frame = decoder_.decode(text)) return frame;
        }
        return std::nullopt;
    }

    bool closed() const noexcept { return fd_ < 0; }

    void close() {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
        if (child_ > 0) {
            int status = 0;
            if (::waitpid(child_, &status, WNOHANG) == 0) {
                ::kill(child_, SIGTERM);
                ::waitpid(child_, &status, 0);
            }
            child_ = -1;
        }
    }

private:
    // nullopt at end of stream; a final unterminated line is still returned.
    std::optional<std::string> read_line() {
        for (;;) {
            if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return line;
            }
            pollfd p{fd_, POLLIN, 0};
            const int ready = ::poll(&p, 1, static_cast<int>(options_.idle_timeout.count()));
            if (ready == 0) {
                close();
                throw TimeoutError("estimator idle for more than " +
                                   std::to_string(options_.idle_timeout.count()) + " ms");
            }
            if (ready < 0) {
                if (errno == EINTR) continue;
                close();
                throw ProtocolError("poll failed on estimator stream");
            }
            char chunk[4096];
            const ssize_t got = ::read(fd_, chunk, sizeof chunk);
            if (got < 0) {
                if (errno == EINTR) continue;
                close();
                throw ProtocolError("read failed on estimator stream");
            }
            if (got == 0) {
                if (buffer_.empty()) return std::nullopt;
                std::string line;
                line.swap(buffer_);
                return line;
            }
            buffer_.append(chunk, static_cast<std::size_t>(got));
        }
    }

    int fd_;
    pid_t child_;
    ExternalOptions options_;
    FrameDecoder decoder_;
    std::string buffer_;
};

namespace detail {

inline int connect_tcp(const std::string& host, const std::string& port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0)
        throw ConnectError("cannot resolve " + host + ":" + port + ": " + ::gai_strerror(rc));
    int fd = -1;
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw ConnectError("cannot connect to " + host + ":" + port);
    return fd;
}

inline std::pair<int, pid_t> spawn_reader(const std::string& command) {
    int fds[2];
    if (::pipe(fds) != 0) throw ConnectError("pipe() failed");
    const pid_t pid = ::fork();
    if (pid < 0) {
        ::close(fds[0]);
        ::close(fds[1]);
        throw ConnectError("fork() failed");
    }
    if (pid == 0) {
        ::dup2(fds[1], STDOUT_FILENO);
        ::close(fds[0]);
        ::close(fds[1]);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(fds[1]);
    return {fds[0], pid};
}

}  // namespace detail

inline std::unique_ptr<LiveStream> connect_external(const std::string& endpoint, ExternalOptions options = {}) {
    constexpr std::string_view tcp = "tcp://";
    constexpr std::string_view exec = "exec:";
    if (endpoint.starts_with(tcp)) {
        const std::string rest = endpoint.substr(tcp.size());
        const auto colon = rest.rfind(':');
        if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size())
            throw ConnectError("endpoint must be tcp://host:port");
        std::string host = rest.substr(0, colon);
        if (host.size() > 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
        const int fd = detail::connect_tcp(host, rest.substr(colon + 1));
        return std::make_unique<LiveStream>(fd, -1, options);
    }
    if (endpoint.starts_with(exec)) {
        const std::string command = endpoint.substr(exec.size());
        if (command.empty()) throw ConnectError("exec endpoint needs a command");
        const auto [fd, pid] = detail::spawn_reader(command);
        return std::make_unique<LiveStream>(fd, pid, options);
    }
    throw ConnectError("unsupported endpoint '" + endpoint + "' (expected tcp://host:port or exec:<command>)");
}

}  // namespace corebody

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace corebody {

// Base for every error the library raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Asset stream could not be parsed or violates an asset invariant.
class AssetError : public Error {
public:
    using Error::Error;
};

// Caller violated an operation precondition (bad argument range, non-finite input).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

// A single frame record is malformed or out of order. The stream that raised it
// may still be read further.
class FrameError : public Error {
public:
    FrameError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// Live peer violated the wire protocol; the stream has been closed.
class ProtocolError : public Error {
public:
    using Error::Error;
};

class ConnectError : public Error {
public:
    using Error::Error;
};

class TimeoutError : public Error {
public:
    using Error::Error;
};

// Marker binding produced an empty vertex set for a site.
class BindingError : public Error {
public:
    BindingError(std::string site, const std::string& what)
        : Error(what), site_(std::move(site)) {}

    const std::string& site() const noexcept { return site_; }

private:
    std::string site_;
};

class MetricsError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace corebody

#pragma once

// Minimal POSIX TCP plumbing shared by the controller listener and the simulated switch.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

namespace saami::tcp {

class SocketError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Fd {
public:
    Fd() = default;
    explicit Fd(int fd) : fd_(fd) { }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) { }
    Fd& operator=(Fd&& o) noexcept
    {
        if (this != &o) {
            reset();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    ~Fd() { reset(); }

    int get() const { return fd_; }
    explicit operator bool() const { return fd_ >= 0; }
    void reset();
    // Wakes any thread blocked in read/accept on this descriptor without releasing it.
    void shutdown();

private:
    int fd_ = -1;
};

// Binds and listens; returns the socket and the bound port (useful with port 0).
std::pair<Fd, std::uint16_t> listen(const std::string& address, std::uint16_t port);

Fd accept(const Fd& listener);

// Throws SocketError (ConnectFailed) when the peer is unreachable.
Fd connect(const std::string& host, std::uint16_t port);

// Blocks until every byte is written. Throws SocketError on failure.
void write_all(const Fd& fd, std::span<const std::uint8_t> bytes);

// Returns 0 on orderly shutdown, -1 on error.
long read_some(const Fd& fd, std::span<std::uint8_t> buffer);

} // namespace saami::tcp

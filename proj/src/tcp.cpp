#include "saami/tcp.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace saami::tcp {

void Fd::reset()
{
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

void Fd::shutdown()
{
    if (fd_ >= 0)
        ::shutdown(fd_, SHUT_RDWR);
}

std::pair<Fd, std::uint16_t> listen(const std::string& address, std::uint16_t port)
{
    Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!fd)
        throw SocketError(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, address.c_str(), &addr.sin_addr) != 1)
        throw SocketError("invalid listen address " + address);
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
        throw SocketError("bind " + address + ":" + std::to_string(port) + ": " + std::strerror(errno));
    if (::listen(fd.get(), 16) != 0)
        throw SocketError(std::string("listen: ") + std::strerror(errno));
    socklen_t len = sizeof addr;
    ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &len);
    return {std::move(fd), ntohs(addr.sin_port)};
}

Fd accept(const Fd& listener)
{
    for (;;) {
        int c = ::accept(listener.get(), nullptr, nullptr);
        if (c >= 0) {
            int one = 1;
            ::setsockopt(c, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            return Fd(c);
        }
        if (errno != EINTR)
            return Fd();
    }
}

Fd connect(const std::string& host, std::uint16_t port)
{
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const auto service = std::to_string(port);
    if (::getaddrinfo(host.c_str(), service.c_str(), &hints, &res) != 0 || !res)
        throw SocketError("cannot resolve " + host);
    Fd fd(::socket(res->ai_family, res->ai_socktype, res->ai_protocol));
    const int rc = fd ? ::connect(fd.get(), res->ai_addr, res->ai_addrlen) : -1;
    ::freeaddrinfo(res);
    if (rc != 0)
        throw SocketError("connect " + host + ":" + service + " failed: " + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return fd;
}

void write_all(const Fd& fd, std::span<const std::uint8_t> bytes)
{
    while (!bytes.empty()) {
        const auto n = ::send(fd.get(), bytes.data(), bytes.size(), MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR)
                continue;
            throw SocketError(std::string("send: ") + std::strerror(errno));
        }
        bytes = bytes.subspan(static_cast<std::size_t>(n));
    }
}

long read_some(const Fd& fd, std::span<std::uint8_t> buffer)
{
    for (;;) {
        const auto n = ::recv(fd.get(), buffer.data(), buffer.size(), 0);
        if (n >= 0 || errno != EINTR)
            return n;
    }
}

} // namespace saami::tcp

#pragma once

#include "saami/api.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <thread>

namespace httplib {
class Server;
}

namespace saami::api {

// Serves a MeasurementApi over HTTP/1.1 on a background thread.
class HttpServer {
public:
    explicit HttpServer(MeasurementApi& api);
    ~HttpServer();

    // Returns the bound port. Throws std::runtime_error when the address is unusable.
    std::uint16_t bind(const std::string& address, std::uint16_t port);
    void start();
    void stop();

private:
    MeasurementApi& api_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
};

} // namespace saami::api

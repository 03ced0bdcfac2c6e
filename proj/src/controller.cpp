#include "saami/http_server.hpp"

#include <httplib.h>

namespace saami::api {

HttpServer::HttpServer(MeasurementApi& api) : api_(api), server_(std::make_unique<httplib::Server>())
{
    const auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
        std::optional<std::string> auth;
        if (req.has_header("Authorization"))
            auth = req.get_header_value("Authorization");
        const auto r = api_.handle(req.method, req.path, req.body, auth);
        res.status = r.status;
        res.set_content(r.body, "application/json");
    };
    server_->Get(".*", dispatch);
    server_->Put(".*", dispatch);
    server_->Post(".*", dispatch);
    server_->Delete(".*", dispatch);
}

HttpServer::~HttpServer() { stop(); }

std::uint16_t HttpServer::bind(const std::string& address, std::uint16_t port)
{
    if (port == 0) {
        const int p = server_->bind_to_any_port(address);
        if (p < 0)
            throw std::runtime_error("cannot bind HTTP listener on " + address);
        return static_cast<std::uint16_t>(p);
    }
    if (!server_->bind_to_port(address, port))
        throw std::runtime_error("cannot bind HTTP listener on " + address + ":" + std::to_string(port));
    return port;
}

void HttpServer::start()
{
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
}

void HttpServer::stop()
{
    if (server_)
        server_->stop();
    if (thread_.joinable())
        thread_.join();
}

// ---------------------------------------------------------------- controller

Controller::Controller(ControllerConfig config) : config_(std::move(config))
{
    engine_ = std::make_unique<probe::ProbeEngine>(config_.engine, clock_);
    policy_ = std::make_unique<PolicyEnforcer>(config_.policy, clock_);
    api_ = std::make_unique<MeasurementApi>(*engine_, *policy_);
    engine_->set_router_identity(config_.router_identity);
    engine_->set_serving(policy_->allows(TaskKind::RouterIdServe));
    listener_ = std::make_unique<session::OpenFlowListener>(clock_);
    http_ = std::make_unique<HttpServer>(*api_);
}

Controller::~Controller() { stop(); }

void Controller::start()
{
    of_port_ = listener_->listen(config_.openflow_address, config_.openflow_port);
    api_port_ = http_->bind(config_.api_address, config_.api_port);
    listener_->start([this](const std::shared_ptr<session::SwitchSession>& s) {
        auto current = engine_->session();
        if (current && current->state() == session::SessionState::Active)
            return;
        engine_->attach(s);
        {
            std::lock_guard lk(mu_);
            attached_ = true;
        }
        cv_.notify_all();
    });
    http_->start();
}

void Controller::stop()
{
    if (http_)
        http_->stop();
    if (listener_)
        listener_->stop();
}

bool Controller::wait_for_switch(Duration timeout)
{
    std::unique_lock lk(mu_);
    return cv_.wait_for(lk, timeout, [this] { return attached_; });
}

} // namespace saami::api

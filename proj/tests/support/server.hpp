#pragma once

// In-process service on an ephemeral loopback port.

#include <filesystem>
#include <memory>
#include <string>
#include <thread>

#include <unistd.h>

#include "difftensor/service.hpp"

namespace difftensor::testing {

class LocalServer {
 public:
  explicit LocalServer(service::Options o) : svc_(std::make_unique<service::Service>(o)) {
    svc_->mount(srv_);
    port_ = srv_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { srv_.listen_after_bind(); });
    srv_.wait_until_ready();
  }

  ~LocalServer() {
    srv_.stop();
    thread_.join();
    svc_.reset();
  }

  LocalServer(const LocalServer&) = delete;
  LocalServer& operator=(const LocalServer&) = delete;

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(120, 0);
    return c;
  }

  service::Service& service() { return *svc_; }

 private:
  std::unique_ptr<service::Service> svc_;
  httplib::Server srv_;
  std::thread thread_;
  int port_ = 0;
};

/// Fresh, empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() /
           ("difftensor-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace difftensor::testing

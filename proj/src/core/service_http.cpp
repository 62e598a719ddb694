#include <mutex>

#include <httplib.h>

#include "core/errors.hpp"
#include "core/service.hpp"

namespace ccm {

struct HttpServer::Impl {
  InferenceService& service;
  httplib::Server server;
  std::mutex mu;
  bool stop_requested = false;
  bool listening = false;
};

namespace {

void send(httplib::Response& res, const HttpReply& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

}  // namespace

HttpServer::HttpServer(InferenceService& service) : impl_(new Impl{service, {}}) {
  auto& svr = impl_->server;
  svr.set_payload_max_length(64u << 20);
  svr.Post("/predict", [this](const httplib::Request& req, httplib::Response& res) {
    send(res, impl_->service.handle_predict(req.body));
  });
  svr.Post("/explain", [this](const httplib::Request& req, httplib::Response& res) {
    send(res, impl_->service.handle_explain(req.body));
  });
  svr.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    send(res, impl_->service.handle_health());
  });
  svr.Get("/metrics", [this](const httplib::Request&, httplib::Response& res) {
    send(res, impl_->service.handle_metrics());
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound <= 0) throw IoError("serve: cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::run() {
  {
    std::lock_guard lk(impl_->mu);
    if (impl_->stop_requested) return;
    impl_->listening = true;
  }
  impl_->server.listen_after_bind();
}

// A stop that arrives before run() reaches the accept loop must not be lost.
void HttpServer::stop() {
  if (!impl_) return;
  bool listening;
  {
    std::lock_guard lk(impl_->mu);
    impl_->stop_requested = true;
    listening = impl_->listening;
  }
  if (listening) {
    impl_->server.wait_until_ready();
    impl_->server.stop();
  }
}

}  // namespace ccm

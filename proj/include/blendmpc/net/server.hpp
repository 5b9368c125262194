#pragma once

// HTTP + WebSocket front end for the session service (Boost.Beast).
//
//   GET  /scenarios               scenario list
//   GET  /sessions                session summaries
//   POST /sessions                {"scenario": name, "config": {...}} -> 201 {"session": id}
//   GET  /sessions/{id}/log       episode log as JSON lines
//   GET  /ws                      WebSocket upgrade; JSON messages

#include <boost/asio/dispatch.hpp>
#include <boost/asio/strand.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "../service.hpp"

namespace blendmpc::net {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace asio = boost::asio;
using tcp = asio::ip::tcp;

using Request = http::request<http::string_body>;
using Response = http::response<http::string_body>;

inline Response make_response(const Request & req, http::status status, std::string body, std::string content_type = "application/json")
{
  Response res{status, req.version()};
  res.set(http::field::server, "blendmpc");
  res.set(http::field::content_type, content_type);
  res.set(http::field::access_control_allow_origin, "*");
  res.keep_alive(req.keep_alive());
  res.body() = std::move(body);
  res.prepare_payload();
  return res;
}

inline Response json_error(const Request & req, http::status status, const std::string & code, const std::string & message)
{
  return make_response(req, status, nlohmann::json{{"error", code}, {"message", message}}.dump());
}

/// Routes a plain HTTP request. Never throws.
inline Response handle_http(SessionManager & mgr, const Request & req)
{
  const std::string target(req.target());
  const std::string path = target.substr(0, target.find('?'));
  try {
    if (path == "/scenarios") {
      if (req.method() != http::verb::get) return json_error(req, http::status::method_not_allowed, "method_not_allowed", "use GET");
      return make_response(req, http::status::ok, mgr.scenarios().to_json().dump());
    }
    if (path == "/sessions") {
      if (req.method() == http::verb::get) return make_response(req, http::status::ok, mgr.list().dump());
      if (req.method() != http::verb::post) return json_error(req, http::status::method_not_allowed, "method_not_allowed", "use GET or POST");
      const auto body = nlohmann::json::parse(req.body().empty() ? std::string("{}") : req.body());
      if (!body.is_object() || !body.contains("scenario") || !body["scenario"].is_string()) {
        return json_error(req, http::status::bad_request, "bad_request", "body must contain a string 'scenario'");
      }
      auto s = mgr.create(body["scenario"].get<std::string>(), body.value("config", nlohmann::json()));
      nlohmann::json out = s->summary();
      return make_response(req, http::status::created, out.dump());
    }
    const std::string prefix = "/sessions/", suffix = "/log";
    if (path.size() > prefix.size() + suffix.size() && path.compare(0, prefix.size(), prefix) == 0 &&
        path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0) {
      if (req.method() != http::verb::get) return json_error(req, http::status::method_not_allowed, "method_not_allowed", "use GET");
      const std::string id = path.substr(prefix.size(), path.size() - prefix.size() - suffix.size());
      auto res = make_response(req, http::status::ok, mgr.get(id)->log(), "application/x-ndjson");
      return res;
    }
    return json_error(req, http::status::not_found, "not_found", "no route for " + path);
  } catch (const UnknownScenario & e) {
    return json_error(req, http::status::not_found, "unknown_scenario", e.what());
  } catch (const UnknownSession & e) {
    return json_error(req, http::status::not_found, "unknown_session", e.what());
  } catch (const nlohmann::json::exception & e) {
    return json_error(req, http::status::bad_request, "bad_request", e.what());
  } catch (const std::invalid_argument & e) {
    return json_error(req, http::status::bad_request, "bad_request", e.what());
  } catch (const std::exception & e) {
    return json_error(req, http::status::internal_server_error, "internal", e.what());
  }
}

/// Guards cross-thread posts into the io_context; closed before the server shuts down.
struct PostGate
{
  std::mutex mutex;
  bool open{true};
};

/// One WebSocket client. Frames from the bound session are queued on the strand.
class WsConnection : public std::enable_shared_from_this<WsConnection>
{
public:
  static constexpr std::size_t max_queue = 1024;

  WsConnection(tcp::socket && socket, SessionManager & mgr, std::shared_ptr<PostGate> gate)
      : ws_(std::move(socket)), mgr_(mgr), gate_(std::move(gate))
  {
  }

  ~WsConnection() { detach(); }

  void run(Request req)
  {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, beast::bind_front_handler(&WsConnection::on_accept, shared_from_this()));
  }

  void send(std::string text) { asio::post(ws_.get_executor(), [self = shared_from_this(), text = std::move(text)]() mutable { self->enqueue(std::move(text)); }); }

private:
  void enqueue(std::string text)
  {
    if (closed_) return;
    if (queue_.size() >= max_queue) return;  // slow reader: drop
    queue_.push_back(std::move(text));
    if (queue_.size() == 1) do_write();
  }

  void on_accept(beast::error_code ec)
  {
    if (ec) return;
    do_read();
  }

  void do_read() { ws_.async_read(buffer_, beast::bind_front_handler(&WsConnection::on_read, shared_from_this())); }

  void on_read(beast::error_code ec, std::size_t)
  {
    if (ec) {
      closed_ = true;
      detach();
      return;
    }
    nlohmann::json reply;
    const auto msg = nlohmann::json::parse(beast::buffers_to_string(buffer_.data()), nullptr, false);
    buffer_.consume(buffer_.size());
    if (msg.is_discarded()) {
      reply = {{"type", "error"}, {"code", "bad_request"}, {"message", "invalid JSON"}};
    } else {
      reply = handle_client_message(mgr_, msg, bound_, [this](const std::shared_ptr<Session> & s) { attach(s); });
    }
    if (!reply.is_null()) send(reply.dump());
    do_read();
  }

  void do_write()
  {
    ws_.text(true);
    ws_.async_write(asio::buffer(queue_.front()), beast::bind_front_handler(&WsConnection::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t)
  {
    if (ec) {
      closed_ = true;
      queue_.clear();
      return;
    }
    queue_.pop_front();
    if (!queue_.empty()) do_write();
  }

  void attach(const std::shared_ptr<Session> & s)
  {
    detach();
    // The publisher thread never owns the connection, so it is always destroyed on the io_context.
    std::weak_ptr<WsConnection> weak = weak_from_this();
    subscribed_ = s;
    handle_ = s->subscribe([weak, gate = gate_, ex = ws_.get_executor()](const nlohmann::json & frame) {
      std::lock_guard lock(gate->mutex);
      if (!gate->open) return;
      asio::post(ex, [weak, text = frame.dump()]() mutable {
        if (auto self = weak.lock()) self->enqueue(std::move(text));
      });
    });
  }

  void detach()
  {
    if (subscribed_) subscribed_->unsubscribe(handle_);
    subscribed_.reset();
  }

  websocket::stream<beast::tcp_stream> ws_;
  SessionManager & mgr_;
  std::shared_ptr<PostGate> gate_;
  beast::flat_buffer buffer_;
  std::deque<std::string> queue_;
  std::shared_ptr<Session> bound_;
  std::shared_ptr<Session> subscribed_;
  std::uint64_t handle_{0};
  bool closed_{false};
};

class HttpConnection : public std::enable_shared_from_this<HttpConnection>
{
public:
  HttpConnection(tcp::socket && socket, SessionManager & mgr, std::shared_ptr<PostGate> gate)
      : stream_(std::move(socket)), mgr_(mgr), gate_(std::move(gate))
  {
  }

  void run() { asio::dispatch(stream_.get_executor(), beast::bind_front_handler(&HttpConnection::do_read, shared_from_this())); }

private:
  void do_read()
  {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, beast::bind_front_handler(&HttpConnection::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t)
  {
    if (ec) {
      beast::error_code ignored;
      stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
      return;
    }
    if (websocket::is_upgrade(req_)) {
      if (req_.target() == "/ws") {
        stream_.expires_never();
        std::make_shared<WsConnection>(stream_.release_socket(), mgr_, gate_)->run(std::move(req_));
        return;
      }
    }
    res_ = std::make_shared<Response>(handle_http(mgr_, req_));
    http::async_write(stream_, *res_, beast::bind_front_handler(&HttpConnection::on_write, shared_from_this(), res_->need_eof()));
  }

  void on_write(bool close, beast::error_code ec, std::size_t)
  {
    if (ec || close) {
      beast::error_code ignored;
      stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
      return;
    }
    do_read();
  }

  beast::tcp_stream stream_;
  SessionManager & mgr_;
  std::shared_ptr<PostGate> gate_;
  beast::flat_buffer buffer_;
  Request req_;
  std::shared_ptr<Response> res_;
};

/// Listens on address:port and serves on a small thread pool. Port 0 picks a free port.
class Server
{
public:
  Server(SessionManager & mgr, const std::string & address, unsigned short port)
      : mgr_(mgr), acceptor_(asio::make_strand(ioc_))
  {
    const tcp::endpoint ep{asio::ip::make_address(address), port};
    acceptor_.open(ep.protocol());
    acceptor_.set_option(asio::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen(asio::socket_base::max_listen_connections);
  }

  ~Server()
  {
    stop();
    wait();
  }

  unsigned short port() const { return acceptor_.local_endpoint().port(); }

  void start(unsigned threads = 2)
  {
    do_accept();
    for (unsigned i = 0; i < std::max(1u, threads); ++i) pool_.emplace_back([this] { ioc_.run(); });
  }

  /// Blocks until stop() is called from another thread. Call from one thread only.
  void wait()
  {
    for (auto & t : pool_) {
      if (t.joinable()) t.join();
    }
  }

  /// Non-blocking; safe to call from any thread.
  void stop()
  {
    {
      std::lock_guard lock(gate_->mutex);
      gate_->open = false;
    }
    ioc_.stop();
  }

private:
  void do_accept()
  {
    acceptor_.async_accept(asio::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (!ec) std::make_shared<HttpConnection>(std::move(socket), mgr_, gate_)->run();
      if (acceptor_.is_open()) do_accept();
    });
  }

  SessionManager & mgr_;
  std::shared_ptr<PostGate> gate_ = std::make_shared<PostGate>();
  asio::io_context ioc_;
  tcp::acceptor acceptor_;
  std::vector<std::thread> pool_;
};

}  // namespace blendmpc::net

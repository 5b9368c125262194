#include <gtest/gtest.h>

#include <blendmpc/net/server.hpp>

#include <boost/asio/connect.hpp>

// After Eigen: <resolv.h> defines a `_res` macro that clashes with Eigen parameter names.
#include <httplib.h>

using namespace blendmpc;
using namespace std::chrono_literals;
namespace net = blendmpc::net;

namespace {

class ServerTest : public ::testing::Test
{
protected:
  void SetUp() override
  {
    server = std::make_unique<net::Server>(mgr, "127.0.0.1", 0);
    server->start(2);
    http = std::make_unique<httplib::Client>("127.0.0.1", server->port());
  }

  std::string create(const nlohmann::json & body)
  {
    auto res = http->Post("/sessions", body.dump(), "application/json");
    EXPECT_TRUE(res);
    EXPECT_EQ(res->status, 201);
    return nlohmann::json::parse(res->body)["session"];
  }

  SessionManager mgr;
  std::unique_ptr<net::Server> server;
  std::unique_ptr<httplib::Client> http;
};

/// Minimal synchronous WebSocket client.
class WsClient
{
public:
  explicit WsClient(unsigned short port) : ws_(ioc_)
  {
    boost::asio::ip::tcp::resolver resolver(ioc_);
    boost::asio::connect(ws_.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    ws_.handshake("127.0.0.1", "/ws");
  }

  void send(const nlohmann::json & j) { ws_.write(boost::asio::buffer(j.dump())); }

  nlohmann::json receive()
  {
    boost::beast::flat_buffer buf;
    ws_.read(buf);
    return nlohmann::json::parse(boost::beast::buffers_to_string(buf.data()));
  }

  /// Next message whose type is `type`, skipping others.
  nlohmann::json receive(const std::string & type)
  {
    for (;;) {
      auto j = receive();
      if (j["type"] == type) return j;
    }
  }

private:
  boost::asio::io_context ioc_;
  boost::beast::websocket::stream<boost::asio::ip::tcp::socket> ws_;
};

}  // namespace

TEST_F(ServerTest, ListsScenarios)
{
  auto res = http->Get("/scenarios");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto j = nlohmann::json::parse(res->body);
  ASSERT_TRUE(j.is_array());
  std::vector<std::string> names;
  for (const auto & s : j) names.push_back(s["name"]);
  EXPECT_EQ(names, (std::vector<std::string>{"lab_gA", "lab_gB", "open"}));
}

TEST_F(ServerTest, CreatesSessionsAndReportsErrors)
{
  EXPECT_EQ(create({{"scenario", "lab_gA"}}), "s0001");
  auto res = http->Post("/sessions", R"({"scenario": "moon"})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(nlohmann::json::parse(res->body)["error"], "unknown_scenario");
  res = http->Post("/sessions", "{oops", "application/json");
  EXPECT_EQ(res->status, 400);
  res = http->Post("/sessions", R"({"scenario": "open", "config": {"lambda": 7}})", "application/json");
  EXPECT_EQ(res->status, 400);
  res = http->Get("/sessions");
  EXPECT_EQ(nlohmann::json::parse(res->body).size(), 1u);
  EXPECT_EQ(http->Get("/teapot")->status, 404);
  EXPECT_EQ(http->Delete("/scenarios")->status, 405);
  EXPECT_EQ(http->Get("/sessions/s0404/log")->status, 404);
}

TEST_F(ServerTest, WebSocketSessionStreamsGapFreeFramesAtTenHertz)
{
  const std::string id = create({{"scenario", "open"}});
  WsClient ws(server->port());
  ws.send({{"type", "hello"}, {"session", id}});
  const auto hello = ws.receive();
  EXPECT_EQ(hello["type"], "hello");
  EXPECT_EQ(hello["mode"], "paused");

  ws.send({{"type", "set"}, {"key", "paused"}, {"value", false}});
  EXPECT_EQ(ws.receive("ack")["key"], "paused");
  ws.send({{"type", "cmd"}, {"v", 0.3}, {"omega", 0.0}, {"seq", 1}});

  std::vector<nlohmann::json> frames;
  std::vector<std::chrono::steady_clock::time_point> arrivals;
  bool acked = false;
  while (frames.size() < 31) {
    const auto j = ws.receive();
    if (j["type"] == "ack") {
      acked = true;
      EXPECT_EQ(j["session"], id);
      EXPECT_EQ(j["dropped"], false);
      continue;
    }
    ASSERT_EQ(j["type"], "state");
    frames.push_back(j);
    arrivals.push_back(std::chrono::steady_clock::now());
    if (frames.size() % 2 == 0) ws.send({{"type", "cmd"}, {"v", 0.3}, {"omega", 0.0}, {"seq", 1 + frames.size()}});
  }
  EXPECT_TRUE(acked);
  for (std::size_t i = 1; i < frames.size(); ++i) EXPECT_EQ(frames[i]["seq"].get<int>(), frames[i - 1]["seq"].get<int>() + 1);
  const double mean_ms =
    std::chrono::duration<double, std::milli>(arrivals.back() - arrivals.front()).count() / double(frames.size() - 1);
  EXPECT_NEAR(mean_ms, 100.0, 10.0);
  EXPECT_EQ(frames.back()["session"], id);
  EXPECT_EQ(frames.back()["horizon"].size(), 21u);
  EXPECT_GT(frames.back()["robot"]["x"].get<double>(), 0.8);

  ws.send({{"type", "set"}, {"key", "paused"}, {"value", true}});
  std::this_thread::sleep_for(300ms);
  auto res = http->Get("/sessions/" + id + "/log");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->get_header_value("Content-Type"), "application/x-ndjson");
  const auto trace = parse_episode_log(res->body);
  EXPECT_GE(trace.size(), frames.size());
}

TEST_F(ServerTest, WebSocketReportsProtocolErrors)
{
  WsClient ws(server->port());
  ws.send({{"type", "cmd"}, {"v", 0.1}, {"omega", 0.0}, {"seq", 1}});
  EXPECT_EQ(ws.receive()["code"], "no_session");
  ws.send({{"type", "hello"}, {"session", "s9999"}});
  EXPECT_EQ(ws.receive()["code"], "unknown_session");
  const std::string id = create({{"scenario", "open"}});
  ws.send({{"type", "hello"}, {"session", id}});
  ws.receive("hello");
  ws.send({{"type", "cmd"}, {"v", 0.1}, {"omega", 0.0}, {"seq", 1}});
  const auto err = ws.receive();
  EXPECT_EQ(err["code"], "session_not_running");
  EXPECT_EQ(err["session"], id);
}

TEST_F(ServerTest, LambdaToggleTakesEffectOnNextFrame)
{
  const std::string id = create({{"scenario", "open"}, {"config", {{"horizon", 30}}}});
  WsClient ws(server->port());
  ws.send({{"type", "hello"}, {"session", id}});
  ws.receive("hello");
  ws.send({{"type", "set"}, {"key", "paused"}, {"value", false}});
  ws.receive("ack");
  ws.send({{"type", "set"}, {"key", "lambda"}, {"value", 0.0}});
  ws.receive("ack");
  int seq = 1;
  for (int i = 0; i < 3; ++i) {
    ws.send({{"type", "cmd"}, {"v", 0.2}, {"omega", 0.1}, {"seq", seq++}});
    ws.receive("state");
  }
  ws.send({{"type", "cmd"}, {"v", 0.2}, {"omega", 0.1}, {"seq", seq++}});
  ws.receive("ack");
  const auto f = ws.receive("state");
  EXPECT_EQ(f["lambda_effective"], 0.0);
  EXPECT_DOUBLE_EQ(f["u_applied"]["v"], 0.2);
}

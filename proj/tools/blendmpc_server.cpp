// Teleoperation session host: HTTP + WebSocket on one port.

#include <CLI11.hpp>

#include <boost/asio/signal_set.hpp>

#include <iostream>

#include <blendmpc/net/server.hpp>

int main(int argc, char ** argv)
{
  CLI::App app{"Shared-autonomy session server"};
  std::string address = "127.0.0.1";
  unsigned short port = 8080;
  unsigned threads = 2;
  std::vector<std::string> scenario_files;
  app.add_option("--address", address, "Listen address");
  app.add_option("--port", port, "Listen port (0 picks a free one)");
  app.add_option("--threads", threads, "Network threads")->check(CLI::PositiveNumber);
  app.add_option("--scenario", scenario_files, "Extra scenario JSON files")->check(CLI::ExistingFile);
  CLI11_PARSE(app, argc, argv);

  try {
    blendmpc::ScenarioRegistry registry;
    for (const auto & f : scenario_files) registry.add(blendmpc::load_scenario(f));
    blendmpc::SessionManager sessions(std::move(registry));
    blendmpc::net::Server server(sessions, address, port);

    boost::asio::io_context signals_ctx;
    boost::asio::signal_set signals(signals_ctx, SIGINT, SIGTERM);
    signals.async_wait([&](const boost::system::error_code &, int) { server.stop(); });
    std::thread signal_thread([&] { signals_ctx.run(); });

    server.start(threads);
    std::cout << "listening on " << address << ":" << server.port() << std::endl;
    server.wait();
    signals_ctx.stop();
    signal_thread.join();
  } catch (const std::exception & e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

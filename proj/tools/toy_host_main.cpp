// Serves the task toy model over the /v1 protocol, for driving the
// remote backend by hand.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "iclcal/remote.hpp"
#include "iclcal/tasks.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Toy model host speaking the iclcal /v1 protocol", "iclcal_toy_host"};
  std::string host = "127.0.0.1";
  int port = 8080;
  std::uint64_t toy_seed = 0;
  std::size_t embed_dim = 16;
  app.add_option("--host", host);
  app.add_option("--port", port)->check(CLI::Range(1, 65535));
  app.add_option("--toy-seed", toy_seed);
  app.add_option("--embed-dim", embed_dim)->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  const auto model = iclcal::make_task_toy_model(iclcal::Vocab::toy(), embed_dim, toy_seed);
  iclcal::ReferenceServer server(model);
  std::cerr << "serving toy model on http://" << host << ":" << port << "\n";
  try {
    server.listen_blocking(host, port);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 3;
  }
  return 0;
}

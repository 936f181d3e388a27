#include "iclcal/remote.hpp"

#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <limits>
#include <string>

#include <httplib.h>
#include <json.hpp>
#include <openssl/evp.h>

#include "iclcal/error.hpp"

namespace iclcal {
namespace {

using nlohmann::json;

std::atomic<std::uint64_t> g_request_counter{0};

json wire_to_json(const WireEmbedding& w) {
  return json{{"shape", {w.rows, w.cols}}, {"payload", w.payload}};
}

WireEmbedding wire_from_json(const json& j) {
  WireEmbedding w;
  const auto& shape = j.at("shape");
  if (!shape.is_array() || shape.size() != 2) {
    throw Error(ErrorCode::MalformedResponse, "embedding shape must be [rows, cols]");
  }
  w.rows = shape[0].get<std::size_t>();
  w.cols = shape[1].get<std::size_t>();
  w.payload = j.at("payload").get<std::string>();
  return w;
}

json table_to_json(const LogProbTable& table) {
  json out = json::array();
  for (const auto& [pos, lp] : table.entries()) {
    // JSON has no infinity; null encodes a log-prob of -inf.
    out.push_back(json{{"position", pos}, {"logprob", std::isinf(lp) ? json(nullptr) : json(lp)}});
  }
  return out;
}

LogProbTable table_from_json(const json& j) {
  std::vector<LogProbTable::Entry> entries;
  for (const auto& e : j) {
    const auto& lp = e.at("logprob");
    entries.emplace_back(e.at("position").get<std::size_t>(),
                         lp.is_null() ? -std::numeric_limits<double>::infinity()
                                      : lp.get<double>());
  }
  return LogProbTable(std::move(entries));
}

std::string next_request_id(const RemoteEndpoint& endpoint) {
  return endpoint.request_id_prefix + "-" + std::to_string(g_request_counter.fetch_add(1));
}

// POSTs `body` and returns the parsed JSON response. Transport failures are
// retried up to max_retries times; host-reported errors are not.
json post(const RemoteEndpoint& endpoint, const std::string& path, json body) {
  endpoint.validate();
  body["request_id"] = next_request_id(endpoint);
  const std::string payload = body.dump();
  const auto secs = static_cast<time_t>(endpoint.timeout_seconds);
  const auto usecs =
      static_cast<time_t>((endpoint.timeout_seconds - static_cast<double>(secs)) * 1e6);

  httplib::Result res;
  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
    httplib::Client client(endpoint.base_url);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    res = client.Post(path, payload, "application/json");
    if (res) break;
    last_error = httplib::to_string(res.error());
  }
  if (!res) {
    throw Error(ErrorCode::Unreachable, endpoint.base_url + path + " unreachable after " +
                                            std::to_string(endpoint.max_retries + 1) +
                                            " attempts: " + last_error);
  }

  json reply;
  try {
    reply = json::parse(res->body);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedResponse,
                "HTTP " + std::to_string(res->status) + " with non-JSON body: " + e.what());
  }
  if (res->status != 200) {
    const std::string code = reply.value("error_code", std::string("host_error"));
    const std::string message = reply.value("message", std::string("(no message)"));
    ErrorCode ec = error_code_from_name(code);
    if (ec != ErrorCode::InvalidArgument && ec != ErrorCode::ContextOverflow &&
        ec != ErrorCode::ShapeMismatch && ec != ErrorCode::PositionOutOfRange &&
        ec != ErrorCode::OutOfVocab) {
      ec = ErrorCode::HostError;
    }
    throw Error(ec, "host error " + code + " (HTTP " + std::to_string(res->status) +
                        "): " + message);
  }
  if (!reply.is_object() || !reply.contains("protocol_version")) {
    throw Error(ErrorCode::MalformedResponse, path + " response lacks protocol_version");
  }
  if (reply["protocol_version"] != kProtocolVersion) {
    throw Error(ErrorCode::MalformedResponse,
                "unsupported protocol_version " + reply["protocol_version"].dump());
  }
  return reply;
}

// Runs `parse` and reports schema violations as MalformedResponse.
template <typename F>
auto parse_reply(const std::string& what, F&& parse) {
  try {
    return parse();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedResponse, what + ": " + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::MalformedResponse) throw;
    throw Error(ErrorCode::MalformedResponse, what + ": " + e.what());
  }
}

json logprob_request(std::span<const EmbeddingMatrix> batch,
                     std::span<const TokenId> target_token_ids,
                     std::span<const std::size_t> positions) {
  json embeddings = json::array();
  for (const auto& x : batch) embeddings.push_back(wire_to_json(encode_embedding(x)));
  return json{{"embeddings", std::move(embeddings)},
              {"target_token_ids", std::vector<TokenId>(target_token_ids.begin(),
                                                        target_token_ids.end())},
              {"positions", std::vector<std::size_t>(positions.begin(), positions.end())}};
}

}  // namespace

void RemoteEndpoint::validate() const {
  if (base_url.empty()) throw Error(ErrorCode::InvalidArgument, "endpoint URL is empty");
  if (!(timeout_seconds > 0.0)) throw Error(ErrorCode::InvalidArgument, "timeout must be > 0");
  if (max_retries < 0) throw Error(ErrorCode::InvalidArgument, "max_retries must be >= 0");
}

std::string base64_encode(std::span<const unsigned char> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  if (bytes.empty()) return out;
  const int written = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                      static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(written));
  return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) {
    throw Error(ErrorCode::MalformedResponse, "base64 length is not a multiple of 4");
  }
  std::vector<unsigned char> out(3 * (text.size() / 4));
  if (text.empty()) return out;
  const int written =
      EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                      static_cast<int>(text.size()));
  if (written < 0) throw Error(ErrorCode::MalformedResponse, "invalid base64 payload");
  // EVP_DecodeBlock counts padding as zero bytes.
  std::size_t pad = 0;
  if (text.back() == '=') ++pad;
  if (text.size() >= 2 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(written) - pad);
  return out;
}

WireEmbedding encode_embedding(const EmbeddingMatrix& x) {
  std::vector<unsigned char> bytes;
  bytes.reserve(x.size() * 4);
  for (float v : x.data()) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::InvalidArgument, "embedding contains a non-finite value");
    }
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<unsigned char>(bits >> (8 * k)));
  }
  return {x.rows(), x.cols(), base64_encode(bytes)};
}

EmbeddingMatrix decode_embedding(const WireEmbedding& wire) {
  const auto bytes = base64_decode(wire.payload);
  if (bytes.size() != wire.rows * wire.cols * 4) {
    throw Error(ErrorCode::MalformedResponse,
                "payload holds " + std::to_string(bytes.size()) + " bytes, shape needs " +
                    std::to_string(wire.rows * wire.cols * 4));
  }
  std::vector<float> data(wire.rows * wire.cols);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(bytes[4 * i + k]) << (8 * k);
    data[i] = std::bit_cast<float>(bits);
  }
  return EmbeddingMatrix(wire.rows, wire.cols, std::move(data));
}

ProviderMeta remote_meta(const RemoteEndpoint& endpoint) {
  const auto reply = post(endpoint, "/v1/meta", json::object());
  return parse_reply("/v1/meta", [&] {
    ProviderMeta m;
    m.vocab_size = reply.at("vocab_size").get<std::size_t>();
    m.embed_dim = reply.at("embed_dim").get<std::size_t>();
    m.mean_row_norm = reply.at("mean_row_norm").get<double>();
    m.max_context = reply.at("max_context").get<std::size_t>();
    m.validate();
    return m;
  });
}

EmbeddingMatrix remote_embed(const RemoteEndpoint& endpoint, std::span<const TokenId> token_ids) {
  const auto reply = post(endpoint, "/v1/embed",
                          json{{"token_ids", std::vector<TokenId>(token_ids.begin(),
                                                                  token_ids.end())}});
  return parse_reply("/v1/embed", [&] {
    auto x = decode_embedding(wire_from_json(reply.at("embedding")));
    if (x.rows() != token_ids.size()) {
      throw Error(ErrorCode::MalformedResponse, "embedding row count differs from token count");
    }
    return x;
  });
}

std::vector<LogProbTable> remote_logprobs(const RemoteEndpoint& endpoint,
                                          std::span<const EmbeddingMatrix> batch,
                                          std::span<const TokenId> target_token_ids,
                                          std::span<const std::size_t> positions) {
  if (batch.empty()) throw Error(ErrorCode::InvalidArgument, "empty log-prob batch");
  for (const auto& x : batch) {
    if (x.rows() != target_token_ids.size()) {
      throw Error(ErrorCode::ShapeMismatch, "embedding rows differ from target count");
    }
  }
  const auto reply =
      post(endpoint, "/v1/logprobs", logprob_request(batch, target_token_ids, positions));
  return parse_reply("/v1/logprobs", [&] {
    const auto& tables = reply.at("tables");
    if (!tables.is_array() || tables.size() != batch.size()) {
      throw Error(ErrorCode::MalformedResponse, "tables do not match the batch size");
    }
    std::vector<LogProbTable> out;
    out.reserve(tables.size());
    for (const auto& t : tables) out.push_back(table_from_json(t));
    return out;
  });
}

std::vector<TokenId> remote_generate(const RemoteEndpoint& endpoint, const EmbeddingMatrix& x,
                                     std::size_t max_new) {
  if (max_new == 0) throw Error(ErrorCode::InvalidArgument, "max_new must be >= 1");
  const auto reply = post(endpoint, "/v1/generate",
                          json{{"embedding", wire_to_json(encode_embedding(x))},
                               {"max_new", max_new}});
  return parse_reply("/v1/generate",
                     [&] { return reply.at("token_ids").get<std::vector<TokenId>>(); });
}

RemoteProvider::RemoteProvider(RemoteEndpoint endpoint) : endpoint_(std::move(endpoint)) {
  endpoint_.validate();
}

ProviderMeta RemoteProvider::meta() const {
  std::lock_guard lock(meta_mutex_);
  if (!meta_) meta_ = remote_meta(endpoint_);
  return *meta_;
}

EmbeddingMatrix RemoteProvider::embed(std::span<const TokenId> token_ids) const {
  return remote_embed(endpoint_, token_ids);
}

LogProbTable RemoteProvider::teacher_forced_logprobs(const EmbeddingMatrix& x,
                                                     std::span<const TokenId> target_token_ids,
                                                     std::span<const std::size_t> positions) const {
  return remote_logprobs(endpoint_, std::span<const EmbeddingMatrix>(&x, 1), target_token_ids,
                         positions)
      .front();
}

std::vector<LogProbTable> RemoteProvider::batch_logprobs(
    std::span<const EmbeddingMatrix> batch, std::span<const TokenId> target_token_ids,
    std::span<const std::size_t> positions) const {
  return remote_logprobs(endpoint_, batch, target_token_ids, positions);
}

std::vector<TokenId> RemoteProvider::greedy_generate(const EmbeddingMatrix& x,
                                                     std::size_t max_new) const {
  return remote_generate(endpoint_, x, max_new);
}

// ---------------------------------------------------------------------------
// Reference host

namespace {

int http_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::MalformedResponse:
      return 400;
    case ErrorCode::ShapeMismatch:
    case ErrorCode::PositionOutOfRange:
    case ErrorCode::OutOfVocab:
    case ErrorCode::ContextOverflow:
      return 422;
    default:
      return 500;
  }
}

void write_error(httplib::Response& res, int status, std::string_view code,
                 const std::string& message) {
  res.status = status;
  res.set_content(json{{"protocol_version", kProtocolVersion},
                       {"error_code", code},
                       {"message", message}}
                      .dump(),
                  "application/json");
}

// Parses the request, runs `handler` and serializes its JSON result.
template <typename Handler>
httplib::Server::Handler route(std::atomic<std::uint64_t>& served, Handler handler) {
  return [&served, handler](const httplib::Request& req, httplib::Response& res) {
    served.fetch_add(1);
    json body;
    try {
      body = req.body.empty() ? json::object() : json::parse(req.body);
    } catch (const json::exception& e) {
      write_error(res, 400, "invalid_argument", std::string("request is not JSON: ") + e.what());
      return;
    }
    try {
      json reply = handler(body);
      reply["protocol_version"] = kProtocolVersion;
      if (body.contains("request_id")) reply["request_id"] = body["request_id"];
      res.set_content(reply.dump(), "application/json");
    } catch (const json::exception& e) {
      write_error(res, 400, "invalid_argument", std::string("schema violation: ") + e.what());
    } catch (const Error& e) {
      const bool bad_payload = e.code() == ErrorCode::MalformedResponse;
      write_error(res, http_status_for(e.code()),
                  bad_payload ? "invalid_argument" : error_code_name(e.code()), e.what());
    } catch (const std::exception& e) {
      write_error(res, 500, "host_error", e.what());
    }
  };
}

}  // namespace

ReferenceServer::ReferenceServer(const LogProbProvider& provider)
    : provider_(provider), server_(std::make_unique<httplib::Server>()) {
  install_routes();
}

ReferenceServer::~ReferenceServer() { stop(); }

void ReferenceServer::install_routes() {
  server_->Post("/v1/meta", route(served_, [this](const json&) {
                  const auto m = provider_.meta();
                  return json{{"vocab_size", m.vocab_size},
                              {"embed_dim", m.embed_dim},
                              {"mean_row_norm", m.mean_row_norm},
                              {"max_context", m.max_context},
                              {"dtype", "float32"}};
                }));
  server_->Post("/v1/embed", route(served_, [this](const json& body) {
                  const auto ids = body.at("token_ids").get<std::vector<TokenId>>();
                  return json{{"embedding", wire_to_json(encode_embedding(provider_.embed(ids)))}};
                }));
  server_->Post("/v1/logprobs", route(served_, [this](const json& body) {
                  std::vector<EmbeddingMatrix> batch;
                  for (const auto& e : body.at("embeddings")) {
                    batch.push_back(decode_embedding(wire_from_json(e)));
                  }
                  if (batch.empty()) {
                    throw Error(ErrorCode::InvalidArgument, "embeddings must be nonempty");
                  }
                  const auto targets = body.at("target_token_ids").get<std::vector<TokenId>>();
                  const auto positions = body.at("positions").get<std::vector<std::size_t>>();
                  const auto tables = provider_.batch_logprobs(batch, targets, positions);
                  json out = json::array();
                  for (const auto& t : tables) out.push_back(table_to_json(t));
                  return json{{"tables", std::move(out)}};
                }));
  server_->Post("/v1/generate", route(served_, [this](const json& body) {
                  const auto x = decode_embedding(wire_from_json(body.at("embedding")));
                  const auto max_new = body.at("max_new").get<std::size_t>();
                  return json{{"token_ids", provider_.greedy_generate(x, max_new)}};
                }));
  server_->Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"status", "ok"}, {"model_id", "toy"}}.dump(), "application/json");
  });
}

int ReferenceServer::start(const std::string& host, int port) {
  if (thread_.joinable()) return port_;
  host_ = host;
  if (port == 0) {
    port_ = server_->bind_to_any_port(host);
  } else {
    port_ = server_->bind_to_port(host, port) ? port : -1;
  }
  if (port_ < 0) {
    throw Error(ErrorCode::Unreachable, "cannot bind " + host + ":" + std::to_string(port));
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void ReferenceServer::listen_blocking(const std::string& host, int port) {
  host_ = host;
  port_ = port;
  if (!server_->listen(host, port)) {
    throw Error(ErrorCode::Unreachable, "cannot listen on " + host + ":" + std::to_string(port));
  }
}

void ReferenceServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::string ReferenceServer::base_url() const {
  return "http://" + host_ + ":" + std::to_string(port_);
}

}  // namespace iclcal

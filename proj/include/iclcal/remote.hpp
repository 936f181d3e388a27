#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "iclcal/model.hpp"

namespace httplib {
class Server;
}

namespace iclcal {

inline constexpr int kProtocolVersion = 1;

struct RemoteEndpoint {
  std::string base_url;  // e.g. "http://127.0.0.1:8080"
  double timeout_seconds = 30.0;
  int max_retries = 2;
  std::string request_id_prefix = "iclcal";

  void validate() const;
};

/// Shape plus base64 of the row-major little-endian float32 buffer.
struct WireEmbedding {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string payload;
};

/// Throws InvalidArgument on non-finite entries.
WireEmbedding encode_embedding(const EmbeddingMatrix& x);
/// Throws MalformedResponse if the payload is not valid base64 or its length
/// is not rows * cols * 4.
EmbeddingMatrix decode_embedding(const WireEmbedding& wire);

std::string base64_encode(std::span<const unsigned char> bytes);
std::vector<unsigned char> base64_decode(const std::string& text);

ProviderMeta remote_meta(const RemoteEndpoint& endpoint);
EmbeddingMatrix remote_embed(const RemoteEndpoint& endpoint, std::span<const TokenId> token_ids);
std::vector<LogProbTable> remote_logprobs(const RemoteEndpoint& endpoint,
                                          std::span<const EmbeddingMatrix> batch,
                                          std::span<const TokenId> target_token_ids,
                                          std::span<const std::size_t> positions);
std::vector<TokenId> remote_generate(const RemoteEndpoint& endpoint, const EmbeddingMatrix& x,
                                     std::size_t max_new);

/// LogProbProvider backed by a model host speaking the /v1 protocol.
/// Metadata is fetched once and cached.
class RemoteProvider final : public LogProbProvider {
 public:
  explicit RemoteProvider(RemoteEndpoint endpoint);

  ProviderMeta meta() const override;
  EmbeddingMatrix embed(std::span<const TokenId> token_ids) const override;
  LogProbTable teacher_forced_logprobs(const EmbeddingMatrix& x,
                                       std::span<const TokenId> target_token_ids,
                                       std::span<const std::size_t> positions) const override;
  std::vector<LogProbTable> batch_logprobs(std::span<const EmbeddingMatrix> batch,
                                           std::span<const TokenId> target_token_ids,
                                           std::span<const std::size_t> positions) const override;
  std::vector<TokenId> greedy_generate(const EmbeddingMatrix& x,
                                       std::size_t max_new) const override;

  const RemoteEndpoint& endpoint() const noexcept { return endpoint_; }

 private:
  RemoteEndpoint endpoint_;
  mutable std::mutex meta_mutex_;
  mutable std::optional<ProviderMeta> meta_;
};

/// Serves an in-process provider over the /v1 protocol on a background thread.
/// Used as the reference host for the toy model.
class ReferenceServer {
 public:
  explicit ReferenceServer(const LogProbProvider& provider);
  ~ReferenceServer();

  ReferenceServer(const ReferenceServer&) = delete;
  ReferenceServer& operator=(const ReferenceServer&) = delete;

  /// Binds (port 0 picks a free port), starts serving and returns the port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Blocks serving on the calling thread.
  void listen_blocking(const std::string& host, int port);
  void stop();

  std::string base_url() const;
  std::uint64_t requests_served() const noexcept { return served_.load(); }

 private:
  void install_routes();

  const LogProbProvider& provider_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  std::string host_;
  int port_ = -1;
  std::atomic<std::uint64_t> served_{0};
};

}  // namespace iclcal

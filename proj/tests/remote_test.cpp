#include "iclcal/remote.hpp"

#include <cmath>
#include <limits>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "iclcal/error.hpp"
#include "iclcal/zo.hpp"

namespace {

using namespace iclcal;

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no iclcal::Error thrown";
  return ErrorCode::HostError;
}

EmbeddingMatrix random_embedding(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingMatrix x(rows, cols);
  for (float& v : x.data()) v = static_cast<float>(rng.normal());
  return x;
}

// Serves fixed bodies on every /v1 route, for exercising client-side checks.
class CannedServer {
 public:
  CannedServer(int status, std::string body) {
    auto handler = [status, body](const httplib::Request&, httplib::Response& res) {
      res.status = status;
      res.set_content(body, "application/json");
    };
    server_.Post(R"(/v1/.*)", handler);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~CannedServer() {
    server_.stop();
    thread_.join();
  }
  RemoteEndpoint endpoint() const {
    RemoteEndpoint e;
    e.base_url = "http://127.0.0.1:" + std::to_string(port_);
    e.timeout_seconds = 5;
    return e;
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

class RemoteFixture : public ::testing::Test {
 protected:
  RemoteFixture() : model_(ToyCausalMeanModel::random(12, 5, 77)), server_(model_) {
    server_.start();
    endpoint_.base_url = server_.base_url();
    endpoint_.timeout_seconds = 10;
  }

  ToyCausalMeanModel model_;
  ReferenceServer server_;
  RemoteEndpoint endpoint_;
};

// ---- codec

TEST(Codec, RoundTripIsBitExact) {
  const auto x = random_embedding(7, 5, 1);
  const auto wire = encode_embedding(x);
  EXPECT_EQ(wire.rows, 7u);
  EXPECT_EQ(wire.cols, 5u);
  EXPECT_EQ(wire.payload.size(), 4 * ((7 * 5 * 4 + 2) / 3));
  EXPECT_TRUE(bit_equal(decode_embedding(wire), x));
}

TEST(Codec, LittleEndianFloatLayout) {
  EmbeddingMatrix x(1, 1, 1.0f);  // 0x3f800000
  const auto bytes = base64_decode(encode_embedding(x).payload);
  ASSERT_EQ(bytes.size(), 4u);
  EXPECT_EQ(bytes[0], 0x00);
  EXPECT_EQ(bytes[3], 0x3f);
  EXPECT_EQ(bytes[2], 0x80);
}

TEST(Codec, Base64KnownVectors) {
  const std::string text = "foobar";
  const std::vector<unsigned char> raw(text.begin(), text.end());
  EXPECT_EQ(base64_encode(std::span(raw).first(1)), "Zg==");
  EXPECT_EQ(base64_encode(std::span(raw).first(2)), "Zm8=");
  EXPECT_EQ(base64_encode(raw), "Zm9vYmFy");
  EXPECT_EQ(base64_decode("Zm8="), std::vector<unsigned char>(raw.begin(), raw.begin() + 2));
}

TEST(Codec, RejectsNonFinite) {
  auto x = random_embedding(2, 2, 3);
  x(1, 0) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_EQ(code_of([&] { encode_embedding(x); }), ErrorCode::InvalidArgument);
  x(1, 0) = std::numeric_limits<float>::infinity();
  EXPECT_EQ(code_of([&] { encode_embedding(x); }), ErrorCode::InvalidArgument);
}

TEST(Codec, RejectsBadPayload) {
  auto wire = encode_embedding(random_embedding(2, 3, 4));
  auto short_wire = wire;
  short_wire.cols = 4;
  EXPECT_EQ(code_of([&] { decode_embedding(short_wire); }), ErrorCode::MalformedResponse);
  wire.payload[0] = '*';
  EXPECT_EQ(code_of([&] { decode_embedding(wire); }), ErrorCode::MalformedResponse);
}

// ---- against the reference server

TEST_F(RemoteFixture, MetaMatches) {
  const auto m = remote_meta(endpoint_);
  const auto local = model_.meta();
  EXPECT_EQ(m.vocab_size, local.vocab_size);
  EXPECT_EQ(m.embed_dim, local.embed_dim);
  EXPECT_EQ(m.mean_row_norm, local.mean_row_norm);
  EXPECT_EQ(m.max_context, local.max_context);
}

TEST_F(RemoteFixture, EmbedIsBitExact) {
  const std::vector<TokenId> ids{0, 3, 11, 3};
  EXPECT_TRUE(bit_equal(remote_embed(endpoint_, ids), model_.embed(ids)));
}

TEST_F(RemoteFixture, ProviderMatchesInProcess) {
  RemoteProvider remote(endpoint_);
  const std::vector<TokenId> ids{1, 4, 2, 9, 9, 0, 5};
  const std::vector<std::size_t> positions{1, 2, 3, 6};
  std::vector<EmbeddingMatrix> batch;
  batch.push_back(model_.embed(ids));
  batch.push_back(random_embedding(7, 5, 8));
  batch.push_back(random_embedding(7, 5, 9));
  const auto got = remote.batch_logprobs(batch, ids, positions);
  const auto want = model_.batch_logprobs(batch, ids, positions);
  ASSERT_EQ(got.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t t : positions) EXPECT_NEAR(got[i].at(t), want[i].at(t), 1e-5);
  }
  const auto single = remote.teacher_forced_logprobs(batch[1], ids, positions);
  for (std::size_t t : positions) EXPECT_NEAR(single.at(t), want[1].at(t), 1e-5);
  EXPECT_EQ(remote.greedy_generate(batch[0], 4), model_.greedy_generate(batch[0], 4));
}

TEST_F(RemoteFixture, HostErrorsKeepTheirCodes) {
  const std::vector<TokenId> ids{1, 2, 3};
  EXPECT_EQ(code_of([&] { remote_embed(endpoint_, std::vector<TokenId>{1, 99}); }),
            ErrorCode::OutOfVocab);
  const std::vector<EmbeddingMatrix> batch{model_.embed(ids)};
  EXPECT_EQ(code_of([&] {
              remote_logprobs(endpoint_, batch, ids, std::vector<std::size_t>{0});
            }),
            ErrorCode::PositionOutOfRange);
  EXPECT_EQ(code_of([&] { remote_generate(endpoint_, batch[0], 0); }),
            ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([&] { remote_generate(endpoint_, batch[0], 1000); }),
            ErrorCode::ContextOverflow);
}

TEST_F(RemoteFixture, CountsRequests) {
  const auto before = server_.requests_served();
  remote_meta(endpoint_);
  remote_meta(endpoint_);
  EXPECT_EQ(server_.requests_served(), before + 2);
}

TEST_F(RemoteFixture, CalibrationTrajectoryMatchesInProcess) {
  TokenizedPrompt p;
  p.token_ids = {0, 3, 4, 1, 5, 6, 2, 7, 8};
  p.demo_output_spans = {{2}, {4, 5}, {7}};
  p.query_start = 8;
  CalibConfig cfg;
  cfg.max_steps = 8;
  cfg.n_samples = 8;
  const auto local = calibrate(p, model_, cfg);
  const auto remote = calibrate(p, RemoteProvider(endpoint_), cfg);
  ASSERT_EQ(local.iterations.size(), remote.iterations.size());
  for (std::size_t k = 0; k < local.iterations.size(); ++k) {
    EXPECT_NEAR(local.iterations[k].f_base, remote.iterations[k].f_base, 1e-5);
  }
  EXPECT_NEAR(local.best_score, remote.best_score, 1e-5);
}

// ---- client failure modes

TEST(RemoteClient, UnreachableAfterRetries) {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  RemoteEndpoint ep;
  ep.base_url = "http://127.0.0.1:" + std::to_string(port);
  ep.timeout_seconds = 1;
  ep.max_retries = 1;
  EXPECT_EQ(code_of([&] { remote_meta(ep); }), ErrorCode::Unreachable);
}

TEST(RemoteClient, NonJsonBodyIsMalformed) {
  CannedServer srv(200, "<html>oops</html>");
  EXPECT_EQ(code_of([&] { remote_meta(srv.endpoint()); }), ErrorCode::MalformedResponse);
}

TEST(RemoteClient, MissingProtocolVersionIsMalformed) {
  CannedServer srv(200, R"({"vocab_size": 4, "embed_dim": 2, "mean_row_norm": 1, "max_context": 8})");
  EXPECT_EQ(code_of([&] { remote_meta(srv.endpoint()); }), ErrorCode::MalformedResponse);
}

TEST(RemoteClient, WrongProtocolVersionIsMalformed) {
  CannedServer srv(200, R"({"protocol_version": 2, "vocab_size": 4, "embed_dim": 2,
                            "mean_row_norm": 1, "max_context": 8})");
  EXPECT_EQ(code_of([&] { remote_meta(srv.endpoint()); }), ErrorCode::MalformedResponse);
}

TEST(RemoteClient, MissingFieldIsMalformed) {
  CannedServer srv(200, R"({"protocol_version": 1, "vocab_size": 4})");
  EXPECT_EQ(code_of([&] { remote_meta(srv.endpoint()); }), ErrorCode::MalformedResponse);
}

TEST(RemoteClient, WrongTableCountIsMalformed) {
  CannedServer srv(200, R"({"protocol_version": 1, "tables": []})");
  const std::vector<TokenId> ids{0, 1};
  const std::vector<EmbeddingMatrix> batch{EmbeddingMatrix(2, 2, 1.0f)};
  EXPECT_EQ(code_of([&] {
              remote_logprobs(srv.endpoint(), batch, ids, std::vector<std::size_t>{1});
            }),
            ErrorCode::MalformedResponse);
}

TEST(RemoteClient, NullLogProbDecodesAsNegativeInfinity) {
  CannedServer srv(200, R"({"protocol_version": 1, "request_id": "x", "tables": [
      [{"position": 1, "logprob": null}, {"position": 2, "logprob": -0.5}]]})");
  const std::vector<TokenId> ids{0, 1, 0};
  const std::vector<EmbeddingMatrix> batch{EmbeddingMatrix(3, 2, 1.0f)};
  const auto t = remote_logprobs(srv.endpoint(), batch, ids, std::vector<std::size_t>{1, 2});
  ASSERT_EQ(t.size(), 1u);
  EXPECT_TRUE(std::isinf(t[0].at(1)) && t[0].at(1) < 0);
  EXPECT_EQ(t[0].at(2), -0.5);
}

TEST(RemoteClient, UnknownHostErrorBecomesHostError) {
  CannedServer srv(500, R"({"error_code": "cuda_oom", "message": "out of memory"})");
  EXPECT_EQ(code_of([&] { remote_meta(srv.endpoint()); }), ErrorCode::HostError);
}

TEST(RemoteClient, RejectsEmptyBaseUrl) {
  EXPECT_EQ(code_of([] { remote_meta(RemoteEndpoint{}); }), ErrorCode::InvalidArgument);
}

}  // namespace

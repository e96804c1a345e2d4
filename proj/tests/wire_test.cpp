#include <gtest/gtest.h>

#include <cstring>
#include <future>
#include <thread>
#include <unordered_set>

#include "fedreid/wire.hpp"
#include "test_support.hpp"

using namespace fedreid;
using namespace fedreid::wire;

namespace {

WireError::Kind decode_error_kind(const std::vector<std::uint8_t>& bytes, std::size_t max_payload = kDefaultMaxPayload) {
  try {
    decode(bytes, max_payload);
  } catch (const WireError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "decode did not throw";
  return WireError::Kind::Malformed;
}

ExperimentConfig small_experiment(int clients, std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.fed = fedreid::testing::noisy_toy_config(clients, seed);
  c.fed.epochs = 4;
  c.mode = Mode::Serve;
  return c;
}

// Every 8-byte pattern of every feature value in the datasets.
std::unordered_set<std::uint64_t> feature_patterns(const std::vector<DomainDataset>& data) {
  std::unordered_set<std::uint64_t> out;
  for (const auto& ds : data) {
    for (double v : ds.features.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      out.insert(bits);
    }
  }
  return out;
}

std::size_t count_feature_hits(const std::vector<std::uint8_t>& stream, const std::unordered_set<std::uint64_t>& patterns) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i + 8 <= stream.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, stream.data() + i, 8);
    hits += patterns.count(bits);
  }
  return hits;
}

}  // namespace

TEST(Frame, RoundTripsEveryType) {
  ParamBlock p(std::vector<LayerShape>{LayerShape{2, 2, 2}}, {1, 2, 3, 4, 5, 6});
  const std::vector<Message> msgs{
      make_hello(3, {20, 16}),
      make_config(1, {20, "seed = 1\n", p}),
      make_global_params(7, 2, {true, p}),
      make_update(7, 2, {{0.5, 0.25, 0.125}, p}),
      make_epoch_done(9, 0, {1.0, 2.0, 3.0}),
      make_shutdown(100, 65535),
      make_error(1, 1, "boom"),
      Message{MessageType::Update, 0xffffffffu, 0, {}},
  };
  for (const auto& m : msgs) EXPECT_EQ(decode(encode(m)), m);
  EXPECT_EQ(parse_update(msgs[3]).params, p);
  EXPECT_EQ(parse_update(msgs[3]).losses.expert, 0.25);
  EXPECT_TRUE(parse_global_params(msgs[2]).selected);
  EXPECT_EQ(parse_config_message(msgs[1]).config_text, "seed = 1\n");
  EXPECT_EQ(parse_hello(msgs[0]).identities, 20u);
}

TEST(Frame, LayoutIsLittleEndianWithTrailingCrc) {
  const auto bytes = encode(Message{MessageType::EpochDone, 0x01020304u, 0x0506, {0xaa}});
  ASSERT_EQ(bytes.size(), 4u + 1 + 4 + 2 + 1 + 4);
  EXPECT_EQ(bytes[0], 12);  // length of everything after the length field
  EXPECT_EQ(bytes[4], 5);
  EXPECT_EQ(bytes[5], 0x04);
  EXPECT_EQ(bytes[8], 0x01);
  EXPECT_EQ(bytes[9], 0x06);
  EXPECT_EQ(bytes[11], 0xaa);
  std::uint32_t crc;
  std::memcpy(&crc, bytes.data() + 12, 4);
  EXPECT_EQ(crc, crc32_of(std::span(bytes).first(12)));
}

TEST(Frame, ErrorKinds) {
  const auto good = encode(make_epoch_done(1, 2, {0.1, 0.2, 0.3}));
  auto flipped = good;
  flipped[14] ^= 0x01;
  EXPECT_EQ(decode_error_kind(flipped), WireError::Kind::BadChecksum);

  Message bogus{MessageType::Hello, 0, 0, {}};
  auto unknown = encode(bogus);
  unknown[4] = 42;
  const std::uint32_t crc = crc32_of(std::span(unknown).first(unknown.size() - 4));
  std::memcpy(unknown.data() + unknown.size() - 4, &crc, 4);
  EXPECT_EQ(decode_error_kind(unknown), WireError::Kind::UnknownType);

  EXPECT_EQ(decode_error_kind({}), WireError::Kind::Truncated);
  EXPECT_EQ(decode_error_kind(std::vector<std::uint8_t>(good.begin(), good.end() - 1)), WireError::Kind::Truncated);

  Message big{MessageType::Update, 0, 0, std::vector<std::uint8_t>(2048)};
  EXPECT_THROW(encode(big, 1024), WireError);
  EXPECT_EQ(decode_error_kind(encode(big), 1024), WireError::Kind::FrameTooLarge);
}

TEST(Payload, MalformedBodiesRejected) {
  Message m = make_global_params(0, 0, {false, ParamBlock(std::vector<LayerShape>{LayerShape{1, 1, 0}}, {1.0})});
  m.payload.pop_back();
  EXPECT_THROW(parse_global_params(m), WireError);
  m.payload[0] = 7;
  EXPECT_THROW(parse_global_params(m), WireError);
  EXPECT_THROW(parse_update(make_hello(0, {1, 1})), ProtocolError);
  Message extra = make_epoch_done(0, 0, {});
  extra.payload.push_back(0);
  EXPECT_THROW(parse_epoch_done(extra), WireError);
}

TEST(Networked, ThreeClientsMatchInProcessAndCarryNoSamples) {
  for (Strategy strategy : {Strategy::FedReID, Strategy::FedAVG}) {
    auto cfg = small_experiment(3, 31);
    cfg.fed.strategy = strategy;
    cfg.fed.fraction = 0.67;
    cfg.fed.beta = 0.002;
    cfg.fed.noise = NoisePlacement::Double;
    const auto data = fedreid::testing::toy_domains(3, 31);

    RunOptions ro;
    ro.record_params = true;
    const auto local = run_federation(federation_config(cfg), data, ro);

    Listener listener("127.0.0.1:0");
    const std::string endpoint = "127.0.0.1:" + std::to_string(listener.port());
    TrafficTap tap;
    ServeOptions so;
    so.tap = &tap;
    so.timeout_s = 30;
    auto server = std::async(std::launch::async, [&] { return serve(cfg, listener, so); });
    std::vector<std::future<int>> clients;
    for (int i = 2; i >= 0; --i) {  // connect in reverse order on purpose
      clients.push_back(std::async(std::launch::async, [&, i] {
        ClientOptions co;
        co.tap = &tap;
        return run_client(endpoint, data[static_cast<std::size_t>(i)], co);
      }));
    }
    const ServeResult net = server.get();
    for (auto& c : clients) EXPECT_EQ(c.get(), cfg.fed.epochs);

    ASSERT_EQ(net.params_per_epoch.size(), local.params_per_epoch.size());
    for (std::size_t k = 0; k < net.params_per_epoch.size(); ++k) {
      EXPECT_EQ(net.params_per_epoch[k], local.params_per_epoch[k]) << "epoch " << k;
    }
    for (std::size_t k = 0; k < net.history.size(); ++k) {
      for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(net.history[k].clients[i].selected, local.history[k].clients[i].selected);
        EXPECT_EQ(net.history[k].clients[i].losses.total(), local.history[k].clients[i].losses.total());
      }
    }
    EXPECT_GT(tap.frames(), 0u);
    EXPECT_EQ(count_feature_hits(tap.bytes(), feature_patterns(data)), 0u);
  }
}

TEST(Networked, DuplicateHelloRejected) {
  Listener listener("127.0.0.1:0");
  const std::string endpoint = "127.0.0.1:" + std::to_string(listener.port());
  auto cfg = small_experiment(2, 32);
  cfg.fed.epochs = 1;
  const auto data = fedreid::testing::toy_domains(2, 32);
  auto server = std::async(std::launch::async, [&] { return serve(cfg, listener); });

  Connection first(connect_to(endpoint, 5), nullptr);
  first.send(make_hello(0, {static_cast<std::uint32_t>(data[0].identities), 8}));
  Connection dup(connect_to(endpoint, 5), nullptr);
  dup.send(make_hello(0, {static_cast<std::uint32_t>(data[0].identities), 8}));
  const Message reply = dup.receive(deadline_in(10));
  EXPECT_EQ(reply.type, MessageType::Error);
  EXPECT_NE(error_text(reply).find("duplicate"), std::string::npos);

  // The real second client still joins and the run completes.
  auto c1 = std::async(std::launch::async, [&] { return run_client(endpoint, data[1]); });
  // Play client 0 by hand: acknowledge the single epoch without being selected twice.
  const auto cp = parse_config_message(first.receive(deadline_in(10)));
  auto ecfg = parse_config(cp.config_text);
  auto fcfg = federation_config(ecfg).effective();
  ClientState state = make_client(fcfg, 0, std::make_shared<const DomainDataset>(data[0]), cp.head_classes, cp.initial);
  const Message gm = first.receive(deadline_in(10));
  const auto gp = parse_global_params(gm);
  apply_broadcast(state, gp.params, fcfg);
  init_expert(state, fcfg);
  const auto u = local_round(state, fcfg, 0);
  if (gp.selected) first.send(make_update(0, 0, UpdatePayload{u.losses, u.params}));
  else first.send(make_epoch_done(0, 0, u.losses));
  EXPECT_EQ(first.receive(deadline_in(10)).type, MessageType::Shutdown);
  EXPECT_EQ(c1.get(), 1);
  EXPECT_EQ(server.get().history.size(), 1u);
}

TEST(Networked, ClientDisconnectMidEpochFailsServer) {
  Listener listener("127.0.0.1:0");
  const std::string endpoint = "127.0.0.1:" + std::to_string(listener.port());
  auto cfg = small_experiment(2, 33);
  const auto data = fedreid::testing::toy_domains(2, 33);
  ServeOptions so;
  so.timeout_s = 10;
  auto server = std::async(std::launch::async, [&] { return serve(cfg, listener, so); });
  auto good = std::async(std::launch::async, [&] {
    try {
      run_client(endpoint, data[1]);
      return std::string("finished");
    } catch (const ProtocolError& e) {
      return std::string(e.what());
    }
  });
  {
    Connection quitter(connect_to(endpoint, 5), nullptr);
    quitter.send(make_hello(0, {static_cast<std::uint32_t>(data[0].identities), 8}));
    quitter.receive(deadline_in(10));  // CONFIG
    quitter.receive(deadline_in(10));  // GLOBAL_PARAMS, then hang up
  }
  EXPECT_THROW(server.get(), ProtocolError);
  EXPECT_NE(good.get().find("server error"), std::string::npos);
}

TEST(Networked, MalformedGlobalParamsIsProtocolViolation) {
  Listener listener("127.0.0.1:0");
  const std::string endpoint = "127.0.0.1:" + std::to_string(listener.port());
  auto cfg = small_experiment(1, 34);
  const auto data = fedreid::testing::toy_domains(1, 34);
  auto client = std::async(std::launch::async, [&] { run_client(endpoint, data[0]); });

  Connection c(listener.accept(deadline_in(10)), nullptr);
  const Message hello = c.receive(deadline_in(10));
  ASSERT_EQ(hello.type, MessageType::Hello);
  auto fcfg = federation_config(cfg);
  const auto server = make_server(fcfg, 8, {data[0].identities});
  c.send(make_config(0, {static_cast<std::uint32_t>(data[0].identities), to_text(cfg), server.global}));
  Message bad = make_global_params(0, 0, {true, server.global});
  bad.payload.resize(bad.payload.size() / 2);
  c.send(bad);
  EXPECT_THROW(client.get(), ProtocolError);
}

TEST(Networked, ConnectionRefused) {
  std::uint16_t port;
  {
    Listener l("127.0.0.1:0");
    port = l.port();
  }
  const auto data = fedreid::testing::toy_domains(1, 35);
  ClientOptions co;
  co.connect_retry_s = 0.2;
  EXPECT_THROW(run_client("127.0.0.1:" + std::to_string(port), data[0], co), ProtocolError);
}

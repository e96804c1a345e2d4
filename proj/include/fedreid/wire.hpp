#pragma once

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "fedreid/codec.hpp"
#include "fedreid/config.hpp"
#include "fedreid/errors.hpp"
#include "fedreid/eval.hpp"
#include "fedreid/experiment.hpp"
#include "fedreid/federation.hpp"

namespace fedreid::wire {

enum class MessageType : std::uint8_t {
  Hello = 1,
  Config = 2,
  GlobalParams = 3,
  Update = 4,
  EpochDone = 5,
  Shutdown = 6,
  Error = 7,
};

inline std::string to_string(MessageType t) {
  switch (t) {
    case MessageType::Hello: return "HELLO";
    case MessageType::Config: return "CONFIG";
    case MessageType::GlobalParams: return "GLOBAL_PARAMS";
    case MessageType::Update: return "UPDATE";
    case MessageType::EpochDone: return "EPOCH_DONE";
    case MessageType::Shutdown: return "SHUTDOWN";
    case MessageType::Error: return "ERROR";
  }
  return "UNKNOWN";
}

struct Message {
  MessageType type = MessageType::Hello;
  std::uint32_t epoch = 0;
  std::uint16_t client = 0;
  std::vector<std::uint8_t> payload;

  bool operator==(const Message&) const = default;
};

class WireError : public ProtocolError {
 public:
  enum class Kind { BadChecksum, UnknownType, Truncated, FrameTooLarge, Malformed };
  WireError(Kind kind, const std::string& what) : ProtocolError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Frame: u32 length of everything after the length field, u8 type, u32 epoch,
// u16 client id, payload, u32 CRC32 over all preceding frame bytes.
inline constexpr std::size_t kFrameOverhead = 1 + 4 + 2 + 4;
inline constexpr std::size_t kDefaultMaxPayload = std::size_t{64} << 20;

inline bool known_type(std::uint8_t t) { return t >= 1 && t <= 7; }

inline std::vector<std::uint8_t> encode(const Message& m, std::size_t max_payload = kDefaultMaxPayload) {
  if (m.payload.size() > max_payload) {
    throw WireError(WireError::Kind::FrameTooLarge,
                    concat_message("payload of ", m.payload.size(), " bytes exceeds the ", max_payload, "-byte limit"));
  }
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(kFrameOverhead + m.payload.size()));
  w.u8(static_cast<std::uint8_t>(m.type));
  w.u32(m.epoch);
  w.u16(m.client);
  w.bytes(m.payload);
  w.crc_from(0);
  return w.take();
}

// Length of the whole frame announced by its first four bytes.
inline std::size_t frame_size(std::span<const std::uint8_t> head, std::size_t max_payload = kDefaultMaxPayload) {
  ByteReader r(head);
  std::uint32_t len = 0;
  try {
    len = r.u32();
  } catch (const FormatError&) {
    throw WireError(WireError::Kind::Truncated, "frame shorter than its length field");
  }
  if (len < kFrameOverhead) throw WireError(WireError::Kind::Malformed, concat_message("frame length ", len, " too small"));
  if (len - kFrameOverhead > max_payload) {
    throw WireError(WireError::Kind::FrameTooLarge, concat_message("frame announces ", len, " bytes"));
  }
  return 4 + static_cast<std::size_t>(len);
}

// Decodes exactly one frame.
inline Message decode(std::span<const std::uint8_t> bytes, std::size_t max_payload = kDefaultMaxPayload) {
  const std::size_t total = frame_size(bytes, max_payload);
  if (bytes.size() < total) {
    throw WireError(WireError::Kind::Truncated, concat_message("frame needs ", total, " bytes, have ", bytes.size()));
  }
  if (bytes.size() > total) throw WireError(WireError::Kind::Malformed, "trailing bytes after frame");
  const auto body = bytes.first(total - 4);
  ByteReader tail(bytes.last(4));
  if (crc32_of(body) != tail.u32()) throw WireError(WireError::Kind::BadChecksum, "frame checksum mismatch");
  ByteReader r(body.subspan(4));
  const std::uint8_t type = r.u8();
  if (!known_type(type)) throw WireError(WireError::Kind::UnknownType, concat_message("unknown message type ", int{type}));
  Message m;
  m.type = static_cast<MessageType>(type);
  m.epoch = r.u32();
  m.client = r.u16();
  const auto p = r.bytes(r.remaining());
  m.payload.assign(p.begin(), p.end());
  return m;
}

// Typed payloads. Every payload is parameters, loss scalars, counts or text;
// none has room for samples.
struct HelloPayload {
  std::uint32_t identities = 0;
  std::uint32_t input_dim = 0;
};

struct ConfigPayload {
  std::uint32_t head_classes = 0;
  std::string config_text;
  ParamBlock initial;
};

struct GlobalParamsPayload {
  bool selected = false;
  ParamBlock params;
};

struct UpdatePayload {
  LossComponents losses;
  ParamBlock params;
};

namespace detail {

template <class F>
auto parse_payload(const Message& m, MessageType expected, F&& body) {
  if (m.type != expected) {
    throw ProtocolError("expected " + to_string(expected) + ", got " + to_string(m.type));
  }
  ByteReader r(m.payload);
  try {
    auto out = body(r);
    if (r.remaining() != 0) throw WireError(WireError::Kind::Malformed, to_string(expected) + " payload has trailing bytes");
    return out;
  } catch (const FormatError& e) {
    throw WireError(WireError::Kind::Malformed, to_string(expected) + " payload: " + e.what());
  }
}

inline void write_losses(ByteWriter& w, const LossComponents& l) {
  w.f64(l.classification);
  w.f64(l.expert);
  w.f64(l.regularisation);
}

inline LossComponents read_losses(ByteReader& r) {
  LossComponents l;
  l.classification = r.f64();
  l.expert = r.f64();
  l.regularisation = r.f64();
  return l;
}

}  // namespace detail

inline Message make_hello(std::uint16_t client, const HelloPayload& p) {
  ByteWriter w;
  w.u32(p.identities);
  w.u32(p.input_dim);
  return {MessageType::Hello, 0, client, w.take()};
}

inline HelloPayload parse_hello(const Message& m) {
  return detail::parse_payload(m, MessageType::Hello, [](ByteReader& r) { return HelloPayload{r.u32(), r.u32()}; });
}

inline Message make_config(std::uint16_t client, const ConfigPayload& p) {
  ByteWriter w;
  w.u32(p.head_classes);
  w.u32(static_cast<std::uint32_t>(p.config_text.size()));
  w.text(p.config_text);
  write_param_block(w, p.initial);
  return {MessageType::Config, 0, client, w.take()};
}

inline ConfigPayload parse_config_message(const Message& m) {
  return detail::parse_payload(m, MessageType::Config, [](ByteReader& r) {
    ConfigPayload p;
    p.head_classes = r.u32();
    const auto n = r.u32();
    const auto text = r.bytes(n);
    p.config_text.assign(text.begin(), text.end());
    p.initial = read_param_block(r);
    return p;
  });
}

inline Message make_global_params(std::uint32_t epoch, std::uint16_t client, const GlobalParamsPayload& p) {
  ByteWriter w;
  w.u8(p.selected ? 1 : 0);
  write_param_block(w, p.params);
  return {MessageType::GlobalParams, epoch, client, w.take()};
}

inline GlobalParamsPayload parse_global_params(const Message& m) {
  return detail::parse_payload(m, MessageType::GlobalParams, [](ByteReader& r) {
    GlobalParamsPayload p;
    const auto sel = r.u8();
    if (sel > 1) throw WireError(WireError::Kind::Malformed, "selection flag must be 0 or 1");
    p.selected = sel == 1;
    p.params = read_param_block(r);
    return p;
  });
}

inline Message make_update(std::uint32_t epoch, std::uint16_t client, const UpdatePayload& p) {
  ByteWriter w;
  detail::write_losses(w, p.losses);
  write_param_block(w, p.params);
  return {MessageType::Update, epoch, client, w.take()};
}

inline UpdatePayload parse_update(const Message& m) {
  return detail::parse_payload(m, MessageType::Update, [](ByteReader& r) {
    UpdatePayload p;
    p.losses = detail::read_losses(r);
    p.params = read_param_block(r);
    return p;
  });
}

inline Message make_epoch_done(std::uint32_t epoch, std::uint16_t client, const LossComponents& l) {
  ByteWriter w;
  detail::write_losses(w, l);
  return {MessageType::EpochDone, epoch, client, w.take()};
}

inline LossComponents parse_epoch_done(const Message& m) {
  return detail::parse_payload(m, MessageType::EpochDone, [](ByteReader& r) { return detail::read_losses(r); });
}

inline Message make_shutdown(std::uint32_t epoch, std::uint16_t client) { return {MessageType::Shutdown, epoch, client, {}}; }

inline Message make_error(std::uint32_t epoch, std::uint16_t client, const std::string& text) {
  return {MessageType::Error, epoch, client, std::vector<std::uint8_t>(text.begin(), text.end())};
}

inline std::string error_text(const Message& m) { return std::string(m.payload.begin(), m.payload.end()); }

// Observer of every frame that crosses a connection.
class TrafficTap {
 public:
  void record(std::span<const std::uint8_t> frame) {
    std::lock_guard lock(mutex_);
    bytes_.insert(bytes_.end(), frame.begin(), frame.end());
    ++frames_;
  }
  std::vector<std::uint8_t> bytes() const {
    std::lock_guard lock(mutex_);
    return bytes_;
  }
  std::size_t frames() const {
    std::lock_guard lock(mutex_);
    return frames_;
  }

 private:
  mutable std::mutex mutex_;
  std::vector<std::uint8_t> bytes_;
  std::size_t frames_ = 0;
};

using Clock = std::chrono::steady_clock;

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

namespace detail {

inline int remaining_ms(Clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
  return left <= 0 ? 0 : static_cast<int>(std::min<long long>(left, 1 << 30));
}

inline Clock::time_point deadline_after(double seconds) {
  return Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(seconds));
}

inline std::pair<std::string, std::string> split_endpoint(const std::string& endpoint) {
  const auto colon = endpoint.rfind(':');
  if (colon == std::string::npos || colon + 1 == endpoint.size()) {
    throw ConfigError("endpoint must be host:port, got '" + endpoint + "'");
  }
  std::string host = endpoint.substr(0, colon);
  if (host.empty()) host = "0.0.0.0";
  return {host, endpoint.substr(colon + 1)};
}

struct AddrInfo {
  addrinfo* list = nullptr;
  ~AddrInfo() {
    if (list) freeaddrinfo(list);
  }
};

inline void resolve(const std::string& endpoint, bool passive, AddrInfo& out) {
  const auto [host, port] = split_endpoint(endpoint);
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  if (const int rc = getaddrinfo(host.c_str(), port.c_str(), &hints, &out.list); rc != 0) {
    throw ConfigError("cannot resolve " + endpoint + ": " + gai_strerror(rc));
  }
}

}  // namespace detail

inline Clock::time_point deadline_in(double seconds) { return detail::deadline_after(seconds); }

// One framed, ordered message stream.
class Connection {
 public:
  Connection() = default;
  Connection(Socket s, TrafficTap* tap, std::size_t max_payload = kDefaultMaxPayload)
      : sock_(std::move(s)), tap_(tap), max_payload_(max_payload) {
    const int one = 1;
    setsockopt(sock_.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }

  int fd() const noexcept { return sock_.fd(); }
  bool open() const noexcept { return sock_.valid(); }
  void close() { sock_.close(); }

  void send(const Message& m) {
    const auto frame = encode(m, max_payload_);
    if (tap_) tap_->record(frame);
    std::size_t sent = 0;
    while (sent < frame.size()) {
      const ssize_t n = ::send(sock_.fd(), frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError(std::string("send failed: ") + std::strerror(errno));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  // Sends, ignoring failures; for best-effort error notices.
  void try_send(const Message& m) noexcept {
    try {
      if (open()) send(m);
    } catch (...) {
    }
  }

  Message receive(Clock::time_point deadline) {
    std::vector<std::uint8_t> frame(4);
    read_exact(frame.data(), 4, deadline);
    const std::size_t total = frame_size(frame, max_payload_);
    frame.resize(total);
    read_exact(frame.data() + 4, total - 4, deadline);
    if (tap_) tap_->record(frame);
    return decode(frame, max_payload_);
  }

 private:
  void read_exact(std::uint8_t* dst, std::size_t n, Clock::time_point deadline) {
    std::size_t got = 0;
    while (got < n) {
      pollfd p{sock_.fd(), POLLIN, 0};
      const int rc = ::poll(&p, 1, detail::remaining_ms(deadline));
      if (rc < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError(std::string("poll failed: ") + std::strerror(errno));
      }
      if (rc == 0) throw ProtocolError("timed out waiting for peer");
      const ssize_t r = ::recv(sock_.fd(), dst + got, n - got, 0);
      if (r < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError(std::string("receive failed: ") + std::strerror(errno));
      }
      if (r == 0) throw ProtocolError("peer closed the connection");
      got += static_cast<std::size_t>(r);
    }
  }

  Socket sock_;
  TrafficTap* tap_ = nullptr;
  std::size_t max_payload_ = kDefaultMaxPayload;
};

class Listener {
 public:
  explicit Listener(const std::string& endpoint) {
    detail::AddrInfo ai;
    detail::resolve(endpoint, true, ai);
    sock_ = Socket(::socket(ai.list->ai_family, ai.list->ai_socktype, ai.list->ai_protocol));
    if (!sock_.valid()) throw ProtocolError(std::string("socket: ") + std::strerror(errno));
    const int one = 1;
    setsockopt(sock_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(sock_.fd(), ai.list->ai_addr, ai.list->ai_addrlen) != 0) {
      throw ProtocolError("cannot bind " + endpoint + ": " + std::strerror(errno));
    }
    if (::listen(sock_.fd(), 64) != 0) throw ProtocolError(std::string("listen: ") + std::strerror(errno));
  }

  std::uint16_t port() const {
    sockaddr_in addr{};
    socklen_t len = sizeof addr;
    getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    return ntohs(addr.sin_port);
  }

  Socket accept(Clock::time_point deadline) {
    for (;;) {
      pollfd p{sock_.fd(), POLLIN, 0};
      const int rc = ::poll(&p, 1, detail::remaining_ms(deadline));
      if (rc < 0 && errno == EINTR) continue;
      if (rc <= 0) throw ProtocolError("timed out waiting for clients to connect");
      const int fd = ::accept(sock_.fd(), nullptr, nullptr);
      if (fd >= 0) return Socket(fd);
      if (errno != EINTR && errno != ECONNABORTED) throw ProtocolError(std::string("accept: ") + std::strerror(errno));
    }
  }

 private:
  Socket sock_;
};

// Connects, retrying refused connections until `retry_s` has elapsed.
inline Socket connect_to(const std::string& endpoint, double retry_s) {
  const auto deadline = detail::deadline_after(retry_s);
  for (;;) {
    detail::AddrInfo ai;
    detail::resolve(endpoint, false, ai);
    Socket s(::socket(ai.list->ai_family, ai.list->ai_socktype, ai.list->ai_protocol));
    if (!s.valid()) throw ProtocolError(std::string("socket: ") + std::strerror(errno));
    if (::connect(s.fd(), ai.list->ai_addr, ai.list->ai_addrlen) == 0) return s;
    const int err = errno;
    if (Clock::now() >= deadline) throw ProtocolError("cannot connect to " + endpoint + ": " + std::strerror(err));
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
}

struct ServeOptions {
  double timeout_s = 60.0;  // per barrier: connection phase and each epoch
  std::size_t max_payload = kDefaultMaxPayload;
  TrafficTap* tap = nullptr;
  const RetrievalSet* eval_set = nullptr;
  int eval_every = 10;
  bool record_params = true;
  bool wall_clock = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct ServeResult {
  ServerState server;
  std::vector<EpochRecord> history;
  std::vector<ParamBlock> params_per_epoch;
  std::size_t input_dim = 0;
};

// Server side of the networked protocol. Per epoch the server draws the
// broadcast noise (client id order), the selection and the aggregation noise
// from its stream in the same order as run_federation.
inline ServeResult serve(const ExperimentConfig& ecfg, Listener& listener, const ServeOptions& opts = {}) {
  const FederationConfig cfg = federation_config(ecfg).effective();
  cfg.validate();
  const int n = cfg.clients;
  std::vector<Connection> conns(static_cast<std::size_t>(n));
  std::vector<HelloPayload> hellos(static_cast<std::size_t>(n));

  auto fail_all = [&](std::uint32_t epoch, const std::string& why) {
    for (std::size_t i = 0; i < conns.size(); ++i) conns[i].try_send(make_error(epoch, static_cast<std::uint16_t>(i), why));
    throw ProtocolError(why);
  };

  // Connection phase: collect one HELLO per client id.
  const auto hello_deadline = detail::deadline_after(opts.timeout_s);
  int joined = 0;
  while (joined < n) {
    Connection c(listener.accept(hello_deadline), opts.tap, opts.max_payload);
    Message m;
    HelloPayload h;
    try {
      m = c.receive(hello_deadline);
      h = parse_hello(m);
    } catch (const Error& e) {
      c.try_send(make_error(0, m.client, std::string("bad HELLO: ") + e.what()));
      continue;
    }
    if (m.client >= n) {
      c.try_send(make_error(0, m.client, concat_message("client id ", m.client, " outside [0, ", n, ")")));
      continue;
    }
    if (conns[m.client].open()) {
      c.try_send(make_error(0, m.client, concat_message("duplicate client id ", m.client)));
      continue;
    }
    hellos[m.client] = h;
    conns[m.client] = std::move(c);
    ++joined;
  }

  std::vector<int> identities;
  for (const auto& h : hellos) {
    if (h.input_dim != hellos.front().input_dim) fail_all(0, "clients disagree on the feature dimension");
    identities.push_back(static_cast<int>(h.identities));
  }

  ServeResult res;
  res.input_dim = hellos.front().input_dim;
  res.server = make_server(cfg, res.input_dim, identities);
  ExperimentConfig shared = ecfg;
  shared.mode = Mode::Client;
  const std::string text = to_text(shared);
  for (int i = 0; i < n; ++i) {
    conns[static_cast<std::size_t>(i)].send(make_config(
        static_cast<std::uint16_t>(i),
        {static_cast<std::uint32_t>(head_classes(cfg, identities, i)), text, res.server.global}));
  }

  for (int k = 0; k < cfg.epochs; ++k) {
    const auto start = Clock::now();
    const auto epoch = static_cast<std::uint32_t>(k);
    std::vector<ParamBlock> outgoing;
    for (int i = 0; i < n; ++i) outgoing.push_back(broadcast_params(res.server, cfg));
    const auto selected = select_clients(n, cfg.fraction, res.server.rng);
    std::vector<bool> is_selected(static_cast<std::size_t>(n), false);
    for (int id : selected) is_selected[static_cast<std::size_t>(id)] = true;
    for (int i = 0; i < n; ++i) {
      const auto u = static_cast<std::size_t>(i);
      try {
        conns[u].send(make_global_params(epoch, static_cast<std::uint16_t>(i), {is_selected[u], outgoing[u]}));
      } catch (const Error& e) {
        fail_all(epoch, concat_message("epoch ", k, ": client ", i, ": ", e.what()));
      }
    }

    // Barrier: one reply per client, UPDATE from selected ones, EPOCH_DONE otherwise.
    const auto deadline = detail::deadline_after(opts.timeout_s);
    std::vector<std::optional<ModelUpdate>> updates(static_cast<std::size_t>(n));
    std::vector<LossComponents> losses(static_cast<std::size_t>(n));
    std::vector<bool> replied(static_cast<std::size_t>(n), false);
    int pending = n;
    while (pending > 0) {
      std::vector<pollfd> fds;
      std::vector<int> ids;
      for (int i = 0; i < n; ++i) {
        if (!replied[static_cast<std::size_t>(i)]) {
          fds.push_back({conns[static_cast<std::size_t>(i)].fd(), POLLIN, 0});
          ids.push_back(i);
        }
      }
      const int rc = ::poll(fds.data(), fds.size(), detail::remaining_ms(deadline));
      if (rc < 0 && errno == EINTR) continue;
      if (rc <= 0) fail_all(epoch, concat_message("epoch ", k, ": timed out waiting for ", pending, " client(s)"));
      for (std::size_t f = 0; f < fds.size(); ++f) {
        if (!(fds[f].revents & (POLLIN | POLLHUP | POLLERR))) continue;
        const int i = ids[f];
        const auto u = static_cast<std::size_t>(i);
        try {
          const Message m = conns[u].receive(deadline);
          if (m.type == MessageType::Error) throw ProtocolError("client reported: " + error_text(m));
          if (m.epoch != epoch || m.client != i) throw ProtocolError("reply for the wrong epoch or client");
          if (is_selected[u]) {
            UpdatePayload p = parse_update(m);
            losses[u] = p.losses;
            updates[u] = ModelUpdate{i, std::move(p.params), p.losses};
          } else {
            losses[u] = parse_epoch_done(m);
          }
        } catch (const Error& e) {
          conns[u].close();
          fail_all(epoch, concat_message("epoch ", k, ": client ", i, ": ", e.what()));
        }
        replied[u] = true;
        --pending;
      }
    }

    std::vector<ModelUpdate> chosen;
    for (int id : selected) chosen.push_back(std::move(*updates[static_cast<std::size_t>(id)]));
    try {
      res.server.global = aggregate(chosen, cfg, res.server.rng);
    } catch (const Error& e) {
      fail_all(epoch, concat_message("epoch ", k, ": aggregation: ", e.what()));
    }
    res.server.epoch = k + 1;

    EpochRecord rec;
    rec.epoch = k;
    for (int i = 0; i < n; ++i) rec.clients.push_back({i, losses[static_cast<std::size_t>(i)], is_selected[static_cast<std::size_t>(i)]});
    if (opts.eval_set && fedreid::detail::eval_due(k, cfg.epochs, opts.eval_every)) {
      rec.eval = evaluate_embedding(global_embedding(res.server, cfg, res.input_dim), *opts.eval_set);
    }
    rec.wall_ms = opts.wall_clock ? std::chrono::duration<double, std::milli>(Clock::now() - start).count() : 0.0;
    if (opts.record_params) res.params_per_epoch.push_back(res.server.global);
    if (opts.on_epoch) opts.on_epoch(rec);
    res.history.push_back(std::move(rec));
  }
  for (int i = 0; i < n; ++i) {
    conns[static_cast<std::size_t>(i)].try_send(make_shutdown(static_cast<std::uint32_t>(cfg.epochs), static_cast<std::uint16_t>(i)));
  }
  return res;
}

struct ClientOptions {
  double timeout_s = 60.0;   // wait for each server message
  double connect_retry_s = 10.0;
  std::size_t max_payload = kDefaultMaxPayload;
  TrafficTap* tap = nullptr;
};

// Client side: trains on `data` locally and exchanges only parameters and loss
// values. The client id is the dataset's domain id. Returns the number of
// epochs completed; throws ProtocolError on any protocol violation.
inline int run_client(const std::string& endpoint, const DomainDataset& data, const ClientOptions& opts = {}) {
  if (data.domain_id < 0 || data.domain_id > 0xffff) throw ConfigError("dataset domain id is not a valid client id");
  const auto id = static_cast<std::uint16_t>(data.domain_id);
  Connection conn(connect_to(endpoint, opts.connect_retry_s), opts.tap, opts.max_payload);
  conn.send(make_hello(id, {static_cast<std::uint32_t>(data.identities), static_cast<std::uint32_t>(data.input_dim())}));

  auto expect = [&](const Message& m) {
    if (m.type == MessageType::Error) throw ProtocolError("server error: " + error_text(m));
    if (m.client != id) throw ProtocolError(concat_message("message addressed to client ", m.client, ", expected ", id));
    return m;
  };

  const Message cm = expect(conn.receive(detail::deadline_after(opts.timeout_s)));
  const ConfigPayload cp = parse_config_message(cm);
  const ExperimentConfig ecfg = parse_config(cp.config_text, {{"mode", "client"}});
  const FederationConfig cfg = federation_config(ecfg).effective();
  if (id >= cfg.clients) throw ProtocolError("client id outside the configured client count");
  ClientState client = make_client(cfg, id, std::make_shared<const DomainDataset>(data), cp.head_classes, cp.initial);

  int epochs = 0;
  for (;;) {
    const Message m = expect(conn.receive(detail::deadline_after(opts.timeout_s)));
    if (m.type == MessageType::Shutdown) return epochs;
    const GlobalParamsPayload gp = parse_global_params(m);
    const int k = static_cast<int>(m.epoch);
    try {
      apply_broadcast(client, gp.params, cfg);
      init_expert(client, cfg);
      const ModelUpdate u = local_round(client, cfg, k);
      if (gp.selected) {
        conn.send(make_update(m.epoch, id, {u.losses, u.params}));
      } else {
        conn.send(make_epoch_done(m.epoch, id, u.losses));
      }
    } catch (const ProtocolError&) {
      throw;
    } catch (const Error& e) {
      conn.try_send(make_error(m.epoch, id, e.what()));
      throw;
    }
    ++epochs;
  }
}

// serve command: the networked counterpart of cmd_train. Writes the same
// history.csv, checkpoint.fdck and train_metrics.csv.
inline TrainOutput cmd_serve(const ExperimentConfig& cfg, TrafficTap* tap = nullptr) {
  const DomainDataset eval =
      cfg.eval_dataset.empty() ? generate_domain(eval_domain_spec(cfg)) : load_dataset(cfg.eval_dataset);
  const RetrievalSet eval_set = make_eval_set(eval, cfg.master_seed());
  Listener listener(cfg.endpoint);
  ServeOptions opts;
  opts.timeout_s = cfg.timeout_s;
  opts.tap = tap;
  opts.eval_set = &eval_set;
  opts.eval_every = cfg.eval_every;
  opts.record_params = false;
  opts.wall_clock = cfg.wall_clock;
  ServeResult sr = serve(cfg, listener, opts);
  const FederationConfig fed = federation_config(cfg);
  TrainOutput out;
  out.result.server = std::move(sr.server);
  out.result.history = std::move(sr.history);
  out.embedding = global_embedding(out.result.server, fed, sr.input_dim);
  if (out.embedding.input_dim() != eval.input_dim()) {
    throw InputError(concat_message("clients report ", out.embedding.input_dim(), " features, eval domain has ",
                                    eval.input_dim()));
  }
  out.final_eval = evaluate_embedding(out.embedding, eval_set);
  std::filesystem::create_directories(cfg.out);
  write_train_outputs(cfg, out.result, out.embedding, out.final_eval);
  return out;
}

// client command: one client process. `dataset_path` empty means generate
// the client's domain from the config template.
inline int cmd_client(const ExperimentConfig& cfg, const std::string& dataset_path, int client_id) {
  DomainDataset data;
  if (!dataset_path.empty()) {
    data = load_dataset(dataset_path);
  } else {
    if (client_id < 0 || client_id >= cfg.fed.clients) throw RangeError("client", "needs a dataset or an id below clients");
    data = generate_domain(client_domain_spec(cfg, client_id));
  }
  ClientOptions opts;
  opts.timeout_s = cfg.timeout_s;
  return run_client(cfg.endpoint, data, opts);
}

}  // namespace fedreid::wire

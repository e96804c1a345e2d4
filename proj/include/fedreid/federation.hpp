#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fedreid/data.hpp"
#include "fedreid/errors.hpp"
#include "fedreid/eval.hpp"
#include "fedreid/losses.hpp"
#include "fedreid/nn.hpp"
#include "fedreid/optim.hpp"
#include "fedreid/rng.hpp"

namespace fedreid {

enum class Strategy { FedSGD, FedAVG, FedReID, FedReIDNoExpert };
enum class NoisePlacement { None, Single, Double };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::FedSGD: return "fedsgd";
    case Strategy::FedAVG: return "fedavg";
    case Strategy::FedReID: return "fedreid";
    case Strategy::FedReIDNoExpert: return "fedreid-noexpert";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "fedsgd") return Strategy::FedSGD;
  if (s == "fedavg") return Strategy::FedAVG;
  if (s == "fedreid") return Strategy::FedReID;
  if (s == "fedreid-noexpert") return Strategy::FedReIDNoExpert;
  throw ConfigError("unknown strategy '" + s + "'");
}

inline std::string to_string(NoisePlacement p) {
  switch (p) {
    case NoisePlacement::None: return "none";
    case NoisePlacement::Single: return "single";
    case NoisePlacement::Double: return "double";
  }
  return "?";
}

inline NoisePlacement parse_noise_placement(const std::string& s) {
  if (s == "none") return NoisePlacement::None;
  if (s == "single") return NoisePlacement::Single;
  if (s == "double") return NoisePlacement::Double;
  throw ConfigError("unknown noise placement '" + s + "'");
}

struct ArchConfig {
  std::vector<std::size_t> embed_hidden{64};
  std::size_t embed_dim = 32;
  std::size_t head_hidden = 64;
  MappingOptions head;

  EmbeddingNet make_embedding(std::size_t input_dim) const {
    std::vector<std::size_t> dims{input_dim};
    dims.insert(dims.end(), embed_hidden.begin(), embed_hidden.end());
    dims.push_back(embed_dim);
    return EmbeddingNet(std::move(dims));
  }
  Model make_model(std::size_t input_dim, std::size_t classes) const {
    return Model(make_embedding(input_dim), MappingNet(embed_dim, head_hidden, classes, head));
  }
  bool operator==(const ArchConfig&) const = default;
};

struct FederationConfig {
  int clients = 4;                  // N
  double fraction = 1.0;            // S
  double beta = 0.0;                // noise scale
  NoisePlacement noise = NoisePlacement::Single;
  int local_steps = 1;              // t_max
  int epochs = 100;                 // k_max
  double temperature = 3.0;         // T
  Strategy strategy = Strategy::FedReID;
  LrSchedule lr_embed{0.01, 0.1, 40};
  LrSchedule lr_head{0.1, 0.1, 40};
  SgdOptions sgd;
  bool reset_optimizer = true;      // clear momentum at every broadcast
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  ArchConfig arch;
  int threads = 1;                  // concurrent local rounds

  // ceil(S * N), guarded against representation error in S * N.
  int selected_count() const {
    return std::clamp(static_cast<int>(std::ceil(fraction * clients - 1e-9)), 1, clients);
  }

  bool uses_expert() const noexcept { return strategy == Strategy::FedReID; }
  bool federates_heads() const noexcept { return strategy == Strategy::FedAVG || strategy == Strategy::FedSGD; }

  LossSpec loss_spec() const {
    const bool e = uses_expert();
    return LossSpec{true, e, e, temperature};
  }

  // FedSGD is FedAVG with S = 1 and t_max = 1.
  FederationConfig effective() const {
    FederationConfig c = *this;
    if (c.strategy == Strategy::FedSGD) {
      c.fraction = 1.0;
      c.local_steps = 1;
    }
    return c;
  }

  void validate() const {
    if (clients < 1) throw ConfigError("clients must be >= 1");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("client fraction must be in (0, 1]");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must be in [0, 1]");
    if (local_steps < 1) throw ConfigError("local_steps must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (lr_embed.base < 0 || lr_head.base < 0) throw ConfigError("learning rates must be non-negative");
    augment.validate();
  }
};

// Deterministic initial model from the server-init stream: embedding first,
// then the head. FedReID servers keep only the embedding part.
inline Model make_initial_model(const FederationConfig& cfg, std::size_t input_dim, std::size_t classes) {
  Model m = cfg.arch.make_model(input_dim, classes);
  Rng rng = make_rng(cfg.seed, Stream::ServerInit);
  m.embed.init(rng);
  m.head.init(rng);
  return m;
}

struct ClientState {
  int id = 0;
  std::shared_ptr<const DomainDataset> data;
  Model model;
  Model expert;
  OptimizerState opt_embed, opt_head;
  OptimizerState expert_opt_embed, expert_opt_head;
  Rng rng;
  ParamBlock last_local;  // full model state at the end of the latest local round
};

// The server keeps parameters and randomness only; it never sees samples.
struct ServerState {
  ParamBlock global;  // theta^f (FedReID) or the full model (FedAVG/FedSGD)
  int epoch = 0;      // k
  Rng rng;            // selection and noise
};

struct ModelUpdate {
  int client = 0;
  ParamBlock params;
  LossComponents losses;  // means over the round's local steps
};

inline std::size_t head_classes(const FederationConfig& cfg, const std::vector<int>& identity_counts, int client) {
  if (cfg.federates_heads()) {
    return static_cast<std::size_t>(*std::max_element(identity_counts.begin(), identity_counts.end()));
  }
  return static_cast<std::size_t>(identity_counts.at(static_cast<std::size_t>(client)));
}

inline ServerState make_server(const FederationConfig& cfg, std::size_t input_dim, const std::vector<int>& identity_counts) {
  const Model init = make_initial_model(cfg, input_dim, head_classes(cfg, identity_counts, 0));
  ServerState s;
  s.global = cfg.federates_heads() ? full_state(init) : init.embed.params();
  s.rng = make_rng(cfg.seed, Stream::Server);
  return s;
}

inline void reset_optimizers(ClientState& c) {
  c.opt_embed.reset();
  c.opt_head.reset();
  c.expert_opt_embed.reset();
  c.expert_opt_head.reset();
}

inline void apply_broadcast(ClientState& client, const ParamBlock& params, const FederationConfig& cfg) {
  if (cfg.federates_heads()) {
    set_full_state(client.model, params);
  } else {
    if (!params.same_layout(client.model.embed.params())) {
      throw ProtocolError(concat_message("broadcast to client ", client.id, ": embedding layout mismatch"));
    }
    client.model.embed.params() = params;
  }
  if (cfg.reset_optimizer) reset_optimizers(client);
}

// `global` is the initial server state broadcast at epoch 0.
inline ClientState make_client(const FederationConfig& cfg, int id, std::shared_ptr<const DomainDataset> data,
                               std::size_t classes, const ParamBlock& global) {
  if (!data) throw ConfigError("client has no dataset");
  ClientState c;
  c.id = id;
  c.model = cfg.arch.make_model(data->input_dim(), classes);
  c.data = std::move(data);
  c.rng = make_rng(cfg.seed, Stream::Client, static_cast<std::uint64_t>(id));
  if (!cfg.federates_heads()) c.model.head.init(c.rng);
  c.opt_embed = OptimizerState(c.model.embed.params().size(), cfg.sgd);
  c.opt_head = OptimizerState(c.model.head.params().size(), cfg.sgd);
  c.expert_opt_embed = c.opt_embed;
  c.expert_opt_head = c.opt_head;
  apply_broadcast(c, global, cfg);
  c.last_local = full_state(c.model);
  c.expert = c.model;
  return c;
}

// theta (+ beta * N(0,1) per coordinate for double placement after the first
// aggregation). Draws from the server stream, so call once per client in id order.
inline ParamBlock broadcast_params(ServerState& server, const FederationConfig& cfg) {
  ParamBlock p = server.global;
  if (cfg.noise == NoisePlacement::Double && cfg.beta > 0.0 && server.epoch > 0) {
    for (double& v : p.values()) v += cfg.beta * standard_normal(server.rng);
  }
  return p;
}

inline void broadcast(ServerState& server, ClientState& client, const FederationConfig& cfg) {
  apply_broadcast(client, broadcast_params(server, cfg), cfg);
}

// Expert <- the client's parameters from the end of its previous local round
// (its initial parameters before any training).
inline void init_expert(ClientState& client, const FederationConfig& cfg) {
  if (!cfg.uses_expert()) return;
  set_full_state(client.expert, client.last_local);
  client.expert.clear_cache();
  if (cfg.reset_optimizer) {
    client.expert_opt_embed.reset();
    client.expert_opt_head.reset();
  }
}

inline std::vector<std::size_t> sample_batch(std::size_t dataset_size, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> idx(dataset_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t n = std::min(batch, dataset_size);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, dataset_size - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  return idx;
}

struct StepRates {
  double embed = 0.0;
  double head = 0.0;
};

// One minibatch step. With an expert, the same batch is augmented separately for
// each model; the client follows L^C + L^R and the expert L^E.
inline LossComponents local_step(Model& model, OptimizerState& opt_embed, OptimizerState& opt_head, Model* expert,
                                 OptimizerState* expert_opt_embed, OptimizerState* expert_opt_head,
                                 const DomainDataset& data, const FederationConfig& cfg, const LossSpec& spec,
                                 StepRates rates, Rng& rng) {
  const auto idx = sample_batch(data.size(), cfg.batch, rng);
  const Matrix x = gather_rows(data.features, idx);
  std::vector<int> labels(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = data.labels[idx[i]];

  const Matrix x_client = augment_batch(x, cfg.augment, rng);
  std::optional<Matrix> x_expert;
  if (expert) x_expert = augment_batch(x, cfg.augment, rng);

  const Matrix client_logits = model.forward(x_client, true, &rng);
  std::optional<Matrix> expert_logits;
  if (expert) expert_logits = expert->forward(*x_expert, true, &rng);

  const ClientLoss loss = client_loss(client_logits, expert_logits ? &*expert_logits : nullptr, labels, spec);
  const Gradients g = model.backward(loss.d_client);
  sgd_step(model.embed.params().values(), g.embed.values(), opt_embed, rates.embed);
  sgd_step(model.head.params().values(), g.head.values(), opt_head, rates.head);
  if (expert && spec.expert) {
    const Gradients ge = expert->backward(loss.d_expert);
    sgd_step(expert->embed.params().values(), ge.embed.values(), *expert_opt_embed, rates.embed);
    sgd_step(expert->head.params().values(), ge.head.values(), *expert_opt_head, rates.head);
  }
  return loss.components;
}

// t_max local steps; returns the client's embedding (or full state when heads
// are federated) as the update.
inline ModelUpdate local_round(ClientState& client, const FederationConfig& cfg, int epoch) {
  if (!client.data || client.data->size() == 0) {
    throw ConfigError(concat_message("client ", client.id, " has an empty dataset"));
  }
  const LossSpec spec = cfg.loss_spec();
  const StepRates rates{cfg.lr_embed.at(epoch), cfg.lr_head.at(epoch)};
  const bool with_expert = cfg.uses_expert();
  LossComponents sum;
  for (int t = 0; t < cfg.local_steps; ++t) {
    const LossComponents l =
        local_step(client.model, client.opt_embed, client.opt_head, with_expert ? &client.expert : nullptr,
                   &client.expert_opt_embed, &client.expert_opt_head, *client.data, cfg, spec, rates, client.rng);
    sum.classification += l.classification;
    sum.expert += l.expert;
    sum.regularisation += l.regularisation;
  }
  const double inv = 1.0 / cfg.local_steps;
  client.model.clear_cache();
  client.expert.clear_cache();
  client.last_local = full_state(client.model);
  ModelUpdate u;
  u.client = client.id;
  u.params = cfg.federates_heads() ? client.last_local : client.model.embed.params();
  u.losses = {sum.classification * inv, sum.expert * inv, sum.regularisation * inv};
  return u;
}

// ceil(S * N) distinct ids, uniform without replacement, returned ascending.
inline std::vector<int> select_clients(int n, double fraction, Rng& rng) {
  if (n < 1) throw ConfigError("select_clients: need at least one client");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("select_clients: fraction must be in (0, 1]; S = 0 selects no clients");
  }
  FederationConfig c;
  c.clients = n;
  c.fraction = fraction;
  const int k = c.selected_count();
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(pick(rng))]);
  }
  ids.resize(static_cast<std::size_t>(k));
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Coordinate-wise mean of the updates, plus beta * N(0,1) from `rng` when noise
// is enabled. `noise_out` receives the raw standard-normal draw (empty if none).
inline ParamBlock aggregate(const std::vector<ModelUpdate>& updates, const FederationConfig& cfg, Rng& rng,
                            std::vector<double>* noise_out = nullptr) {
  if (updates.empty()) throw ProtocolError("aggregate: no updates");
  ParamBlock out = updates.front().params;
  for (std::size_t u = 1; u < updates.size(); ++u) {
    const ParamBlock& p = updates[u].params;
    if (!p.same_layout(out)) {
      throw ProtocolError(concat_message("aggregate: update from client ", updates[u].client, " has a different layout"));
    }
    auto acc = out.values();
    auto v = p.values();
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += v[j];
  }
  if (updates.size() > 1) {
    const double n = static_cast<double>(updates.size());
    for (double& a : out.values()) a /= n;
  }
  if (noise_out) noise_out->clear();
  if (cfg.beta > 0.0 && cfg.noise != NoisePlacement::None) {
    for (double& a : out.values()) {
      const double z = standard_normal(rng);
      if (noise_out) noise_out->push_back(z);
      a += cfg.beta * z;
    }
  }
  return out;
}

// Embedding part of a server's global parameters.
inline EmbeddingNet global_embedding(const ServerState& server, const FederationConfig& cfg, std::size_t input_dim) {
  EmbeddingNet net = cfg.arch.make_embedding(input_dim);
  if (cfg.federates_heads()) {
    net.params() = split_layers(server.global, net.layer_count()).first;
  } else {
    net.params() = server.global;
  }
  return net;
}

struct ClientEpochStats {
  int client = 0;
  LossComponents losses;
  bool selected = false;
};

struct EpochRecord {
  int epoch = 0;
  std::vector<ClientEpochStats> clients;
  std::optional<RetrievalResult> eval;
  double wall_ms = 0.0;
};

struct RunOptions {
  const RetrievalSet* eval_set = nullptr;
  int eval_every = 10;          // plus the final epoch; 0 = final only
  bool record_params = false;   // keep theta after every epoch
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FederationResult {
  ServerState server;
  std::vector<EpochRecord> history;
  std::vector<ParamBlock> params_per_epoch;
  std::vector<ClientState> clients;
};

namespace detail {

// Re-throws the active exception with `context` prefixed, keeping its type.
[[noreturn]] inline void rethrow_with_context(const std::exception_ptr& ep, const std::string& context) {
  try {
    std::rethrow_exception(ep);
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), context + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(context + ": " + e.what());
  } catch (const InputError& e) {
    throw InputError(context + ": " + e.what());
  } catch (const UsageError& e) {
    throw UsageError(context + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(context + ": " + e.what());
  } catch (const ProtocolError& e) {
    throw ProtocolError(context + ": " + e.what());
  } catch (const Error& e) {
    throw Error(context + ": " + e.what());
  }
}

inline bool eval_due(int epoch, int epochs, int every) {
  return epoch + 1 == epochs || (every > 0 && (epoch + 1) % every == 0);
}

}  // namespace detail

// Runs every client's local round, concurrently when cfg.threads > 1. Each
// client owns its state and RNG, so the result does not depend on scheduling.
inline std::vector<ModelUpdate> run_local_rounds(std::vector<ClientState>& clients, const FederationConfig& cfg,
                                                 int epoch) {
  std::vector<ModelUpdate> updates(clients.size());
  std::vector<std::exception_ptr> errors(clients.size());
  auto work = [&](std::size_t i) {
    try {
      updates[i] = local_round(clients[i], cfg, epoch);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), clients.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < clients.size(); ++i) work(i);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < clients.size(); i += workers) work(i);
      });
    }
  }
  for (std::size_t i = 0; i < clients.size(); ++i) {
    if (errors[i]) {
      detail::rethrow_with_context(errors[i], concat_message("epoch ", epoch, ", client ", clients[i].id));
    }
  }
  return updates;
}

// Per epoch k: broadcast -> init_expert -> local rounds -> selection -> aggregation.
inline FederationResult run_federation(const FederationConfig& config, const std::vector<DomainDataset>& datasets,
                                       const RunOptions& opts = {}) {
  const FederationConfig cfg = config.effective();
  cfg.validate();
  if (datasets.size() != static_cast<std::size_t>(cfg.clients)) {
    throw ConfigError(concat_message("expected ", cfg.clients, " datasets, got ", datasets.size()));
  }
  std::vector<int> ids;
  for (const auto& ds : datasets) {
    if (ds.input_dim() != datasets.front().input_dim()) throw ConfigError("client datasets differ in feature dim");
    if (std::count_if(datasets.begin(), datasets.end(), [&](const DomainDataset& o) { return o.domain_id == ds.domain_id; }) > 1) {
      throw ConfigError(concat_message("domain id ", ds.domain_id, " appears twice; identity spaces must be disjoint"));
    }
    ids.push_back(ds.identities);
  }
  const std::size_t input_dim = datasets.front().input_dim();

  FederationResult res;
  res.server = make_server(cfg, input_dim, ids);
  for (int i = 0; i < cfg.clients; ++i) {
    auto data = std::make_shared<const DomainDataset>(datasets[static_cast<std::size_t>(i)]);
    try {
      res.clients.push_back(make_client(cfg, i, std::move(data), head_classes(cfg, ids, i), res.server.global));
    } catch (...) {
      detail::rethrow_with_context(std::current_exception(), concat_message("client ", i));
    }
  }

  for (int k = 0; k < cfg.epochs; ++k) {
    const auto start = std::chrono::steady_clock::now();
    for (auto& c : res.clients) {
      try {
        broadcast(res.server, c, cfg);
        init_expert(c, cfg);
      } catch (...) {
        detail::rethrow_with_context(std::current_exception(), concat_message("epoch ", k, ", client ", c.id));
      }
    }
    auto updates = run_local_rounds(res.clients, cfg, k);
    const auto selected = select_clients(cfg.clients, cfg.fraction, res.server.rng);
    std::vector<ModelUpdate> chosen;
    for (int id : selected) chosen.push_back(updates[static_cast<std::size_t>(id)]);
    try {
      res.server.global = aggregate(chosen, cfg, res.server.rng);
    } catch (...) {
      detail::rethrow_with_context(std::current_exception(), concat_message("epoch ", k, ", aggregation"));
    }
    res.server.epoch = k + 1;

    EpochRecord rec;
    rec.epoch = k;
    for (const auto& u : updates) {
      const bool sel = std::binary_search(selected.begin(), selected.end(), u.client);
      rec.clients.push_back({u.client, u.losses, sel});
    }
    if (opts.eval_set && detail::eval_due(k, cfg.epochs, opts.eval_every)) {
      rec.eval = evaluate_embedding(global_embedding(res.server, cfg, input_dim), *opts.eval_set);
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (opts.record_params) res.params_per_epoch.push_back(res.server.global);
    if (opts.on_epoch) opts.on_epoch(rec);
    res.history.push_back(std::move(rec));
  }
  return res;
}

}  // namespace fedreid

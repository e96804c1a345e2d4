#include <gtest/gtest.h>

#include <memory>
#include <vector>

#include "fedreid/baselines.hpp"
#include "fedreid/federation.hpp"
#include "test_support.hpp"

using namespace fedreid;
using namespace fedreid::testing;

namespace {

struct Setup {
  FederationConfig cfg;
  std::vector<DomainDataset> data;
  ServerState server;
  std::vector<ClientState> clients;
};

Setup make_setup(FederationConfig cfg, const std::vector<DomainDataset>& data) {
  Setup s{cfg, data, {}, {}};
  std::vector<int> ids;
  for (const auto& d : data) ids.push_back(d.identities);
  s.server = make_server(cfg, data.front().input_dim(), ids);
  for (int i = 0; i < cfg.clients; ++i) {
    s.clients.push_back(make_client(cfg, i, std::make_shared<const DomainDataset>(data[static_cast<std::size_t>(i)]),
                                    head_classes(cfg, ids, i), s.server.global));
  }
  return s;
}

// Replays a client's t_max local steps with plain SGD, returning the summed
// embedding gradients. Requires a deterministic forward and no augmentation.
std::vector<double> accumulated_embedding_gradient(const ClientState& client, const FederationConfig& cfg, int epoch) {
  Model m = client.model;
  Rng rng = client.rng;
  std::vector<double> sum(m.embed.params().size(), 0.0);
  for (int t = 0; t < cfg.local_steps; ++t) {
    const auto idx = sample_batch(client.data->size(), cfg.batch, rng);
    const Matrix x = gather_rows(client.data->features, idx);
    std::vector<int> y;
    for (auto i : idx) y.push_back(client.data->labels[i]);
    Matrix dlogits;
    cross_entropy(m.forward(x, true, nullptr), y, &dlogits);
    const Gradients g = m.backward(dlogits);
    for (std::size_t j = 0; j < sum.size(); ++j) {
      sum[j] += g.embed.values()[j];
      m.embed.params().values()[j] -= cfg.lr_embed.at(epoch) * g.embed.values()[j];
    }
    for (std::size_t j = 0; j < m.head.params().size(); ++j) {
      m.head.params().values()[j] -= cfg.lr_head.at(epoch) * g.head.values()[j];
    }
  }
  return sum;
}

ModelUpdate update_of(std::vector<double> v) {
  ModelUpdate u;
  const std::size_t n = v.size();
  u.params = ParamBlock(std::vector<LayerShape>{LayerShape{1, n, 0}}, std::move(v));
  return u;
}

}  // namespace

template <class T> concept HasData = requires(T s) { s.data; };
template <class T> concept HasDatasets = requires(T s) { s.datasets; };
template <class T> concept HasClients = requires(T s) { s.clients; };
static_assert(!HasData<ServerState> && !HasDatasets<ServerState>, "the server must not hold a dataset");
static_assert(!HasClients<ServerState>, "the server must not hold client state");
static_assert(HasData<ClientState>);

TEST(Config, DefaultsAndSelectionCount) {
  FederationConfig c;
  EXPECT_EQ(c.clients, 4);
  EXPECT_EQ(c.fraction, 1.0);
  EXPECT_EQ(c.beta, 0.0);
  EXPECT_EQ(c.local_steps, 1);
  EXPECT_EQ(c.epochs, 100);
  EXPECT_EQ(c.temperature, 3.0);
  EXPECT_EQ(c.batch, 32u);
  EXPECT_EQ(c.selected_count(), 4);
  c.fraction = 0.5;
  EXPECT_EQ(c.selected_count(), 2);
  c.fraction = 0.25;
  EXPECT_EQ(c.selected_count(), 1);
  c.fraction = 0.3;
  EXPECT_EQ(c.selected_count(), 2);
  c.fraction = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, StrategyNames) {
  for (Strategy s : {Strategy::FedSGD, Strategy::FedAVG, Strategy::FedReID, Strategy::FedReIDNoExpert}) {
    EXPECT_EQ(parse_strategy(to_string(s)), s);
  }
  EXPECT_THROW(parse_strategy("fedatt"), ConfigError);
  EXPECT_EQ(parse_noise_placement("double"), NoisePlacement::Double);
}

TEST(Broadcast, FedReIDLeavesHeadUntouched) {
  auto s = make_setup(toy_config(3, 1), toy_domains(3, 1));
  for (auto& c : s.clients) {
    local_round(c, s.cfg, 0);
    const ParamBlock head = head_state(c.model.head);
    s.server.global.values()[0] += 1.0;
    broadcast(s.server, c, s.cfg);
    EXPECT_EQ(head_state(c.model.head), head);
    EXPECT_EQ(c.model.embed.params(), s.server.global);
  }
}

TEST(Broadcast, FedAVGOverwritesEverything) {
  auto cfg = noisy_toy_config(3, 2);
  cfg.strategy = Strategy::FedAVG;
  auto s = make_setup(cfg, toy_domains(3, 2));
  for (auto& c : s.clients) {
    local_round(c, s.cfg, 0);
    EXPECT_NE(full_state(c.model), s.server.global);
    broadcast(s.server, c, s.cfg);
    EXPECT_EQ(full_state(c.model), s.server.global);
  }
}

TEST(Broadcast, LayoutMismatchIsProtocolError) {
  auto s = make_setup(toy_config(1, 3), toy_domains(1, 3));
  ParamBlock wrong({{2, 2, 0}});
  EXPECT_THROW(apply_broadcast(s.clients[0], wrong, s.cfg), ProtocolError);
}

TEST(Broadcast, DoubleNoiseReplays) {
  auto cfg = toy_config(2, 4);
  cfg.beta = 0.005;
  cfg.noise = NoisePlacement::Double;
  auto s = make_setup(cfg, toy_domains(2, 4));
  EXPECT_EQ(broadcast_params(s.server, cfg), s.server.global);  // no noise before the first aggregation
  s.server.epoch = 1;
  Rng replay = s.server.rng;
  const ParamBlock theta = s.server.global;
  broadcast(s.server, s.clients[0], cfg);
  const auto got = s.clients[0].model.embed.params().values();
  for (std::size_t j = 0; j < got.size(); ++j) EXPECT_EQ(got[j], theta.values()[j] + cfg.beta * standard_normal(replay));

  auto again = make_setup(cfg, toy_domains(2, 4));
  again.server.epoch = 1;
  broadcast(again.server, again.clients[0], cfg);
  EXPECT_EQ(again.clients[0].model.embed.params(), s.clients[0].model.embed.params());
}

TEST(InitExpert, FirstEpochCopiesInitialClient) {
  auto s = make_setup(toy_config(2, 5), toy_domains(2, 5));
  for (auto& c : s.clients) {
    init_expert(c, s.cfg);
    EXPECT_EQ(full_state(c.expert), full_state(c.model));
  }
}

TEST(InitExpert, UsesPreBroadcastSnapshot) {
  auto s = make_setup(noisy_toy_config(2, 6), toy_domains(2, 6));
  auto& c = s.clients[0];
  local_round(c, s.cfg, 0);
  const ParamBlock before = full_state(c.model);
  s.server.global.values()[0] += 0.5;
  broadcast(s.server, c, s.cfg);
  init_expert(c, s.cfg);
  EXPECT_EQ(full_state(c.expert), before);
  EXPECT_NE(full_state(c.expert), full_state(c.model));
}

TEST(InitExpert, NoExpertStrategyIsNoOp) {
  auto cfg = toy_config(1, 7);
  cfg.strategy = Strategy::FedReIDNoExpert;
  auto s = make_setup(cfg, toy_domains(1, 7));
  auto& c = s.clients[0];
  const ParamBlock expert = full_state(c.expert);
  const auto u = local_round(c, cfg, 0);
  init_expert(c, cfg);
  EXPECT_EQ(full_state(c.expert), expert);
  EXPECT_EQ(u.losses.expert, 0.0);
  EXPECT_EQ(u.losses.regularisation, 0.0);
  EXPECT_FALSE(cfg.loss_spec().expert);
  EXPECT_FALSE(cfg.loss_spec().regularisation);
}

TEST(LocalRound, OneStepPerModelWhenTmaxIsOne) {
  auto cfg = toy_config(1, 8);
  vanilla_sgd(cfg);
  auto s = make_setup(cfg, toy_domains(1, 8));
  auto& c = s.clients[0];
  Model client = c.model, expert = c.expert;
  Rng rng = c.rng;
  OptimizerState a(client.embed.params().size(), cfg.sgd), b(client.head.params().size(), cfg.sgd);
  OptimizerState ea = a, eb = b;
  local_step(client, a, b, &expert, &ea, &eb, *c.data, cfg, cfg.loss_spec(), {cfg.lr_embed.at(0), cfg.lr_head.at(0)}, rng);
  local_round(c, cfg, 0);
  EXPECT_EQ(c.model.embed.params(), client.embed.params());
  EXPECT_EQ(c.model.head.params(), client.head.params());
  EXPECT_EQ(c.expert.embed.params(), expert.embed.params());
}

TEST(LocalRound, Deterministic) {
  auto cfg = noisy_toy_config(2, 9);
  cfg.local_steps = 3;
  auto a = make_setup(cfg, toy_domains(2, 9));
  auto b = make_setup(cfg, toy_domains(2, 9));
  for (int i = 0; i < 2; ++i) {
    const auto ua = local_round(a.clients[static_cast<std::size_t>(i)], cfg, 0);
    const auto ub = local_round(b.clients[static_cast<std::size_t>(i)], cfg, 0);
    EXPECT_EQ(ua.params, ub.params);
    EXPECT_EQ(ua.losses.total(), ub.losses.total());
  }
}

TEST(LocalRound, EmptyDatasetRejected) {
  auto s = make_setup(toy_config(1, 10), toy_domains(1, 10));
  auto empty = std::make_shared<DomainDataset>();
  s.clients[0].data = empty;
  EXPECT_THROW(local_round(s.clients[0], s.cfg, 0), ConfigError);
}

TEST(LocalRound, EmbeddingMatchesAccumulatedGradient) {
  for (int steps : {1, 3}) {
    auto cfg = toy_config(1, 11);
    cfg.strategy = Strategy::FedReIDNoExpert;
    cfg.local_steps = steps;
    vanilla_sgd(cfg);
    auto s = make_setup(cfg, toy_domains(1, 11));
    auto& c = s.clients[0];
    const auto g = accumulated_embedding_gradient(c, cfg, 0);
    const ParamBlock theta = c.model.embed.params();
    const auto u = local_round(c, cfg, 0);
    for (std::size_t j = 0; j < g.size(); ++j) {
      EXPECT_NEAR(u.params.values()[j], theta.values()[j] - cfg.lr_embed.at(0) * g[j], 1e-10);
    }
  }
}

TEST(Aggregation, IdentityAcrossClients) {
  for (int steps : {1, 3}) {
    auto cfg = toy_config(4, 12);
    cfg.strategy = Strategy::FedReIDNoExpert;
    cfg.local_steps = steps;
    vanilla_sgd(cfg);
    auto s = make_setup(cfg, toy_domains(4, 12));
    const ParamBlock theta = s.server.global;
    std::vector<double> total(theta.size(), 0.0);
    for (const auto& c : s.clients) {
      const auto g = accumulated_embedding_gradient(c, cfg, 0);
      for (std::size_t j = 0; j < g.size(); ++j) total[j] += g[j];
    }
    auto updates = run_local_rounds(s.clients, cfg, 0);
    const ParamBlock mean = aggregate(updates, cfg, s.server.rng);
    for (std::size_t j = 0; j < total.size(); ++j) {
      EXPECT_NEAR(mean.values()[j], theta.values()[j] - cfg.lr_embed.at(0) / 4.0 * total[j], 1e-10);
    }
  }
}

TEST(Selection, Counts) {
  Rng rng(13);
  EXPECT_EQ(select_clients(4, 1.0, rng), (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(select_clients(4, 0.5, rng).size(), 2u);
  EXPECT_EQ(select_clients(4, 0.25, rng).size(), 1u);
  EXPECT_THROW(select_clients(4, 0.0, rng), ConfigError);
  EXPECT_THROW(select_clients(4, 1.01, rng), ConfigError);
  for (int i = 0; i < 100; ++i) {
    const auto ids = select_clients(7, 0.6, rng);
    ASSERT_EQ(ids.size(), 5u);
    EXPECT_TRUE(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
    for (int id : ids) EXPECT_TRUE(id >= 0 && id < 7);
  }
}

TEST(Selection, UniformFrequency) {
  Rng rng(14);
  std::vector<int> hits(4, 0);
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    for (int id : select_clients(4, 0.5, rng)) ++hits[static_cast<std::size_t>(id)];
  }
  for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / trials, 0.5, 0.02);
}

TEST(Aggregate, Examples) {
  FederationConfig cfg;
  Rng rng(15);
  const auto mean = aggregate({update_of({1, 3}), update_of({3, 5})}, cfg, rng);
  EXPECT_EQ(std::vector<double>(mean.values().begin(), mean.values().end()), (std::vector<double>{2, 4}));
  const auto single = aggregate({update_of({0.1, -7.25})}, cfg, rng);
  EXPECT_EQ(single, update_of({0.1, -7.25}).params);
  EXPECT_THROW(aggregate({}, cfg, rng), ProtocolError);
  EXPECT_THROW(aggregate({update_of({1}), update_of({1, 2})}, cfg, rng), ProtocolError);
}

TEST(Aggregate, NoiseIsExactlyBetaTimesDraw) {
  const std::vector<ModelUpdate> ups{update_of({0.3, -1.2, 2.0}), update_of({0.1, 0.4, 0.6}), update_of({1, 2, 3})};
  FederationConfig cfg;
  Rng r0(16);
  const auto base = aggregate(ups, cfg, r0);
  for (double beta : {0.0005, 0.005, 0.5}) {
    cfg.beta = beta;
    Rng r(16);
    std::vector<double> noise;
    const auto noisy = aggregate(ups, cfg, r, &noise);
    ASSERT_EQ(noise.size(), 3u);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(noisy.values()[j], base.values()[j] + beta * noise[j]);
    Rng replay(16);
    for (double z : noise) EXPECT_EQ(z, standard_normal(replay));
  }
  cfg.noise = NoisePlacement::None;
  Rng r(16);
  EXPECT_EQ(aggregate(ups, cfg, r), base);
}

TEST(RunFederation, ParallelEqualsSequential) {
  auto cfg = noisy_toy_config(4, 17);
  cfg.beta = 0.001;
  cfg.noise = NoisePlacement::Double;
  RunOptions opts;
  opts.record_params = true;
  const auto data = toy_domains(4, 17);
  const auto seq = run_federation(cfg, data, opts);
  cfg.threads = 4;
  const auto par = run_federation(cfg, data, opts);
  EXPECT_EQ(seq.params_per_epoch, par.params_per_epoch);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(full_state(seq.clients[i].model), full_state(par.clients[i].model));
}

TEST(RunFederation, FedSGDIsFedAVGWithFullSelectionAndOneStep) {
  auto cfg = noisy_toy_config(3, 18);
  cfg.strategy = Strategy::FedSGD;
  cfg.fraction = 0.34;
  cfg.local_steps = 4;
  RunOptions opts;
  opts.record_params = true;
  const auto data = toy_domains(3, 18);
  const auto sgd = run_federation(cfg, data, opts);
  cfg.strategy = Strategy::FedAVG;
  cfg.fraction = 1.0;
  cfg.local_steps = 1;
  const auto avg = run_federation(cfg, data, opts);
  EXPECT_EQ(sgd.params_per_epoch, avg.params_per_epoch);
}

TEST(RunFederation, SingleClientFedAVGEqualsCentralisedSgd) {
  auto cfg = toy_config(1, 19);
  cfg.strategy = Strategy::FedAVG;
  cfg.epochs = 10;
  cfg.sgd.momentum = 0.0;
  const auto data = toy_domains(1, 19);
  const auto fed = run_federation(cfg, data);

  Model m = make_initial_model(cfg, data[0].input_dim(), static_cast<std::size_t>(data[0].identities));
  Rng rng = make_rng(cfg.seed, Stream::Client, 0);
  train_supervised(m, data[0], cfg, 1, rng);
  EXPECT_EQ(fed.server.global, full_state(m));
}

TEST(RunFederation, HistoryDeterministic) {
  auto cfg = noisy_toy_config(3, 20);
  cfg.fraction = 0.5;
  cfg.beta = 0.001;
  const auto data = toy_domains(3, 20);
  const auto a = run_federation(cfg, data);
  const auto b = run_federation(cfg, data);
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t k = 0; k < a.history.size(); ++k) {
    EXPECT_EQ(a.history[k].epoch, static_cast<int>(k));
    ASSERT_EQ(a.history[k].clients.size(), 3u);
    int selected = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(a.history[k].clients[i].losses.total(), b.history[k].clients[i].losses.total());
      EXPECT_EQ(a.history[k].clients[i].selected, b.history[k].clients[i].selected);
      selected += a.history[k].clients[i].selected;
    }
    EXPECT_EQ(selected, 2);
  }
  EXPECT_EQ(a.server.global, b.server.global);
}

TEST(RunFederation, HeadsDecoupledUnderFedReID) {
  auto cfg = noisy_toy_config(2, 21);
  const auto data = toy_domains(2, 21);
  const auto r = run_federation(cfg, data);
  EXPECT_EQ(r.server.global.size(), r.clients[0].model.embed.params().size());
  EXPECT_NE(r.clients[0].model.head.params().size(), r.clients[1].model.head.params().size());
}

TEST(RunFederation, ErrorsCarryContext) {
  auto cfg = toy_config(2, 22);
  auto data = toy_domains(2, 22);
  EXPECT_THROW(run_federation(cfg, {data[0]}), ConfigError);
  data[1].domain_id = data[0].domain_id;
  EXPECT_THROW(run_federation(cfg, data), ConfigError);

  data = toy_domains(2, 22);
  cfg.lr_embed.base = 1e300;
  try {
    run_federation(cfg, data);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("client"), std::string::npos) << e.what();
  }
}

TEST(Baselines, IndividualAndCentralisedAreDeterministic) {
  auto cfg = toy_config(2, 23);
  const auto data = toy_domains(2, 23);
  EXPECT_EQ(train_individual(cfg, data[0], 0).embed.params(), train_individual(cfg, data[0], 0).embed.params());
  EXPECT_NE(train_individual(cfg, data[0], 0).embed.params(), train_individual(cfg, data[1], 1).embed.params());
  const Model c = train_centralised(cfg, data);
  EXPECT_EQ(c.head.classes(), static_cast<std::size_t>(data[0].identities + data[1].identities));
  EXPECT_EQ(train_centralised(cfg, data).embed.params(), c.embed.params());
}

TEST(Ensembles, ParamAverageOfIdenticalModelsIsIdentity) {
  auto cfg = toy_config(1, 24);
  const auto data = toy_domains(1, 24);
  const Model m = train_individual(cfg, data[0], 0);
  const EmbeddingNet avg = ensemble_param_average({&m.embed, &m.embed, &m.embed});
  for (std::size_t j = 0; j < avg.params().size(); ++j) {
    EXPECT_NEAR(avg.params().values()[j], m.embed.params().values()[j], 1e-15);
  }
  EXPECT_EQ(ensemble_param_average({&m.embed, &m.embed}).params(), m.embed.params());
  EXPECT_THROW(ensemble_param_average({&m.embed}), InputError);
  EmbeddingNet other({8, 3, 5});
  EXPECT_THROW(ensemble_param_average({&m.embed, &other}), InputError);
}

TEST(Ensembles, ConcatWithSelfKeepsRanking) {
  auto cfg = toy_config(1, 25);
  const auto data = toy_domains(2, 25);
  const Model m = train_individual(cfg, data[0], 0);
  Rng rng(1);
  const auto set = make_retrieval_set(data[1], make_query_gallery_split(data[1], rng));
  const auto single = evaluate_embedding(m.embed, set);
  const auto cat = ensemble_feature_concat({&m.embed, &m.embed}, set);
  EXPECT_EQ(cat.rank1, single.rank1);
  EXPECT_EQ(cat.rank5, single.rank5);
  EXPECT_DOUBLE_EQ(cat.map, single.map);
  EXPECT_THROW(ensemble_feature_concat({&m.embed}, set), InputError);
}

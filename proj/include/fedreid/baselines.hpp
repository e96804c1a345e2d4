#pragma once

#include <cstdint>
#include <vector>

#include "fedreid/data.hpp"
#include "fedreid/errors.hpp"
#include "fedreid/eval.hpp"
#include "fedreid/federation.hpp"
#include "fedreid/nn.hpp"
#include "fedreid/optim.hpp"
#include "fedreid/rng.hpp"

namespace fedreid {

// Plain supervised training (cross-entropy only): `epochs` x `steps_per_epoch`
// minibatch steps with the configured schedules. Momentum persists across epochs.
inline void train_supervised(Model& model, const DomainDataset& data, const FederationConfig& cfg,
                             int steps_per_epoch, Rng& rng) {
  if (data.size() == 0) throw ConfigError("supervised training on an empty dataset");
  OptimizerState opt_embed(model.embed.params().size(), cfg.sgd);
  OptimizerState opt_head(model.head.params().size(), cfg.sgd);
  const LossSpec spec{true, false, false, cfg.temperature};
  for (int k = 0; k < cfg.epochs; ++k) {
    const StepRates rates{cfg.lr_embed.at(k), cfg.lr_head.at(k)};
    for (int t = 0; t < steps_per_epoch; ++t) {
      local_step(model, opt_embed, opt_head, nullptr, nullptr, nullptr, data, cfg, spec, rates, rng);
    }
  }
  model.clear_cache();
}

// A model trained on one client's data alone, from its own initialisation.
inline Model train_individual(const FederationConfig& cfg, const DomainDataset& data, int index) {
  Rng rng = make_rng(cfg.seed, Stream::Individual, static_cast<std::uint64_t>(index));
  Model m = cfg.arch.make_model(data.input_dim(), static_cast<std::size_t>(data.identities));
  m.embed.init(rng);
  m.head.init(rng);
  train_supervised(m, data, cfg, cfg.local_steps, rng);
  return m;
}

// Joint training on the union of all client datasets (labels kept disjoint),
// with the same per-epoch sample budget as N clients taking t_max steps.
inline Model train_centralised(const FederationConfig& cfg, const std::vector<DomainDataset>& datasets) {
  const DomainDataset all = merge_domains(datasets);
  Rng rng = make_rng(cfg.seed, Stream::Centralised);
  Model m = cfg.arch.make_model(all.input_dim(), static_cast<std::size_t>(all.identities));
  m.embed.init(rng);
  m.head.init(rng);
  train_supervised(m, all, cfg, cfg.local_steps * static_cast<int>(datasets.size()), rng);
  return m;
}

// One-shot coordinate-wise mean of trained embedding networks.
inline EmbeddingNet ensemble_param_average(const std::vector<const EmbeddingNet*>& models) {
  if (models.size() < 2) throw InputError("parameter averaging needs at least two models");
  EmbeddingNet out = *models.front();
  for (std::size_t m = 1; m < models.size(); ++m) {
    if (models[m]->dims() != out.dims()) throw InputError("parameter averaging: architecture mismatch");
    auto acc = out.params().values();
    auto v = models[m]->params().values();
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += v[j];
  }
  const double n = static_cast<double>(models.size());
  for (double& a : out.params().values()) a /= n;
  out.clear_cache();
  return out;
}

// Embeddings of all models concatenated along the feature axis, then ranked.
inline RetrievalResult ensemble_feature_concat(const std::vector<const EmbeddingNet*>& models, const RetrievalSet& set) {
  if (models.size() < 2) throw InputError("feature concatenation needs at least two models");
  Matrix q = extract_embeddings(*models.front(), set.query);
  Matrix g = extract_embeddings(*models.front(), set.gallery);
  for (std::size_t m = 1; m < models.size(); ++m) {
    if (models[m]->input_dim() != models.front()->input_dim()) {
      throw InputError("feature concatenation: input dims differ");
    }
    q = hconcat(q, extract_embeddings(*models[m], set.query));
    g = hconcat(g, extract_embeddings(*models[m], set.gallery));
  }
  return evaluate_features(q, g, set);
}

}  // namespace fedreid

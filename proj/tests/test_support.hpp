#pragma once

#include <cstdint>
#include <vector>

#include "fedreid/data.hpp"
#include "fedreid/federation.hpp"

namespace fedreid::testing {

inline std::vector<DomainDataset> toy_domains(int n, std::uint64_t seed, int identities = 6, int images = 6,
                                              std::size_t dim = 8) {
  std::vector<DomainDataset> out;
  for (int i = 0; i < n; ++i) {
    DomainSpec s;
    s.domain_id = i;
    s.identities = identities + i;  // unequal identity counts exercise head padding
    s.images_per_identity = images;
    s.input_dim = dim;
    s.latent_dim = dim / 2;
    s.identity_seed = derive_seed(seed, Stream::Data, 100 + static_cast<std::uint64_t>(i));
    s.transform_seed = derive_seed(seed, Stream::Data, 200 + static_cast<std::uint64_t>(i));
    out.push_back(generate_domain(s));
  }
  return out;
}

// Small network, no batch-norm/dropout/augmentation.
inline FederationConfig toy_config(int clients, std::uint64_t seed) {
  FederationConfig c;
  c.clients = clients;
  c.seed = seed;
  c.epochs = 3;
  c.batch = 8;
  c.arch.embed_hidden = {6};
  c.arch.embed_dim = 5;
  c.arch.head_hidden = 7;
  return c;
}

// The same, with every stochastic layer and augmentation switched on.
inline FederationConfig noisy_toy_config(int clients, std::uint64_t seed) {
  FederationConfig c = toy_config(clients, seed);
  c.arch.head.batch_norm = true;
  c.arch.head.keep_prob = 0.75;
  c.augment = AugmentConfig{0.1, 0.05, 0.1};
  return c;
}

inline void vanilla_sgd(FederationConfig& c) {
  c.sgd.momentum = 0.0;
  c.sgd.weight_decay = 0.0;
  c.sgd.nesterov = false;
}

}  // namespace fedreid::testing

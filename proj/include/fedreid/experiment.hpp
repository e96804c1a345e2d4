#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fedreid/baselines.hpp"
#include "fedreid/codec.hpp"
#include "fedreid/config.hpp"
#include "fedreid/data.hpp"
#include "fedreid/eval.hpp"
#include "fedreid/federation.hpp"

namespace fedreid {

// Client domains plus the held-out evaluation domain.
struct Suite {
  std::vector<DomainDataset> train;
  DomainDataset eval;
  RetrievalSet eval_set;
};

// Seed slot of the held-out domain; kept apart from client slots so the
// evaluation domain does not depend on the client count.
inline constexpr std::uint64_t kEvalDomainSlot = 1000;

inline DomainSpec client_domain_spec(const ExperimentConfig& cfg, int i) {
  DomainSpec s = cfg.domain;
  s.domain_id = i;
  s.split = Split::Train;
  s.identity_seed = derive_seed(cfg.master_seed(), Stream::Data, 100 + static_cast<std::uint64_t>(i));
  s.transform_seed = derive_seed(cfg.master_seed(), Stream::Data, 200 + static_cast<std::uint64_t>(i));
  return s;
}

inline DomainSpec eval_domain_spec(const ExperimentConfig& cfg) {
  DomainSpec s = cfg.domain;
  s.domain_id = cfg.fed.clients;
  s.identities = cfg.eval_identities;
  s.images_per_identity = cfg.eval_images;
  s.split = Split::Test;
  s.identity_seed = derive_seed(cfg.master_seed(), Stream::Data, 100 + kEvalDomainSlot);
  s.transform_seed = derive_seed(cfg.master_seed(), Stream::Data, 200 + kEvalDomainSlot);
  return s;
}

inline RetrievalSet make_eval_set(const DomainDataset& ds, std::uint64_t seed) {
  Rng rng = make_rng(seed, Stream::Split);
  return make_retrieval_set(ds, make_query_gallery_split(ds, rng));
}

inline Suite generate_suite(const ExperimentConfig& cfg) {
  Suite s;
  for (int i = 0; i < cfg.fed.clients; ++i) s.train.push_back(generate_domain(client_domain_spec(cfg, i)));
  s.eval = generate_domain(eval_domain_spec(cfg));
  s.eval_set = make_eval_set(s.eval, cfg.master_seed());
  return s;
}

// Dataset files named in the config, generated domains otherwise.
inline Suite load_suite(const ExperimentConfig& cfg) {
  if (cfg.datasets.empty() && cfg.eval_dataset.empty()) return generate_suite(cfg);
  Suite s;
  if (cfg.datasets.empty()) {
    for (int i = 0; i < cfg.fed.clients; ++i) s.train.push_back(generate_domain(client_domain_spec(cfg, i)));
  } else {
    for (const auto& p : cfg.datasets) s.train.push_back(load_dataset(p));
  }
  s.eval = cfg.eval_dataset.empty() ? generate_domain(eval_domain_spec(cfg)) : load_dataset(cfg.eval_dataset);
  s.eval_set = make_eval_set(s.eval, cfg.master_seed());
  return s;
}

inline std::string client_dataset_name(int i) { return "domain_" + std::to_string(i) + ".fdds"; }
inline std::string eval_dataset_name() { return "eval.fdds"; }

// Checkpoint: "FDCK", u16 version, u8 strategy, u32 layer-dim count, u32 dims,
// embedding ParamBlock, CRC32.
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const EmbeddingNet& net, Strategy strategy) {
  ByteWriter w;
  w.text("FDCK");
  w.u16(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(strategy));
  w.u32(static_cast<std::uint32_t>(net.dims().size()));
  for (auto d : net.dims()) w.u32(static_cast<std::uint32_t>(d));
  write_param_block(w, net.params());
  w.crc_from(0);
  return w.take();
}

struct Checkpoint {
  Strategy strategy = Strategy::FedReID;
  EmbeddingNet net;
};

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r = open_container(bytes, "FDCK");
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::MalformedHeader, concat_message("unsupported checkpoint version ", version));
  }
  const auto strategy = r.u8();
  if (strategy > static_cast<std::uint8_t>(Strategy::FedReIDNoExpert)) {
    throw FormatError(FormatError::Kind::MalformedHeader, "unknown strategy tag");
  }
  const auto n = r.u32();
  if (n < 2 || n > 64) throw FormatError(FormatError::Kind::MalformedHeader, "implausible layer count");
  std::vector<std::size_t> dims(n);
  for (auto& d : dims) d = r.u32();
  verify_container_crc(bytes);
  Checkpoint c{static_cast<Strategy>(strategy), EmbeddingNet(dims)};
  ParamBlock p = read_param_block(r);
  if (!p.same_layout(c.net.params())) throw FormatError(FormatError::Kind::MalformedHeader, "parameter layout mismatch");
  c.net.params() = std::move(p);
  return c;
}

inline void save_checkpoint(const std::string& path, const EmbeddingNet& net, Strategy strategy) {
  if (const std::filesystem::path p(path); p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  write_file_bytes(path, encode_checkpoint(net, strategy));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

inline constexpr const char* kHistoryHeader = "epoch,client,loss_c,loss_e,loss_r,selected,rank1,map,wall_ms";

// One row per (epoch, client); rank1/map are empty on epochs without evaluation.
inline std::string history_csv(const std::vector<EpochRecord>& history, bool wall_clock) {
  std::string out = std::string(kHistoryHeader) + "\n";
  for (const auto& rec : history) {
    for (const auto& c : rec.clients) {
      out += std::to_string(rec.epoch) + "," + std::to_string(c.client) + "," +
             detail::format_double(c.losses.classification) + "," + detail::format_double(c.losses.expert) + "," +
             detail::format_double(c.losses.regularisation) + "," + (c.selected ? "1" : "0") + ",";
      if (rec.eval) out += detail::format_double(rec.eval->rank1) + "," + detail::format_double(rec.eval->map);
      else out += ",";
      out += "," + detail::format_double(wall_clock ? rec.wall_ms : 0.0) + "\n";
    }
  }
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out << text;
  if (!out) throw InputError("failed writing " + path);
}

inline std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
  return (std::filesystem::path(cfg.out) / name).string();
}

inline constexpr const char* kMetricsHeader = "name,rank1,rank5,rank10,map";

inline std::string metrics_row(const std::string& name, const RetrievalResult& r) {
  return name + "," + detail::format_double(r.rank1) + "," + detail::format_double(r.rank5) + "," +
         detail::format_double(r.rank10) + "," + detail::format_double(r.map) + "\n";
}

inline FederationConfig federation_config(const ExperimentConfig& cfg) {
  FederationConfig f = cfg.fed;
  f.seed = cfg.master_seed();
  return f;
}

// gen-data: every client domain plus the held-out domain as dataset files.
inline std::vector<std::string> cmd_gen_data(const ExperimentConfig& cfg) {
  const Suite s = generate_suite(cfg);
  std::filesystem::create_directories(cfg.out);
  std::vector<std::string> written;
  for (std::size_t i = 0; i < s.train.size(); ++i) {
    written.push_back(out_path(cfg, client_dataset_name(static_cast<int>(i))));
    save_dataset(s.train[i], written.back());
  }
  written.push_back(out_path(cfg, eval_dataset_name()));
  save_dataset(s.eval, written.back());
  return written;
}

struct TrainOutput {
  FederationResult result;
  EmbeddingNet embedding;
  RetrievalResult final_eval;
};

inline void write_train_outputs(const ExperimentConfig& cfg, const FederationResult& res, const EmbeddingNet& net,
                                const RetrievalResult& final_eval) {
  write_text(out_path(cfg, "history.csv"), history_csv(res.history, cfg.wall_clock));
  save_checkpoint(out_path(cfg, "checkpoint.fdck"), net, cfg.fed.strategy);
  write_text(out_path(cfg, "train_metrics.csv"),
             std::string(kMetricsHeader) + "\n" + metrics_row(to_string(cfg.fed.strategy), final_eval));
}

// train (simulate mode): history.csv, checkpoint.fdck and train_metrics.csv.
inline TrainOutput cmd_train(const ExperimentConfig& cfg) {
  const Suite s = load_suite(cfg);
  RunOptions opts;
  opts.eval_set = &s.eval_set;
  opts.eval_every = cfg.eval_every;
  const FederationConfig fed = federation_config(cfg);
  TrainOutput out{run_federation(fed, s.train, opts), EmbeddingNet(), {}};
  out.embedding = global_embedding(out.result.server, fed, s.train.front().input_dim());
  out.final_eval = evaluate_embedding(out.embedding, s.eval_set);
  std::filesystem::create_directories(cfg.out);
  write_train_outputs(cfg, out.result, out.embedding, out.final_eval);
  return out;
}

// eval: retrieval metrics of a checkpoint on the held-out domain.
inline RetrievalResult cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path) {
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const DomainDataset eval =
      cfg.eval_dataset.empty() ? generate_domain(eval_domain_spec(cfg)) : load_dataset(cfg.eval_dataset);
  if (eval.input_dim() != ck.net.input_dim()) {
    throw InputError(concat_message("checkpoint expects ", ck.net.input_dim(), " features, eval domain has ",
                                    eval.input_dim()));
  }
  const RetrievalResult r = evaluate_embedding(ck.net, make_eval_set(eval, cfg.master_seed()));
  write_text(out_path(cfg, "eval_metrics.csv"), std::string(kMetricsHeader) + "\n" + metrics_row(to_string(ck.strategy), r));
  return r;
}

struct CompareRow {
  std::string name;
  RetrievalResult result;
};

struct CompareOutput {
  std::vector<CompareRow> rows;        // the seven strategy rows
  std::vector<RetrievalResult> individuals;  // per client
};

// compare: every strategy and baseline on one suite. The "individual" row is
// the mean over clients; per-client values go to individual.csv.
inline CompareOutput cmd_compare(const ExperimentConfig& cfg) {
  const Suite s = load_suite(cfg);
  const FederationConfig base = federation_config(cfg);
  const std::size_t dim = s.train.front().input_dim();
  CompareOutput out;

  auto federated = [&](Strategy strategy) {
    FederationConfig f = base;
    f.strategy = strategy;
    const auto res = run_federation(f, s.train);
    return evaluate_embedding(global_embedding(res.server, f, dim), s.eval_set);
  };
  out.rows.push_back({"fedreid", federated(Strategy::FedReID)});
  out.rows.push_back({"fedavg", federated(Strategy::FedAVG)});
  out.rows.push_back({"fedsgd", federated(Strategy::FedSGD)});

  std::vector<Model> individuals;
  for (int i = 0; i < base.clients; ++i) {
    individuals.push_back(train_individual(base, s.train[static_cast<std::size_t>(i)], i));
  }
  RetrievalResult mean;
  for (const auto& m : individuals) {
    out.individuals.push_back(evaluate_embedding(m.embed, s.eval_set));
    const auto& r = out.individuals.back();
    const double w = 1.0 / static_cast<double>(individuals.size());
    mean.rank1 += w * r.rank1;
    mean.rank5 += w * r.rank5;
    mean.rank10 += w * r.rank10;
    mean.map += w * r.map;
  }
  out.rows.push_back({"individual", mean});
  out.rows.push_back({"centralised", evaluate_embedding(train_centralised(base, s.train).embed, s.eval_set)});

  std::vector<const EmbeddingNet*> nets;
  for (const auto& m : individuals) nets.push_back(&m.embed);
  if (nets.size() >= 2) {
    out.rows.push_back({"param-average", evaluate_embedding(ensemble_param_average(nets), s.eval_set)});
    out.rows.push_back({"feat-concat", ensemble_feature_concat(nets, s.eval_set)});
  } else {
    // A single client: both ensembles reduce to that client's model.
    out.rows.push_back({"param-average", out.individuals.front()});
    out.rows.push_back({"feat-concat", out.individuals.front()});
  }

  std::string table = std::string(kMetricsHeader) + "\n";
  for (const auto& row : out.rows) table += metrics_row(row.name, row.result);
  std::string per_client = "client,rank1,rank5,rank10,map\n";
  for (std::size_t i = 0; i < out.individuals.size(); ++i) per_client += metrics_row(std::to_string(i), out.individuals[i]);
  std::filesystem::create_directories(cfg.out);
  write_text(out_path(cfg, "comparison.csv"), table);
  write_text(out_path(cfg, "individual.csv"), per_client);
  return out;
}

}  // namespace fedreid

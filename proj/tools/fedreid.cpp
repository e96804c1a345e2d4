// fedreid: command-line driver for data generation, training, evaluation,
// strategy comparison and the networked server/client roles.
#include <CLI11.hpp>

#include <fedreid/experiment.hpp>
#include <fedreid/wire.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kUsage = 2, kProtocol = 3, kFormat = 4 };

// Flags shared by every subcommand; each maps onto a config key.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, endpoint, strategy;
  std::optional<double> beta, fraction;
  std::optional<int> local_steps, clients;
  std::vector<std::string> sets;  // raw key=value pairs
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "key = value config file");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--endpoint", f.endpoint, "host:port of the server");
  cmd->add_option("--strategy", f.strategy, "fedreid | fedavg | fedsgd");
  cmd->add_option("--beta", f.beta, "privacy noise scale");
  cmd->add_option("--fraction", f.fraction, "client fraction S per epoch");
  cmd->add_option("--local-steps", f.local_steps, "local steps per epoch");
  cmd->add_option("--clients", f.clients, "number of clients");
  cmd->add_option("--set", f.sets, "extra config override key=value (repeatable)");
}

fedreid::ExperimentConfig build_config(const CommonFlags& f, std::optional<fedreid::Mode> mode) {
  std::vector<std::pair<std::string, std::string>> ov;
  auto put = [&](const char* key, const auto& v) {
    if (v) {
      if constexpr (std::is_same_v<std::decay_t<decltype(*v)>, std::string>) {
        ov.emplace_back(key, *v);
      } else if constexpr (std::is_floating_point_v<std::decay_t<decltype(*v)>>) {
        ov.emplace_back(key, fedreid::detail::format_double(*v));
      } else {
        ov.emplace_back(key, std::to_string(*v));
      }
    }
  };
  put("seed", f.seed);
  put("out", f.out);
  put("endpoint", f.endpoint);
  put("strategy", f.strategy);
  put("beta", f.beta);
  put("fraction", f.fraction);
  put("local_steps", f.local_steps);
  put("clients", f.clients);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw fedreid::ConfigError("--set expects key=value, got '" + s + "'");
    ov.emplace_back(fedreid::detail::trim(s.substr(0, eq)), fedreid::detail::trim(s.substr(eq + 1)));
  }
  if (mode) ov.emplace_back("mode", fedreid::to_string(*mode));
  return f.config.empty() ? fedreid::parse_config("", ov) : fedreid::load_config(f.config, ov);
}

void print_metrics(const std::string& name, const fedreid::RetrievalResult& r) {
  std::printf("%-14s rank1 %.4f  rank5 %.4f  rank10 %.4f  mAP %.4f\n", name.c_str(), r.rank1, r.rank5, r.rank10, r.map);
}

void print_epoch(const fedreid::EpochRecord& rec) {
  double lc = 0, le = 0, lr = 0;
  for (const auto& c : rec.clients) {
    lc += c.losses.classification;
    le += c.losses.expert;
    lr += c.losses.regularisation;
  }
  const double n = rec.clients.empty() ? 1.0 : static_cast<double>(rec.clients.size());
  std::printf("epoch %3d  L_c %.4f  L_e %.4f  L_r %.4f", rec.epoch, lc / n, le / n, lr / n);
  if (rec.eval) std::printf("  rank1 %.4f  mAP %.4f", rec.eval->rank1, rec.eval->map);
  std::printf("\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated person re-identification on synthetic multi-domain data"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::string checkpoint, dataset;
  int client_id = -1;

  auto* gen = app.add_subcommand("gen-data", "write client and held-out domain datasets");
  auto* train = app.add_subcommand("train", "run federated training (simulate, or serve/client per config mode)");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out domain");
  auto* compare = app.add_subcommand("compare", "run every strategy and baseline, write comparison.csv");
  auto* serve = app.add_subcommand("serve", "run the aggregation server");
  auto* client = app.add_subcommand("client", "run one client against a server");
  for (auto* c : {gen, train, eval, compare, serve, client}) add_common(c, flags);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default <out>/checkpoint.fdck)");
  client->add_option("--dataset", dataset, "client dataset file");
  client->add_option("--client-id", client_id, "generate this client's domain instead of loading a file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) {
      for (const auto& p : fedreid::cmd_gen_data(build_config(flags, fedreid::Mode::Simulate))) std::printf("wrote %s\n", p.c_str());
    } else if (train->parsed() || serve->parsed()) {
      auto cfg = build_config(flags, serve->parsed() ? std::optional{fedreid::Mode::Serve} : std::nullopt);
      if (cfg.mode == fedreid::Mode::Client) {
        const int n = fedreid::wire::cmd_client(cfg, dataset, client_id);
        std::printf("client finished %d epochs\n", n);
        return kOk;
      }
      fedreid::TrainOutput out;
      if (cfg.mode == fedreid::Mode::Serve) {
        std::printf("serving on %s for %d clients\n", cfg.endpoint.c_str(), cfg.fed.clients);
        std::fflush(stdout);
        out = fedreid::wire::cmd_serve(cfg);
      } else {
        out = fedreid::cmd_train(cfg);
      }
      for (const auto& rec : out.result.history) print_epoch(rec);
      print_metrics(fedreid::to_string(cfg.fed.strategy), out.final_eval);
      std::printf("wrote %s\n", fedreid::out_path(cfg, "history.csv").c_str());
    } else if (eval->parsed()) {
      const auto cfg = build_config(flags, fedreid::Mode::Simulate);
      const std::string path = checkpoint.empty() ? fedreid::out_path(cfg, "checkpoint.fdck") : checkpoint;
      print_metrics("checkpoint", fedreid::cmd_eval(cfg, path));
    } else if (compare->parsed()) {
      const auto cfg = build_config(flags, fedreid::Mode::Simulate);
      for (const auto& row : fedreid::cmd_compare(cfg).rows) print_metrics(row.name, row.result);
      std::printf("wrote %s\n", fedreid::out_path(cfg, "comparison.csv").c_str());
    } else if (client->parsed()) {
      const auto cfg = build_config(flags, fedreid::Mode::Client);
      const int n = fedreid::wire::cmd_client(cfg, dataset, client_id);
      std::printf("client finished %d epochs\n", n);
    }
  } catch (const fedreid::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const fedreid::ProtocolError& e) {
    std::fprintf(stderr, "protocol error: %s\n", e.what());
    return kProtocol;
  } catch (const fedreid::FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kFormat;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kOk;
}

#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedreid/data.hpp"
#include "fedreid/errors.hpp"
#include "fedreid/federation.hpp"

namespace fedreid {

class UnknownKeyError : public ConfigError {
 public:
  explicit UnknownKeyError(const std::string& key)
      : ConfigError("unknown config key '" + key + "'"), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class MissingFieldError : public ConfigError {
 public:
  explicit MissingFieldError(const std::string& key)
      : ConfigError("missing mandatory config key '" + key + "'"), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class RangeError : public ConfigError {
 public:
  RangeError(const std::string& key, const std::string& what)
      : ConfigError("config key '" + key + "': " + what), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

enum class Mode { Simulate, Serve, Client };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::Simulate: return "simulate";
    case Mode::Serve: return "serve";
    case Mode::Client: return "client";
  }
  return "?";
}

// Everything an experiment needs: the federation settings, how to obtain the
// client and evaluation domains, and where to put results.
struct ExperimentConfig {
  FederationConfig fed = desk_defaults();
  std::optional<std::uint64_t> seed;

  DomainSpec domain = default_domain();  // template for generated client domains
  int eval_identities = 100;
  int eval_images = 6;
  std::vector<std::string> datasets;  // client dataset files; empty = generate
  std::string eval_dataset;           // held-out domain file; empty = generate

  int eval_every = 10;
  std::string out = "out";
  Mode mode = Mode::Simulate;
  std::string endpoint = "127.0.0.1:7070";
  double timeout_s = 60.0;
  bool wall_clock = true;  // false writes wall_ms = 0 for byte-reproducible histories

  static FederationConfig desk_defaults() {
    FederationConfig f;
    f.lr_embed = {0.1, 0.1, 40};
    f.lr_head = {0.3, 0.1, 40};
    f.reset_optimizer = false;
    f.arch.head.batch_norm = true;
    f.arch.head.keep_prob = 0.75;
    f.augment = {0.1, 0.05, 0.1};
    return f;
  }

  static DomainSpec default_domain() {
    DomainSpec d;
    d.identities = 20;
    d.images_per_identity = 8;
    d.input_dim = 16;
    d.latent_dim = 6;
    d.identity_spread = 0.6;
    d.transform_shift = 0.3;
    d.translation = 1.0;
    d.nuisance_scale = 1.0;
    d.noise_scale = 0.1;
    return d;
  }

  std::uint64_t master_seed() const {
    if (!seed) throw MissingFieldError("seed");
    return *seed;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw RangeError(key, "'" + v + "' is not a valid number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw RangeError(key, "'" + v + "' is not a boolean");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct KeySpec {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

// Keys in the order they are written back out.
inline const std::vector<std::pair<std::string, KeySpec>>& config_keys() {
  using C = ExperimentConfig;
  using S = const std::string&;
  static const std::vector<std::pair<std::string, KeySpec>> keys = {
      {"seed", {[](C& c, S v) { c.seed = parse_number<std::uint64_t>("seed", v); },
                [](const C& c) { return c.seed ? std::to_string(*c.seed) : std::string(); }}},
      {"strategy", {[](C& c, S v) { c.fed.strategy = parse_strategy(v); },
                    [](const C& c) { return to_string(c.fed.strategy); }}},
      {"clients", {[](C& c, S v) { c.fed.clients = parse_number<int>("clients", v); },
                   [](const C& c) { return std::to_string(c.fed.clients); }}},
      {"fraction", {[](C& c, S v) { c.fed.fraction = parse_number<double>("fraction", v); },
                    [](const C& c) { return format_double(c.fed.fraction); }}},
      {"beta", {[](C& c, S v) { c.fed.beta = parse_number<double>("beta", v); },
                [](const C& c) { return format_double(c.fed.beta); }}},
      {"noise", {[](C& c, S v) { c.fed.noise = parse_noise_placement(v); },
                 [](const C& c) { return to_string(c.fed.noise); }}},
      {"local_steps", {[](C& c, S v) { c.fed.local_steps = parse_number<int>("local_steps", v); },
                       [](const C& c) { return std::to_string(c.fed.local_steps); }}},
      {"epochs", {[](C& c, S v) { c.fed.epochs = parse_number<int>("epochs", v); },
                  [](const C& c) { return std::to_string(c.fed.epochs); }}},
      {"temperature", {[](C& c, S v) { c.fed.temperature = parse_number<double>("temperature", v); },
                       [](const C& c) { return format_double(c.fed.temperature); }}},
      {"batch", {[](C& c, S v) { c.fed.batch = parse_number<std::size_t>("batch", v); },
                 [](const C& c) { return std::to_string(c.fed.batch); }}},
      {"lr_embed", {[](C& c, S v) { c.fed.lr_embed.base = parse_number<double>("lr_embed", v); },
                    [](const C& c) { return format_double(c.fed.lr_embed.base); }}},
      {"lr_head", {[](C& c, S v) { c.fed.lr_head.base = parse_number<double>("lr_head", v); },
                   [](const C& c) { return format_double(c.fed.lr_head.base); }}},
      {"lr_decay", {[](C& c, S v) { c.fed.lr_embed.factor = c.fed.lr_head.factor = parse_number<double>("lr_decay", v); },
                    [](const C& c) { return format_double(c.fed.lr_embed.factor); }}},
      {"lr_period", {[](C& c, S v) { c.fed.lr_embed.period = c.fed.lr_head.period = parse_number<int>("lr_period", v); },
                     [](const C& c) { return std::to_string(c.fed.lr_embed.period); }}},
      {"momentum", {[](C& c, S v) { c.fed.sgd.momentum = parse_number<double>("momentum", v); },
                    [](const C& c) { return format_double(c.fed.sgd.momentum); }}},
      {"weight_decay", {[](C& c, S v) { c.fed.sgd.weight_decay = parse_number<double>("weight_decay", v); },
                        [](const C& c) { return format_double(c.fed.sgd.weight_decay); }}},
      {"nesterov", {[](C& c, S v) { c.fed.sgd.nesterov = parse_bool("nesterov", v); },
                    [](const C& c) { return std::string(c.fed.sgd.nesterov ? "true" : "false"); }}},
      {"reset_optimizer", {[](C& c, S v) { c.fed.reset_optimizer = parse_bool("reset_optimizer", v); },
                           [](const C& c) { return std::string(c.fed.reset_optimizer ? "true" : "false"); }}},
      {"threads", {[](C& c, S v) { c.fed.threads = parse_number<int>("threads", v); },
                   [](const C& c) { return std::to_string(c.fed.threads); }}},
      {"embed_hidden", {[](C& c, S v) {
                          c.fed.arch.embed_hidden.clear();
                          for (const auto& h : split_list(v)) c.fed.arch.embed_hidden.push_back(parse_number<std::size_t>("embed_hidden", h));
                        },
                        [](const C& c) {
                          std::string s;
                          for (auto h : c.fed.arch.embed_hidden) s += (s.empty() ? "" : ",") + std::to_string(h);
                          return s;
                        }}},
      {"embed_dim", {[](C& c, S v) { c.fed.arch.embed_dim = parse_number<std::size_t>("embed_dim", v); },
                     [](const C& c) { return std::to_string(c.fed.arch.embed_dim); }}},
      {"head_hidden", {[](C& c, S v) { c.fed.arch.head_hidden = parse_number<std::size_t>("head_hidden", v); },
                       [](const C& c) { return std::to_string(c.fed.arch.head_hidden); }}},
      {"batch_norm", {[](C& c, S v) { c.fed.arch.head.batch_norm = parse_bool("batch_norm", v); },
                      [](const C& c) { return std::string(c.fed.arch.head.batch_norm ? "true" : "false"); }}},
      {"keep_prob", {[](C& c, S v) { c.fed.arch.head.keep_prob = parse_number<double>("keep_prob", v); },
                     [](const C& c) { return format_double(c.fed.arch.head.keep_prob); }}},
      {"augment_jitter", {[](C& c, S v) { c.fed.augment.jitter = parse_number<double>("augment_jitter", v); },
                          [](const C& c) { return format_double(c.fed.augment.jitter); }}},
      {"augment_dropout", {[](C& c, S v) { c.fed.augment.dropout = parse_number<double>("augment_dropout", v); },
                           [](const C& c) { return format_double(c.fed.augment.dropout); }}},
      {"augment_scale", {[](C& c, S v) { c.fed.augment.scale_jitter = parse_number<double>("augment_scale", v); },
                         [](const C& c) { return format_double(c.fed.augment.scale_jitter); }}},
      {"identities", {[](C& c, S v) { c.domain.identities = parse_number<int>("identities", v); },
                      [](const C& c) { return std::to_string(c.domain.identities); }}},
      {"images_per_identity", {[](C& c, S v) { c.domain.images_per_identity = parse_number<int>("images_per_identity", v); },
                               [](const C& c) { return std::to_string(c.domain.images_per_identity); }}},
      {"input_dim", {[](C& c, S v) { c.domain.input_dim = parse_number<std::size_t>("input_dim", v); },
                     [](const C& c) { return std::to_string(c.domain.input_dim); }}},
      {"latent_dim", {[](C& c, S v) { c.domain.latent_dim = parse_number<std::size_t>("latent_dim", v); },
                      [](const C& c) { return std::to_string(c.domain.latent_dim); }}},
      {"identity_spread", {[](C& c, S v) { c.domain.identity_spread = parse_number<double>("identity_spread", v); },
                           [](const C& c) { return format_double(c.domain.identity_spread); }}},
      {"transform_shift", {[](C& c, S v) { c.domain.transform_shift = parse_number<double>("transform_shift", v); },
                           [](const C& c) { return format_double(c.domain.transform_shift); }}},
      {"translation", {[](C& c, S v) { c.domain.translation = parse_number<double>("translation", v); },
                       [](const C& c) { return format_double(c.domain.translation); }}},
      {"nuisance_scale", {[](C& c, S v) { c.domain.nuisance_scale = parse_number<double>("nuisance_scale", v); },
                          [](const C& c) { return format_double(c.domain.nuisance_scale); }}},
      {"noise_scale", {[](C& c, S v) { c.domain.noise_scale = parse_number<double>("noise_scale", v); },
                       [](const C& c) { return format_double(c.domain.noise_scale); }}},
      {"eval_identities", {[](C& c, S v) { c.eval_identities = parse_number<int>("eval_identities", v); },
                           [](const C& c) { return std::to_string(c.eval_identities); }}},
      {"eval_images", {[](C& c, S v) { c.eval_images = parse_number<int>("eval_images", v); },
                       [](const C& c) { return std::to_string(c.eval_images); }}},
      {"datasets", {[](C& c, S v) { c.datasets = split_list(v); },
                    [](const C& c) {
                      std::string s;
                      for (const auto& p : c.datasets) s += (s.empty() ? "" : ",") + p;
                      return s;
                    }}},
      {"eval_dataset", {[](C& c, S v) { c.eval_dataset = v; }, [](const C& c) { return c.eval_dataset; }}},
      {"eval_every", {[](C& c, S v) { c.eval_every = parse_number<int>("eval_every", v); },
                      [](const C& c) { return std::to_string(c.eval_every); }}},
      {"out", {[](C& c, S v) { c.out = v; }, [](const C& c) { return c.out; }}},
      {"mode", {[](C& c, S v) {
                  if (v == "simulate") c.mode = Mode::Simulate;
                  else if (v == "serve") c.mode = Mode::Serve;
                  else if (v == "client") c.mode = Mode::Client;
                  else throw RangeError("mode", "expected simulate, serve or client, got '" + v + "'");
                },
                [](const C& c) { return to_string(c.mode); }}},
      {"endpoint", {[](C& c, S v) { c.endpoint = v; }, [](const C& c) { return c.endpoint; }}},
      {"timeout_s", {[](C& c, S v) { c.timeout_s = parse_number<double>("timeout_s", v); },
                     [](const C& c) { return format_double(c.timeout_s); }}},
      {"wall_clock", {[](C& c, S v) { c.wall_clock = parse_bool("wall_clock", v); },
                      [](const C& c) { return std::string(c.wall_clock ? "true" : "false"); }}},
  };
  return keys;
}

}  // namespace detail

// Sets one key; throws UnknownKeyError or RangeError.
inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, spec] : detail::config_keys()) {
    if (name == key) {
      try {
        spec.set(cfg, value);
      } catch (const RangeError&) {
        throw;
      } catch (const ConfigError& e) {
        throw RangeError(key, e.what());
      }
      return;
    }
  }
  throw UnknownKeyError(key);
}

// Range checks with the offending key named.
inline void validate(const ExperimentConfig& c) {
  c.master_seed();
  const auto& f = c.fed;
  if (f.clients < 1) throw RangeError("clients", "must be >= 1");
  if (!(f.fraction > 0.0 && f.fraction <= 1.0)) throw RangeError("fraction", "must be in (0, 1]");
  if (!(f.beta >= 0.0 && f.beta <= 1.0)) throw RangeError("beta", "must be in [0, 1]");
  if (f.local_steps < 1) throw RangeError("local_steps", "must be >= 1");
  if (f.epochs < 0) throw RangeError("epochs", "must be >= 0");
  if (!(f.temperature > 0.0)) throw RangeError("temperature", "must be > 0");
  if (f.batch < 1) throw RangeError("batch", "must be >= 1");
  if (f.lr_embed.base < 0) throw RangeError("lr_embed", "must be >= 0");
  if (f.lr_head.base < 0) throw RangeError("lr_head", "must be >= 0");
  if (!(f.lr_embed.factor > 0.0 && f.lr_embed.factor <= 1.0)) throw RangeError("lr_decay", "must be in (0, 1]");
  if (f.lr_embed.period < 1) throw RangeError("lr_period", "must be >= 1");
  if (f.sgd.momentum < 0 || f.sgd.momentum >= 1) throw RangeError("momentum", "must be in [0, 1)");
  if (f.sgd.weight_decay < 0) throw RangeError("weight_decay", "must be >= 0");
  if (f.threads < 1) throw RangeError("threads", "must be >= 1");
  if (f.arch.embed_dim < 1) throw RangeError("embed_dim", "must be >= 1");
  for (auto h : f.arch.embed_hidden)
    if (h < 1) throw RangeError("embed_hidden", "widths must be >= 1");
  if (f.arch.head_hidden < 1) throw RangeError("head_hidden", "must be >= 1");
  if (!(f.arch.head.keep_prob > 0.0 && f.arch.head.keep_prob <= 1.0)) throw RangeError("keep_prob", "must be in (0, 1]");
  if (f.augment.jitter < 0) throw RangeError("augment_jitter", "must be >= 0");
  if (f.augment.dropout < 0 || f.augment.dropout > 1) throw RangeError("augment_dropout", "must be in [0, 1]");
  if (f.augment.scale_jitter < 0) throw RangeError("augment_scale", "must be >= 0");
  if (c.domain.identities < 2) throw RangeError("identities", "must be >= 2");
  if (c.domain.images_per_identity < 2) throw RangeError("images_per_identity", "must be >= 2");
  if (c.domain.input_dim < 1) throw RangeError("input_dim", "must be >= 1");
  if (c.domain.latent_dim < 1 || c.domain.latent_dim > c.domain.input_dim) {
    throw RangeError("latent_dim", "must be in [1, input_dim]");
  }
  if (c.domain.identity_spread < 0) throw RangeError("identity_spread", "must be >= 0");
  if (c.domain.transform_shift < 0) throw RangeError("transform_shift", "must be >= 0");
  if (c.domain.translation < 0) throw RangeError("translation", "must be >= 0");
  if (c.domain.nuisance_scale < 0) throw RangeError("nuisance_scale", "must be >= 0");
  if (c.domain.noise_scale < 0) throw RangeError("noise_scale", "must be >= 0");
  if (c.eval_identities < 2) throw RangeError("eval_identities", "must be >= 2");
  if (c.eval_images < 2) throw RangeError("eval_images", "must be >= 2");
  if (c.eval_every < 0) throw RangeError("eval_every", "must be >= 0");
  if (!(c.timeout_s > 0)) throw RangeError("timeout_s", "must be > 0");
  if (!c.datasets.empty() && c.datasets.size() != static_cast<std::size_t>(f.clients)) {
    throw RangeError("datasets", concat_message("lists ", c.datasets.size(), " files for ", f.clients, " clients"));
  }
  if (c.mode == Mode::Simulate) {
    for (const auto& p : c.datasets)
      if (!std::filesystem::exists(p)) throw RangeError("datasets", "file not found: " + p);
    if (!c.eval_dataset.empty() && !std::filesystem::exists(c.eval_dataset)) {
      throw RangeError("eval_dataset", "file not found: " + c.eval_dataset);
    }
  }
}

// Flat "key = value" text; '#' starts a comment. Later keys override earlier
// ones, then `overrides` are applied in order. The result is validated.
inline ExperimentConfig parse_config(const std::string& text,
                                     const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(concat_message("line ", lineno, ": expected key = value"));
    set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
  validate(cfg);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path,
                                    const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

// Every key with its current value; parse_config(to_text(c)) reproduces c.
inline std::string to_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& [name, spec] : detail::config_keys()) {
    const std::string v = spec.get(c);
    if (v.empty()) continue;
    out += name + " = " + v + "\n";
  }
  return out;
}

}  // namespace fedreid

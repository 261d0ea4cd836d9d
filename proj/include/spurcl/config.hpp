#pragma once

// Run configuration: one JSON document drives generation, training, the
// multi-head protocol, feature analysis and reporting.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "spurcl/error.hpp"
#include "spurcl/io.hpp"
#include "spurcl/protocol.hpp"
#include "spurcl/train.hpp"

namespace spurcl {

using io::JsonReader;
using io::ScenarioManifest;

struct ProtocolSection {
  ProtocolConfig train;
  std::string trunk = "random_projection";  // random_projection | pretrained | identity
  std::size_t width = 128;
  // pretrained trunk only
  std::vector<std::size_t> pretrain_hidden = {128};
  int pretrain_epochs = 20;
  int pretrain_samples = 2000;
};

struct AnalysisSection {
  double tau = 0.2;
  bool skip_global_checks = false;
};

struct GridSection {
  std::vector<Method> methods;
  std::vector<double> correlation_p;
  std::vector<double> lambda_penalty;
  std::vector<double> lr;
  std::vector<std::size_t> buffer_per_class;

  std::size_t size() const {
    auto n = [](std::size_t k) { return k == 0 ? std::size_t{1} : k; };
    return n(methods.size()) * n(correlation_p.size()) * n(lambda_penalty.size()) * n(lr.size()) *
           n(buffer_per_class.size());
  }
};

struct RunConfig {
  ScenarioManifest scenario;
  /// Set when the scenario came from a manifest file; its seed is then fixed
  /// and run seeds only drive training.
  std::optional<std::string> manifest_path;
  TrainerConfig trainer;
  bool per_epoch = false;
  ProtocolSection protocol;
  AnalysisSection analysis;
  std::string output_dir = "out";
  std::vector<std::uint64_t> seeds = {0};
  GridSection grid;
};

namespace detail {

template <typename T>
std::vector<T> read_list(const JsonReader& r, const std::string& key) {
  if (!r.has(key)) return {};
  const auto& v = r.raw(key);
  if (!v.is_array()) throw ConfigError(r.field(key), "expected a list");
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::string path = r.field(key) + "[" + std::to_string(i) + "]";
    if constexpr (std::is_integral_v<T>) {
      if (!v[i].is_number_integer() || (v[i].is_number_integer() && !v[i].is_number_unsigned() && v[i].get<long long>() < 0))
        throw ConfigError(path, "expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v[i].is_number()) throw ConfigError(path, "expected a number");
    } else {
      if (!v[i].is_string()) throw ConfigError(path, "expected a string");
    }
    out.push_back(v[i].get<T>());
  }
  return out;
}

inline ScenarioManifest read_scenario_section(const JsonReader& r) {
  ScenarioManifest m;
  m.seed = r.get_or<std::uint64_t>("seed", m.seed);
  m.n_tasks = r.get_or("n_tasks", m.n_tasks);
  m.correlation_p = r.get_or("correlation_p", m.correlation_p);
  m.support_s = r.get_or("support_s", m.support_s);
  m.square_size = r.get_or("square_size", m.square_size);
  if (r.has("colors")) m.colors = io::read_colors(r.raw("colors"), r.field("colors"));
  m.source = r.get_or<std::string>("source", m.source);
  if (m.source == "synth") {
    if (r.has("synth")) m.synth = io::read_synth(r.object("synth"));
  } else if (m.source == "cifar10") {
    const auto c = r.object("cifar");
    m.cifar.train_files = c.get<std::vector<std::string>>("train_files");
    m.cifar.test_files = c.get<std::vector<std::string>>("test_files");
    m.cifar.train_per_task = c.get_or<std::size_t>("train_per_task", 0);
    m.cifar.eval_per_task = c.get_or<std::size_t>("eval_per_task", 0);
    m.cifar.clean_test_size = c.get_or<std::size_t>("clean_test_size", 0);
    c.reject_unknown();
  } else {
    throw ConfigError(r.field("source"), "expected \"synth\" or \"cifar10\"");
  }
  r.reject_unknown();
  if (!m.colors.empty() && m.colors.size() != static_cast<std::size_t>(m.n_tasks))
    throw ConfigError(r.field("colors"), "expected one color pair per task");
  if (m.source == "synth") validate(io::to_synth_spec(m));
  else validate(io::to_spurious_spec(m));
  return m;
}

inline TrainerConfig read_trainer_section(const JsonReader& r) {
  TrainerConfig t;
  if (r.has("method")) t.method = parse_method(r.get<std::string>("method"), r.field("method"));
  t.epochs_per_task = r.get_or("epochs_per_task", t.epochs_per_task);
  t.batch_size = r.get_or("batch_size", t.batch_size);
  t.lr = r.get_or("lr", t.lr);
  t.momentum = r.get_or("momentum", t.momentum);
  t.lambda_penalty = r.get_or("lambda_penalty", t.lambda_penalty);
  t.penalty_warmup_epochs = r.get_or("penalty_warmup_epochs", t.penalty_warmup_epochs);
  t.eta_dro = r.get_or("eta_dro", t.eta_dro);
  t.lambda_ib = r.get_or("lambda_ib", t.lambda_ib);
  t.buffer_per_class = r.get_or("buffer_per_class", t.buffer_per_class);
  if (r.has("pretrained_trunk")) t.pretrained_trunk = r.get<std::string>("pretrained_trunk");
  t.dropout_rate = r.get_or("dropout_rate", t.dropout_rate);
  if (r.has("hidden")) t.hidden = read_list<std::size_t>(r, "hidden");
  if (r.has("head")) t.head = nn::parse_head_kind(r.get<std::string>("head"), r.field("head"));
  r.reject_unknown();
  validate(t);
  return t;
}

inline void read_eval_section(const JsonReader& r, RunConfig& c) {
  c.per_epoch = r.get_or("per_epoch", c.per_epoch);
  if (r.has("protocol")) {
    const auto p = r.object("protocol");
    auto& s = c.protocol;
    s.train.epochs_per_task = p.get_or("epochs_per_task", s.train.epochs_per_task);
    s.train.batch_size = p.get_or("batch_size", s.train.batch_size);
    s.train.lr = p.get_or("lr", s.train.lr);
    s.train.momentum = p.get_or("momentum", s.train.momentum);
    s.trunk = p.get_or<std::string>("trunk", s.trunk);
    if (s.trunk != "random_projection" && s.trunk != "pretrained" && s.trunk != "identity")
      throw ConfigError(p.field("trunk"), "expected random_projection, pretrained or identity");
    s.width = p.get_or("width", s.width);
    if (p.has("pretrain_hidden")) s.pretrain_hidden = read_list<std::size_t>(p, "pretrain_hidden");
    s.pretrain_epochs = p.get_or("pretrain_epochs", s.pretrain_epochs);
    s.pretrain_samples = p.get_or("pretrain_samples", s.pretrain_samples);
    p.reject_unknown();
    validate(s.train);
    if (s.width == 0) throw ConfigError(p.field("width"), "must be positive");
  }
  if (r.has("analysis")) {
    const auto a = r.object("analysis");
    c.analysis.tau = a.get_or("tau", c.analysis.tau);
    c.analysis.skip_global_checks = a.get_or("skip_global_checks", c.analysis.skip_global_checks);
    a.reject_unknown();
    if (!(c.analysis.tau > 0)) throw ConfigError(a.field("tau"), "must be positive");
  }
  r.reject_unknown();
}

inline GridSection read_grid_section(const JsonReader& r) {
  GridSection g;
  for (const auto& s : read_list<std::string>(r, "method")) g.methods.push_back(parse_method(s, r.field("method")));
  g.correlation_p = read_list<double>(r, "correlation_p");
  g.lambda_penalty = read_list<double>(r, "lambda_penalty");
  g.lr = read_list<double>(r, "lr");
  g.buffer_per_class = read_list<std::size_t>(r, "buffer_per_class");
  r.reject_unknown();
  for (double p : g.correlation_p)
    if (!(p >= 0 && p <= 1)) throw ConfigError(r.field("correlation_p"), "values must be in [0,1]");
  for (double l : g.lambda_penalty)
    if (!(l >= 0)) throw ConfigError(r.field("lambda_penalty"), "values must be >= 0");
  for (double l : g.lr)
    if (!(l >= 0)) throw ConfigError(r.field("lr"), "values must be >= 0");
  return g;
}

}  // namespace detail

/// Parse a run config. Relative paths inside are resolved against `base_dir`.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  JsonReader r(j, "");
  RunConfig c;
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return (path.is_relative() && !base_dir.empty() ? base_dir / path : path).string();
  };
  if (r.has("scenario")) {
    const auto s = r.object("scenario");
    if (s.has("manifest")) {
      c.manifest_path = resolve(s.get<std::string>("manifest"));
      s.reject_unknown();
      try {
        c.scenario = io::read_manifest(nlohmann::json::parse(io::read_text(*c.manifest_path)));
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(*c.manifest_path + ": " + e.what());
      }
    } else {
      c.scenario = detail::read_scenario_section(s);
    }
  }
  for (auto& f : c.scenario.cifar.train_files) f = resolve(f);
  for (auto& f : c.scenario.cifar.test_files) f = resolve(f);
  if (r.has("trainer")) c.trainer = detail::read_trainer_section(r.object("trainer"));
  if (c.trainer.pretrained_trunk) c.trainer.pretrained_trunk = resolve(*c.trainer.pretrained_trunk);
  if (r.has("eval")) detail::read_eval_section(r.object("eval"), c);
  c.output_dir = r.get_or<std::string>("output_dir", c.output_dir);
  if (r.has("seeds")) {
    c.seeds = detail::read_list<std::uint64_t>(r, "seeds");
    if (c.seeds.empty()) throw ConfigError("seeds", "need at least one seed");
  }
  if (r.has("grid")) c.grid = detail::read_grid_section(r.object("grid"));
  r.reject_unknown();
  return c;
}

/// One cell of the seed x grid cross product.
struct RunSpec {
  std::string run_id;
  ScenarioManifest scenario;
  TrainerConfig trainer;
  std::uint64_t seed = 0;
};

inline std::string run_id_for(const RunSpec& s) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    std::string out = buf;
    for (auto& ch : out)
      if (ch == '.') ch = 'p';
    return out;
  };
  return std::string(to_string(s.trainer.method)) + "_corr" + num(s.scenario.correlation_p) + "_lam" +
         num(s.trainer.lambda_penalty) + "_lr" + num(s.trainer.lr) + "_buf" +
         std::to_string(s.trainer.buffer_per_class) + "_seed" + std::to_string(s.seed);
}

/// Expand the grid in a fixed order: method, correlation, lambda, lr, buffer,
/// then seed (innermost).
inline std::vector<RunSpec> expand_runs(const RunConfig& c) {
  const auto& g = c.grid;
  auto or_default = [](const auto& list, auto fallback) {
    using T = std::decay_t<decltype(fallback)>;
    return list.empty() ? std::vector<T>{fallback} : std::vector<T>(list.begin(), list.end());
  };
  std::vector<RunSpec> out;
  for (Method m : or_default(g.methods, c.trainer.method))
    for (double p : or_default(g.correlation_p, c.scenario.correlation_p))
      for (double lam : or_default(g.lambda_penalty, c.trainer.lambda_penalty))
        for (double lr : or_default(g.lr, c.trainer.lr))
          for (std::size_t n : or_default(g.buffer_per_class, c.trainer.buffer_per_class))
            for (std::uint64_t seed : c.seeds) {
              RunSpec s;
              s.scenario = c.scenario;
              s.scenario.correlation_p = p;
              if (!c.manifest_path) s.scenario.seed = seed;
              s.trainer = c.trainer;
              s.trainer.method = m;
              s.trainer.lambda_penalty = lam;
              s.trainer.lr = lr;
              s.trainer.buffer_per_class = n;
              s.trainer.seed = seed;
              s.trainer.per_epoch_eval = c.per_epoch;
              s.seed = seed;
              s.run_id = run_id_for(s);
              out.push_back(std::move(s));
            }
  return out;
}

inline nlohmann::json trainer_to_json(const TrainerConfig& t) {
  nlohmann::json j = {{"method", to_string(t.method)},
                      {"epochs_per_task", t.epochs_per_task},
                      {"batch_size", t.batch_size},
                      {"lr", t.lr},
                      {"momentum", t.momentum},
                      {"lambda_penalty", t.lambda_penalty},
                      {"penalty_warmup_epochs", t.penalty_warmup_epochs},
                      {"eta_dro", t.eta_dro},
                      {"lambda_ib", t.lambda_ib},
                      {"buffer_per_class", t.buffer_per_class},
                      {"dropout_rate", t.dropout_rate},
                      {"hidden", t.hidden},
                      {"head", nn::to_string(t.head)},
                      {"seed", t.seed}};
  if (t.pretrained_trunk) j["pretrained_trunk"] = *t.pretrained_trunk;
  return j;
}

}  // namespace spurcl

#pragma once

// Subcommands behind the spurcl executable. Each reads a RunConfig and
// writes its artifacts under the output directory.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "spurcl/config.hpp"
#include "spurcl/features.hpp"
#include "spurcl/io.hpp"
#include "spurcl/protocol.hpp"
#include "spurcl/report.hpp"
#include "spurcl/train.hpp"

namespace spurcl::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kConfigError = 1, kIoError = 2, kRuntimeError = 3 };

struct Overrides {
  std::optional<std::string> out;
  std::optional<std::vector<std::uint64_t>> seeds;
  bool per_epoch = false;
  bool quiet = false;
};

class Log {
 public:
  explicit Log(bool quiet = false) : quiet_(quiet) {}
  void operator()(const std::string& msg) const {
    if (quiet_) return;
    std::lock_guard lock(mu_);
    std::cerr << msg << "\n";
  }

 private:
  bool quiet_;
  mutable std::mutex mu_;
};

inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("--seeds", "expected comma-separated non-negative integers, got '" + s + "'");
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw ConfigError("--seeds", "need at least one seed");
  return out;
}

inline RunConfig load_config(const std::optional<std::string>& path, const Overrides& o) {
  RunConfig c;
  if (path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_text(*path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(*path, std::string("invalid JSON: ") + e.what());
    }
    c = parse_run_config(j, fs::path(*path).parent_path());
  }
  if (o.out) c.output_dir = *o.out;
  if (o.seeds) c.seeds = *o.seeds;
  if (o.per_epoch) c.per_epoch = true;
  return c;
}

/// Run `n` jobs on a bounded pool of worker threads. Results are indexed by
/// job, so output order does not depend on scheduling. The first exception
/// is rethrown after all workers stop.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t max_workers = 0) {
  std::size_t workers = max_workers ? max_workers : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline ScenarioManifest scenario_for_seed(const RunConfig& c, std::uint64_t seed) {
  ScenarioManifest m = c.scenario;
  if (!c.manifest_path) m.seed = seed;
  return m;
}

inline std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------

/// Materialize each seed's scenario: resolved manifest plus SPFV files per
/// task split and the clean test set.
inline int cmd_generate(const RunConfig& c, const Log& log) {
  for (std::uint64_t seed : c.seeds) {
    const fs::path dir = fs::path(c.output_dir) / "scenario" / ("seed_" + std::to_string(seed));
    ScenarioManifest resolved;
    const Scenario sc = build_scenario(scenario_for_seed(c, seed), &resolved);
    io::write_text(dir / "manifest.json", write_manifest(resolved).dump(2) + "\n");
    for (const auto& t : sc.tasks) {
      io::write_file(dir / ("task_" + std::to_string(t.task_id) + "_train.spfv"), io::write_spfv(t.train));
      io::write_file(dir / ("task_" + std::to_string(t.task_id) + "_eval.spfv"), io::write_spfv(t.eval_spurious));
    }
    io::write_file(dir / "clean_test.spfv", io::write_spfv(sc.clean_test));
    log("generated " + std::to_string(sc.tasks.size()) + " tasks in " + dir.string());
  }
  return kOk;
}

inline void write_run(const fs::path& dir, const RunRecord& rec) {
  io::write_text(dir / "record.csv", io::run_record_csv(rec));
  io::write_text(dir / "summary.json", io::run_summary(rec).dump(2) + "\n");
}

/// Train every seed x grid cell and write record.csv, summary.json and a
/// sidecar meta.json (the only file with timestamps) per run.
inline int cmd_train(const RunConfig& c, const Log& log) {
  const auto runs = expand_runs(c);
  log("grid: " + std::to_string(c.grid.size()) + " cell(s) x " + std::to_string(c.seeds.size()) + " seed(s) = " +
      std::to_string(runs.size()) + " run(s)");
  std::map<std::string, int> ids;
  for (const auto& r : runs)
    if (++ids[r.run_id] > 1) throw ConfigError("grid", "duplicate run " + r.run_id);
  parallel_for(runs.size(), [&](std::size_t i) {
    const RunSpec& spec = runs[i];
    const std::string started = timestamp_utc();
    const Scenario sc = build_scenario(spec.scenario);
    RunOptions opt;
    opt.run_id = spec.run_id;
    opt.config_snapshot = {{"scenario", write_manifest(spec.scenario)}, {"trainer", trainer_to_json(spec.trainer)}};
    const RunRecord rec = run_scenario(sc, spec.trainer, opt);
    const fs::path dir = fs::path(c.output_dir) / "runs" / spec.run_id;
    write_run(dir, rec);
    io::write_text(dir / "meta.json", nlohmann::json{{"started", started}, {"finished", timestamp_utc()}}.dump(2) + "\n");
    log(spec.run_id + ": omega " + io::format_double(rec.omega()));
  });
  return kOk;
}

inline nlohmann::json gap_report_json(const GapReport& r, std::uint64_t seed) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : r.heads) {
    nlohmann::json per_task = nlohmann::json::array();
    for (const auto& t : h.per_task)
      per_task.push_back({{"task", t.task}, {"local", t.local}, {"global", t.global}, {"n", t.n}});
    heads.push_back({{"head", nn::to_string(h.kind)},
                     {"a_local", h.a_local},
                     {"a_global", h.a_global},
                     {"gap", h.gap},
                     {"per_task", per_task}});
  }
  return {{"seed", seed},
          {"n_tasks", r.n_tasks},
          {"n_classes", r.n_classes},
          {"frozen_heads_intact", r.frozen_heads_intact},
          {"heads", heads}};
}

/// The frozen feature map the protocol runs on, per the eval.protocol section.
inline nn::ModelParams protocol_trunk(const RunConfig& c, const ScenarioManifest& m, const Scenario& sc,
                                      std::uint64_t seed) {
  const auto& p = c.protocol;
  if (p.trunk == "identity") return identity_trunk(sc.input_dim());
  if (p.trunk == "random_projection") return random_projection_trunk(sc.input_dim(), p.width, seed);
  if (m.source != "synth") throw ConfigError("eval.protocol.trunk", "pretrained trunk needs a synthetic scenario");
  // Held-out clean data from the same generator, full support, no patterns.
  const SynthModel model = make_synth_model(to_synth_spec(m));
  std::vector<int> all;
  std::vector<std::vector<int>> full(static_cast<std::size_t>(model.spec.n_classes));
  for (int y = 0; y < model.spec.n_classes; ++y) {
    all.push_back(y);
    for (int k = 0; k < model.spec.modes_per_class; ++k) full[static_cast<std::size_t>(y)].push_back(k);
  }
  Rng rng(derive_seed(seed, "pretrain_data"));
  const Dataset data = detail::synth_split(model, 0, p.pretrain_samples, all, full, false, rng);
  TrainerConfig t = c.trainer;
  t.hidden = p.pretrain_hidden;
  t.epochs_per_task = p.pretrain_epochs;
  t.seed = seed;
  t.head = nn::HeadKind::Linear;
  return pretrain_trunk(data, model.spec.n_classes, t);
}

/// Multi-head versus single-head gaps per seed, plus one CSV row per
/// (seed, head kind, task, mask mode).
inline int cmd_localspur(const RunConfig& c, const Log& log) {
  const fs::path dir = fs::path(c.output_dir) / "localspur";
  std::vector<nlohmann::json> reports(c.seeds.size());
  parallel_for(c.seeds.size(), [&](std::size_t i) {
    const std::uint64_t seed = c.seeds[i];
    const ScenarioManifest m = scenario_for_seed(c, seed);
    const Scenario sc = build_scenario(m);
    ProtocolConfig pc = c.protocol.train;
    pc.seed = seed;
    const GapReport r = local_spurious_protocol(sc, protocol_trunk(c, m, sc, seed), pooled_eval(sc), pc);
    reports[i] = gap_report_json(r, seed);
  });
  std::string csv = "seed,head,task,mask,accuracy\n";
  for (const auto& r : reports) {
    io::write_text(dir / ("seed_" + std::to_string(r["seed"].get<std::uint64_t>()) + ".json"), r.dump(2) + "\n");
    for (const auto& h : r["heads"]) {
      for (const auto& t : h["per_task"]) {
        const std::string prefix = std::to_string(r["seed"].get<std::uint64_t>()) + "," + h["head"].get<std::string>() +
                                   "," + std::to_string(t["task"].get<int>()) + ",";
        csv += prefix + "local," + io::format_double(t["local"].get<double>()) + "\n";
        csv += prefix + "global," + io::format_double(t["global"].get<double>()) + "\n";
      }
      log("seed " + std::to_string(r["seed"].get<std::uint64_t>()) + " " + h["head"].get<std::string>() + ": gap " +
          io::format_double(h["gap"].get<double>()));
    }
  }
  io::write_text(dir / "gaps.csv", csv);
  return kOk;
}

/// Classify each injected feature (one per task and class) against the
/// task, the whole scenario and the clean test set.
inline int cmd_analyze(const RunConfig& c, const Log& log) {
  const fs::path dir = fs::path(c.output_dir) / "analysis";
  features::ClassifyOptions opt;
  opt.tau = c.analysis.tau;
  opt.skip_global_checks = c.analysis.skip_global_checks;
  std::string csv = "seed,task,class,feature_id,kind,task_corr,scenario_corr,test_corr\n";
  for (std::uint64_t seed : c.seeds) {
    const Scenario sc = build_scenario(scenario_for_seed(c, seed));
    Dataset all;
    for (const auto& t : sc.tasks) all.insert(all.end(), t.train.begin(), t.train.end());
    nlohmann::json out = nlohmann::json::array();
    for (const auto& t : sc.tasks) {
      const auto classes = sc.task_classes.empty() ? features::classes_in(t.train)
                                                   : sc.task_classes[static_cast<std::size_t>(t.task_id)];
      for (int y : classes) {
        const auto pred = features::injected_feature(t.task_id * sc.n_classes + y);
        const auto r = features::classify_feature(pred, y, t.train, all, sc.clean_test, opt);
        auto corr_of = [y](const std::vector<std::pair<int, double>>& v) -> std::string {
          for (const auto& [cls, val] : v)
            if (cls == y) return io::format_double(val);
          return "";
        };
        csv += std::to_string(seed) + "," + std::to_string(t.task_id) + "," + std::to_string(y) + "," +
               std::to_string(r.feature_id) + "," + features::to_string(r.kind) + "," + corr_of(r.task_correlations) +
               "," + corr_of(r.scenario_correlations) + "," + corr_of(r.test_correlations) + "\n";
        out.push_back({{"task", t.task_id},
                       {"class", y},
                       {"feature", r.name},
                       {"feature_id", r.feature_id},
                       {"kind", features::to_string(r.kind)},
                       {"tau", r.margin_tau},
                       {"discriminative_task", r.discriminative_task},
                       {"discriminative_scenario", r.discriminative_scenario},
                       {"discriminative_test", r.discriminative_test},
                       {"task_correlations", r.task_correlations},
                       {"scenario_correlations", r.scenario_correlations},
                       {"test_correlations", r.test_correlations}});
      }
    }
    io::write_text(dir / ("seed_" + std::to_string(seed) + ".json"), out.dump(2) + "\n");
    log("seed " + std::to_string(seed) + ": analyzed " + std::to_string(out.size()) + " features");
  }
  io::write_text(dir / "features.csv", csv);
  return kOk;
}

// ---------------------------------------------------------------------------
// Report

namespace detail {

struct RunSummary {
  std::string group;  // every setting but correlation and seed
  double correlation_p = 0.0;
  double omega = 0.0;
  RunRecord record;
};

inline std::string group_of(const nlohmann::json& trainer) {
  return trainer.at("method").get<std::string>() + " lam=" + io::format_double(trainer.at("lambda_penalty").get<double>()) +
         " lr=" + io::format_double(trainer.at("lr").get<double>()) +
         " N=" + std::to_string(trainer.at("buffer_per_class").get<std::size_t>());
}

inline std::vector<RunSummary> load_runs(const fs::path& runs_dir) {
  std::vector<RunSummary> out;
  if (!fs::is_directory(runs_dir)) return out;
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(runs_dir))
    if (e.is_directory() && fs::exists(e.path() / "summary.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    nlohmann::json s;
    try {
      s = nlohmann::json::parse(io::read_text(d / "summary.json"));
      RunSummary r;
      r.group = group_of(s.at("config").at("trainer"));
      r.correlation_p = s.at("config").at("scenario").at("correlation_p").get<double>();
      r.omega = s.at("omega").get<double>();
      r.record = io::parse_run_record_csv(io::read_text(d / "record.csv"));
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError((d / "summary.json").string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace detail

/// Aggregate a populated output directory into mean +- std CSVs and SVGs:
/// omega against correlation, clean-test accuracy traces, and gap bars.
inline int cmd_report(const fs::path& dir, const Log& log) {
  const auto runs = detail::load_runs(dir / "runs");
  const fs::path gaps = dir / "localspur" / "gaps.csv";
  if (runs.empty() && !fs::exists(gaps)) throw FormatError("no runs found in " + dir.string());
  const fs::path out = dir / "report";

  if (!runs.empty()) {
    // Omega against correlation, one series per group.
    std::map<std::string, std::map<double, std::vector<double>>> omegas;
    for (const auto& r : runs) omegas[r.group][r.correlation_p].push_back(r.omega);
    std::string csv = "group,correlation_p,omega_mean,omega_std,n\n";
    std::vector<report::Series> series;
    for (const auto& [group, by_p] : omegas) {
      report::Series s{group, {}, {}, {}};
      for (const auto& [p, v] : by_p) {
        const auto ms = report::mean_std(v);
        csv += group + "," + io::format_double(p) + "," + io::format_double(ms.mean) + "," + io::format_double(ms.std) +
               "," + std::to_string(ms.n) + "\n";
        s.x.push_back(p);
        s.y.push_back(ms.mean);
        s.err.push_back(ms.std);
      }
      series.push_back(std::move(s));
    }
    io::write_text(out / "omega_vs_correlation.csv", csv);
    io::write_text(out / "omega_vs_correlation.svg",
                   report::svg_line_chart("Averaged accuracy vs correlation", "correlation p", "omega", series));

    // Clean-test traces: per-epoch points when logged, else one per task.
    using Key = std::tuple<std::string, double, int, int>;  // group, p, task, epoch
    std::map<Key, std::vector<double>> trace;
    for (const auto& r : runs)
      for (const auto& e : r.record.entries)
        if (e.split == kSplitCleanTest && e.metric == "accuracy")
          trace[{r.group, r.correlation_p, e.task_idx, e.epoch}].push_back(e.value);
    std::string tcsv = "group,correlation_p,task,epoch,mean,std,n\n";
    std::map<std::pair<std::string, double>, report::Series> lines;
    std::map<std::pair<std::string, double>, int> epochs_per_task;
    for (const auto& [k, v] : trace) {
      const auto& [group, p, task, epoch] = k;
      if (epoch != kPostTaskEpoch) epochs_per_task[{group, p}] = std::max(epochs_per_task[{group, p}], epoch + 1);
    }
    for (const auto& [k, v] : trace) {
      const auto& [group, p, task, epoch] = k;
      const auto ms = report::mean_std(v);
      tcsv += group + "," + io::format_double(p) + "," + std::to_string(task) + "," + std::to_string(epoch) + "," +
              io::format_double(ms.mean) + "," + io::format_double(ms.std) + "," + std::to_string(ms.n) + "\n";
      const int per_task = epochs_per_task[{group, p}];
      double x;
      if (per_task > 0) {
        if (epoch == kPostTaskEpoch) continue;
        x = task + static_cast<double>(epoch + 1) / per_task;
      } else {
        x = task + 1;
      }
      auto& s = lines[{group, p}];
      s.label = group + " p=" + io::format_double(p);
      s.x.push_back(x);
      s.y.push_back(ms.mean);
      s.err.push_back(ms.std);
    }
    std::vector<report::Series> trace_series;
    for (auto& [k, s] : lines) {
      // Map keys order (task, epoch) with the post-task marker first; sort by x.
      std::vector<std::size_t> idx(s.x.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.x[a] < s.x[b]; });
      report::Series sorted{s.label, {}, {}, {}};
      for (std::size_t i : idx) {
        sorted.x.push_back(s.x[i]);
        sorted.y.push_back(s.y[i]);
        sorted.err.push_back(s.err[i]);
      }
      trace_series.push_back(std::move(sorted));
    }
    io::write_text(out / "accuracy_trace.csv", tcsv);
    io::write_text(out / "accuracy_trace.svg",
                   report::svg_line_chart("Clean test accuracy during training", "tasks seen", "accuracy", trace_series));
    log("aggregated " + std::to_string(runs.size()) + " run(s)");
  }

  if (fs::exists(gaps)) {
    const std::string text = io::read_text(gaps);
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    if (line != "seed,head,task,mask,accuracy") throw FormatError(gaps.string() + ": bad header");
    // Per seed: mean over tasks for each (head, mask); then mean +- std over seeds.
    std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> per_seed;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cols;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) cols.push_back(cell);
      if (cols.size() != 5) throw FormatError(gaps.string() + ": malformed row '" + line + "'");
      try {
        per_seed[{cols[1], cols[3], cols[0]}].push_back(std::stod(cols[4]));
      } catch (const std::logic_error&) {
        throw FormatError(gaps.string() + ": bad number in '" + line + "'");
      }
    }
    std::map<std::pair<std::string, std::string>, std::vector<double>> cells;
    for (const auto& [k, v] : per_seed) cells[{std::get<0>(k), std::get<1>(k)}].push_back(report::mean_std(v).mean);
    const std::vector<std::string> heads = {"linear", "weightnorm", "meanlayer"};
    const std::vector<std::string> modes = {"local", "global"};
    std::string csv = "head,mask,mean,std,n\n";
    std::vector<std::vector<double>> values, errors;
    std::vector<std::string> groups;
    for (const auto& h : heads) {
      if (!cells.count({h, "local"})) continue;
      groups.push_back(h);
      values.emplace_back();
      errors.emplace_back();
      for (const auto& m : modes) {
        const auto ms = report::mean_std(cells.at({h, m}));
        csv += h + "," + m + "," + io::format_double(ms.mean) + "," + io::format_double(ms.std) + "," +
               std::to_string(ms.n) + "\n";
        values.back().push_back(ms.mean);
        errors.back().push_back(ms.std);
      }
    }
    io::write_text(out / "gap_bars.csv", csv);
    io::write_text(out / "gap_bars.svg",
                   report::svg_bar_chart("Multi-head vs single-head accuracy", "accuracy", groups,
                                         {"multi-head (local)", "single-head (global)"}, values, errors));
    log("aggregated protocol gaps");
  }
  return kOk;
}

/// Map an exception onto the documented exit codes.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfigError;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return kIoError;
  return kRuntimeError;
}

}  // namespace spurcl::cli

#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "spurcl/cli.hpp"

namespace cli = spurcl::cli;

int main(int argc, char** argv) {
  CLI::App app{"Spurious and local spurious features in continual learning"};
  app.require_subcommand(1);

  std::string config_path, out, seeds;
  bool per_epoch = false, quiet = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run config");
    sub->add_option("--out", out, "output directory (overrides output_dir)");
    sub->add_option("--seeds", seeds, "comma-separated seeds (overrides seeds)");
    sub->add_flag("--per-epoch", per_epoch, "also evaluate after every epoch");
    sub->add_flag("--quiet", quiet, "suppress progress messages");
  };
  auto* generate = app.add_subcommand("generate", "write scenario manifests and SPFV files");
  auto* train = app.add_subcommand("train", "run continual training over seeds and the grid");
  auto* localspur = app.add_subcommand("localspur", "multi-head vs single-head gap protocol");
  auto* analyze = app.add_subcommand("analyze", "classify the injected features");
  auto* report = app.add_subcommand("report", "aggregate a run directory into CSV and SVG");
  for (auto* sub : {generate, train, localspur, analyze}) add_common(sub);
  std::string run_dir;
  report->add_option("dir", run_dir, "populated output directory")->required();
  report->add_flag("--quiet", quiet, "suppress progress messages");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kOk : cli::kConfigError;
  }

  try {
    const cli::Log log(quiet);
    if (report->parsed()) return cli::cmd_report(run_dir, log);
    cli::Overrides o;
    if (!out.empty()) o.out = out;
    if (!seeds.empty()) o.seeds = cli::parse_seed_list(seeds);
    o.per_epoch = per_epoch;
    o.quiet = quiet;
    const auto cfg = cli::load_config(config_path.empty() ? std::nullopt : std::optional(config_path), o);
    if (generate->parsed()) return cli::cmd_generate(cfg, log);
    if (train->parsed()) return cli::cmd_train(cfg, log);
    if (localspur->parsed()) return cli::cmd_localspur(cfg, log);
    return cli::cmd_analyze(cfg, log);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::exit_code_for(e);
  }
}

// Command-line entry point: fedicl {theory|simulate|partition|report}.

#include <CLI11.hpp>

#include <iostream>

#include "fedicl/experiment.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output;
  bool verify_theory = false;
  std::vector<std::string> runs;
};

void add_common(CLI::App* cmd, Flags& f, bool config_required) {
  auto* opt = cmd->add_option("--config", f.config, "experiment config (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--seed", f.seed, "root seed, overrides the config");
  cmd->add_option("--output", f.output, "output directory, overrides the config");
}

int execute(fedicl::Mode mode, const Flags& f) {
  using namespace fedicl;
  ExperimentConfig cfg;
  try {
    if (!f.config.empty()) {
      cfg = load_config(f.config);
    } else {
      cfg = parse_config(json{{"mode", "report"}});
    }
    cfg.mode = mode;
    if (f.seed) {
      cfg.seed = *f.seed;
      cfg.protocol.seed = *f.seed;
      if (cfg.lsa.pretrain) cfg.lsa.pretrain->seed = derive_seed(*f.seed, "pretrain");
    }
    if (!f.output.empty()) cfg.output = f.output;
    if (f.verify_theory) cfg.verify_theory = true;
    for (const auto& r : f.runs) cfg.runs.emplace_back(r);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  return dispatch(cfg, std::cerr);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated in-context learning experiments"};
  app.require_subcommand(1);
  Flags flags;

  auto* theory = app.add_subcommand("theory", "check the contraction recursion and write report.json");
  add_common(theory, flags, true);
  auto* simulate = app.add_subcommand("simulate", "run the round protocol and write traces, ledger and metrics");
  add_common(simulate, flags, true);
  simulate->add_flag("--verify-theory", flags.verify_theory, "cross-check every round against the recursion");
  auto* partition = app.add_subcommand("partition", "split a dataset across clients with a Dirichlet prior");
  add_common(partition, flags, true);
  auto* report = app.add_subcommand("report", "tabulate metrics and communication across run directories");
  add_common(report, flags, false);
  report->add_option("runs", flags.runs, "run directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fedicl::kExitConfig;
  }

  if (theory->parsed()) return execute(fedicl::Mode::theory, flags);
  if (simulate->parsed()) return execute(fedicl::Mode::simulate, flags);
  if (partition->parsed()) return execute(fedicl::Mode::partition, flags);
  return execute(fedicl::Mode::report, flags);
}

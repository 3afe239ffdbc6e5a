// come: pretrain a source model, run test-time adaptation scenarios, compare
// objectives and run the randomized bound suites.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "come/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Conservative entropy minimization lab"};
  app.require_subcommand(1);

  std::string config;
  auto* pretrain = app.add_subcommand("pretrain", "train the source model and write a checkpoint");
  pretrain->add_option("config", config, "experiment config JSON")->required();

  std::string objective, scenario;
  auto* adapt = app.add_subcommand("adapt", "adapt the checkpoint on a test stream");
  adapt->add_option("config", config, "experiment config JSON")->required();
  adapt->add_option("--objective", objective, "em | come | pl | energy (default: from config)");
  adapt->add_option("--scenario", scenario, "standard | open_world | lifelong | imbalanced | mixed (default: from config)");

  std::vector<std::string> objectives{"em", "come"}, scenarios;
  std::size_t seeds = 1;
  auto* compare = app.add_subcommand("compare", "run several objectives on identical streams");
  compare->add_option("config", config, "experiment config JSON")->required();
  compare->add_option("--objectives", objectives, "objectives to run")->delimiter(',');
  compare->add_option("--scenarios", scenarios, "scenarios to run (default: all)")->delimiter(',');
  compare->add_option("--seeds", seeds, "number of seed offsets, 0..n-1");

  std::uint64_t seed = 20240501;
  std::size_t trials = 10000;
  bool inject_fault = false;
  auto* verify = app.add_subcommand("verify", "run the randomized property suites");
  verify->add_option("--seed", seed, "root seed");
  verify->add_option("--trials", trials, "trials per suite");
  verify->add_flag("--inject-fault", inject_fault, "break one bound on purpose");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : come::kExitUsage;
  }

  auto opt = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<std::string>(s); };
  if (*pretrain) return come::cmd_pretrain(config, std::cout, std::cerr);
  if (*adapt) return come::cmd_adapt(config, opt(objective), opt(scenario), std::cout, std::cerr);
  if (*compare) return come::cmd_compare(config, objectives, scenarios, seeds, std::cout, std::cerr);
  return come::cmd_verify(seed, trials, inject_fault, std::cout, std::cerr);
}

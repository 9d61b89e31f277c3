#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdpo/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"desk-scale lab for preference optimization under latent confounding"};
  app.require_subcommand(1);

  cdpo::cli::Invocation inv;
  const struct {
    const char* name;
    const char* help;
  } subs[] = {
      {"simulate", "generate a confounded interaction corpus and its partitions"},
      {"train", "run preference optimization (plain or with the invariance penalty)"},
      {"eval", "rank a partition with a checkpoint and write HR/NDCG breakdowns"},
      {"prop1", "spurious-amplification trajectory plus the generalization bound"},
      {"backdoor-check", "compare the adjustment estimator against enumeration"},
  };
  for (const auto& s : subs) {
    CLI::App* sc = app.add_subcommand(s.name, s.help);
    sc->add_option("--config", inv.config_path, "JSON config file")
        ->required()
        ->check(CLI::ExistingFile);
    sc->add_option("--set", inv.overrides, "override a dotted config key (key=value)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[config]: " << e.what() << "\n";
    return cdpo::cli::kExitConfig;
  }

  return cdpo::cli::run_command(app.get_subcommands().front()->get_name(), inv);
}

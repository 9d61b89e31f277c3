#pragma once

#include <stdexcept>
#include <string>
#include <vector>

// Subcommand implementations behind the cdpo binary. Each command reads a
// JSON config file, applies dotted-key overrides, validates the result
// against a fixed key whitelist, and writes plain CSV/JSON/JSONL outputs
// under the configured output directory. Outputs carry no timestamps, so a
// repeated run with the same config and seed is byte-identical.
namespace cdpo::cli {

// Process exit codes.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;  // bad config file, unknown key, bad value
constexpr int kExitCheck = 3;   // an internal check failed
constexpr int kExitIo = 4;      // missing or unreadable/unwritable files

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Invocation {
  std::string config_path;
  std::vector<std::string> overrides;  // "dotted.key=value" pairs
};

// Commands throw the error types above; run_command maps them to exit
// codes. A command that finishes its outputs but fails a declared check
// (prop1 monotonicity/slope/bound, backdoor tolerances) throws CheckError
// after the files are written.
int cmd_simulate(const Invocation& inv);
int cmd_train(const Invocation& inv);
int cmd_eval(const Invocation& inv);
int cmd_prop1(const Invocation& inv);
int cmd_backdoor_check(const Invocation& inv);

// Dispatch by subcommand name ("simulate", "train", "eval", "prop1",
// "backdoor-check"). Catches command errors, prints one machine-parsable
// line to stderr ("error[config|check|io]: message"), and returns the
// process exit code.
int run_command(const std::string& name, const Invocation& inv);

}  // namespace cdpo::cli

#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace migkit::cli {

enum ExitCode { kOk = 0, kUsage = 1, kValidation = 2, kRuntime = 3 };

// One flag per config key: --lambda-a <-> lambda_a.
struct OptionSpec {
  std::string key;
  std::string help;
  std::string fallback;  // empty: no default
  bool boolean = false;
};

std::string flag_for(const std::string& key);

struct CommandSpec {
  std::string name;
  std::string help;
  std::vector<OptionSpec> options;
};

const std::vector<CommandSpec>& command_specs();

// args excludes the program name. Error JSON goes to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace migkit::cli

// didr: run toy alignment experiments.
//
//   didr <kind> [--config PATH] [--set key=value ...] [--seed N] [--out DIR]
//
// Kinds: threshold-scan, alpha-sweep, train-ref, distill, align, validate-drs,
// validate-grad, full-toy. Exit status: 0 success, 1 config error, 2 runtime fault.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "didr/allocator.hpp"
#include "didr/exp/run.hpp"

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string seed;
  std::string out;
  bool print_config = false;
};

void add_options(CLI::App& sub, Options& opt) {
  sub.add_option("--config", opt.config, "key = value config file");
  sub.add_option("--set", opt.sets, "override one key (repeatable)")->allow_extra_args(false);
  sub.add_option("--seed", opt.seed, "64-bit seed (same as --set seed=N)");
  sub.add_option("--out", opt.out, "output directory (default runs/<kind>)");
  sub.add_flag("--print-config", opt.print_config, "print the resolved config and exit");
}

}  // namespace

int main(int argc, char** argv) {
  using namespace didr::exp;
  didr::tune_allocator();
  CLI::App app{"Toy diffusion alignment experiments"};
  app.require_subcommand(1);
  Options opt;
  for (const auto& [kind, name] : kKindNames) add_options(*app.add_subcommand(std::string(name)), opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  ExperimentConfig config;
  try {
    const Kind kind = kind_from_string(app.get_subcommands().front()->get_name());
    std::vector<Assignment> assignments;
    if (!opt.config.empty()) assignments = read_config_file(opt.config);
    for (const auto& s : opt.sets) assignments.push_back(parse_override(s));
    if (!opt.seed.empty()) assignments.push_back({"seed", opt.seed, "--seed"});
    config = resolve(kind, assignments);
  } catch (const didr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  if (opt.print_config) {
    std::cout << resolved_text(config);
    return kExitOk;
  }
  const std::string out = opt.out.empty() ? "runs/" + std::string(to_string(config.kind)) : opt.out;
  const int code = run(config, out);
  std::cerr << to_string(config.kind) << ": " << (code == kExitOk ? "ok" : "failed") << ", outputs in " << out << "\n";
  return code;
}

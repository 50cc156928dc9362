#include <CLI11.hpp>
#include <cstdio>
#include <string>

#include "rfa/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"RFA experiment runner"};
  app.require_subcommand(1);

  struct Args {
    std::string config;
    std::string out;
    std::int64_t seed = -1;
  };
  std::map<std::string, Args> args;
  for (const char* name :
       {"pretrain", "train", "eval", "prop1", "detect", "calibrate"}) {
    CLI::App* sub = app.add_subcommand(name);
    Args& a = args[name];
    sub->add_option("--config", a.config, "experiment config (JSON)");
    sub->add_option("--out", a.out, "override output_dir");
    sub->add_option("--seed", a.seed, "override seed");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage errors are exit 1
  }

  std::string command = app.get_subcommands().front()->get_name();
  const Args& a = args[command];
  try {
    rfa::ExperimentConfig cfg = a.config.empty()
                                    ? rfa::ExperimentConfig{}
                                    : rfa::ExperimentConfig::from_file(a.config);
    if (!a.out.empty()) cfg.output_dir = a.out;
    if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
    return rfa::run_cli(command, cfg);
  } catch (const rfa::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  }
}

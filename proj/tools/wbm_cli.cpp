#include <CLI11.hpp>

#include <iostream>

#include "wbm/commands.hpp"
#include "wbm/errors.hpp"
#include "wbm/io.hpp"

using namespace wbm;

int main(int argc, char** argv) {
  CLI::App app{"behavioral time-series pretraining and probing toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed_override = 0;
  bool seed_set = false;
  std::string out_override;
  int threads = 1;

  for (const char* name : {"datagen", "pretrain", "embed", "probe", "ablate"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("--seed", seed_override, "override data.seed")->each([&](const std::string&) {
      seed_set = true;
    });
    sub->add_option("--out", out_override, "override data.out_dir");
    sub->add_option("--threads", threads, "worker threads for parallel stages");
  }

  CLI11_PARSE(app, argc, argv);
  std::string command = app.get_subcommands().front()->get_name();

  cli::RunConfig cfg;
  try {
    cfg = cli::parse_config(io::read_file(config_path));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  if (seed_set) {
    cfg.data.seed = seed_override;
    cfg.generator.rng_seed = seed_override;
  }
  if (!out_override.empty()) cfg.data.out_dir = out_override;
  cli::g_threads = threads;

  std::string error;
  int code = cli::run_command(command, cfg, &error);
  if (code != 0) std::cerr << "error: " << error << "\n";
  return code;
}

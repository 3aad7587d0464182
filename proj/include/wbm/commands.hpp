#pragma once

#include <string>

#include "wbm/config.hpp"

namespace wbm::cli {

// Each command is a pure function of (config, seed, filesystem inputs) and
// writes its outputs plus a resolved-config echo under data.out_dir. They
// throw ConfigError/IoError for bad inputs (CLI exit 2) and NumericError for
// runtime numeric failures (CLI exit 3).

void cmd_datagen(const RunConfig& cfg);
void cmd_pretrain(const RunConfig& cfg);
void cmd_embed(const RunConfig& cfg);
void cmd_probe(const RunConfig& cfg);
void cmd_ablate(const RunConfig& cfg);

// Maps a thrown exception to the documented exit code (2 config/input,
// 3 numeric, 1 anything else) and renders the message.
int run_command(const std::string& name, const RunConfig& cfg, std::string* error_out);

extern int g_threads;  // --threads; embarrassingly parallel stages only

}  // namespace wbm::cli

#pragma once

#include <string>
#include <vector>

#include "twostage/config.hpp"

namespace twostage::pipeline {

/// Subcommand names in the order they are usually run.
const std::vector<std::string>& command_names();

/// Runs one subcommand. Every command resolves its configuration before any
/// computation, writes outputs plus `<command>.cfg` (the effective config)
/// under `out`, and logs phase wall times to stderr.
void run(const std::string& command, RunConfig& config);

void simulate_rsf(RunConfig& config);
void simulate_ctds(RunConfig& config);
void impute_paths(RunConfig& config);
void discretize(RunConfig& config);
void fit_stage1(RunConfig& config);
void fit_stage2(RunConfig& config);
void fit_full(RunConfig& config);
void diagnose(RunConfig& config);

} // namespace twostage::pipeline

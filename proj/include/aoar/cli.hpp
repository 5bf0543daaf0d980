#pragma once

// The aoar_lab command line: train, eval, sample, bench, count and probe.

#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

namespace aoar::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kExitIo = 4;

// Output root used when --out is not given.
inline constexpr const char* kOutputRootEnv = "AOAR_OUTPUT_ROOT";

// args excludes the program name. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// "identity", "uniform", "fixed_random[:seed]", "blockwise[:size[:seed]]",
// "hybrid[:identity_weight]" as an order-policy document.
nlohmann::json parse_policy_flag(const std::string& spec);

}  // namespace aoar::cli

#pragma once

#include <string>
#include <vector>

namespace mimg {

inline constexpr const char* kVersionString = "mimg 0.1.0";

// Full command-line entry point. Returns 0 on success, 2 on usage errors
// (unknown flags, missing required options, bad config keys), 1 on runtime
// failures. Every successful run writes a deterministic run_record.json
// next to its outputs.
int cli_main(int argc, char** argv);

// Test convenience: run the CLI from a plain argument list ("mimg" implied).
int cli_run(const std::vector<std::string>& args);

} // namespace mimg

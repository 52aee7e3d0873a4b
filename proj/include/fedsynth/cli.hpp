#pragma once

// Command line front end. Each subcommand writes its artifacts and a
// summary.json (resolved config plus metrics) to the output directory.
//
// Exit codes: 0 success, 1 runtime failure or failed check, 2 bad arguments
// or config. Errors go to `err` as one line of JSON.

#include <ostream>

namespace fedsynth::cli {

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fedsynth::cli

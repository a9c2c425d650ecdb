#pragma once

namespace hps {

// Exit codes of dispatch.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,    // bad flags or config
  kExitData = 2,     // unreadable, missing or malformed data
  kExitNumeric = 3,  // non-finite training
};

// Runs one subcommand (train, infer, eval, bench, synth). Diagnostics and
// the resolved config go to stderr; help text goes to stdout.
int dispatch(int argc, const char* const* argv);

}  // namespace hps

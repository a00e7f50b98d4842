#pragma once

#include <string>
#include <vector>

namespace mrseg {

// Entry point behind the mrseg binary; takes argv without the program name.
// Subcommands: generate, train, predict, evaluate, ablation. Each writes its
// artifacts plus a run manifest into a fresh --out directory and prints one
// summary line to stdout. Returns 0 on success, 2 on configuration errors,
// 3 on runtime/I-O failures.
int run_cli(const std::vector<std::string>& args);

}  // namespace mrseg

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace aahr::cli {

// Process exit codes. Each error class has its own code; usage errors
// (unknown flag, missing argument) take the sysexits EX_USAGE value.
enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kConfig = 2,
  kFile = 3,
  kNumeric = 4,  // non-finite values, including a diverged training step
  kFormat = 5,
  kDataset = 6,
  kShape = 7,
  kProtocol = 8,
  kCapacity = 9,
  kCongruence = 10,
  kUsage = 64,
};

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aahr::cli

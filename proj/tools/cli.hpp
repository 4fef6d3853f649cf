#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace kwcap::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kConfigError = 2;
inline constexpr int kDataError = 3;
inline constexpr int kContractError = 4;

/// Runs one `kwcap` command. `args` excludes the program name. Normal output
/// goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Plain (P2) greyscale image, row-major.
struct Pgm {
  std::size_t width = 0, height = 0;
  int max_value = 255;
  std::vector<int> pixels;
};
Pgm read_pgm(const std::filesystem::path& path);

}  // namespace kwcap::cli

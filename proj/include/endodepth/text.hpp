#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace endodepth::text {

/// Shortest decimal form that round-trips to the same double.
std::string format_real(double value);

double parse_real(std::string_view token, std::string_view context);
long long parse_int(std::string_view token, std::string_view context);

std::vector<std::string_view> split_ws(std::string_view line);
std::string_view trim(std::string_view s);

struct Line {
  int number = 0;
  std::vector<std::string_view> tokens;
};

/// Reads a whole text file. Throws LoadError naming the path when missing.
std::string read_file(const std::filesystem::path& path);

/// Splits into whitespace-tokenised lines, dropping blanks and '#' comments.
/// Tokens view into `content`.
std::vector<Line> data_lines(const std::string& content);

/// Writes atomically enough for our purposes; throws WriteError with path.
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace endodepth::text

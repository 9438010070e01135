#include "endodepth/text.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "endodepth/errors.hpp"

namespace endodepth::text {

std::string format_real(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw WriteError("format_real: conversion failed");
  return std::string(buf, end);
}

double parse_real(std::string_view token, std::string_view context) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || ptr != token.data() + token.size()) {
    throw ValidationError(std::string(context) + ": cannot parse number '" + std::string(token) +
                          "'");
  }
  return value;
}

long long parse_int(std::string_view token, std::string_view context) {
  long long value = 0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || ptr != token.data() + token.size()) {
    throw ValidationError(std::string(context) + ": cannot parse integer '" + std::string(token) +
                          "'");
  }
  return value;
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Line> data_lines(const std::string& content) {
  std::vector<Line> lines;
  std::string_view view(content);
  int number = 0;
  std::size_t pos = 0;
  while (pos <= view.size()) {
    const auto nl = view.find('\n', pos);
    const auto raw = view.substr(pos, nl == std::string_view::npos ? view.size() - pos : nl - pos);
    ++number;
    const auto t = trim(raw);
    if (!t.empty() && t.front() != '#') {
      lines.push_back(Line{number, split_ws(t)});
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return lines;
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WriteError("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw WriteError("write failed for " + path.string());
}

}  // namespace endodepth::text

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace runpat {

// Minimal RFC-4180 CSV support (UTF-8, dot decimal). Lines starting with '#'
// before the header are kept as comments; quoting and "" escapes handled.
struct CsvTable {
  std::vector<std::string> comments;  // leading '#' lines, without newline
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::string& path);
CsvTable parse_csv(const std::string& text);

std::string to_csv(const CsvTable& t);
void write_csv(const std::string& path, const CsvTable& t);

// Float formatting used for every CSV body: 9 significant digits, shortest form.
std::string fmt_g9(double v);

double parse_double(const std::string& s, const std::string& context);
long parse_long(const std::string& s, const std::string& context);

}  // namespace runpat

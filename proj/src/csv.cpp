#include "runpat/csv.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "runpat/common.hpp"

namespace runpat {

namespace {

std::vector<std::string> split_record(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field += c;
    }
  }
  out.push_back(std::move(field));
  return out;
}

bool needs_quoting(const std::string& s) {
  return s.find_first_of(",\"\n\r") != std::string::npos;
}

void append_field(std::string& out, const std::string& s) {
  if (!needs_quoting(s)) {
    out += s;
    return;
  }
  out += '"';
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
}

}  // namespace

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!header_seen && !line.empty() && line[0] == '#') {
      t.comments.push_back(line);
      continue;
    }
    if (line.empty()) continue;
    auto fields = split_record(line);
    if (!header_seen) {
      t.header = std::move(fields);
      header_seen = true;
    } else {
      t.rows.push_back(std::move(fields));
    }
  }
  return t;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Err::MissingFile, "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_csv(ss.str());
}

std::string to_csv(const CsvTable& t) {
  std::string out;
  for (const auto& c : t.comments) {
    out += c;
    out += '\n';
  }
  auto emit_row = [&out](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      append_field(out, row[i]);
    }
    out += '\n';
  };
  emit_row(t.header);
  for (const auto& r : t.rows) emit_row(r);
  return out;
}

void write_csv(const std::string& path, const CsvTable& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Err::MissingFile, "cannot write " + path);
  f << to_csv(t);
}

std::string fmt_g9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

double parse_double(const std::string& s, const std::string& context) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    fail(Err::SchemaMismatch, "not a number: '" + s + "' in " + context);
  return v;
}

long parse_long(const std::string& s, const std::string& context) {
  char* end = nullptr;
  long v = std::strtol(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0')
    fail(Err::SchemaMismatch, "not an integer: '" + s + "' in " + context);
  return v;
}

}  // namespace runpat

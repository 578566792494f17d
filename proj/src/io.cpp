#include "dualvi/io.hpp"

#include "dualvi/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace dualvi::io {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(s);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!s.empty() && s.back() == ',') out.emplace_back();
  return out;
}

std::ifstream open_or_throw(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path.string());
  return in;
}

void expect_header(const std::vector<CsvRow>& rows, const fs::path& path, const std::string& header) {
  if (rows.empty()) throw ParseError(path.string(), 0, "empty file, expected header '" + header + "'");
  std::string got;
  for (std::size_t i = 0; i < rows[0].fields.size(); ++i) got += (i ? "," : "") + rows[0].fields[i];
  if (got != header) throw ParseError(path.string(), rows[0].line, "expected header '" + header + "', got '" + got + "'");
}

void expect_width(const CsvRow& row, std::size_t width, const fs::path& path) {
  if (row.fields.size() != width) {
    throw ParseError(path.string(), row.line,
                     "expected " + std::to_string(width) + " fields, got " + std::to_string(row.fields.size()));
  }
}

}  // namespace

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double parse_double(const std::string& token, const std::string& where, std::size_t line) {
  const std::string t = trim(token);
  double value = 0.0;
  const char* first = t.data();
  const char* last = t.data() + t.size();
  if (!t.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (t.empty() || ec != std::errc() || ptr != last) {
    throw ParseError(where, line, "not a number: '" + t + "'");
  }
  return value;
}

long long parse_int(const std::string& token, const std::string& where, std::size_t line) {
  const std::string t = trim(token);
  long long value = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw ParseError(where, line, "not an integer: '" + t + "'");
  }
  return value;
}

std::vector<CsvRow> read_csv(const fs::path& path) {
  std::ifstream in = open_or_throw(path);
  std::vector<CsvRow> rows;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    const std::string t = trim(text);
    if (t.empty() || t[0] == '#') continue;
    rows.push_back({line, split_commas(t)});
  }
  return rows;
}

Mat read_matrix(const fs::path& path) {
  const auto rows = read_csv(path);
  if (rows.empty()) throw ParseError(path.string(), 0, "no data rows");
  const std::size_t width = rows[0].fields.size();
  Mat out(static_cast<Index>(rows.size()), static_cast<Index>(width));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    expect_width(rows[i], width, path);
    for (std::size_t j = 0; j < width; ++j) {
      out(static_cast<Index>(i), static_cast<Index>(j)) = parse_double(rows[i].fields[j], path.string(), rows[i].line);
    }
  }
  return out;
}

Vec read_vector(const fs::path& path) {
  Mat m = read_matrix(path);
  if (m.cols() == 1) return m.col(0);
  if (m.rows() == 1) return m.row(0).transpose();
  throw ParseError(path.string(), 0, "expected a single row or column");
}

std::vector<int> read_int_column(const fs::path& path) {
  std::vector<int> out;
  for (const CsvRow& row : read_csv(path)) {
    expect_width(row, 1, path);
    out.push_back(static_cast<int>(parse_int(row.fields[0], path.string(), row.line)));
  }
  return out;
}

std::vector<Edge> read_edges(const fs::path& path) {
  std::vector<Edge> out;
  for (const CsvRow& row : read_csv(path)) {
    expect_width(row, 2, path);
    const auto a = parse_int(row.fields[0], path.string(), row.line);
    const auto b = parse_int(row.fields[1], path.string(), row.line);
    if (a < 0 || b < 0) throw ParseError(path.string(), row.line, "negative node index");
    out.push_back({static_cast<int>(a), static_cast<int>(b)});
  }
  return out;
}

std::vector<Site> read_sites(const fs::path& path) {
  std::vector<Site> out;
  for (const CsvRow& row : read_csv(path)) {
    const std::string& kind = row.fields[0];
    const std::string where = path.string();
    try {
      if (kind == "poisson") {
        expect_width(row, 2, path);
        out.push_back(Site::poisson(static_cast<int>(parse_int(row.fields[1], where, row.line))));
      } else if (kind == "bernoulli") {
        expect_width(row, 2, path);
        out.push_back(Site::bernoulli(static_cast<int>(parse_int(row.fields[1], where, row.line))));
      } else if (kind == "multilogit") {
        expect_width(row, 3, path);
        out.push_back(Site::multi_logit(static_cast<int>(parse_int(row.fields[1], where, row.line)),
                                        static_cast<int>(parse_int(row.fields[2], where, row.line))));
      } else if (kind == "stochvol") {
        expect_width(row, 2, path);
        out.push_back(Site::stoch_vol(parse_double(row.fields[1], where, row.line)));
      } else {
        throw ParseError(where, row.line, "unknown site kind '" + kind + "'");
      }
    } catch (const std::logic_error& e) {
      throw ParseError(where, row.line, e.what());
    }
  }
  return out;
}

namespace {

void standardize_columns(Mat& x) {
  for (Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).mean();
    x.col(j).array() -= mean;
    const double sd = std::sqrt(x.col(j).squaredNorm() / static_cast<double>(std::max<Index>(x.rows() - 1, 1)));
    if (sd > 0.0) x.col(j) /= sd;
  }
}

}  // namespace

ClassificationData read_glass(const fs::path& path) {
  const auto rows = read_csv(path);
  if (rows.empty()) throw ParseError(path.string(), 0, "no data rows");
  const std::size_t width = rows[0].fields.size();
  if (width < 3) throw ParseError(path.string(), rows[0].line, "expected id, features and class columns");
  const auto n_features = static_cast<Index>(width - 2);

  Mat x(static_cast<Index>(rows.size()), n_features);
  std::vector<int> raw(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    expect_width(rows[i], width, path);
    for (Index j = 0; j < n_features; ++j) {
      x(static_cast<Index>(i), j) = parse_double(rows[i].fields[static_cast<std::size_t>(j) + 1], path.string(), rows[i].line);
    }
    raw[i] = static_cast<int>(parse_int(rows[i].fields.back(), path.string(), rows[i].line));
  }
  const std::set<int> present(raw.begin(), raw.end());
  const std::vector<int> classes(present.begin(), present.end());

  ClassificationData data;
  standardize_columns(x);
  data.features = std::move(x);
  data.num_classes = static_cast<int>(classes.size());
  for (int r : raw) {
    data.labels.push_back(static_cast<int>(std::lower_bound(classes.begin(), classes.end(), r) - classes.begin()));
  }
  return data;
}

ClassificationData read_classification(const fs::path& features, const fs::path& labels) {
  ClassificationData data;
  data.features = read_matrix(features);
  data.labels = read_int_column(labels);
  if (static_cast<std::size_t>(data.features.rows()) != data.labels.size()) {
    throw DimensionError(features.string() + " and " + labels.string() + " disagree on the number of examples");
  }
  const std::set<int> present(data.labels.begin(), data.labels.end());
  if (present.empty() || *present.begin() != 0 || *present.rbegin() != static_cast<int>(present.size()) - 1) {
    throw ParseError(labels.string(), 0, "labels must be contiguous 0..K-1");
  }
  data.num_classes = static_cast<int>(present.size());
  return data;
}

Trace read_trace_csv(const fs::path& path) {
  const auto rows = read_csv(path);
  expect_header(rows, path, "iter,elapsed_sec,objective,grad_inf_norm");
  Trace out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const CsvRow& r = rows[i];
    expect_width(r, 4, path);
    const std::string w = path.string();
    out.push_back({static_cast<int>(parse_int(r.fields[0], w, r.line)), parse_double(r.fields[1], w, r.line),
                   parse_double(r.fields[2], w, r.line), parse_double(r.fields[3], w, r.line)});
  }
  return out;
}

std::vector<GridCell> read_grid_csv(const fs::path& path) {
  const auto rows = read_csv(path);
  expect_header(rows, path, "hp1,hp2,neg_lower_bound,pred_error,iters,wall_sec,failed");
  std::vector<GridCell> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const CsvRow& r = rows[i];
    expect_width(r, 7, path);
    const std::string w = path.string();
    GridCell c;
    c.hp1 = parse_double(r.fields[0], w, r.line);
    c.hp2 = parse_double(r.fields[1], w, r.line);
    c.neg_lower_bound = parse_double(r.fields[2], w, r.line);
    c.pred_error = parse_double(r.fields[3], w, r.line);
    c.iters = static_cast<int>(parse_int(r.fields[4], w, r.line));
    c.wall_sec = parse_double(r.fields[5], w, r.line);
    c.failed = parse_int(r.fields[6], w, r.line) != 0;
    out.push_back(c);
  }
  return out;
}

void write_posterior_csv(std::ostream& out, const Vec& mean, const Vec& variance) {
  if (mean.size() != variance.size()) throw DimensionError("mean and variance lengths differ");
  out << "index,mean,variance\n";
  for (Index i = 0; i < mean.size(); ++i) {
    out << i << ',' << format_double(mean(i)) << ',' << format_double(variance(i)) << '\n';
  }
}

std::vector<PosteriorRow> read_posterior_csv(const fs::path& path) {
  const auto rows = read_csv(path);
  expect_header(rows, path, "index,mean,variance");
  std::vector<PosteriorRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const CsvRow& r = rows[i];
    expect_width(r, 3, path);
    const std::string w = path.string();
    out.push_back({static_cast<int>(parse_int(r.fields[0], w, r.line)), parse_double(r.fields[1], w, r.line),
                   parse_double(r.fields[2], w, r.line)});
  }
  return out;
}

void atomic_write(const fs::path& path, const std::function<void(std::ostream&)>& writer) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write file: " + tmp.string());
    writer(out);
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw std::runtime_error("write failed: " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Config

Config Config::parse(std::istream& in, const std::string& where) {
  Config cfg;
  cfg.where_ = where;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (const auto hash = text.find('#'); hash != std::string::npos) text.erase(hash);
    const std::string t = trim(text);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(where, line, "expected 'key = value'");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ParseError(where, line, "empty key");
    if (cfg.entries_.count(key)) throw ParseError(where, line, "duplicate key '" + key + "'");
    cfg.entries_[key] = {trim(t.substr(eq + 1)), line};
  }
  return cfg;
}

Config Config::load(const fs::path& path) {
  std::ifstream in = open_or_throw(path);
  Config cfg = parse(in, path.string());
  cfg.base_dir_ = path.parent_path();
  return cfg;
}

const Config::Entry& Config::entry(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ParseError(where_, 0, "missing required key '" + key + "'");
  return it->second;
}

std::string Config::get_string(const std::string& key) const { return entry(key).value; }

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? get_string(key) : fallback;
}

double Config::get_double(const std::string& key) const {
  const Entry& e = entry(key);
  return parse_double(e.value, where_, e.line);
}

double Config::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

long long Config::get_int(const std::string& key, long long fallback) const {
  if (!has(key)) return fallback;
  const Entry& e = entry(key);
  return parse_int(e.value, where_, e.line);
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const Entry& e = entry(key);
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  throw ParseError(where_, e.line, "expected true or false for '" + key + "'");
}

std::vector<double> Config::get_doubles(const std::string& key) const {
  const Entry& e = entry(key);
  std::vector<double> out;
  for (const std::string& f : split_commas(e.value)) out.push_back(parse_double(f, where_, e.line));
  return out;
}

std::vector<std::string> Config::get_strings(const std::string& key) const {
  const Entry& e = entry(key);
  std::vector<std::string> out;
  for (const std::string& f : split_commas(e.value)) {
    if (f.empty()) throw ParseError(where_, e.line, "empty list item in '" + key + "'");
    out.push_back(f);
  }
  return out;
}

fs::path Config::get_path(const std::string& key) const {
  fs::path p = get_string(key);
  return p.is_absolute() ? p : base_dir_ / p;
}

std::map<std::string, std::string> Config::with_prefix(const std::string& prefix) const {
  std::map<std::string, std::string> out;
  for (const auto& [key, e] : entries_) {
    if (key.rfind(prefix, 0) == 0) out[key.substr(prefix.size())] = e.value;
  }
  return out;
}

}  // namespace dualvi::io

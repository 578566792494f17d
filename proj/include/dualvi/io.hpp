#pragma once

#include "dualvi/model.hpp"
#include "dualvi/optimizer.hpp"
#include "dualvi/tasks.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace dualvi::io {

/// Shortest text that parses back to the same double (17 significant digits).
std::string format_double(double x);

/// Whole-token parse; throws ParseError naming `where` and `line`.
double parse_double(const std::string& token, const std::string& where, std::size_t line);
long long parse_int(const std::string& token, const std::string& where, std::size_t line);

struct CsvRow {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

/// Comma-separated rows with surrounding whitespace trimmed. Blank lines and
/// lines starting with '#' are skipped. Missing file throws std::runtime_error
/// naming the path.
std::vector<CsvRow> read_csv(const std::filesystem::path& path);

/// Headerless numeric CSV; every row must have the same width.
Mat read_matrix(const std::filesystem::path& path);
/// One value per line (or a single row).
Vec read_vector(const std::filesystem::path& path);
std::vector<int> read_int_column(const std::filesystem::path& path);
/// Two-column 0-based edge list.
std::vector<Edge> read_edges(const std::filesystem::path& path);
/// Rows `poisson,<count>`, `bernoulli,<0|1>`, `multilogit,<K>,<label>` or
/// `stochvol,<y>`.
std::vector<Site> read_sites(const std::filesystem::path& path);
/// Standard UCI glass layout: id, features, class label (1..7, 4 absent).
/// Labels are remapped to 0..5 and features standardized column-wise.
ClassificationData read_glass(const std::filesystem::path& path);
/// Features as headerless CSV plus a single-column label file; labels must be
/// 0-based and contiguous.
ClassificationData read_classification(const std::filesystem::path& features, const std::filesystem::path& labels);

Trace read_trace_csv(const std::filesystem::path& path);
std::vector<GridCell> read_grid_csv(const std::filesystem::path& path);

struct PosteriorRow {
  int index = 0;
  double mean = 0.0;
  double variance = 0.0;
};
void write_posterior_csv(std::ostream& out, const Vec& mean, const Vec& variance);
std::vector<PosteriorRow> read_posterior_csv(const std::filesystem::path& path);

/// Writes through a sibling temp file and renames it into place, so readers
/// never see a partial file.
void atomic_write(const std::filesystem::path& path, const std::function<void(std::ostream&)>& writer);

/// Flat `key = value` file with `#` comments.
class Config {
 public:
  static Config parse(std::istream& in, const std::string& where);
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  /// Comma-separated list of numbers.
  std::vector<double> get_doubles(const std::string& key) const;
  /// Comma-separated list of words.
  std::vector<std::string> get_strings(const std::string& key) const;
  /// Path value, resolved against the directory of the config file.
  std::filesystem::path get_path(const std::string& key) const;
  /// Keys starting with `prefix`, prefix stripped.
  std::map<std::string, std::string> with_prefix(const std::string& prefix) const;

  void set(const std::string& key, const std::string& value) { entries_[key] = {value, 0}; }
  const std::filesystem::path& base_dir() const { return base_dir_; }

 private:
  struct Entry {
    std::string value;
    std::size_t line;
  };
  const Entry& entry(const std::string& key) const;

  std::map<std::string, Entry> entries_;
  std::string where_;
  std::filesystem::path base_dir_;
};

}  // namespace dualvi::io

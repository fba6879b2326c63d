#pragma once

// Samples, task streams and dataset ingestion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "prop/errors.hpp"
#include "prop/tensor.hpp"

namespace prop {

struct Sample {
  std::vector<real> x;
  std::size_t label = 0;  // global class id
  std::size_t id = 0;     // unique within its dataset
};

struct Dataset {
  std::size_t dim = 0;
  std::vector<Sample> samples;

  std::set<std::size_t> classes() const {
    std::set<std::size_t> out;
    for (const auto& s : samples) out.insert(s.label);
    return out;
  }

  Dataset subset(const std::set<std::size_t>& keep) const {
    Dataset out;
    out.dim = dim;
    for (const auto& s : samples)
      if (keep.count(s.label)) out.samples.push_back(s);
    return out;
  }
};

struct DataSplit {
  Dataset train;
  Dataset test;
};

/// One incremental session: a disjoint class set with its train/test samples.
struct TaskData {
  std::size_t task_id = 0;
  std::vector<std::size_t> classes;  // global ids, ascending
  std::vector<Sample> train;
  std::vector<Sample> test;
};

struct TaskStream {
  std::vector<TaskData> tasks;
  std::vector<std::size_t> dropped_classes;
  std::vector<std::string> warnings;

  std::size_t size() const { return tasks.size(); }
};

/// Gaussian class clusters. Class means lie on a sphere of radius
/// `separation`; noise is unit-variance isotropic. Samples are ordered class
/// by class.
inline Dataset gen_synthetic(std::size_t num_classes, std::size_t samples_per_class, std::size_t dim,
                             real separation, std::uint64_t seed) {
  if (dim == 0) throw ConfigError("gen_synthetic: dim must be positive");
  if (!(separation >= 0)) throw ConfigError("gen_synthetic: separation must be non-negative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<real>> means(num_classes, std::vector<real>(dim));
  for (auto& m : means) {
    double n2 = 0;
    for (auto& v : m) {
      v = static_cast<real>(normal(rng));
      n2 += double(v) * double(v);
    }
    const double scale = n2 > 0 ? double(separation) / std::sqrt(n2) : 0.0;
    for (auto& v : m) v = static_cast<real>(double(v) * scale);
  }
  Dataset ds;
  ds.dim = dim;
  std::size_t id = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < samples_per_class; ++i) {
      Sample s;
      s.label = c;
      s.id = id++;
      s.x.resize(dim);
      for (std::size_t j = 0; j < dim; ++j) s.x[j] = means[c][j] + static_cast<real>(normal(rng));
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

/// Classes grouped into task clusters. Cluster t is centred at
/// `task_separation` * e_t (so cluster centres are mutually orthogonal); each
/// class mean is its centre plus a random offset of length `class_separation`.
/// Class ids run cluster by cluster; noise is unit-variance isotropic.
/// Shrinking `task_separation` relative to `class_separation` makes clusters overlap.
inline Dataset gen_task_clusters(std::size_t num_tasks, std::size_t classes_per_task, std::size_t samples_per_class,
                                 std::size_t dim, real task_separation, real class_separation, std::uint64_t seed) {
  if (num_tasks > dim) throw ConfigError("gen_task_clusters: need dim >= number of task clusters");
  if (!(task_separation >= 0)) throw ConfigError("gen_task_clusters: task_separation must be non-negative");
  Dataset ds = gen_synthetic(num_tasks * classes_per_task, samples_per_class, dim, class_separation, seed);
  for (auto& s : ds.samples) s.x[s.label / classes_per_task] += task_separation;
  return ds;
}

/// Splits every class: the first `train_per_class` samples go to train, the rest to test.
inline DataSplit split_per_class(const Dataset& ds, std::size_t train_per_class) {
  DataSplit out;
  out.train.dim = out.test.dim = ds.dim;
  std::map<std::size_t, std::size_t> seen;
  for (const auto& s : ds.samples) {
    auto& n = seen[s.label];
    (n < train_per_class ? out.train : out.test).samples.push_back(s);
    ++n;
  }
  return out;
}

/// Splits every class so that the last `test_fraction` of its samples (rounded down) are test samples.
inline DataSplit split_fraction(const Dataset& ds, real test_fraction) {
  if (!(test_fraction >= 0 && test_fraction < 1)) throw ConfigError("test_fraction must lie in [0, 1)");
  std::map<std::size_t, std::size_t> counts, seen;
  for (const auto& s : ds.samples) ++counts[s.label];
  DataSplit out;
  out.train.dim = out.test.dim = ds.dim;
  for (const auto& s : ds.samples) {
    const std::size_t n = counts[s.label];
    const auto n_test = static_cast<std::size_t>(std::floor(double(n) * double(test_fraction)));
    auto& k = seen[s.label];
    (k < n - n_test ? out.train : out.test).samples.push_back(s);
    ++k;
  }
  return out;
}

/// "Init i Inc j" partition of a shuffled class order (ascending ids when
/// `shuffle` is false). Classes that cannot fill a whole increment are
/// dropped and reported in `warnings`.
inline TaskStream make_task_stream(const DataSplit& source, std::size_t init_classes, std::size_t inc_classes,
                                   std::uint64_t seed, bool shuffle = true) {
  const auto class_set = source.train.classes();
  std::vector<std::size_t> order(class_set.begin(), class_set.end());
  if (init_classes == 0) throw ConfigError("make_task_stream: init must be positive");
  if (init_classes > order.size()) {
    throw ConfigError("make_task_stream: init " + std::to_string(init_classes) + " exceeds the " +
                      std::to_string(order.size()) + " available classes");
  }
  if (inc_classes == 0 && init_classes < order.size()) throw ConfigError("make_task_stream: increment must be positive");
  std::mt19937_64 rng(seed);
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> groups;
  groups.emplace_back(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(init_classes));
  std::size_t pos = init_classes;
  while (inc_classes > 0 && pos + inc_classes <= order.size()) {
    groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                        order.begin() + static_cast<std::ptrdiff_t>(pos + inc_classes));
    pos += inc_classes;
  }

  TaskStream stream;
  stream.dropped_classes.assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.end());
  std::sort(stream.dropped_classes.begin(), stream.dropped_classes.end());
  if (!stream.dropped_classes.empty()) {
    std::ostringstream w;
    w << "dropping " << stream.dropped_classes.size() << " class(es) that do not fill an increment:";
    for (auto c : stream.dropped_classes) w << ' ' << c;
    stream.warnings.push_back(w.str());
  }

  std::map<std::size_t, std::size_t> task_of;
  for (std::size_t t = 0; t < groups.size(); ++t) {
    TaskData td;
    td.task_id = t;
    td.classes = groups[t];
    std::sort(td.classes.begin(), td.classes.end());
    for (auto c : td.classes) task_of[c] = t;
    stream.tasks.push_back(std::move(td));
  }
  for (const auto& s : source.train.samples) {
    auto it = task_of.find(s.label);
    if (it != task_of.end()) stream.tasks[it->second].train.push_back(s);
  }
  for (const auto& s : source.test.samples) {
    auto it = task_of.find(s.label);
    if (it != task_of.end()) stream.tasks[it->second].test.push_back(s);
  }
  return stream;
}

// ---------------------------------------------------------------------------
// Ingestion

namespace detail {

inline std::uint32_t read_u32_le(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_class_id(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size() || v < 0) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw DataError(where + ": invalid class id '" + s + "'");
  }
}

}  // namespace detail

/// Reads a float32 matrix file: rows u32, cols u32 (little-endian), then
/// rows*cols little-endian float32 values.
inline std::vector<std::vector<real>> read_f32_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw DataError(path.string() + ": truncated header");
  const std::uint32_t rows = detail::read_u32_le(bytes.data());
  const std::uint32_t cols = detail::read_u32_le(bytes.data() + 4);
  if (bytes.size() != 8 + std::size_t(rows) * cols * 4) {
    throw DataError(path.string() + ": payload size does not match " + std::to_string(rows) + "x" +
                    std::to_string(cols));
  }
  std::vector<std::vector<real>> out(rows, std::vector<real>(cols));
  const unsigned char* p = bytes.data() + 8;
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c, p += 4) {
      const std::uint32_t u = detail::read_u32_le(p);
      float f;
      std::memcpy(&f, &u, 4);
      out[r][c] = static_cast<real>(f);
    }
  }
  return out;
}

inline void write_f32_matrix(const std::filesystem::path& path, const std::vector<std::vector<real>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  auto put = [&out](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  put(static_cast<std::uint32_t>(rows.size()));
  put(static_cast<std::uint32_t>(rows.empty() ? 0 : rows[0].size()));
  for (const auto& r : rows) {
    for (auto v : r) {
      const float f = static_cast<float>(v);
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      put(u);
    }
  }
}

/// One sample per line, comma separated, last column the class id. Lines that
/// fail to parse as numbers in the first row are treated as a header.
inline Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto cells = detail::split(line, ',');
    if (cells.size() < 2) throw DataError(path.string() + ":" + std::to_string(lineno) + ": need features and a label");
    Sample s;
    try {
      for (std::size_t i = 0; i + 1 < cells.size(); ++i) s.x.push_back(static_cast<real>(std::stod(cells[i])));
    } catch (const std::exception&) {
      if (ds.samples.empty() && lineno == 1) continue;
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": non-numeric feature");
    }
    s.label = detail::parse_class_id(detail::trim(cells.back()), path.string() + ":" + std::to_string(lineno));
    if (ds.dim == 0) ds.dim = s.x.size();
    if (s.x.size() != ds.dim) throw DataError(path.string() + ":" + std::to_string(lineno) + ": ragged row");
    s.id = ds.samples.size();
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw DataError(path.string() + ": no samples");
  return ds;
}

/// Directory ingestion: `manifest.tsv` lines "class_id<TAB>label_name<TAB>file"
/// (file relative to the directory, float32 matrix format), or `data.csv` as a
/// fallback.
inline Dataset load_dataset_dir(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.tsv";
  if (!std::filesystem::exists(manifest)) {
    const auto csv = dir / "data.csv";
    if (std::filesystem::exists(csv)) return load_csv(csv);
    if (dir.extension() == ".csv" && std::filesystem::is_regular_file(dir)) return load_csv(dir);
    throw IoError(dir.string() + ": neither manifest.tsv nor data.csv found");
  }
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open " + manifest.string());
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto cells = detail::split(line, '\t');
    if (cells.size() != 3) throw DataError(manifest.string() + ":" + std::to_string(lineno) + ": expected 3 columns");
    if (lineno == 1 && detail::trim(cells[0]) == "class_id") continue;
    const std::size_t cls = detail::parse_class_id(detail::trim(cells[0]), manifest.string());
    for (auto& row : read_f32_matrix(dir / detail::trim(cells[2]))) {
      if (ds.dim == 0) ds.dim = row.size();
      if (row.size() != ds.dim) throw DataError(cells[2] + ": column count differs from earlier files");
      Sample s;
      s.x = std::move(row);
      s.label = cls;
      s.id = ds.samples.size();
      ds.samples.push_back(std::move(s));
    }
  }
  if (ds.samples.empty()) throw DataError(manifest.string() + ": no samples");
  return ds;
}

}  // namespace prop

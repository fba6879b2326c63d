#pragma once

// Two-component PCA by power iteration with deflation, used to export
// samples and prototypes into a plane for plotting.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "prop/checkpoint.hpp"
#include "prop/errors.hpp"
#include "prop/metrics.hpp"
#include "prop/tensor.hpp"

namespace prop {

struct Pca2 {
  std::vector<real> mean;
  std::array<std::vector<real>, 2> components;
  std::array<real, 2> variances{};

  std::array<real, 2> project(std::span<const real> x) const {
    std::array<real, 2> out{};
    for (std::size_t k = 0; k < 2; ++k) {
      real s = 0;
      for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - mean[i]) * components[k][i];
      out[k] = s;
    }
    return out;
  }
};

namespace detail {

inline void normalize(std::vector<real>& v) {
  const real n = l2_norm(v);
  if (n > 0)
    for (auto& x : v) x /= n;
}

// Largest-magnitude coordinate positive, so the projection is deterministic.
inline void fix_sign(std::vector<real>& v) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
  if (v[arg] < 0)
    for (auto& x : v) x = -x;
}

inline std::vector<real> mat_vec(const std::vector<std::vector<real>>& c, const std::vector<real>& v) {
  std::vector<real> out(v.size(), 0);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = dot(c[i], v);
  return out;
}

inline std::vector<real> power_iterate(const std::vector<std::vector<real>>& cov, real tol, std::size_t max_iter,
                                       const std::vector<real>* orth) {
  const std::size_t d = cov.size();
  std::vector<real> v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = real(1) + real(i) / real(d + 1);
  auto project_out = [&](std::vector<real>& x) {
    if (!orth) return;
    const real p = dot(x, *orth);
    for (std::size_t i = 0; i < d; ++i) x[i] -= p * (*orth)[i];
  };
  project_out(v);
  normalize(v);
  for (std::size_t it = 0; it < max_iter; ++it) {
    std::vector<real> w = mat_vec(cov, v);
    project_out(w);
    if (l2_norm(w) == 0) break;
    normalize(w);
    real delta = 0;
    for (std::size_t i = 0; i < d; ++i) delta = std::max(delta, std::abs(w[i] - v[i]));
    v = std::move(w);
    if (delta < tol) break;
  }
  if (l2_norm(v) == 0 || (orth && std::abs(dot(v, *orth)) > real(0.5))) {
    // Degenerate spectrum: fall back to the first basis vector orthogonal to `orth`.
    for (std::size_t k = 0; k < d; ++k) {
      std::vector<real> e(d, 0);
      e[k] = 1;
      project_out(e);
      if (l2_norm(e) > real(1e-6)) {
        normalize(e);
        return e;
      }
    }
  }
  return v;
}

}  // namespace detail

/// Fits the top-2 principal axes of `rows` (tolerance on successive iterates).
inline Pca2 fit_pca2(std::span<const std::vector<real>> rows, real tol = real(1e-8), std::size_t max_iter = 100000) {
  if (rows.size() < 2) throw DataError("pca: need at least two samples");
  const std::size_t d = rows.front().size();
  if (d < 2) throw DataError("pca: need at least two dimensions");
  for (const auto& r : rows)
    if (r.size() != d) throw DimensionError("pca: inconsistent widths");
  bool distinct = false;
  for (const auto& r : rows) distinct = distinct || r != rows.front();
  if (!distinct) throw DataError("pca: fewer than two distinct points");

  Pca2 p;
  p.mean.assign(d, 0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < d; ++i) p.mean[i] += r[i];
  for (auto& m : p.mean) m /= real(rows.size());

  std::vector<std::vector<real>> cov(d, std::vector<real>(d, 0));
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i][j] += (r[i] - p.mean[i]) * (r[j] - p.mean[j]);
  }
  for (auto& row : cov)
    for (auto& v : row) v /= real(rows.size());

  p.components[0] = detail::power_iterate(cov, tol, max_iter, nullptr);
  detail::fix_sign(p.components[0]);
  p.variances[0] = dot(p.components[0], detail::mat_vec(cov, p.components[0]));
  p.components[1] = detail::power_iterate(cov, tol, max_iter, &p.components[0]);
  detail::fix_sign(p.components[1]);
  p.variances[1] = dot(p.components[1], detail::mat_vec(cov, p.components[1]));
  return p;
}

struct EmbeddingPoint {
  real x = 0, y = 0;
  std::size_t label = 0;
  bool prototype = false;
};

struct LabeledVector {
  std::vector<real> values;
  std::size_t label = 0;
};

/// Projects samples and prototypes onto the samples' top-2 principal axes.
inline std::vector<EmbeddingPoint> project_embeddings(std::span<const LabeledVector> samples,
                                                      std::span<const LabeledVector> prototypes) {
  std::vector<std::vector<real>> rows;
  for (const auto& s : samples) rows.push_back(s.values);
  const Pca2 pca = fit_pca2(rows);
  std::vector<EmbeddingPoint> out;
  for (const auto& s : samples) {
    const auto xy = pca.project(s.values);
    out.push_back({xy[0], xy[1], s.label, false});
  }
  for (const auto& c : prototypes) {
    if (c.values.size() != pca.mean.size()) throw DimensionError("embeddings: prototype width differs from samples");
    const auto xy = pca.project(c.values);
    out.push_back({xy[0], xy[1], c.label, true});
  }
  return out;
}

inline std::string embeddings_csv(std::span<const EmbeddingPoint> points) {
  std::string out = "x,y,label,kind\n";
  for (const auto& p : points) {
    out += format_real(p.x) + ',' + format_real(p.y) + ',' + std::to_string(p.label) + ',' +
           (p.prototype ? "prototype" : "sample") + '\n';
  }
  return out;
}

/// Writes the projection CSV (x, y, label, kind) and returns the points.
inline std::vector<EmbeddingPoint> export_embeddings(std::span<const LabeledVector> samples,
                                                     std::span<const LabeledVector> prototypes,
                                                     const std::filesystem::path& out_path) {
  auto points = project_embeddings(samples, prototypes);
  write_file_atomic(out_path, embeddings_csv(points));
  return points;
}

}  // namespace prop

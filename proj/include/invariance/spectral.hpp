#pragma once

// Spectral clustering of changed-pixel masks.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "invariance/error.hpp"
#include "invariance/image.hpp"
#include "invariance/jacobi.hpp"

namespace invariance {

struct PixelNode {
  int row = 0;
  int col = 0;
  friend bool operator==(const PixelNode&, const PixelNode&) = default;
};

/// Nodes are the true cells of a mask in row-major order; 8-neighbours are
/// joined with unit weight.
struct PixelGraph {
  int width = 0;
  int height = 0;
  std::vector<PixelNode> nodes;
  Eigen::MatrixXd weights;

  std::size_t size() const { return nodes.size(); }

  std::size_t edge_count() const {
    std::size_t e = 0;
    for (Eigen::Index i = 0; i < weights.rows(); ++i)
      for (Eigen::Index j = i + 1; j < weights.cols(); ++j) e += weights(i, j) != 0.0;
    return e;
  }

  Eigen::MatrixXd laplacian() const {
    Eigen::MatrixXd l = -weights;
    for (Eigen::Index i = 0; i < weights.rows(); ++i) l(i, i) = weights.row(i).sum();
    return l;
  }
};

inline PixelGraph build_pixel_graph(const Mask& mask) {
  PixelGraph g;
  g.width = mask.width;
  g.height = mask.height;
  std::vector<int> id(mask.cells.size(), -1);
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c)
      if (mask.at(r, c)) {
        id[static_cast<std::size_t>(r) * mask.width + c] = static_cast<int>(g.nodes.size());
        g.nodes.push_back({r, c});
      }
  if (g.nodes.empty()) fail(ErrorCode::EmptyMask, "mask has no set pixels");
  const auto n = static_cast<Eigen::Index>(g.nodes.size());
  g.weights = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto [r, c] = g.nodes[static_cast<std::size_t>(i)];
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        if (dr == 0 && dc == 0) continue;
        const int rr = r + dr, cc = c + dc;
        if (rr < 0 || cc < 0 || rr >= mask.height || cc >= mask.width) continue;
        const int j = id[static_cast<std::size_t>(rr) * mask.width + cc];
        if (j >= 0) g.weights(i, j) = 1.0;
      }
  }
  return g;
}

/// Component id per node (ids in order of first node) and the count.
inline std::pair<std::vector<int>, int> connected_components(const PixelGraph& g) {
  std::vector<int> comp(g.size(), -1);
  int count = 0;
  for (std::size_t s = 0; s < g.size(); ++s) {
    if (comp[s] >= 0) continue;
    std::queue<std::size_t> q;
    q.push(s);
    comp[s] = count;
    while (!q.empty()) {
      const auto u = q.front();
      q.pop();
      for (std::size_t v = 0; v < g.size(); ++v)
        if (comp[v] < 0 && g.weights(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v)) != 0.0) {
          comp[v] = count;
          q.push(v);
        }
    }
    ++count;
  }
  return {comp, count};
}

struct Spectrum {
  Eigen::VectorXd values;   ///< m smallest, ascending
  Eigen::MatrixXd vectors;  ///< n x m, orthonormal columns
};

/// The m smallest eigenpairs of L = D - W.
inline Spectrum laplacian_spectrum(const PixelGraph& g, std::size_t m, int max_sweeps = 100) {
  if (m > g.size()) fail(ErrorCode::InvalidParams, "requested more eigenpairs than nodes");
  auto eig = jacobi_eigen(g.laplacian(), max_sweeps);
  const auto mm = static_cast<Eigen::Index>(m);
  return {eig.values.head(mm), eig.vectors.leftCols(mm)};
}

/// Lloyd's k-means on the rows of `points` with farthest-first seeding that
/// starts from row 0. Clusters left empty are dropped and ids compacted in
/// order of first row.
inline std::vector<int> kmeans_rows(const Eigen::MatrixXd& points, int k, int max_iter = 100) {
  const Eigen::Index n = points.rows();
  k = std::clamp<int>(k, 1, static_cast<int>(n));
  std::vector<Eigen::Index> seeds{0};
  Eigen::VectorXd nearest = (points.rowwise() - points.row(0)).rowwise().squaredNorm();
  while (static_cast<int>(seeds.size()) < k) {
    Eigen::Index far = 0;
    nearest.maxCoeff(&far);
    seeds.push_back(far);
    nearest = nearest.cwiseMin((points.rowwise() - points.row(far)).rowwise().squaredNorm());
  }
  Eigen::MatrixXd centers(k, points.cols());
  for (int c = 0; c < k; ++c) centers.row(c) = points.row(seeds[static_cast<std::size_t>(c)]);

  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (points.row(i) - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[static_cast<std::size_t>(i)] != best) {
        assign[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    if (!changed) break;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0) centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
  }

  std::vector<int> remap(static_cast<std::size_t>(k), -1);
  int next = 0;
  for (auto& a : assign) {
    if (remap[static_cast<std::size_t>(a)] < 0) remap[static_cast<std::size_t>(a)] = next++;
    a = remap[static_cast<std::size_t>(a)];
  }
  return assign;
}

struct ClusterAssignment {
  std::vector<PixelNode> nodes;
  std::vector<int> cluster_id;  ///< parallel to nodes, in [0, k)
  int k = 0;
  int components = 0;
};

/// Spectral clustering of the set cells of `mask`.
///
/// k is the position of the largest gap among the smallest max_k + 1
/// Laplacian eigenvalues, capped at max_k and at the number of connected
/// components. When the mask has more components than max_k the zero
/// eigenvalues make the gap meaningless, so k = max_k.
inline ClusterAssignment cluster(const Mask& mask, int max_k = 6) {
  if (max_k < 1) fail(ErrorCode::InvalidParams, "max_k must be at least 1");
  const auto g = build_pixel_graph(mask);
  const auto n = static_cast<int>(g.size());
  const auto [comp, components] = connected_components(g);

  ClusterAssignment out;
  out.nodes = g.nodes;
  out.components = components;
  if (n == 1) {
    out.cluster_id = {0};
    out.k = 1;
    return out;
  }

  const auto eig = jacobi_eigen(g.laplacian());
  int k = max_k;
  if (components <= max_k) {
    int gap_pos = 1;
    double best_gap = -1.0;
    // Past the last eigenvalue the gap counts as infinite.
    for (int i = 1; i <= std::min(max_k, n); ++i) {
      const double gap = i == n ? std::numeric_limits<double>::infinity() : eig.values(i) - eig.values(i - 1);
      if (gap > best_gap + 1e-12) {
        best_gap = gap;
        gap_pos = i;
      }
    }
    k = std::min({gap_pos, max_k, components});
  }
  k = std::min(k, n);
  out.cluster_id = kmeans_rows(eig.vectors.leftCols(k), k);
  out.k = *std::max_element(out.cluster_id.begin(), out.cluster_id.end()) + 1;
  return out;
}

/// Text raster for debugging: '.' off-mask, '0'-'9' then 'a'-'z' per cluster.
inline std::string format_assignment(const ClusterAssignment& a, int width, int height) {
  std::string grid(static_cast<std::size_t>(height) * (width + 1), '.');
  for (int r = 0; r < height; ++r) grid[static_cast<std::size_t>(r) * (width + 1) + width] = '\n';
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    const int id = a.cluster_id[i];
    const char ch = id < 10 ? static_cast<char>('0' + id) : static_cast<char>('a' + (id - 10) % 26);
    grid[static_cast<std::size_t>(a.nodes[i].row) * (width + 1) + a.nodes[i].col] = ch;
  }
  return grid;
}

}  // namespace invariance

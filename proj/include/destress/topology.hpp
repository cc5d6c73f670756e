#ifndef DESTRESS_TOPOLOGY_HPP
#define DESTRESS_TOPOLOGY_HPP

#include <algorithm>
#include <cstdint>
#include <istream>
#include <ostream>
#include <queue>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "destress/errors.hpp"
#include "destress/rng.hpp"

namespace destress {

enum class GraphKind { Complete, ErdosRenyi, Grid2D, Path, Custom };

inline const char* to_string(GraphKind k) {
  switch (k) {
    case GraphKind::Complete:
      return "complete";
    case GraphKind::ErdosRenyi:
      return "erdos_renyi";
    case GraphKind::Grid2D:
      return "grid";
    case GraphKind::Path:
      return "path";
    case GraphKind::Custom:
      return "custom";
  }
  return "?";
}

// Undirected communication graph over agents 0..n-1. Edges are stored as
// (i, j) with i < j, sorted, without duplicates or self-loops.
struct Graph {
  int n = 0;
  GraphKind kind = GraphKind::Custom;
  std::vector<std::pair<int, int>> edges;
  int rows = 0;  // set for Grid2D only
  int cols = 0;

  std::vector<int> degrees() const {
    std::vector<int> deg(n, 0);
    for (auto [i, j] : edges) {
      ++deg[i];
      ++deg[j];
    }
    return deg;
  }

  std::vector<std::vector<int>> adjacency() const {
    std::vector<std::vector<int>> adj(n);
    for (auto [i, j] : edges) {
      adj[i].push_back(j);
      adj[j].push_back(i);
    }
    return adj;
  }
};

// Breadth-first reachability from node 0.
inline bool is_connected(const Graph& g) {
  if (g.n <= 0) return false;
  auto adj = g.adjacency();
  std::vector<char> seen(g.n, 0);
  std::queue<int> q;
  q.push(0);
  seen[0] = 1;
  int reached = 1;
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int v : adj[u]) {
      if (!seen[v]) {
        seen[v] = 1;
        ++reached;
        q.push(v);
      }
    }
  }
  return reached == g.n;
}

struct TopologyParams {
  double p = 0.0;  // ErdosRenyi edge probability
  int rows = 0;    // Grid2D dimensions, rows * cols == n
  int cols = 0;
};

namespace detail {

inline Graph path_graph(int n) {
  Graph g{n, GraphKind::Path, {}, 0, 0};
  for (int i = 0; i + 1 < n; ++i) g.edges.emplace_back(i, i + 1);
  return g;
}

inline Graph complete_graph(int n) {
  Graph g{n, GraphKind::Complete, {}, 0, 0};
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) g.edges.emplace_back(i, j);
  return g;
}

// Row-major node numbering: node (r, c) is r * cols + c.
inline Graph grid_graph(int n, int rows, int cols) {
  if (rows <= 0 || cols <= 0 || rows * cols != n)
    throw BadDimensions("grid requires rows*cols == n, got " +
                        std::to_string(rows) + "x" + std::to_string(cols) +
                        " for n=" + std::to_string(n));
  Graph g{n, GraphKind::Grid2D, {}, rows, cols};
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      int u = r * cols + c;
      if (c + 1 < cols) g.edges.emplace_back(u, u + 1);
      if (r + 1 < rows) g.edges.emplace_back(u, u + cols);
    }
  }
  std::sort(g.edges.begin(), g.edges.end());
  return g;
}

inline Graph erdos_renyi_graph(int n, double p, std::uint64_t seed) {
  if (!(p > 0.0 && p <= 1.0))
    throw ConfigInvalid("erdos_renyi requires 0 < p <= 1");
  auto gen = rng::make_stream(seed, rng::StreamTag::kTopology);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  constexpr int kRetryCap = 1000;
  for (int attempt = 0; attempt < kRetryCap; ++attempt) {
    Graph g{n, GraphKind::ErdosRenyi, {}, 0, 0};
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (unif(gen) < p) g.edges.emplace_back(i, j);
    if (is_connected(g)) return g;
  }
  throw NotConnected("erdos_renyi: no connected draw in 1000 attempts (n=" +
                     std::to_string(n) + ", p=" + std::to_string(p) + ")");
}

}  // namespace detail

// Generates a connected graph of the requested kind. Erdos-Renyi resamples
// from the same stream until connected (cap 1000, then NotConnected).
inline Graph build_topology(GraphKind kind, int n, const TopologyParams& params,
                            std::uint64_t seed) {
  if (n < 1) throw ConfigInvalid("graph needs n >= 1");
  Graph g;
  switch (kind) {
    case GraphKind::Path:
      g = detail::path_graph(n);
      break;
    case GraphKind::Complete:
      g = detail::complete_graph(n);
      break;
    case GraphKind::Grid2D:
      g = detail::grid_graph(n, params.rows, params.cols);
      break;
    case GraphKind::ErdosRenyi:
      g = detail::erdos_renyi_graph(n, params.p, seed);
      break;
    case GraphKind::Custom:
      throw ConfigInvalid("cannot generate a custom graph");
  }
  if (!is_connected(g))
    throw NotConnected("generated graph is not connected (n=" +
                       std::to_string(n) + ")");
  return g;
}

// Edge-list text format: first line `n`, then one `i j` pair per line.
inline void write_edge_list(const Graph& g, std::ostream& os) {
  os << g.n << "\n";
  for (auto [i, j] : g.edges) os << i << " " << j << "\n";
}

inline Graph read_edge_list(std::istream& is) {
  Graph g;
  g.kind = GraphKind::Custom;
  if (!(is >> g.n) || g.n < 1) throw ParseError("bad agent count", 1);
  long line = 1;
  int i, j;
  while (is >> i >> j) {
    ++line;
    if (i == j || i < 0 || j < 0 || i >= g.n || j >= g.n)
      throw ParseError("bad edge " + std::to_string(i) + " " +
                           std::to_string(j),
                       line);
    g.edges.emplace_back(std::min(i, j), std::max(i, j));
  }
  std::sort(g.edges.begin(), g.edges.end());
  g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
  return g;
}

}  // namespace destress

#endif  // DESTRESS_TOPOLOGY_HPP

#ifndef DESTRESS_MIXING_HPP
#define DESTRESS_MIXING_HPP

#include <Eigen/Dense>
#include <cassert>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "destress/errors.hpp"
#include "destress/topology.hpp"

namespace destress {

// Weight matrix conforming to a communication graph, with row and column
// sums equal to one, plus its cached mixing rate
//   alpha = || W - (1/n) 11^T ||_op.
// One multiplication by W is one communication round. Entries may be
// negative (FDLA-style matrices loaded from file are supported).
struct MixingMatrix {
  Eigen::MatrixXd w;
  double alpha = 1.0;
  int n = 0;
};

// How many gossip rounds to spend per algorithmic step, and whether the
// rounds are combined into a Chebyshev polynomial of W.
struct MixingSchedule {
  int k_in = 1;
  int k_out = 1;
  bool accelerated = false;
};

namespace detail {

inline void require_stochastic(const Eigen::MatrixXd& w, double tol) {
  const int n = static_cast<int>(w.rows());
  for (int i = 0; i < n; ++i) {
    double rs = w.row(i).sum();
    double cs = w.col(i).sum();
    if (std::abs(rs - 1.0) > tol || std::abs(cs - 1.0) > tol)
      throw NotStochastic("row/col sum deviates from 1 by more than " +
                          std::to_string(tol) + " at index " +
                          std::to_string(i));
  }
}

#ifndef NDEBUG
inline void assert_mean_preserved(const Eigen::MatrixXd& before,
                                  const Eigen::MatrixXd& after) {
  Eigen::RowVectorXd mb = before.colwise().mean();
  Eigen::RowVectorXd ma = after.colwise().mean();
  for (int c = 0; c < mb.size(); ++c)
    assert(std::abs(ma[c] - mb[c]) <= 1e-12 * (1.0 + std::abs(mb[c])));
}
#endif

}  // namespace detail

// Largest singular value of W - (1/n) 11^T, by power iteration on
// (W-J)^T (W-J) with a fixed start vector so the result is deterministic.
inline double mixing_rate(const Eigen::MatrixXd& w) {
  const int n = static_cast<int>(w.rows());
  if (w.cols() != n) throw BadDimensions("mixing matrix must be square");
  detail::require_stochastic(w, 1e-9);

  Eigen::MatrixXd b = w;
  b.array() -= 1.0 / n;

  Eigen::VectorXd v = Eigen::VectorXd::Constant(n, 1.0 / std::sqrt(double(n)));
  v[0] += 1e-3;
  v.normalize();

  double lambda = 0.0;
  constexpr int kMaxIter = 10000;
  constexpr double kTol = 1e-10;
  for (int it = 0; it < kMaxIter; ++it) {
    Eigen::VectorXd bv = b * v;
    double next = bv.squaredNorm();  // Rayleigh quotient of B^T B
    Eigen::VectorXd w2 = b.transpose() * bv;
    double norm = w2.norm();
    if (norm == 0.0) return 0.0;
    v = w2 / norm;
    if (std::abs(next - lambda) <= kTol) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return std::sqrt(std::max(lambda, 0.0));
}

// Metropolis-Hastings weights: w_ij = 1/(1 + max(deg_i, deg_j)) per edge,
// diagonal absorbing the remainder. Symmetric and doubly stochastic by
// construction; alpha < 1 on any connected graph.
inline MixingMatrix metropolis_weights(const Graph& g) {
  if (!is_connected(g))
    throw NotConnected("metropolis_weights requires a connected graph");
  const int n = g.n;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
  auto deg = g.degrees();
  for (auto [i, j] : g.edges) {
    double wij = 1.0 / (1.0 + std::max(deg[i], deg[j]));
    w(i, j) = wij;
    w(j, i) = wij;
  }
  for (int i = 0; i < n; ++i) w(i, i) = 1.0 - w.row(i).sum();
  return MixingMatrix{w, mixing_rate(w), n};
}

// W^k * state, applied as k successive multiplications.
inline Eigen::MatrixXd gossip(const MixingMatrix& w,
                              const Eigen::MatrixXd& state, int k) {
  if (state.rows() != w.n)
    throw DimensionMismatch("state must have n = " + std::to_string(w.n) +
                            " rows");
  Eigen::MatrixXd out = state;
  for (int i = 0; i < k; ++i) out = w.w * out;
#ifndef NDEBUG
  detail::assert_mean_preserved(state, out);
#endif
  return out;
}

// P_k(W) * state for the degree-k Chebyshev polynomial scaled to [-alpha,
// alpha] and shifted so that P_k(1) = 1, which keeps column means exact.
// Uses the normalized three-term recurrence
//   y_0 = state,  y_1 = W state,
//   y_t = (2/a) r_t W y_{t-1} - r_t r_{t-1} y_{t-2},
//   r_1 = a,      r_t = 1 / (2/a - r_{t-1}),
// where r_t is the ratio T_{t-1}(1/a)/T_t(1/a); every iterate stays at the
// scale of the input, so no overflow for large k. Exactly k multiplications
// by W.
inline Eigen::MatrixXd chebyshev_gossip(const MixingMatrix& w,
                                        const Eigen::MatrixXd& state, int k) {
  if (state.rows() != w.n)
    throw DimensionMismatch("state must have n = " + std::to_string(w.n) +
                            " rows");
  double asym = (w.w - w.w.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-12)
    throw NotSymmetric("chebyshev_gossip needs symmetric W, max asymmetry " +
                       std::to_string(asym));
  const double a = w.alpha;
  // Degree 1 is the identity polynomial; alpha ~ 0 means W is already the
  // averaging projector and plain powering is exact.
  if (k <= 1 || a <= 1e-12) return gossip(w, state, k);

  Eigen::MatrixXd y_prev = state;
  Eigen::MatrixXd y = w.w * state;
  double r_prev = a;
  for (int t = 2; t <= k; ++t) {
    double r = 1.0 / (2.0 / a - r_prev);
    Eigen::MatrixXd y_next = (2.0 / a) * r * (w.w * y) - r * r_prev * y_prev;
    y_prev.swap(y);
    y = std::move(y_next);
    r_prev = r;
  }
#ifndef NDEBUG
  detail::assert_mean_preserved(state, y);
#endif
  return y;
}

// Contraction factor of k rounds on the consensus-orthogonal subspace:
// alpha^k for plain powering; for Chebyshev the closed form
//   2 c^k / (1 + c^{2k}),  c = (1 - sqrt(1 - alpha^2)) / alpha,
// which equals 1 / T_k(1/alpha) and is attained when alpha is an eigenvalue.
inline double effective_alpha(double alpha, int k, bool accelerated) {
  if (alpha == 0.0) return 0.0;
  if (!accelerated) return std::pow(alpha, k);
  double c = (1.0 - std::sqrt(1.0 - alpha * alpha)) / alpha;
  double ck = std::pow(c, k);
  return 2.0 * ck / (1.0 + ck * ck);
}

// Dispatch helpers used by the optimizers.
inline Eigen::MatrixXd mix(const MixingMatrix& w, const Eigen::MatrixXd& state,
                           int k, bool accelerated) {
  return accelerated ? chebyshev_gossip(w, state, k) : gossip(w, state, k);
}

inline Eigen::MatrixXd mix_inner(const MixingMatrix& w,
                                 const Eigen::MatrixXd& state,
                                 const MixingSchedule& s) {
  return mix(w, state, s.k_in, s.accelerated);
}

inline Eigen::MatrixXd mix_outer(const MixingMatrix& w,
                                 const Eigen::MatrixXd& state,
                                 const MixingSchedule& s) {
  return mix(w, state, s.k_out, s.accelerated);
}

// Dense CSV loader (n rows of n comma-separated reals) for externally
// computed mixing matrices, e.g. FDLA weights. Validates row/column sums and,
// when a graph is given, that off-graph entries are zero.
inline MixingMatrix load_mixing_csv(const std::string& path,
                                    const Graph* conform = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open mixing matrix file: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        size_t pos = 0;
        double val = std::stod(tok, &pos);
        while (pos < tok.size() && std::isspace(static_cast<unsigned char>(tok[pos]))) ++pos;
        if (pos != tok.size()) throw std::invalid_argument(tok);
        row.push_back(val);
      } catch (const std::exception&) {
        throw ParseError("bad number '" + tok + "'", line_no);
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw RaggedRow("expected " + std::to_string(rows.front().size()) +
                          " columns, got " + std::to_string(row.size()),
                      line_no);
    rows.push_back(std::move(row));
  }
  const int n = static_cast<int>(rows.size());
  if (n == 0 || static_cast<int>(rows.front().size()) != n)
    throw BadDimensions("mixing CSV must be a non-empty square matrix");
  Eigen::MatrixXd w(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) w(i, j) = rows[i][j];
  detail::require_stochastic(w, 1e-9);
  if (conform) {
    if (conform->n != n)
      throw BadDimensions("graph has n=" + std::to_string(conform->n) +
                          " but matrix is " + std::to_string(n) + "x" +
                          std::to_string(n));
    Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(n, n);
    for (auto [i, j] : conform->edges) mask(i, j) = mask(j, i) = 1.0;
    for (int i = 0; i < n; ++i) mask(i, i) = 1.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (mask(i, j) == 0.0 && w(i, j) != 0.0)
          throw ConfigInvalid("matrix entry (" + std::to_string(i) + "," +
                              std::to_string(j) + ") nonzero off the graph");
  }
  return MixingMatrix{w, mixing_rate(w), n};
}

inline void write_mixing_csv(const MixingMatrix& w, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write mixing matrix file: " + path);
  char buf[32];
  for (int i = 0; i < w.n; ++i) {
    for (int j = 0; j < w.n; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", w.w(i, j));
      out << buf << (j + 1 == w.n ? "" : ",");
    }
    out << "\n";
  }
}

}  // namespace destress

#endif  // DESTRESS_MIXING_HPP

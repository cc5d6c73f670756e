#ifndef DESTRESS_ALGORITHMS_HPP
#define DESTRESS_ALGORITHMS_HPP

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <thread>
#include <vector>

#include "destress/data.hpp"
#include "destress/errors.hpp"
#include "destress/mixing.hpp"
#include "destress/model.hpp"
#include "destress/rng.hpp"

namespace destress {

// Stacked per-agent iterates, one row per agent:
//   x  current parameter estimates
//   s  gradient-tracking variables (outer loop)
//   u  inner-loop iterates
//   v  inner-loop gradient estimates
//   prev_local_grad  cached local full gradients at the previous outer point
struct NetworkState {
  Eigen::MatrixXd x, s, u, v, prev_local_grad;
};

struct Hyperparams {
  double eta = 0.0;
  long t_outer = 0;  // 0: derive the horizon from the run budget
  int s_inner = 1;
  int batch = 1;
  int k_in = 1;
  int k_out = 1;
  bool accelerated = true;

  MixingSchedule schedule() const { return {k_in, k_out, accelerated}; }
};

// comm_rounds counts gossip rounds; one inner step spends k_in rounds and one
// outer update spends k_out, so after T outer loops comm = T*(S*k_in + k_out).
// ifo_per_agent counts every sample-gradient evaluation (a minibatch step
// touches b samples at two points: 2b; an outer refresh reuses the cached
// previous gradient: m). ifo_paper uses the looser convention of one unit per
// pair and no outer caching (b per inner step, 2m per outer, m at init).
struct Counters {
  long long comm_rounds = 0;
  long long ifo_per_agent = 0;
  long long ifo_paper = 0;
};

struct Budget {
  enum class Kind { Outer, Comm, Ifo };
  Kind kind = Kind::Outer;
  long long limit = 0;

  static Budget outer(long long t) { return {Kind::Outer, t}; }
  static Budget comm(long long c) { return {Kind::Comm, c}; }
  static Budget ifo(long long k) { return {Kind::Ifo, k}; }
};

struct Problem {
  const LossModel* model = nullptr;
  const Dataset* data = nullptr;
  const Partition* part = nullptr;
};

// Diminishing schedule for DSGD: eta_t = eta0 / (1 + t/tau), t = 0,1,...
// tau <= 0 selects the default T/10 once the horizon T is known.
struct StepSchedule {
  double eta0 = 1.0;
  double tau = 0.0;

  double at(long t, long horizon) const {
    double tt = tau > 0.0 ? tau : std::max(1.0, double(horizon) / 10.0);
    return eta0 / (1.0 + double(t) / tt);
  }
};

struct DestressHooks {
  std::function<void(const NetworkState&, const Counters&)> on_init;
  std::function<void(long, const NetworkState&, const Counters&)> on_outer;
  std::function<void(long, long, const NetworkState&, const Counters&)>
      on_inner;
};

struct BaselineHooks {
  std::function<void(const Eigen::MatrixXd&, const Counters&)> on_init;
  // x, tracking variable (gt-sarah only, empty for dsgd), v estimate
  std::function<void(long, const Eigen::MatrixXd&, const Eigen::MatrixXd&,
                     const Eigen::MatrixXd&, const Counters&)>
      on_iter;
};

struct RunOptions {
  int threads = 1;
  bool collect_output_pool = false;
};

struct RunResult {
  Eigen::VectorXd output;
  Counters counters;
  long iterations = 0;
  std::vector<Eigen::VectorXd> debug_pool;
};

inline double consensus_error_sq(const Eigen::MatrixXd& state) {
  Eigen::RowVectorXd mean = state.colwise().mean();
  return (state.rowwise() - mean).squaredNorm();
}

// Recommended parameter choices for a target accuracy: S = ceil(sqrt(mn)),
// b = ceil(sqrt(m/n)), k_out = ceil(log(sqrt(nb)+1)/sqrt(1-alpha)),
// k_in = ceil(log 2/sqrt(1-alpha)), eta = 1/(160 L), Chebyshev mixing.
// The outer horizon is left to the caller's budget.
inline Hyperparams derive_hyperparams(int m, int n, double alpha,
                                      double smoothness) {
  if (m < 1 || n < 1) throw ConfigInvalid("derive_hyperparams needs m,n >= 1");
  if (!(alpha >= 0.0 && alpha < 1.0))
    throw BadAlpha("alpha must be in [0,1), got " + std::to_string(alpha));
  if (!(smoothness > 0.0)) throw ConfigInvalid("smoothness must be positive");
  Hyperparams h;
  h.s_inner = static_cast<int>(std::ceil(std::sqrt(double(m) * n)));
  h.batch = std::max(1, static_cast<int>(std::ceil(std::sqrt(double(m) / n))));
  double root_gap = std::sqrt(1.0 - alpha);
  h.k_out = static_cast<int>(
      std::ceil(std::log(std::sqrt(double(n) * h.batch) + 1.0) / root_gap));
  h.k_out = std::max(1, h.k_out);
  h.k_in = std::max(
      1, static_cast<int>(std::ceil(std::log(2.0) / root_gap)));
  h.eta = 1.0 / (160.0 * smoothness);
  h.accelerated = true;
  h.t_outer = 0;
  return h;
}

// Advisory check of the step-size bound
//   eta <= (1/L) min{ (1-a_in)(1-a_out) / [10 (1 + a_in a_out sqrt(nb))
//                                             (sqrt(S/(nb)) + 1)],
//                     (1-a_in)^3 / (10 a_in),
//                     (1-a_in)^(3/2) (1-a_out) / (4 sqrt(6) a_in a_out) }
// with a_in = alpha^k_in, a_out = alpha^k_out. Tuned runs routinely use
// larger steps, so callers treat a false result as a warning.
inline bool validate_step_size(const Hyperparams& h, double alpha,
                               double smoothness, int n) {
  const double inf = std::numeric_limits<double>::infinity();
  double a_in = std::pow(alpha, h.k_in);
  double a_out = std::pow(alpha, h.k_out);
  double nb = double(n) * h.batch;
  double term1 = (1.0 - a_in) * (1.0 - a_out) /
                 (10.0 * (1.0 + a_in * a_out * std::sqrt(nb)) *
                  (std::sqrt(double(h.s_inner) / nb) + 1.0));
  double term2 =
      a_in > 0.0 ? std::pow(1.0 - a_in, 3) / (10.0 * a_in) : inf;
  double term3 = (a_in > 0.0 && a_out > 0.0)
                     ? std::pow(1.0 - a_in, 1.5) * (1.0 - a_out) /
                           (4.0 * std::sqrt(6.0) * a_in * a_out)
                     : inf;
  double bound = std::min({term1, term2, term3}) / smoothness;
  return h.eta <= bound;
}

namespace detail {

inline void parallel_for(int n_threads, int n,
                         const std::function<void(int)>& fn) {
  if (n_threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
  };
  std::vector<std::thread> pool;
  int k = std::min(n_threads, n);
  pool.reserve(k);
  for (int t = 0; t < k; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
}

// Mean gradient over one shard, accumulated in shard index order.
inline Eigen::VectorXd shard_grad(const LossModel& model,
                                  const Eigen::VectorXd& x, const Dataset& ds,
                                  const std::vector<int>& idx) {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(model.dim());
  for (int j : idx) acc += model.grad(x, ds.samples[j]);
  return acc / double(idx.size());
}

inline void check_problem(const Problem& p, const MixingMatrix& w,
                          const Eigen::VectorXd& x0) {
  if (!p.model || !p.data || !p.part)
    throw ConfigInvalid("problem needs model, data and partition");
  if (p.part->n_agents() != w.n)
    throw ShardMismatch("partition has " + std::to_string(p.part->n_agents()) +
                        " shards but mixing matrix has n=" +
                        std::to_string(w.n));
  if (p.part->per_agent < 1) throw ShardMismatch("empty shards");
  for (const auto& shard : p.part->shards)
    if (static_cast<int>(shard.size()) != p.part->per_agent)
      throw ShardMismatch("unequal shard sizes");
  if (static_cast<int>(x0.size()) != p.model->dim())
    throw DimensionMismatch("x0 has size " + std::to_string(x0.size()) +
                            ", model expects " +
                            std::to_string(p.model->dim()));
}

inline bool budget_reached(const Budget& b, long t_done,
                           const Counters& c) {
  switch (b.kind) {
    case Budget::Kind::Outer:
      return t_done >= b.limit;
    case Budget::Kind::Comm:
      return c.comm_rounds >= b.limit;
    case Budget::Kind::Ifo:
      return c.ifo_per_agent >= b.limit;
  }
  return true;
}

}  // namespace detail

// Stochastic recursive gradient descent with gradient tracking and extra
// mixing. Outer loop:
//   s(t) = W^k_out (s(t-1) + F'(x(t)) - F'(x(t-1)))
// Inner loop, per step, with minibatches of size b drawn uniformly with
// replacement per agent (agents use independent RNG streams):
//   u(s)   = W^k_in (u(s-1) - eta v(s-1))
//   g_i    = avg_z (l'(u_i(s); z) - l'(u_i(s-1); z)) + v_i(s-1)
//   v(s)   = W^k_in g
// The output is drawn uniformly from the pool {u_i(t, s-1)} via online
// reservoir sampling. When batch >= per-agent shard size the whole shard is
// used once per step (no sampling noise).
inline RunResult destress_run(const Problem& p, const MixingMatrix& w,
                              const Hyperparams& h, const Eigen::VectorXd& x0,
                              std::uint64_t seed,
                              const DestressHooks& hooks = {},
                              std::optional<Budget> budget = std::nullopt,
                              const RunOptions& opts = {}) {
  detail::check_problem(p, w, x0);
  if (h.s_inner < 1 || h.batch < 1)
    throw ConfigInvalid("destress needs s_inner >= 1 and batch >= 1");
  if (h.k_in < 1 || h.k_out < 1)
    throw ConfigInvalid("mixing schedule needs k_in >= 1 and k_out >= 1");
  const MixingSchedule sched = h.schedule();
  Budget bud = budget.value_or(Budget::outer(h.t_outer));
  if (bud.kind == Budget::Kind::Outer && bud.limit < 1)
    throw ConfigInvalid("no outer budget given (t_outer or budget)");

  const LossModel& model = *p.model;
  const Dataset& ds = *p.data;
  const auto& shards = p.part->shards;
  const int n = w.n;
  const int d = model.dim();
  const int m = p.part->per_agent;
  const int b = std::min(h.batch, m);
  const bool full_batch = b >= m;

  NetworkState st;
  st.x = x0.transpose().replicate(n, 1);
  st.prev_local_grad.resize(n, d);
  for (int i = 0; i < n; ++i)
    st.prev_local_grad.row(i) =
        detail::shard_grad(model, x0, ds, shards[i]).transpose();
  // s_i(0) is the full global gradient at the shared start point; its local
  // pieces were just computed, so the init costs m evaluations per agent.
  Eigen::RowVectorXd global0 = st.prev_local_grad.colwise().mean();
  st.s = global0.replicate(n, 1);
  st.u = st.x;
  st.v = st.s;

  Counters c;
  c.ifo_per_agent += m;
  c.ifo_paper += m;
  if (hooks.on_init) hooks.on_init(st, c);

  std::vector<std::mt19937_64> agent_gen;
  agent_gen.reserve(n);
  for (int i = 0; i < n; ++i) agent_gen.push_back(rng::agent_stream(seed, i));

  auto out_gen = rng::make_stream(seed, rng::StreamTag::kOutput);
  Eigen::VectorXd output = x0;
  long long pool_count = 0;
  RunResult res;

  Eigen::MatrixXd cur_local(n, d), g(n, d);
  long t = 0;
  while (!detail::budget_reached(bud, t, c)) {
    ++t;
    // x(t) = u(t-1, S); st.x already holds it.
    detail::parallel_for(opts.threads, n, [&](int i) {
      cur_local.row(i) =
          detail::shard_grad(model, st.x.row(i).transpose(), ds, shards[i])
              .transpose();
    });
    c.ifo_per_agent += m;
    c.ifo_paper += 2LL * m;
    // Grouped so the tracking correction cancels exactly when s == prev.
    st.s = mix_outer(w, st.s - st.prev_local_grad + cur_local, sched);
    st.prev_local_grad = cur_local;
    c.comm_rounds += h.k_out;
    if (!st.s.allFinite()) throw NonFinite(t, 0);
    if (hooks.on_outer) hooks.on_outer(t, st, c);

    st.u = st.x;
    st.v = st.s;
    for (long s = 1; s <= h.s_inner; ++s) {
      // Output pool candidates are the pre-update iterates u(t, s-1).
      pool_count += n;
      if (opts.collect_output_pool)
        for (int i = 0; i < n; ++i)
          res.debug_pool.push_back(st.u.row(i).transpose());
      {
        std::uniform_int_distribution<long long> slot(0, pool_count - 1);
        long long r = slot(out_gen);
        if (r < n) output = st.u.row(static_cast<int>(r)).transpose();
      }

      Eigen::MatrixXd u_new = mix_inner(w, st.u - h.eta * st.v, sched);
      detail::parallel_for(opts.threads, n, [&](int i) {
        Eigen::VectorXd xn = u_new.row(i).transpose();
        Eigen::VectorXd xo = st.u.row(i).transpose();
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
        if (full_batch) {
          for (int j : shards[i])
            acc += model.grad(xn, ds.samples[j]) - model.grad(xo, ds.samples[j]);
        } else {
          std::uniform_int_distribution<int> pick(0, m - 1);
          for (int k = 0; k < b; ++k) {
            int j = shards[i][pick(agent_gen[i])];
            acc += model.grad(xn, ds.samples[j]) - model.grad(xo, ds.samples[j]);
          }
        }
        g.row(i) = (acc / double(b) + st.v.row(i).transpose()).transpose();
      });
      c.ifo_per_agent += 2LL * b;
      c.ifo_paper += b;
      st.v = mix_inner(w, g, sched);
      st.u = std::move(u_new);
      // The u-mix and v-mix of one inner step share its k_in rounds, matching
      // the closed form comm = T (S k_in + k_out).
      c.comm_rounds += h.k_in;
      if (!st.u.allFinite() || !st.v.allFinite()) throw NonFinite(t, s);
      if (hooks.on_inner) hooks.on_inner(t, s, st, c);
    }
    st.x = st.u;
  }

  res.output = output;
  res.counters = c;
  res.iterations = t;
  return res;
}

// GT-SARAH baseline: one x-mix and one y-mix per iteration (2 comm rounds),
// recursive minibatch estimator with a full local gradient refresh every q
// iterations, output = mean of the final iterates.
inline RunResult gt_sarah_run(const Problem& p, const MixingMatrix& w,
                              double eta, int batch, int q,
                              const Eigen::VectorXd& x0, std::uint64_t seed,
                              const BaselineHooks& hooks = {},
                              std::optional<Budget> budget = std::nullopt,
                              const RunOptions& opts = {}) {
  detail::check_problem(p, w, x0);
  if (q < 1 || batch < 1) throw ConfigInvalid("gt-sarah needs q, batch >= 1");
  if (!budget) throw ConfigInvalid("gt-sarah needs a budget");

  const LossModel& model = *p.model;
  const Dataset& ds = *p.data;
  const auto& shards = p.part->shards;
  const int n = w.n;
  const int d = model.dim();
  const int m = p.part->per_agent;
  const int b = std::min(batch, m);

  Eigen::MatrixXd x = x0.transpose().replicate(n, 1);
  Eigen::MatrixXd v(n, d);
  for (int i = 0; i < n; ++i)
    v.row(i) = detail::shard_grad(model, x0, ds, shards[i]).transpose();
  Eigen::MatrixXd y = v;

  Counters c;
  c.ifo_per_agent += m;
  c.ifo_paper += m;
  if (hooks.on_init) hooks.on_init(x, c);

  std::vector<std::mt19937_64> agent_gen;
  agent_gen.reserve(n);
  for (int i = 0; i < n; ++i) agent_gen.push_back(rng::agent_stream(seed, i));

  Eigen::MatrixXd v_new(n, d);
  long t = 0;
  while (!detail::budget_reached(*budget, t, c)) {
    ++t;
    Eigen::MatrixXd x_new = w.w * x - eta * y;
    c.comm_rounds += 1;
    if (t % q == 0) {
      detail::parallel_for(opts.threads, n, [&](int i) {
        v_new.row(i) =
            detail::shard_grad(model, x_new.row(i).transpose(), ds, shards[i])
                .transpose();
      });
      c.ifo_per_agent += m;
      c.ifo_paper += m;
    } else {
      detail::parallel_for(opts.threads, n, [&](int i) {
        Eigen::VectorXd xn = x_new.row(i).transpose();
        Eigen::VectorXd xo = x.row(i).transpose();
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
        std::uniform_int_distribution<int> pick(0, m - 1);
        for (int k = 0; k < b; ++k) {
          int j = shards[i][pick(agent_gen[i])];
          acc += model.grad(xn, ds.samples[j]) - model.grad(xo, ds.samples[j]);
        }
        v_new.row(i) = (acc / double(b) + v.row(i).transpose()).transpose();
      });
      c.ifo_per_agent += 2LL * b;
      c.ifo_paper += b;
    }
    y = w.w * y + v_new - v;
    c.comm_rounds += 1;
    x = x_new;
    v = v_new;
    if (!x.allFinite() || !y.allFinite()) throw NonFinite(t, 0);
    if (hooks.on_iter) hooks.on_iter(t, x, y, v, c);
  }

  RunResult res;
  res.output = x.colwise().mean().transpose();
  res.counters = c;
  res.iterations = t;
  return res;
}

// DSGD baseline: one sampled gradient per agent per iteration, then
//   x(t+1) = W (x(t) - eta_t g(t)).
inline RunResult dsgd_run(const Problem& p, const MixingMatrix& w,
                          const StepSchedule& sched, long t_outer,
                          const Eigen::VectorXd& x0, std::uint64_t seed,
                          const BaselineHooks& hooks = {},
                          const RunOptions& opts = {}) {
  detail::check_problem(p, w, x0);
  if (t_outer < 1) throw ConfigInvalid("dsgd needs t_outer >= 1");

  const LossModel& model = *p.model;
  const Dataset& ds = *p.data;
  const auto& shards = p.part->shards;
  const int n = w.n;
  const int d = model.dim();
  const int m = p.part->per_agent;

  Eigen::MatrixXd x = x0.transpose().replicate(n, 1);
  Counters c;
  if (hooks.on_init) hooks.on_init(x, c);

  std::vector<std::mt19937_64> agent_gen;
  agent_gen.reserve(n);
  for (int i = 0; i < n; ++i) agent_gen.push_back(rng::agent_stream(seed, i));

  Eigen::MatrixXd g(n, d);
  Eigen::MatrixXd empty;
  for (long t = 1; t <= t_outer; ++t) {
    double eta = sched.at(t - 1, t_outer);
    detail::parallel_for(opts.threads, n, [&](int i) {
      std::uniform_int_distribution<int> pick(0, m - 1);
      int j = shards[i][pick(agent_gen[i])];
      g.row(i) = model.grad(x.row(i).transpose(), ds.samples[j]).transpose();
    });
    c.ifo_per_agent += 1;
    c.ifo_paper += 1;
    x = w.w * (x - eta * g);
    c.comm_rounds += 1;
    if (!x.allFinite()) throw NonFinite(t, 0);
    if (hooks.on_iter) hooks.on_iter(t, x, empty, g, c);
  }

  RunResult res;
  res.output = x.colwise().mean().transpose();
  res.counters = c;
  res.iterations = t_outer;
  return res;
}

// || (1/N') sum of sample gradients at x ||^2 over the n*m partitioned
// samples, grouped as the mean of per-shard means. Diagnostic only: does not
// touch any IFO counter.
inline double global_grad_norm_sq(const Problem& p, const Eigen::VectorXd& x) {
  const auto& shards = p.part->shards;
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(p.model->dim());
  for (const auto& shard : shards)
    acc += detail::shard_grad(*p.model, x, *p.data, shard);
  acc /= double(shards.size());
  return acc.squaredNorm();
}

inline double global_mean_loss(const Problem& p, const Eigen::VectorXd& x) {
  double acc = 0.0;
  long count = 0;
  for (const auto& shard : p.part->shards) {
    for (int j : shard) acc += p.model->value(x, p.data->samples[j]);
    count += static_cast<long>(shard.size());
  }
  return acc / double(count);
}

}  // namespace destress

#endif  // DESTRESS_ALGORITHMS_HPP

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "destress/algorithms.hpp"
#include "destress/data.hpp"
#include "destress/mixing.hpp"
#include "destress/model.hpp"
#include "destress/topology.hpp"

using namespace destress;
using Catch::Matchers::WithinAbs;

namespace {

struct Fixture {
  Dataset ds;
  Partition part;
  RegLogisticModel model;
  Graph graph;
  MixingMatrix w;

  Fixture(int n_samples, int d, int n_agents, GraphKind kind,
          std::uint64_t seed, TopologyParams tp = {})
      : ds(generate_synthetic(n_samples, d, seed)),
        part(partition_uniform(ds, n_agents, seed)),
        model(d, 0.01),
        graph(build_topology(kind, n_agents, tp, seed)),
        w(metropolis_weights(graph)) {}

  Problem problem() { return Problem{&model, &ds, &part}; }
};

// Mean of per-agent local full gradients, each evaluated at that agent's own
// row; used as the oracle for the tracking identity.
Eigen::VectorXd mean_local_grads(const LossModel& model, const Dataset& ds,
                                 const Partition& part,
                                 const Eigen::MatrixXd& points) {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(model.dim());
  for (int i = 0; i < part.n_agents(); ++i) {
    Eigen::VectorXd gi = Eigen::VectorXd::Zero(model.dim());
    for (int j : part.shards[i])
      gi += model.grad(points.row(i).transpose(), ds.samples[j]);
    acc += gi / double(part.shards[i].size());
  }
  return acc / double(part.n_agents());
}

// Standalone single-machine SARAH with the same sample schedule convention:
// per-agent stream (seed, agent 0), b uniform draws per inner step.
std::vector<Eigen::VectorXd> reference_sarah(
    const LossModel& model, const Dataset& ds, const std::vector<int>& shard,
    const Eigen::VectorXd& x0, double eta, long t_outer, long s_inner, int b,
    std::uint64_t seed) {
  auto gen = rng::agent_stream(seed, 0);
  std::uniform_int_distribution<int> pick(0, int(shard.size()) - 1);
  std::vector<Eigen::VectorXd> trajectory;
  Eigen::VectorXd x = x0;
  for (long t = 1; t <= t_outer; ++t) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(model.dim());
    for (int j : shard) v += model.grad(x, ds.samples[j]);
    v /= double(shard.size());
    Eigen::VectorXd u = x;
    for (long s = 1; s <= s_inner; ++s) {
      Eigen::VectorXd u_new = u - eta * v;
      Eigen::VectorXd acc = Eigen::VectorXd::Zero(model.dim());
      for (int k = 0; k < b; ++k) {
        int j = shard[pick(gen)];
        acc += model.grad(u_new, ds.samples[j]) - model.grad(u, ds.samples[j]);
      }
      v = acc / double(b) + v;
      u = u_new;
      trajectory.push_back(u);
    }
    x = u;
  }
  return trajectory;
}

}  // namespace

TEST_CASE("derive_hyperparams follows the closed forms") {
  Hyperparams h = derive_hyperparams(320, 20, 0.5, 2.0);
  REQUIRE(h.s_inner == 80);  // ceil(sqrt(320*20))
  REQUIRE(h.batch == 4);     // ceil(sqrt(320/20))
  REQUIRE_THAT(h.eta, WithinAbs(1.0 / 320.0, 1e-18));
  REQUIRE(h.accelerated);

  Hyperparams h0 = derive_hyperparams(320, 20, 0.0, 2.0);
  REQUIRE(h0.k_in == 1);  // ceil(log 2)
  REQUIRE(h0.k_out ==
          int(std::ceil(std::log(std::sqrt(20.0 * h0.batch) + 1.0))));

  Hyperparams h99 = derive_hyperparams(300, 20, 0.99, 2.0);
  REQUIRE(h99.k_in == 7);  // ceil(0.6931 / 0.1)

  REQUIRE_THROWS_AS(derive_hyperparams(300, 20, 1.0, 2.0), BadAlpha);
}

TEST_CASE("validate_step_size matches a hand evaluation at alpha = 0") {
  Hyperparams h;
  h.s_inner = 40;
  h.batch = 2;
  h.k_in = 1;
  h.k_out = 1;
  const double L = 2.0;
  const int n = 10;
  // All alpha-terms vanish: bound = 1/(10 L (sqrt(S/(nb)) + 1)).
  double bound = 1.0 / (10.0 * L * (std::sqrt(40.0 / 20.0) + 1.0));
  h.eta = bound * 0.999;
  REQUIRE(validate_step_size(h, 0.0, L, n));
  h.eta = bound * 1.001;
  REQUIRE_FALSE(validate_step_size(h, 0.0, L, n));

  h.eta = 0.0;
  REQUIRE(validate_step_size(h, 0.0, L, n));
  REQUIRE(validate_step_size(h, 0.9, L, n));

  h.eta = 10.0 / L;
  REQUIRE_FALSE(validate_step_size(h, 0.3, L, n));
  REQUIRE_FALSE(validate_step_size(h, 0.9, L, n));
}

TEST_CASE("counters match the closed forms") {
  Fixture f(20, 3, 4, GraphKind::Complete, 1);
  const int m = f.part.per_agent;  // 5
  struct Case {
    long T;
    int S, b, k_in, k_out;
  };
  for (const Case& c : {Case{1, 1, 1, 1, 1}, Case{3, 4, 2, 2, 1},
                        Case{2, 6, 5, 3, 2}, Case{4, 2, 3, 1, 3}}) {
    Hyperparams h;
    h.eta = 0.05;
    h.s_inner = c.S;
    h.batch = c.b;
    h.k_in = c.k_in;
    h.k_out = c.k_out;
    h.accelerated = false;
    Problem prob = f.problem();
    RunResult r = destress_run(prob, f.w, h, Eigen::VectorXd::Zero(3), 7, {},
                               Budget::outer(c.T));
    REQUIRE(r.counters.comm_rounds == c.T * (long(c.S) * c.k_in + c.k_out));
    REQUIRE(r.counters.ifo_per_agent ==
            m + c.T * (m + 2LL * c.S * std::min(c.b, m)));
    REQUIRE(r.counters.ifo_paper ==
            m + c.T * (long(c.S) * std::min(c.b, m) + 2LL * m));
  }
}

TEST_CASE("single-agent run reproduces the reference SARAH trajectory") {
  Dataset ds = generate_synthetic(60, 8, 5);
  Partition part = partition_uniform(ds, 1, 5);
  RegLogisticModel model(8, 0.01);
  Graph g = build_topology(GraphKind::Complete, 1, {}, 1);
  MixingMatrix w = metropolis_weights(g);
  REQUIRE(w.n == 1);

  Hyperparams h;
  h.eta = 0.05;
  h.s_inner = 10;
  h.batch = 5;
  h.k_in = 1;
  h.k_out = 1;
  h.accelerated = true;

  std::vector<Eigen::VectorXd> seen;
  DestressHooks hooks;
  hooks.on_inner = [&](long, long, const NetworkState& st, const Counters&) {
    seen.push_back(st.u.row(0).transpose());
  };
  Problem prob{&model, &ds, &part};
  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(8);
  destress_run(prob, w, h, x0, 42, hooks, Budget::outer(50));

  auto ref =
      reference_sarah(model, ds, part.shards[0], x0, h.eta, 50, 10, 5, 42);
  REQUIRE(seen.size() == 500);
  REQUIRE(ref.size() == 500);
  double worst = 0.0;
  for (size_t i = 0; i < ref.size(); ++i)
    worst = std::max(worst, (seen[i] - ref[i]).cwiseAbs().maxCoeff());
  REQUIRE(worst <= 1e-12);
}

TEST_CASE("complete-graph mixing collapses every variable to consensus") {
  Fixture f(40, 4, 5, GraphKind::Complete, 3);
  Hyperparams h;
  h.eta = 0.1;
  h.s_inner = 4;
  h.batch = 2;
  h.k_in = 1;
  h.k_out = 1;
  h.accelerated = false;
  auto spread = [](const Eigen::MatrixXd& m) {
    Eigen::RowVectorXd mean = m.colwise().mean();
    return (m.rowwise() - mean).cwiseAbs().maxCoeff();
  };
  DestressHooks hooks;
  hooks.on_outer = [&](long, const NetworkState& st, const Counters&) {
    REQUIRE(spread(st.s) < 1e-12);
  };
  hooks.on_inner = [&](long, long, const NetworkState& st, const Counters&) {
    REQUIRE(spread(st.u) < 1e-12);
    REQUIRE(spread(st.v) < 1e-12);
  };
  Problem prob = f.problem();
  destress_run(prob, f.w, h, Eigen::VectorXd::Zero(4), 9, hooks,
               Budget::outer(3));
}

TEST_CASE("tracking variable mean equals the mean of local gradients") {
  TopologyParams tp;
  tp.rows = 2;
  tp.cols = 2;
  Fixture f(48, 5, 4, GraphKind::Grid2D, 11, tp);
  Hyperparams h;
  h.eta = 0.2;
  h.s_inner = 5;
  h.batch = 3;
  h.k_in = 2;
  h.k_out = 2;
  h.accelerated = true;
  DestressHooks hooks;
  hooks.on_outer = [&](long, const NetworkState& st, const Counters&) {
    Eigen::VectorXd s_mean = st.s.colwise().mean().transpose();
    Eigen::VectorXd oracle = mean_local_grads(f.model, f.ds, f.part, st.x);
    REQUIRE((s_mean - oracle).norm() <= 1e-9 * (1.0 + s_mean.norm()));
  };
  Problem prob = f.problem();
  destress_run(prob, f.w, h, Eigen::VectorXd::Zero(5), 13, hooks,
               Budget::outer(10));
}

TEST_CASE("full-batch inner loop keeps the estimator mean exact") {
  Fixture f(30, 4, 3, GraphKind::Path, 7);
  Hyperparams h;
  h.eta = 0.2;
  h.s_inner = 6;
  h.batch = f.part.per_agent;  // whole shard per step
  h.k_in = 1;
  h.k_out = 1;
  h.accelerated = false;
  DestressHooks hooks;
  hooks.on_inner = [&](long, long, const NetworkState& st, const Counters&) {
    Eigen::VectorXd v_mean = st.v.colwise().mean().transpose();
    Eigen::VectorXd oracle = mean_local_grads(f.model, f.ds, f.part, st.u);
    REQUIRE((v_mean - oracle).norm() <= 1e-9 * (1.0 + v_mean.norm()));
  };
  Problem prob = f.problem();
  destress_run(prob, f.w, h, Eigen::VectorXd::Zero(4), 3, hooks,
               Budget::outer(4));
}

TEST_CASE("inner-loop means follow the centralized recursion") {
  Fixture f(40, 3, 4, GraphKind::Path, 19);
  Hyperparams h;
  h.eta = 0.3;
  h.s_inner = 8;
  h.batch = 2;
  h.k_in = 3;
  h.k_out = 1;
  h.accelerated = true;
  Eigen::VectorXd prev_u, prev_v;
  long prev_s = 0;
  DestressHooks hooks;
  hooks.on_outer = [&](long, const NetworkState& st, const Counters&) {
    prev_u = st.x.colwise().mean().transpose();
    prev_v = st.s.colwise().mean().transpose();
    prev_s = 0;
  };
  hooks.on_inner = [&](long, long s, const NetworkState& st, const Counters&) {
    Eigen::VectorXd u_mean = st.u.colwise().mean().transpose();
    REQUIRE(s == prev_s + 1);
    REQUIRE((u_mean - (prev_u - h.eta * prev_v)).cwiseAbs().maxCoeff() <=
            1e-12);
    prev_u = u_mean;
    prev_v = st.v.colwise().mean().transpose();
    prev_s = s;
  };
  Problem prob = f.problem();
  destress_run(prob, f.w, h, Eigen::VectorXd::Zero(3), 29, hooks,
               Budget::outer(3));
}

TEST_CASE("gt-sarah tracking mean equals the estimator mean") {
  Fixture f(60, 4, 5, GraphKind::Path, 23);
  BaselineHooks hooks;
  hooks.on_iter = [&](long, const Eigen::MatrixXd&, const Eigen::MatrixXd& y,
                      const Eigen::MatrixXd& v, const Counters&) {
    Eigen::RowVectorXd ym = y.colwise().mean();
    Eigen::RowVectorXd vm = v.colwise().mean();
    REQUIRE((ym - vm).norm() <= 1e-9 * (1.0 + vm.norm()));
  };
  Problem prob = f.problem();
  RunResult r = gt_sarah_run(prob, f.w, 0.1, 3, 5, Eigen::VectorXd::Zero(4),
                             31, hooks, Budget::outer(20));
  REQUIRE(r.counters.comm_rounds == 40);  // two rounds per iteration
}

TEST_CASE("gt-sarah with q=1 refreshes the full local gradient every step") {
  Fixture f(30, 3, 3, GraphKind::Complete, 29);
  BaselineHooks hooks;
  hooks.on_iter = [&](long, const Eigen::MatrixXd& x, const Eigen::MatrixXd&,
                      const Eigen::MatrixXd& v, const Counters&) {
    for (int i = 0; i < 3; ++i) {
      std::vector<Sample> shard;
      for (int j : f.part.shards[i]) shard.push_back(f.ds.samples[j]);
      Eigen::VectorXd gi =
          local_full_grad(f.model, x.row(i).transpose(), shard);
      REQUIRE((v.row(i).transpose() - gi).cwiseAbs().maxCoeff() == 0.0);
    }
  };
  Problem prob = f.problem();
  RunResult r = gt_sarah_run(prob, f.w, 0.2, 4, 1, Eigen::VectorXd::Zero(3),
                             37, hooks, Budget::outer(6));
  // Every iteration is a refresh: m IFO units per step under both counters.
  REQUIRE(r.counters.ifo_per_agent == 10 + 6 * 10);
  REQUIRE(r.counters.ifo_paper == 10 + 6 * 10);
}

TEST_CASE("dsgd on one agent is plain sgd") {
  Dataset ds = generate_synthetic(25, 4, 13);
  Partition part = partition_uniform(ds, 1, 13);
  RegLogisticModel model(4, 0.01);
  Graph g = build_topology(GraphKind::Complete, 1, {}, 1);
  MixingMatrix w = metropolis_weights(g);

  StepSchedule sched{0.3, 1e18};  // effectively constant step
  std::vector<Eigen::VectorXd> seen;
  BaselineHooks hooks;
  hooks.on_iter = [&](long, const Eigen::MatrixXd& x, const Eigen::MatrixXd&,
                      const Eigen::MatrixXd&, const Counters&) {
    seen.push_back(x.row(0).transpose());
  };
  Problem prob{&model, &ds, &part};
  RunResult r =
      dsgd_run(prob, w, sched, 40, Eigen::VectorXd::Zero(4), 17, hooks);
  REQUIRE(r.counters.comm_rounds == 40);
  REQUIRE(r.counters.ifo_per_agent == 40);
  REQUIRE(r.counters.ifo_paper == 40);

  // Reference SGD with the same stream discipline.
  auto gen = rng::agent_stream(17, 0);
  std::uniform_int_distribution<int> pick(0, part.per_agent - 1);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(4);
  for (int t = 0; t < 40; ++t) {
    int j = part.shards[0][pick(gen)];
    x = x - 0.3 * model.grad(x, ds.samples[j]);
    REQUIRE((seen[t] - x).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("global gradient norm matches a brute-force oracle") {
  Fixture f(35, 4, 5, GraphKind::Path, 3);
  Problem prob = f.problem();

  Eigen::VectorXd x = Eigen::VectorXd::Zero(4);
  // Naive oracle: plain mean over every partitioned sample.
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(4);
  long count = 0;
  for (const auto& shard : f.part.shards)
    for (int j : shard) {
      acc += f.model.grad(x, f.ds.samples[j]);
      ++count;
    }
  acc /= double(count);
  REQUIRE_THAT(global_grad_norm_sq(prob, x),
               WithinAbs(acc.squaredNorm(), 1e-12));

  // Same arithmetic regrouped: mean of per-agent local full gradients.
  Eigen::VectorXd regrouped =
      mean_local_grads(f.model, f.ds, f.part, x.transpose().replicate(5, 1));
  REQUIRE_THAT(global_grad_norm_sq(prob, x),
               WithinAbs(regrouped.squaredNorm(), 1e-12));
}

TEST_CASE("a deterministic solve drives the global gradient to zero") {
  // Convex case (lambda = 0), solved by full gradient descent in the test.
  Dataset ds = generate_synthetic(50, 3, 21);
  Partition part = partition_uniform(ds, 5, 21);
  RegLogisticModel model(3, 0.0);
  Problem prob{&model, &ds, &part};

  Eigen::VectorXd x = Eigen::VectorXd::Zero(3);
  for (int it = 0; it < 20000; ++it) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(3);
    for (const auto& shard : part.shards)
      for (int j : shard) g += model.grad(x, ds.samples[j]);
    g /= double(part.n_agents() * part.per_agent);
    if (g.squaredNorm() <= 1e-12) break;
    x -= 2.0 * g;
  }
  REQUIRE(global_grad_norm_sq(prob, x) <= 1e-8);
}

TEST_CASE("divergence raises NonFinite with the loop position") {
  // An expansive matrix with valid row/column sums: gossip amplifies
  // disagreement 3x per round, so the agent spread overflows.
  Dataset ds = generate_synthetic(20, 3, 5);
  Partition part = partition_uniform(ds, 2, 5);
  RegLogisticModel model(3, 0.01);
  Eigen::MatrixXd bad(2, 2);
  bad << 2.0, -1.0, -1.0, 2.0;
  MixingMatrix w{bad, mixing_rate(bad), 2};
  REQUIRE(w.alpha > 1.0);

  Hyperparams h;
  h.eta = 0.5;
  h.s_inner = 50;
  h.batch = 2;
  h.k_in = 1;
  h.k_out = 1;
  h.accelerated = false;
  Problem prob{&model, &ds, &part};
  try {
    destress_run(prob, w, h, Eigen::VectorXd::Zero(3), 7, {},
                 Budget::outer(50));
    FAIL("expected NonFinite");
  } catch (const NonFinite& e) {
    REQUIRE(e.outer_t >= 1);
    REQUIRE(e.inner_s >= 0);
  }
}

TEST_CASE("mismatched shards and start points are rejected") {
  Fixture f(20, 3, 4, GraphKind::Path, 5);
  Partition wrong = partition_uniform(f.ds, 3, 5);
  Problem bad{&f.model, &f.ds, &wrong};
  Hyperparams h;
  h.eta = 0.1;
  h.s_inner = 2;
  h.batch = 1;
  REQUIRE_THROWS_AS(destress_run(bad, f.w, h, Eigen::VectorXd::Zero(3), 1, {},
                                 Budget::outer(1)),
                    ShardMismatch);
  Problem prob = f.problem();
  REQUIRE_THROWS_AS(destress_run(prob, f.w, h, Eigen::VectorXd::Zero(5), 1, {},
                                 Budget::outer(1)),
                    DimensionMismatch);
}

TEST_CASE("comm and ifo budgets stop at iteration boundaries") {
  Fixture f(40, 3, 4, GraphKind::Path, 9);
  Hyperparams h;
  h.eta = 0.05;
  h.s_inner = 3;
  h.batch = 2;
  h.k_in = 2;
  h.k_out = 1;
  h.accelerated = false;
  const long per_outer_comm = 3 * 2 + 1;
  Problem prob = f.problem();

  RunResult rc = destress_run(prob, f.w, h, Eigen::VectorXd::Zero(3), 1, {},
                              Budget::comm(20));
  REQUIRE(rc.counters.comm_rounds >= 20);
  REQUIRE(rc.counters.comm_rounds == rc.iterations * per_outer_comm);
  REQUIRE((rc.iterations - 1) * per_outer_comm < 20);

  const int m = f.part.per_agent;
  RunResult ri = destress_run(prob, f.w, h, Eigen::VectorXd::Zero(3), 1, {},
                              Budget::ifo(100));
  REQUIRE(ri.counters.ifo_per_agent >= 100);
  REQUIRE(ri.counters.ifo_per_agent == m + ri.iterations * (m + 2LL * 3 * 2));
}

TEST_CASE("runs are deterministic and thread-count independent") {
  Fixture f(60, 5, 6, GraphKind::Path, 27);
  Hyperparams h;
  h.eta = 0.2;
  h.s_inner = 4;
  h.batch = 3;
  h.k_in = 2;
  h.k_out = 2;
  h.accelerated = true;
  Problem prob = f.problem();
  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(5);

  RunOptions seq;
  seq.threads = 1;
  RunOptions par;
  par.threads = 4;
  RunResult a = destress_run(prob, f.w, h, x0, 11, {}, Budget::outer(5), seq);
  RunResult b = destress_run(prob, f.w, h, x0, 11, {}, Budget::outer(5), seq);
  RunResult c = destress_run(prob, f.w, h, x0, 11, {}, Budget::outer(5), par);
  REQUIRE((a.output - b.output).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((a.output - c.output).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(a.counters.comm_rounds == c.counters.comm_rounds);
}

TEST_CASE("reservoir output matches a replayed uniform pick from the pool") {
  Fixture f(24, 3, 4, GraphKind::Path, 15);
  Hyperparams h;
  h.eta = 0.1;
  h.s_inner = 3;
  h.batch = 2;
  h.k_in = 1;
  h.k_out = 1;
  h.accelerated = false;
  Problem prob = f.problem();
  RunOptions opts;
  opts.collect_output_pool = true;
  const long T = 4;
  RunResult r = destress_run(prob, f.w, h, Eigen::VectorXd::Zero(3), 33, {},
                             Budget::outer(T), opts);
  const int n = 4;
  REQUIRE(r.debug_pool.size() == size_t(T * h.s_inner * n));

  // Replay the block-reservoir decisions over the stored pool.
  auto gen = rng::make_stream(33, rng::StreamTag::kOutput);
  long long count = 0;
  long chosen = -1;
  for (size_t block = 0; block < r.debug_pool.size() / n; ++block) {
    count += n;
    std::uniform_int_distribution<long long> slot(0, count - 1);
    long long pick = slot(gen);
    if (pick < n) chosen = long(block) * n + long(pick);
  }
  REQUIRE(chosen >= 0);
  REQUIRE((r.output - r.debug_pool[chosen]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("extra mixing keeps shrinking a captured state's consensus error") {
  Fixture f(40, 4, 5, GraphKind::Path, 35);
  Hyperparams h;
  h.eta = 0.3;
  h.s_inner = 3;
  h.batch = 2;
  h.k_in = 1;
  h.k_out = 1;
  h.accelerated = false;
  Eigen::MatrixXd captured;
  DestressHooks hooks;
  hooks.on_inner = [&](long t, long s, const NetworkState& st,
                       const Counters&) {
    if (t == 2 && s == 2) captured = st.u;
  };
  Problem prob = f.problem();
  destress_run(prob, f.w, h, Eigen::VectorXd::Zero(4), 39, hooks,
               Budget::outer(2));
  REQUIRE(captured.rows() == 5);
  double before = std::sqrt(consensus_error_sq(captured));
  for (int k : {1, 2, 4}) {
    double after = std::sqrt(consensus_error_sq(gossip(f.w, captured, k)));
    REQUIRE(after <= std::pow(f.w.alpha, k) * before + 1e-10);
  }
}

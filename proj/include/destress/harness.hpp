#ifndef DESTRESS_HARNESS_HPP
#define DESTRESS_HARNESS_HPP

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "destress/algorithms.hpp"
#include "destress/data.hpp"
#include "destress/errors.hpp"
#include "destress/mixing.hpp"
#include "destress/model.hpp"
#include "destress/topology.hpp"

namespace destress {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct TopologySpec {
  GraphKind kind = GraphKind::ErdosRenyi;
  int n = 20;
  double p = 0.3;
  int rows = 0;
  int cols = 0;
  std::uint64_t seed = 1;
};

struct MixingSpec {
  std::string construction = "metropolis";  // or "csv"
  std::string csv_path;
  bool accelerated = true;
};

struct ModelSpec {
  std::string kind = "reg_logistic";  // or "mlp"
  double lambda = 0.01;
  int hidden = 64;
  int classes = 10;
  double smoothness_hint = 1.0;  // used by mlp when hyperparams are auto
};

struct DataSpec {
  std::string kind = "synthetic";  // or "csv"
  int n_samples = 1000;
  int dim = 10;
  std::uint64_t seed = 1;
  std::string path;
  int label_col = 0;
  bool header = false;
  bool normalize = false;
};

struct HyperSpec {
  bool auto_derive = false;
  Hyperparams h;        // destress
  double gts_eta = 0.1;  // gtsarah
  int gts_batch = 10;
  int gts_q = 10;
  StepSchedule dsgd;  // dsgd
};

struct EvalSpec {
  double holdout_frac = 0.0;
  long eval_every = 0;  // 0: once per inner loop (destress/gtsarah), 10 (dsgd)
};

struct ExperimentConfig {
  std::string algorithm = "destress";  // destress | gtsarah | dsgd
  std::uint64_t seed = 1;
  std::string trace_path;
  TopologySpec topology;
  MixingSpec mixing;
  ModelSpec model;
  DataSpec data;
  HyperSpec hyper;
  Budget budget = Budget::outer(1);
  EvalSpec eval;
  double x0_scale = 0.0;  // 0: zero start; else seeded Gaussian * scale
};

namespace detail {

inline void reject_unknown_keys(const json& j, const std::string& where,
                                const std::set<std::string>& allowed) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigInvalid("unknown key '" + it.key() + "' in " + where);
}

inline GraphKind parse_kind(const std::string& s) {
  if (s == "complete") return GraphKind::Complete;
  if (s == "erdos_renyi") return GraphKind::ErdosRenyi;
  if (s == "grid") return GraphKind::Grid2D;
  if (s == "path") return GraphKind::Path;
  throw ConfigInvalid("unknown topology kind '" + s + "'");
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  detail::reject_unknown_keys(
      j, "config",
      {"algorithm", "seed", "trace_path", "topology", "mixing", "model",
       "data", "hyperparams", "budget", "eval", "x0_scale"});
  cfg.algorithm = j.value("algorithm", cfg.algorithm);
  if (cfg.algorithm != "destress" && cfg.algorithm != "gtsarah" &&
      cfg.algorithm != "dsgd")
    throw ConfigInvalid("unknown algorithm '" + cfg.algorithm + "'");
  cfg.seed = j.value("seed", cfg.seed);
  cfg.trace_path = j.value("trace_path", cfg.trace_path);
  cfg.x0_scale = j.value("x0_scale", cfg.x0_scale);

  if (j.contains("topology")) {
    const json& t = j.at("topology");
    detail::reject_unknown_keys(t, "topology",
                                {"kind", "n", "p", "rows", "cols", "seed"});
    cfg.topology.kind = detail::parse_kind(t.value("kind", "erdos_renyi"));
    cfg.topology.n = t.value("n", cfg.topology.n);
    cfg.topology.p = t.value("p", cfg.topology.p);
    cfg.topology.rows = t.value("rows", cfg.topology.rows);
    cfg.topology.cols = t.value("cols", cfg.topology.cols);
    cfg.topology.seed = t.value("seed", cfg.seed);
  } else {
    cfg.topology.seed = cfg.seed;
  }

  if (j.contains("mixing")) {
    const json& m = j.at("mixing");
    detail::reject_unknown_keys(m, "mixing",
                                {"construction", "path", "accelerated"});
    cfg.mixing.construction = m.value("construction", cfg.mixing.construction);
    if (cfg.mixing.construction != "metropolis" &&
        cfg.mixing.construction != "csv")
      throw ConfigInvalid("mixing construction must be metropolis or csv");
    cfg.mixing.csv_path = m.value("path", cfg.mixing.csv_path);
    cfg.mixing.accelerated = m.value("accelerated", cfg.mixing.accelerated);
    if (cfg.mixing.construction == "csv") {
      if (cfg.mixing.csv_path.empty())
        throw ConfigInvalid("mixing construction csv needs a path");
      if (!std::filesystem::exists(cfg.mixing.csv_path))
        throw ConfigInvalid("mixing matrix file not found: " +
                            cfg.mixing.csv_path);
    }
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    detail::reject_unknown_keys(
        m, "model", {"kind", "lambda", "hidden", "classes", "smoothness_hint"});
    cfg.model.kind = m.value("kind", cfg.model.kind);
    if (cfg.model.kind != "reg_logistic" && cfg.model.kind != "mlp")
      throw ConfigInvalid("model kind must be reg_logistic or mlp");
    cfg.model.lambda = m.value("lambda", cfg.model.lambda);
    cfg.model.hidden = m.value("hidden", cfg.model.hidden);
    cfg.model.classes = m.value("classes", cfg.model.classes);
    cfg.model.smoothness_hint =
        m.value("smoothness_hint", cfg.model.smoothness_hint);
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    detail::reject_unknown_keys(d, "data",
                                {"kind", "n_samples", "dim", "seed", "path",
                                 "label_col", "header", "normalize"});
    cfg.data.kind = d.value("kind", cfg.data.kind);
    if (cfg.data.kind == "synthetic") {
      cfg.data.n_samples = d.value("n_samples", cfg.data.n_samples);
      cfg.data.dim = d.value("dim", cfg.data.dim);
      cfg.data.seed = d.value("seed", cfg.seed);
    } else if (cfg.data.kind == "csv") {
      cfg.data.path = d.value("path", cfg.data.path);
      cfg.data.label_col = d.value("label_col", cfg.data.label_col);
      cfg.data.header = d.value("header", cfg.data.header);
      cfg.data.normalize = d.value("normalize", cfg.data.normalize);
      if (cfg.data.path.empty()) throw ConfigInvalid("csv data needs a path");
      if (!std::filesystem::exists(cfg.data.path))
        throw ConfigInvalid("dataset file not found: " + cfg.data.path);
    } else {
      throw ConfigInvalid("data kind must be synthetic or csv");
    }
  } else {
    cfg.data.seed = cfg.seed;
  }

  if (j.contains("hyperparams")) {
    const json& h = j.at("hyperparams");
    if (h.is_string()) {
      if (h.get<std::string>() != "auto")
        throw ConfigInvalid("hyperparams must be 'auto' or an object");
      if (cfg.algorithm != "destress")
        throw ConfigInvalid("hyperparams 'auto' is only defined for destress");
      cfg.hyper.auto_derive = true;
    } else if (cfg.algorithm == "destress") {
      detail::reject_unknown_keys(
          h, "hyperparams",
          {"eta", "s_inner", "batch", "k_in", "k_out", "accelerated"});
      cfg.hyper.h.eta = h.value("eta", 0.1);
      cfg.hyper.h.s_inner = h.value("s_inner", 10);
      cfg.hyper.h.batch = h.value("batch", 10);
      cfg.hyper.h.k_in = h.value("k_in", 1);
      cfg.hyper.h.k_out = h.value("k_out", 1);
      cfg.hyper.h.accelerated = h.value("accelerated", true);
    } else if (cfg.algorithm == "gtsarah") {
      detail::reject_unknown_keys(h, "hyperparams", {"eta", "batch", "q"});
      cfg.hyper.gts_eta = h.value("eta", cfg.hyper.gts_eta);
      cfg.hyper.gts_batch = h.value("batch", cfg.hyper.gts_batch);
      cfg.hyper.gts_q = h.value("q", cfg.hyper.gts_q);
    } else {
      detail::reject_unknown_keys(h, "hyperparams", {"eta0", "tau"});
      cfg.hyper.dsgd.eta0 = h.value("eta0", 1.0);
      cfg.hyper.dsgd.tau = h.value("tau", 0.0);
    }
  } else if (cfg.algorithm == "destress") {
    cfg.hyper.auto_derive = true;
  }

  if (!j.contains("budget")) throw ConfigInvalid("config needs a budget");
  {
    const json& b = j.at("budget");
    detail::reject_unknown_keys(b, "budget",
                                {"max_comm", "max_ifo", "max_outer"});
    int set = int(b.contains("max_comm")) + int(b.contains("max_ifo")) +
              int(b.contains("max_outer"));
    if (set != 1)
      throw ConfigInvalid("budget must set exactly one of max_comm, max_ifo, "
                          "max_outer");
    if (b.contains("max_comm"))
      cfg.budget = Budget::comm(b.at("max_comm").get<long long>());
    else if (b.contains("max_ifo"))
      cfg.budget = Budget::ifo(b.at("max_ifo").get<long long>());
    else
      cfg.budget = Budget::outer(b.at("max_outer").get<long long>());
    if (cfg.budget.limit < 1) throw ConfigInvalid("budget must be positive");
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    detail::reject_unknown_keys(e, "eval", {"holdout_frac", "eval_every"});
    cfg.eval.holdout_frac = e.value("holdout_frac", cfg.eval.holdout_frac);
    cfg.eval.eval_every = e.value("eval_every", cfg.eval.eval_every);
    if (cfg.eval.holdout_frac < 0.0 || cfg.eval.holdout_frac >= 1.0)
      throw ConfigInvalid("holdout_frac must be in [0, 1)");
  }
  return cfg;
}

inline json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["algorithm"] = cfg.algorithm;
  j["seed"] = cfg.seed;
  if (!cfg.trace_path.empty()) j["trace_path"] = cfg.trace_path;
  if (cfg.x0_scale != 0.0) j["x0_scale"] = cfg.x0_scale;

  json t;
  t["kind"] = to_string(cfg.topology.kind);
  t["n"] = cfg.topology.n;
  if (cfg.topology.kind == GraphKind::ErdosRenyi) t["p"] = cfg.topology.p;
  if (cfg.topology.kind == GraphKind::Grid2D) {
    t["rows"] = cfg.topology.rows;
    t["cols"] = cfg.topology.cols;
  }
  t["seed"] = cfg.topology.seed;
  j["topology"] = t;

  json m;
  m["construction"] = cfg.mixing.construction;
  if (!cfg.mixing.csv_path.empty()) m["path"] = cfg.mixing.csv_path;
  m["accelerated"] = cfg.mixing.accelerated;
  j["mixing"] = m;

  json mo;
  mo["kind"] = cfg.model.kind;
  if (cfg.model.kind == "reg_logistic") {
    mo["lambda"] = cfg.model.lambda;
  } else {
    mo["hidden"] = cfg.model.hidden;
    mo["classes"] = cfg.model.classes;
    mo["smoothness_hint"] = cfg.model.smoothness_hint;
  }
  j["model"] = mo;

  json d;
  d["kind"] = cfg.data.kind;
  if (cfg.data.kind == "synthetic") {
    d["n_samples"] = cfg.data.n_samples;
    d["dim"] = cfg.data.dim;
    d["seed"] = cfg.data.seed;
  } else {
    d["path"] = cfg.data.path;
    d["label_col"] = cfg.data.label_col;
    d["header"] = cfg.data.header;
    d["normalize"] = cfg.data.normalize;
  }
  j["data"] = d;

  if (cfg.hyper.auto_derive) {
    j["hyperparams"] = "auto";
  } else if (cfg.algorithm == "destress") {
    json h;
    h["eta"] = cfg.hyper.h.eta;
    h["s_inner"] = cfg.hyper.h.s_inner;
    h["batch"] = cfg.hyper.h.batch;
    h["k_in"] = cfg.hyper.h.k_in;
    h["k_out"] = cfg.hyper.h.k_out;
    h["accelerated"] = cfg.hyper.h.accelerated;
    j["hyperparams"] = h;
  } else if (cfg.algorithm == "gtsarah") {
    json h;
    h["eta"] = cfg.hyper.gts_eta;
    h["batch"] = cfg.hyper.gts_batch;
    h["q"] = cfg.hyper.gts_q;
    j["hyperparams"] = h;
  } else {
    json h;
    h["eta0"] = cfg.hyper.dsgd.eta0;
    if (cfg.hyper.dsgd.tau > 0.0) h["tau"] = cfg.hyper.dsgd.tau;
    j["hyperparams"] = h;
  }

  json b;
  if (cfg.budget.kind == Budget::Kind::Comm)
    b["max_comm"] = cfg.budget.limit;
  else if (cfg.budget.kind == Budget::Kind::Ifo)
    b["max_ifo"] = cfg.budget.limit;
  else
    b["max_outer"] = cfg.budget.limit;
  j["budget"] = b;

  json e;
  e["holdout_frac"] = cfg.eval.holdout_frac;
  e["eval_every"] = cfg.eval.eval_every;
  j["eval"] = e;
  return j;
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
  return config_to_json(cfg).dump(2) + "\n";
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigInvalid(std::string("bad JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigInvalid("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// Dotted-path override, e.g. "budget.max_comm=100" or "model.lambda=0.05".
// The value is parsed as JSON when possible and kept as a string otherwise.
inline void apply_override(json& j, const std::string& expr) {
  auto eq = expr.find('=');
  if (eq == std::string::npos)
    throw ConfigInvalid("override must look like key.path=value: " + expr);
  std::string path = expr.substr(0, eq);
  std::string value = expr.substr(eq + 1);
  json* cur = &j;
  size_t start = 0;
  while (true) {
    size_t dot = path.find('.', start);
    std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigInvalid("bad override path: " + path);
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (const json::exception&) {
        parsed = value;
      }
      (*cur)[key] = parsed;
      return;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// Run traces
// ---------------------------------------------------------------------------

struct TraceRow {
  long outer_t = 0;
  long inner_s = 0;
  long long comm_rounds = 0;
  long long ifo_strict = 0;
  long long ifo_paper = 0;
  double train_loss = 0.0;
  double grad_norm_sq = 0.0;
  double consensus_err = 0.0;
  std::optional<double> test_acc;
};

struct RunTrace {
  std::vector<TraceRow> rows;
  Counters final_counters;
  Eigen::VectorXd output;
};

inline constexpr const char* kTraceHeader =
    "outer_t,inner_s,comm_rounds,ifo_strict,ifo_paper,train_loss,"
    "grad_norm_sq,consensus_err,test_acc";

inline std::string format_trace_csv(const RunTrace& trace) {
  std::string out = "# schema=1\n";
  out += kTraceHeader;
  out += "\n";
  char buf[64];
  for (const TraceRow& r : trace.rows) {
    out += std::to_string(r.outer_t) + "," + std::to_string(r.inner_s) + "," +
           std::to_string(r.comm_rounds) + "," + std::to_string(r.ifo_strict) +
           "," + std::to_string(r.ifo_paper) + ",";
    std::snprintf(buf, sizeof(buf), "%.17g", r.train_loss);
    out += buf;
    out += ",";
    std::snprintf(buf, sizeof(buf), "%.17g", r.grad_norm_sq);
    out += buf;
    out += ",";
    std::snprintf(buf, sizeof(buf), "%.17g", r.consensus_err);
    out += buf;
    out += ",";
    if (r.test_acc) {
      std::snprintf(buf, sizeof(buf), "%.17g", *r.test_acc);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

// Temp-file-plus-rename so an interrupted run never leaves a partial file.
inline void write_file_atomic(const std::string& path,
                              const std::string& content) {
  std::filesystem::path target(path);
  std::filesystem::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, target);
}

inline RunTrace read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace: " + path);
  RunTrace trace;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("outer_t,", 0) == 0) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<std::string> toks;
    while (std::getline(ss, tok, ',')) toks.push_back(tok);
    while (toks.size() < 9) toks.push_back("");
    TraceRow r;
    try {
      r.outer_t = std::stol(toks[0]);
      r.inner_s = std::stol(toks[1]);
      r.comm_rounds = std::stoll(toks[2]);
      r.ifo_strict = std::stoll(toks[3]);
      r.ifo_paper = std::stoll(toks[4]);
      r.train_loss = std::stod(toks[5]);
      r.grad_norm_sq = std::stod(toks[6]);
      r.consensus_err = std::stod(toks[7]);
      if (!toks[8].empty()) r.test_acc = std::stod(toks[8]);
    } catch (const std::exception&) {
      throw ParseError("bad trace row", line_no);
    }
    trace.rows.push_back(r);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Experiment assembly and execution
// ---------------------------------------------------------------------------

namespace detail {

struct Assembled {
  Dataset train;
  Dataset holdout;
  Graph graph;
  MixingMatrix w;
  std::unique_ptr<LossModel> model;
  Partition part;
  Hyperparams h;       // destress (resolved)
  long eval_every = 1;
  Eigen::VectorXd x0;
};

inline int env_threads() {
  const char* v = std::getenv("DESTRESS_SIM_THREADS");
  if (!v) return 1;
  int t = std::atoi(v);
  return t >= 1 ? t : 1;
}

inline Assembled assemble(const ExperimentConfig& cfg) {
  Assembled a;
  Dataset full = cfg.data.kind == "synthetic"
                     ? generate_synthetic(cfg.data.n_samples, cfg.data.dim,
                                          cfg.data.seed)
                     : load_csv(cfg.data.path, cfg.data.label_col,
                                cfg.data.header, cfg.data.normalize);
  auto [train, hold] = split_holdout(full, cfg.eval.holdout_frac, cfg.seed);
  a.train = std::move(train);
  a.holdout = std::move(hold);

  TopologyParams tp;
  tp.p = cfg.topology.p;
  tp.rows = cfg.topology.rows;
  tp.cols = cfg.topology.cols;
  a.graph = build_topology(cfg.topology.kind, cfg.topology.n, tp,
                           cfg.topology.seed);
  a.w = cfg.mixing.construction == "csv"
            ? load_mixing_csv(cfg.mixing.csv_path, &a.graph)
            : metropolis_weights(a.graph);

  a.part = partition_uniform(a.train, cfg.topology.n, cfg.seed);

  if (cfg.model.kind == "reg_logistic") {
    double max_norm_sq = 0.0;
    for (const Sample& z : a.train.samples)
      max_norm_sq = std::max(max_norm_sq, z.features.squaredNorm());
    a.model = std::make_unique<RegLogisticModel>(a.train.d_f, cfg.model.lambda,
                                                 max_norm_sq);
  } else {
    a.model = std::make_unique<MlpModel>(a.train.d_f, cfg.model.hidden,
                                         cfg.model.classes,
                                         cfg.model.smoothness_hint);
  }

  if (cfg.algorithm == "destress") {
    a.h = cfg.hyper.auto_derive
              ? derive_hyperparams(a.part.per_agent, cfg.topology.n, a.w.alpha,
                                   a.model->smoothness_hint())
              : cfg.hyper.h;
    a.h.accelerated = cfg.mixing.accelerated;
    a.eval_every =
        cfg.eval.eval_every > 0 ? cfg.eval.eval_every : a.h.s_inner;
  } else if (cfg.algorithm == "gtsarah") {
    a.eval_every =
        cfg.eval.eval_every > 0 ? cfg.eval.eval_every : cfg.hyper.gts_q;
  } else {
    a.eval_every = cfg.eval.eval_every > 0 ? cfg.eval.eval_every : 10;
  }

  const int d = a.model->dim();
  if (cfg.x0_scale == 0.0) {
    a.x0 = Eigen::VectorXd::Zero(d);
  } else {
    auto gen = rng::make_stream(cfg.seed, rng::StreamTag::kInit);
    std::normal_distribution<double> normal(0.0, 1.0);
    a.x0.resize(d);
    for (int i = 0; i < d; ++i) a.x0[i] = cfg.x0_scale * normal(gen);
  }
  return a;
}

inline double holdout_accuracy(const LossModel& model, const Dataset& holdout,
                               const Eigen::VectorXd& x) {
  if (holdout.samples.empty()) return 0.0;
  long correct = 0;
  if (const auto* mlp = dynamic_cast<const MlpModel*>(&model)) {
    for (const Sample& z : holdout.samples) {
      Eigen::VectorXd logit = mlp->logits(x, z);
      int pred;
      logit.maxCoeff(&pred);
      if (pred == static_cast<int>(z.label)) ++correct;
    }
  } else {
    // P(l=1) = sigmoid(-x'f) >= 1/2 when x'f <= 0.
    for (const Sample& z : holdout.samples) {
      double pred = x.dot(z.features) <= 0.0 ? 1.0 : 0.0;
      if (pred == z.label) ++correct;
    }
  }
  return double(correct) / double(holdout.samples.size());
}

class TraceBuilder {
 public:
  TraceBuilder(const Problem& prob, const Dataset& holdout,
               const ExperimentConfig& cfg, long eval_every)
      : prob_(prob), holdout_(holdout), cfg_(cfg), eval_every_(eval_every) {}

  void record(long t, long s, const Eigen::MatrixXd& params,
              const Counters& c, bool force) {
    ++ticks_;
    set_pending(t, s, params, c);
    if (force || (eval_every_ > 0 && ticks_ % eval_every_ == 0)) flush();
  }

  // Update the latest-state snapshot without advancing the eval clock
  // (used for outer records, which sit between inner evaluation points).
  void set_pending(long t, long s, const Eigen::MatrixXd& params,
                   const Counters& c) {
    pending_t_ = t;
    pending_s_ = s;
    pending_params_ = params;
    pending_counters_ = c;
    has_pending_ = true;
  }

  void init(const Eigen::MatrixXd& params, const Counters& c) {
    set_pending(0, 0, params, c);
    flush();
  }

  // Emit the last seen state if it was not already written.
  void finish() {
    if (has_pending_ && (trace_.rows.empty() ||
                         trace_.rows.back().comm_rounds !=
                             pending_counters_.comm_rounds))
      flush();
  }

  RunTrace take() { return std::move(trace_); }

 private:
  void flush() {
    if (!has_pending_) return;
    Eigen::VectorXd mean = pending_params_.colwise().mean().transpose();
    TraceRow r;
    r.outer_t = pending_t_;
    r.inner_s = pending_s_;
    r.comm_rounds = pending_counters_.comm_rounds;
    r.ifo_strict = pending_counters_.ifo_per_agent;
    r.ifo_paper = pending_counters_.ifo_paper;
    r.train_loss = global_mean_loss(prob_, mean);
    r.grad_norm_sq = global_grad_norm_sq(prob_, mean);
    r.consensus_err = consensus_error_sq(pending_params_);
    if (cfg_.eval.holdout_frac > 0.0)
      r.test_acc = holdout_accuracy(*prob_.model, holdout_, mean);
    trace_.rows.push_back(r);
    has_pending_ = false;
  }

  const Problem& prob_;
  const Dataset& holdout_;
  const ExperimentConfig& cfg_;
  long eval_every_;
  long ticks_ = 0;
  long pending_t_ = 0, pending_s_ = 0;
  Eigen::MatrixXd pending_params_;
  Counters pending_counters_;
  bool has_pending_ = false;
  RunTrace trace_;
};

}  // namespace detail

// Builds the configured problem, runs the configured algorithm, evaluates
// train loss / gradient norm on the full training set every eval_every steps
// (evaluation is diagnostic and never counted as IFO work), and writes the
// trace CSV atomically when trace_path is set.
inline RunTrace run_experiment(const ExperimentConfig& cfg) {
  detail::Assembled a = detail::assemble(cfg);
  Problem prob{a.model.get(), &a.train, &a.part};
  RunOptions opts;
  opts.threads = detail::env_threads();

  detail::TraceBuilder tb(prob, a.holdout, cfg, a.eval_every);
  RunResult res;

  if (cfg.algorithm == "destress") {
    if (!validate_step_size(a.h, a.w.alpha, a.model->smoothness_hint(),
                            cfg.topology.n))
      std::cerr << "warning: step size eta=" << a.h.eta
                << " exceeds the guaranteed-stability bound\n";
    DestressHooks hooks;
    hooks.on_init = [&](const NetworkState& st, const Counters& c) {
      tb.init(st.x, c);
    };
    hooks.on_outer = [&](long t, const NetworkState& st, const Counters& c) {
      tb.set_pending(t, 0, st.x, c);
    };
    hooks.on_inner = [&](long t, long s, const NetworkState& st,
                         const Counters& c) { tb.record(t, s, st.u, c, false); };
    res = destress_run(prob, a.w, a.h, a.x0, cfg.seed, hooks, cfg.budget,
                       opts);
  } else if (cfg.algorithm == "gtsarah") {
    BaselineHooks hooks;
    hooks.on_init = [&](const Eigen::MatrixXd& x, const Counters& c) {
      tb.init(x, c);
    };
    hooks.on_iter = [&](long t, const Eigen::MatrixXd& x,
                        const Eigen::MatrixXd&, const Eigen::MatrixXd&,
                        const Counters& c) { tb.record(t, 0, x, c, false); };
    res = gt_sarah_run(prob, a.w, cfg.hyper.gts_eta, cfg.hyper.gts_batch,
                       cfg.hyper.gts_q, a.x0, cfg.seed, hooks, cfg.budget,
                       opts);
  } else {
    long t_outer = cfg.budget.limit;  // one round and one IFO per iteration
    BaselineHooks hooks;
    hooks.on_init = [&](const Eigen::MatrixXd& x, const Counters& c) {
      tb.init(x, c);
    };
    hooks.on_iter = [&](long t, const Eigen::MatrixXd& x,
                        const Eigen::MatrixXd&, const Eigen::MatrixXd&,
                        const Counters& c) { tb.record(t, 0, x, c, false); };
    res = dsgd_run(prob, a.w, cfg.hyper.dsgd, t_outer, a.x0, cfg.seed, hooks,
                   opts);
  }

  tb.finish();
  RunTrace trace = tb.take();
  trace.final_counters = res.counters;
  trace.output = res.output;
  if (!cfg.trace_path.empty())
    write_file_atomic(cfg.trace_path, format_trace_csv(trace));
  return trace;
}

// ---------------------------------------------------------------------------
// Comparison suite and mixing diagnostics
// ---------------------------------------------------------------------------

struct CompareRow {
  std::string algorithm;
  long long comm_rounds = 0;
  long long ifo_strict = 0;
  long long ifo_paper = 0;
  double train_loss = 0.0;
  double grad_norm_sq = 0.0;
};

// Runs every config (all must share model, data and seed) and reports, per
// config, the last trace row within the common budget. The ifo budget is
// matched on the strict counter.
inline std::vector<CompareRow> compare_suite(
    const std::vector<ExperimentConfig>& cfgs, Budget::Kind kind,
    long long value) {
  if (cfgs.empty()) throw ConfigInvalid("compare needs at least one config");
  if (kind == Budget::Kind::Outer)
    throw ConfigInvalid("compare budget must be comm or ifo");
  json ref_model = config_to_json(cfgs.front())["model"];
  json ref_data = config_to_json(cfgs.front())["data"];
  for (const auto& c : cfgs) {
    json jc = config_to_json(c);
    if (jc["model"] != ref_model || jc["data"] != ref_data ||
        c.seed != cfgs.front().seed)
      throw ConfigInvalid("compare configs must share model, data and seed");
  }
  std::vector<CompareRow> rows;
  for (const auto& c : cfgs) {
    RunTrace tr = run_experiment(c);
    const TraceRow* best = nullptr;
    for (const TraceRow& r : tr.rows) {
      long long used =
          kind == Budget::Kind::Comm ? r.comm_rounds : r.ifo_strict;
      if (used <= value) best = &r;
    }
    if (!best)
      throw ConfigInvalid("no trace row within budget for " + c.algorithm);
    rows.push_back(CompareRow{c.algorithm, best->comm_rounds, best->ifo_strict,
                              best->ifo_paper, best->train_loss,
                              best->grad_norm_sq});
  }
  return rows;
}

inline std::string format_compare_csv(const std::vector<CompareRow>& rows) {
  std::string out = "# schema=1\n";
  out += "algorithm,comm_rounds,ifo_strict,ifo_paper,train_loss,grad_norm_sq\n";
  char buf[64];
  for (const auto& r : rows) {
    out += r.algorithm + "," + std::to_string(r.comm_rounds) + "," +
           std::to_string(r.ifo_strict) + "," + std::to_string(r.ifo_paper) +
           ",";
    std::snprintf(buf, sizeof(buf), "%.17g", r.train_loss);
    out += buf;
    out += ",";
    std::snprintf(buf, sizeof(buf), "%.17g", r.grad_norm_sq);
    out += buf;
    out += "\n";
  }
  return out;
}

struct MixingReport {
  double alpha = 0.0;
  double spectral_gap = 0.0;
  std::string table_class;
};

inline MixingReport check_mixing(const TopologySpec& spec,
                                 const MixingSpec& mix = {}) {
  TopologyParams tp;
  tp.p = spec.p;
  tp.rows = spec.rows;
  tp.cols = spec.cols;
  Graph g = build_topology(spec.kind, spec.n, tp, spec.seed);
  MixingMatrix w = mix.construction == "csv"
                       ? load_mixing_csv(mix.csv_path, &g)
                       : metropolis_weights(g);
  MixingReport rep;
  rep.alpha = w.alpha;
  rep.spectral_gap = 1.0 - w.alpha;
  switch (spec.kind) {
    case GraphKind::Complete:
      rep.table_class = "Theta(1), alpha = 0";
      break;
    case GraphKind::ErdosRenyi:
      rep.table_class = "Theta(1)";
      break;
    case GraphKind::Grid2D:
      rep.table_class = "Theta(1/(n log n))";
      break;
    case GraphKind::Path:
      rep.table_class = "Theta(1/n^2)";
      break;
    default:
      rep.table_class = "unknown";
  }
  return rep;
}

}  // namespace destress

#endif  // DESTRESS_HARNESS_HPP

// Command-line front end: run experiments from JSON configs, compare
// algorithms at matched budgets, and probe mixing matrices and gradients.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical divergence.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "destress/destress.hpp"

namespace {

using namespace destress;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

json load_config_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigInvalid("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::exception& e) {
    throw ConfigInvalid(std::string("bad JSON in ") + path + ": " + e.what());
  }
}

int cmd_run(const std::string& config_path,
            const std::vector<std::string>& overrides,
            const std::string& trace_override, bool print_config) {
  json j = load_config_json(config_path);
  for (const std::string& o : overrides) apply_override(j, o);
  if (!trace_override.empty()) j["trace_path"] = trace_override;
  ExperimentConfig cfg = parse_config(j);

  if (print_config) {
    std::cout << serialize_config(cfg);
    return kExitOk;
  }

  RunTrace tr = run_experiment(cfg);
  const TraceRow& last = tr.rows.back();
  std::cout << "algorithm=" << cfg.algorithm
            << " comm_rounds=" << tr.final_counters.comm_rounds
            << " ifo_strict=" << tr.final_counters.ifo_per_agent
            << " ifo_paper=" << tr.final_counters.ifo_paper
            << " train_loss=" << last.train_loss
            << " grad_norm_sq=" << last.grad_norm_sq << "\n";
  if (!cfg.trace_path.empty())
    std::cout << "trace written to " << cfg.trace_path << "\n";
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& config_paths,
                const std::string& budget, const std::string& out_path) {
  auto eq = budget.find('=');
  if (eq == std::string::npos)
    throw ConfigInvalid("budget must be comm=<k> or ifo=<k>");
  std::string kind = budget.substr(0, eq);
  long long value = std::stoll(budget.substr(eq + 1));
  Budget::Kind bk;
  if (kind == "comm")
    bk = Budget::Kind::Comm;
  else if (kind == "ifo")
    bk = Budget::Kind::Ifo;
  else
    throw ConfigInvalid("budget kind must be comm or ifo");

  std::vector<ExperimentConfig> cfgs;
  for (const auto& p : config_paths) cfgs.push_back(parse_config(load_config_json(p)));
  auto rows = compare_suite(cfgs, bk, value);
  std::string csv = format_compare_csv(rows);
  if (out_path.empty())
    std::cout << csv;
  else {
    write_file_atomic(out_path, csv);
    std::cout << "summary written to " << out_path << "\n";
  }
  return kExitOk;
}

int cmd_check_mixing(const std::string& kind, int n, double p, int rows,
                     int cols, std::uint64_t seed, const std::string& csv) {
  TopologySpec spec;
  spec.kind = [&] {
    if (kind == "complete") return GraphKind::Complete;
    if (kind == "erdos_renyi") return GraphKind::ErdosRenyi;
    if (kind == "grid") return GraphKind::Grid2D;
    if (kind == "path") return GraphKind::Path;
    throw ConfigInvalid("unknown topology kind '" + kind + "'");
  }();
  spec.n = n;
  spec.p = p;
  spec.rows = rows;
  spec.cols = cols;
  spec.seed = seed;
  MixingSpec mix;
  if (!csv.empty()) {
    mix.construction = "csv";
    mix.csv_path = csv;
  }
  MixingReport rep = check_mixing(spec, mix);
  std::cout << "n=" << n << " kind=" << kind << " alpha=" << rep.alpha
            << " spectral_gap=" << rep.spectral_gap << " class=\""
            << rep.table_class << "\"\n";
  return kExitOk;
}

int cmd_gradcheck(const std::string& model_kind, int dim, double lambda,
                  int hidden, int classes, int points, double step,
                  double tol, std::uint64_t seed) {
  std::unique_ptr<LossModel> model;
  if (model_kind == "reg_logistic")
    model = std::make_unique<RegLogisticModel>(dim, lambda);
  else if (model_kind == "mlp")
    model = std::make_unique<MlpModel>(dim, hidden, classes);
  else
    throw ConfigInvalid("model must be reg_logistic or mlp");

  auto gen = rng::make_stream(seed, rng::StreamTag::kData);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, classes - 1);
  int failures = 0;
  for (int k = 0; k < points; ++k) {
    Eigen::VectorXd x(model->dim());
    for (int i = 0; i < x.size(); ++i) x[i] = normal(gen);
    Sample z;
    z.features.resize(dim);
    for (int i = 0; i < dim; ++i) z.features[i] = normal(gen);
    z.features.normalize();
    z.label = model_kind == "mlp" ? double(cls(gen))
                                  : (normal(gen) > 0.0 ? 1.0 : 0.0);
    if (!check_gradient(*model, x, z, step, tol)) ++failures;
  }
  std::cout << "gradcheck " << model_kind << ": " << (points - failures) << "/"
            << points << " points within tol=" << tol << "\n";
  return failures == 0 ? kExitOk : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decentralized finite-sum optimization simulator"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run one experiment from a config");
  std::string config_path, trace_override;
  std::vector<std::string> overrides;
  bool print_config = false;
  run->add_option("--config", config_path, "JSON config path")->required();
  run->add_option("--set", overrides,
                  "override config fields, key.path=value (repeatable)");
  run->add_option("--trace", trace_override, "override trace output path");
  run->add_flag("--print-config", print_config,
                "print the resolved config and exit");

  auto* cmp = app.add_subcommand("compare",
                                 "run several configs, summarize at a budget");
  std::vector<std::string> cmp_paths;
  std::string budget = "comm=1000", out_path;
  cmp->add_option("--configs", cmp_paths, "config paths")->required();
  cmp->add_option("--budget", budget, "comm=<k> or ifo=<k>");
  cmp->add_option("--out", out_path, "summary CSV path (default stdout)");

  auto* chk = app.add_subcommand("check-mixing",
                                 "report alpha and spectral gap of a topology");
  std::string kind = "path", mix_csv;
  int n = 20, rows = 0, cols = 0;
  double p = 0.3;
  std::uint64_t seed = 1;
  chk->add_option("--topology", kind, "complete|erdos_renyi|grid|path");
  chk->add_option("--n", n, "agent count");
  chk->add_option("--p", p, "erdos-renyi edge probability");
  chk->add_option("--rows", rows, "grid rows");
  chk->add_option("--cols", cols, "grid cols");
  chk->add_option("--seed", seed, "topology seed");
  chk->add_option("--mixing-csv", mix_csv, "load mixing matrix from CSV");

  auto* gc = app.add_subcommand("gradcheck",
                                "finite-difference check of model gradients");
  std::string model_kind = "reg_logistic";
  int dim = 10, hidden = 64, classes = 10, points = 50;
  double lambda = 0.01, step = 1e-6, tol = 1e-5;
  std::uint64_t gc_seed = 1;
  gc->add_option("--model", model_kind, "reg_logistic|mlp");
  gc->add_option("--dim", dim, "feature dimension");
  gc->add_option("--lambda", lambda, "regularization weight");
  gc->add_option("--hidden", hidden, "mlp hidden units");
  gc->add_option("--classes", classes, "mlp classes");
  gc->add_option("--points", points, "number of random probe points");
  gc->add_option("--step", step, "finite difference step");
  gc->add_option("--tol", tol, "max allowed relative error");
  gc->add_option("--seed", gc_seed, "probe seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed())
      return cmd_run(config_path, overrides, trace_override, print_config);
    if (cmp->parsed()) return cmd_compare(cmp_paths, budget, out_path);
    if (chk->parsed())
      return cmd_check_mixing(kind, n, p, rows, cols, seed, mix_csv);
    if (gc->parsed())
      return cmd_gradcheck(model_kind, dim, lambda, hidden, classes, points,
                           step, tol, gc_seed);
  } catch (const NonFinite& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const ConfigInvalid& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

#ifndef DESTRESS_DATA_HPP
#define DESTRESS_DATA_HPP

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "destress/errors.hpp"
#include "destress/model.hpp"
#include "destress/rng.hpp"

namespace destress {

struct Dataset {
  std::vector<Sample> samples;
  int d_f = 0;

  int size() const { return static_cast<int>(samples.size()); }
};

// Disjoint index shards, one per agent, each of size per_agent. Indices
// beyond n * per_agent (when N is not divisible by n) are dropped.
struct Partition {
  std::vector<std::vector<int>> shards;
  int per_agent = 0;

  int n_agents() const { return static_cast<int>(shards.size()); }
};

// Unit-norm Gaussian features with labels from a planted linear separator
// plus 10% label flips. Deterministic per seed.
inline Dataset generate_synthetic(int n_samples, int d_f, std::uint64_t seed) {
  if (n_samples < 1 || d_f < 1)
    throw ConfigInvalid("synthetic data needs n_samples >= 1 and d_f >= 1");
  auto gen = rng::make_stream(seed, rng::StreamTag::kData);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Eigen::VectorXd planted(d_f);
  for (int i = 0; i < d_f; ++i) planted[i] = normal(gen);

  Dataset ds;
  ds.d_f = d_f;
  ds.samples.reserve(n_samples);
  for (int s = 0; s < n_samples; ++s) {
    Eigen::VectorXd f(d_f);
    for (int i = 0; i < d_f; ++i) f[i] = normal(gen);
    double norm = f.norm();
    if (norm > 0.0) f /= norm;
    double label = f.dot(planted) > 0.0 ? 1.0 : 0.0;
    if (unif(gen) < 0.10) label = 1.0 - label;
    ds.samples.push_back(Sample{std::move(f), label});
  }
  return ds;
}

// Rectangular numeric CSV, one sample per row; label_column is 0-based.
// With normalize, feature vectors are scaled to unit norm (zero rows kept).
inline Dataset load_csv(const std::string& path, int label_column,
                        bool header = false, bool normalize = false) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file: " + path);
  Dataset ds;
  std::string line;
  long line_no = 0;
  long n_fields = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (header && line_no == 1) continue;
    if (line.empty()) continue;
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        size_t pos = 0;
        double v = std::stod(tok, &pos);
        while (pos < tok.size() &&
               std::isspace(static_cast<unsigned char>(tok[pos])))
          ++pos;
        if (pos != tok.size()) throw std::invalid_argument(tok);
        vals.push_back(v);
      } catch (const std::exception&) {
        throw ParseError("bad number '" + tok + "'", line_no);
      }
    }
    if (n_fields < 0) {
      n_fields = static_cast<long>(vals.size());
      if (n_fields < 2)
        throw ParseError("need at least one feature and a label", line_no);
      if (label_column < 0 || label_column >= n_fields)
        throw ConfigInvalid("label column " + std::to_string(label_column) +
                            " out of range for " + std::to_string(n_fields) +
                            " fields");
      ds.d_f = static_cast<int>(n_fields) - 1;
    } else if (static_cast<long>(vals.size()) != n_fields) {
      throw RaggedRow("expected " + std::to_string(n_fields) +
                          " fields, got " + std::to_string(vals.size()),
                      line_no);
    }
    Sample z;
    z.features.resize(ds.d_f);
    int k = 0;
    for (long c = 0; c < n_fields; ++c) {
      if (c == label_column)
        z.label = vals[c];
      else
        z.features[k++] = vals[c];
    }
    if (normalize) {
      double norm = z.features.norm();
      if (norm > 0.0) z.features /= norm;
    }
    ds.samples.push_back(std::move(z));
  }
  if (ds.samples.empty()) throw IoError("dataset file is empty: " + path);
  return ds;
}

// Features in order with the label appended as the last column, printed with
// enough digits that load_csv reproduces every double exactly.
inline void write_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset file: " + path);
  char buf[32];
  for (const Sample& z : ds.samples) {
    for (int i = 0; i < ds.d_f; ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", z.features[i]);
      out << buf << ",";
    }
    std::snprintf(buf, sizeof(buf), "%.17g", z.label);
    out << buf << "\n";
  }
}

// Seeded permutation split into n consecutive blocks of floor(N/n); the
// remainder indices are unused.
inline Partition partition_uniform(const Dataset& ds, int n,
                                   std::uint64_t seed) {
  const int total = ds.size();
  if (n < 1) throw ConfigInvalid("partition needs n >= 1");
  if (total < n)
    throw TooFewSamples("cannot split " + std::to_string(total) +
                        " samples across " + std::to_string(n) + " agents");
  std::vector<int> perm(total);
  std::iota(perm.begin(), perm.end(), 0);
  auto gen = rng::make_stream(seed, rng::StreamTag::kPartition);
  std::shuffle(perm.begin(), perm.end(), gen);
  const int m = total / n;
  Partition part;
  part.per_agent = m;
  part.shards.resize(n);
  for (int i = 0; i < n; ++i)
    part.shards[i].assign(perm.begin() + static_cast<long>(i) * m,
                          perm.begin() + static_cast<long>(i + 1) * m);
  return part;
}

// Seeded train/holdout split used when test accuracy tracking is on.
inline std::pair<Dataset, Dataset> split_holdout(const Dataset& ds,
                                                 double frac,
                                                 std::uint64_t seed) {
  if (frac <= 0.0) return {ds, Dataset{{}, ds.d_f}};
  if (frac >= 1.0) throw ConfigInvalid("holdout fraction must be < 1");
  std::vector<int> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  auto gen = rng::make_stream(seed, rng::StreamTag::kHoldout);
  std::shuffle(perm.begin(), perm.end(), gen);
  int n_hold = static_cast<int>(frac * ds.size());
  Dataset train{{}, ds.d_f}, hold{{}, ds.d_f};
  for (int k = 0; k < ds.size(); ++k) {
    (k < n_hold ? hold : train).samples.push_back(ds.samples[perm[k]]);
  }
  if (train.samples.empty())
    throw TooFewSamples("holdout fraction leaves no training samples");
  return {std::move(train), std::move(hold)};
}

}  // namespace destress

#endif  // DESTRESS_DATA_HPP

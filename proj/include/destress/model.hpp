#ifndef DESTRESS_MODEL_HPP
#define DESTRESS_MODEL_HPP

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <string>

#include "destress/errors.hpp"

namespace destress {

// One training tuple: feature vector plus a real label (0/1 for logistic,
// class index for the MLP).
struct Sample {
  Eigen::VectorXd features;
  double label = 0.0;
};

namespace detail {

inline double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// log(1 + e^t) without overflow.
inline double softplus(double t) {
  return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t)));
}

}  // namespace detail

// Per-sample loss with exact gradient. Implementations are immutable and
// value/grad are pure, so models can be shared across threads freely.
class LossModel {
 public:
  virtual ~LossModel() = default;

  virtual int dim() const = 0;

  // Upper bound (or user-supplied estimate) of the gradient Lipschitz
  // constant of the per-sample loss; consumed by hyperparameter derivation.
  virtual double smoothness_hint() const = 0;

  double value(const Eigen::VectorXd& x, const Sample& z) const {
    check_dim(x);
    return do_value(x, z);
  }

  Eigen::VectorXd grad(const Eigen::VectorXd& x, const Sample& z) const {
    check_dim(x);
    return do_grad(x, z);
  }

 protected:
  virtual double do_value(const Eigen::VectorXd& x, const Sample& z) const = 0;
  virtual Eigen::VectorXd do_grad(const Eigen::VectorXd& x,
                                  const Sample& z) const = 0;

 private:
  void check_dim(const Eigen::VectorXd& x) const {
    if (static_cast<int>(x.size()) != dim())
      throw DimensionMismatch("parameter has size " + std::to_string(x.size()) +
                              ", model expects " + std::to_string(dim()));
  }
};

// Binary cross-entropy with predicted probability P(l=1) = sigmoid(-x'f),
// plus the bounded nonconvex regularizer lambda * sum_i x_i^2/(1+x_i^2).
// The regularizer gradient per coordinate is 2*lambda*x_i/(1+x_i^2)^2.
class RegLogisticModel final : public LossModel {
 public:
  RegLogisticModel(int d, double lambda, double max_feature_norm_sq = 1.0)
      : d_(d),
        lambda_(lambda),
        smoothness_(0.25 * max_feature_norm_sq + 2.0 * lambda) {}

  int dim() const override { return d_; }
  double lambda() const { return lambda_; }
  double smoothness_hint() const override { return smoothness_; }

 protected:
  double do_value(const Eigen::VectorXd& x, const Sample& z) const override {
    double t = x.dot(z.features);
    // -l log sigmoid(-t) - (1-l) log sigmoid(t)
    double data = z.label * detail::softplus(t) +
                  (1.0 - z.label) * detail::softplus(-t);
    double reg = 0.0;
    for (int i = 0; i < d_; ++i) {
      double xi2 = x[i] * x[i];
      reg += xi2 / (1.0 + xi2);
    }
    return data + lambda_ * reg;
  }

  Eigen::VectorXd do_grad(const Eigen::VectorXd& x,
                          const Sample& z) const override {
    double t = x.dot(z.features);
    double coef = detail::sigmoid(t) - (1.0 - z.label);
    Eigen::VectorXd g = coef * z.features;
    for (int i = 0; i < d_; ++i) {
      double denom = 1.0 + x[i] * x[i];
      g[i] += 2.0 * lambda_ * x[i] / (denom * denom);
    }
    return g;
  }

 private:
  int d_;
  double lambda_;
  double smoothness_;
};

// One-hidden-layer network with sigmoid activations and softmax
// cross-entropy over class-index labels. Parameters are flattened as
// [W1 | b1 | W2 | b2] with W1 (hidden x input) and W2 (classes x hidden)
// stored column-major.
class MlpModel final : public LossModel {
 public:
  MlpModel(int input_dim, int hidden_dim = 64, int n_classes = 10,
           double smoothness_hint = 1.0)
      : input_(input_dim),
        hidden_(hidden_dim),
        classes_(n_classes),
        smoothness_(smoothness_hint) {}

  int dim() const override {
    return hidden_ * (input_ + 1) + classes_ * (hidden_ + 1);
  }
  int input_dim() const { return input_; }
  int hidden_dim() const { return hidden_; }
  int n_classes() const { return classes_; }
  double smoothness_hint() const override { return smoothness_; }

  Eigen::VectorXd logits(const Eigen::VectorXd& x, const Sample& z) const {
    auto [w1, b1, w2, b2] = split(x);
    Eigen::VectorXd h = (w1 * z.features + b1).unaryExpr(
        [](double t) { return detail::sigmoid(t); });
    return w2 * h + b2;
  }

 protected:
  double do_value(const Eigen::VectorXd& x, const Sample& z) const override {
    auto [w1, b1, w2, b2] = split(x);
    Eigen::VectorXd h = (w1 * z.features + b1).unaryExpr(
        [](double t) { return detail::sigmoid(t); });
    Eigen::VectorXd logit = w2 * h + b2;
    int label = class_of(z);
    double mx = logit.maxCoeff();
    double lse = mx + std::log((logit.array() - mx).exp().sum());
    return lse - logit[label];
  }

  Eigen::VectorXd do_grad(const Eigen::VectorXd& x,
                          const Sample& z) const override {
    auto [w1, b1, w2, b2] = split(x);
    Eigen::VectorXd pre = w1 * z.features + b1;
    Eigen::VectorXd h =
        pre.unaryExpr([](double t) { return detail::sigmoid(t); });
    Eigen::VectorXd logit = w2 * h + b2;
    int label = class_of(z);
    double mx = logit.maxCoeff();
    Eigen::VectorXd p = (logit.array() - mx).exp();
    p /= p.sum();
    p[label] -= 1.0;  // d loss / d logits
    Eigen::VectorXd dh = w2.transpose() * p;
    Eigen::VectorXd dpre =
        dh.array() * h.array() * (1.0 - h.array());  // sigmoid'

    Eigen::VectorXd g(dim());
    auto [gw1, gb1, gw2, gb2] = split_mut(g);
    gw1 = dpre * z.features.transpose();
    gb1 = dpre;
    gw2 = p * h.transpose();
    gb2 = p;
    return g;
  }

 private:
  int class_of(const Sample& z) const {
    int label = static_cast<int>(z.label);
    if (label < 0 || label >= classes_ || z.label != label)
      throw DimensionMismatch("label " + std::to_string(z.label) +
                              " is not a class index in [0, " +
                              std::to_string(classes_) + ")");
    return label;
  }

  std::tuple<Eigen::Map<const Eigen::MatrixXd>,
             Eigen::Map<const Eigen::VectorXd>,
             Eigen::Map<const Eigen::MatrixXd>,
             Eigen::Map<const Eigen::VectorXd>>
  split(const Eigen::VectorXd& x) const {
    const double* p = x.data();
    return {Eigen::Map<const Eigen::MatrixXd>(p, hidden_, input_),
            Eigen::Map<const Eigen::VectorXd>(p + hidden_ * input_, hidden_),
            Eigen::Map<const Eigen::MatrixXd>(p + hidden_ * (input_ + 1),
                                              classes_, hidden_),
            Eigen::Map<const Eigen::VectorXd>(
                p + hidden_ * (input_ + 1) + classes_ * hidden_, classes_)};
  }

  std::tuple<Eigen::Map<Eigen::MatrixXd>, Eigen::Map<Eigen::VectorXd>,
             Eigen::Map<Eigen::MatrixXd>, Eigen::Map<Eigen::VectorXd>>
  split_mut(Eigen::VectorXd& x) const {
    double* p = x.data();
    return {Eigen::Map<Eigen::MatrixXd>(p, hidden_, input_),
            Eigen::Map<Eigen::VectorXd>(p + hidden_ * input_, hidden_),
            Eigen::Map<Eigen::MatrixXd>(p + hidden_ * (input_ + 1), classes_,
                                        hidden_),
            Eigen::Map<Eigen::VectorXd>(
                p + hidden_ * (input_ + 1) + classes_ * hidden_, classes_)};
  }

  int input_;
  int hidden_;
  int classes_;
  double smoothness_;
};

// Mean of per-sample gradients over a shard, accumulated in shard order.
inline Eigen::VectorXd local_full_grad(const LossModel& model,
                                       const Eigen::VectorXd& x,
                                       std::span<const Sample> shard) {
  if (shard.empty()) throw EmptyShard("local_full_grad over empty shard");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(model.dim());
  for (const Sample& z : shard) acc += model.grad(x, z);
  return acc / static_cast<double>(shard.size());
}

inline double local_mean_loss(const LossModel& model, const Eigen::VectorXd& x,
                              std::span<const Sample> shard) {
  if (shard.empty()) throw EmptyShard("local_mean_loss over empty shard");
  double acc = 0.0;
  for (const Sample& z : shard) acc += model.value(x, z);
  return acc / static_cast<double>(shard.size());
}

// Central-difference gradient check. Per coordinate the error is
// |analytic - fd| / max(1, |fd|); returns true when the max over
// coordinates is within tol.
inline bool check_gradient(const LossModel& model, const Eigen::VectorXd& x,
                           const Sample& z, double step, double tol) {
  Eigen::VectorXd analytic = model.grad(x, z);
  Eigen::VectorXd probe = x;
  double worst = 0.0;
  for (int i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    double up = model.value(probe, z);
    probe[i] = x[i] - step;
    double down = model.value(probe, z);
    probe[i] = x[i];
    double fd = (up - down) / (2.0 * step);
    double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst <= tol;
}

}  // namespace destress

#endif  // DESTRESS_MODEL_HPP

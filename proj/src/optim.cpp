#include "npattack/optim.hpp"

#include <algorithm>
#include <cmath>

#include "npattack/error.hpp"

namespace npattack {

Adam::Adam(std::vector<Tensor*> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  NPATTACK_REQUIRE(options_.lr > 0.0 && options_.eps > 0.0, "adam: lr and eps must be positive");
  NPATTACK_REQUIRE(options_.beta1 >= 0.0 && options_.beta1 < 1.0 && options_.beta2 >= 0.0 && options_.beta2 < 1.0,
                   "adam: betas must lie in [0, 1)");
  for (Tensor* p : params_) {
    NPATTACK_REQUIRE(p != nullptr, "adam: null parameter");
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void Adam::step() {
  for (Tensor* p : params_) NPATTACK_REQUIRE(p->has_grad(), "adam: parameter has no gradient");
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto w = params_[k]->values();
    auto g = params_[k]->grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

namespace {

double evaluate(const TapeFunction& f, Tensor& x) {
  ad::Tape tape(ad::GradientSink::TapeOnly);
  ad::Var out = f(tape, tape.leaf(x));
  NPATTACK_REQUIRE(out.value().size() == 1, "gradient_check: function output is not scalar");
  return out.value()[0];
}

}  // namespace

GradientCheckReport gradient_check(const TapeFunction& f, const Tensor& point, double step,
                                   double kink_tolerance) {
  NPATTACK_REQUIRE(step > 0.0, "gradient_check: step must be positive");
  Tensor x = point;
  x.drop_grad();
  GradientCheckReport report;
  double f0 = 0.0;
  {
    ad::Tape tape(ad::GradientSink::TapeOnly);
    ad::Var out = f(tape, tape.leaf(x));
    NPATTACK_REQUIRE(out.value().size() == 1, "gradient_check: function output is not scalar");
    f0 = out.value()[0];
    tape.backward(out);
    auto g = tape.leaf_gradient(x);
    report.analytic.assign(g.begin(), g.end());
  }
  report.numeric.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double original = x[i];
    x[i] = original + step;
    const double fp = evaluate(f, x);
    x[i] = original - step;
    const double fm = evaluate(f, x);
    x[i] = original;
    const double numeric = (fp - fm) / (2.0 * step);
    report.numeric[i] = numeric;
    const double right = (fp - f0) / step;
    const double left = (f0 - fm) / step;
    const double scale = std::max({1.0, std::abs(right), std::abs(left)});
    if (std::abs(right - left) > kink_tolerance * scale) {
      report.kinks.push_back(i);
      continue;
    }
    const double err = std::abs(report.analytic[i] - numeric) / std::max(1.0, std::abs(report.analytic[i]));
    if (err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_coordinate = i;
    }
  }
  return report;
}

}  // namespace npattack

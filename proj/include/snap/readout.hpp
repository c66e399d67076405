#pragma once

// Softmax readout g_φ(h): either linear (hidden == 0) or a one-hidden-layer
// rectifier MLP. Its gradient is always exact and local to the step.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "snap/kernels.hpp"

namespace snap {

class Readout {
 public:
  Readout() = default;

  Readout(std::size_t inputs, std::size_t hidden, std::size_t classes, std::mt19937_64& rng)
      : inputs_(inputs), hidden_(hidden), classes_(classes) {
    if (inputs == 0 || classes < 2) throw std::invalid_argument("readout needs inputs and at least two classes");
    params_.assign(param_count_for(inputs, hidden, classes), 0.0);
    const std::size_t first_in = inputs;
    const std::size_t first_out = hidden == 0 ? classes : hidden;
    std::uniform_real_distribution<double> d1(-1.0 / std::sqrt(double(first_in)), 1.0 / std::sqrt(double(first_in)));
    for (std::size_t i = 0; i < first_out * first_in; ++i) params_[i] = d1(rng);
    if (hidden > 0) {
      std::uniform_real_distribution<double> d2(-1.0 / std::sqrt(double(hidden)), 1.0 / std::sqrt(double(hidden)));
      const std::size_t w2 = hidden * inputs + hidden;
      for (std::size_t i = 0; i < classes * hidden; ++i) params_[w2 + i] = d2(rng);
    }
  }

  static std::size_t param_count_for(std::size_t inputs, std::size_t hidden, std::size_t classes) {
    return hidden == 0 ? classes * inputs + classes : hidden * inputs + hidden + classes * hidden + classes;
  }

  std::size_t inputs() const { return inputs_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t classes() const { return classes_; }
  std::size_t param_count() const { return params_.size(); }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::vector<double> logits(std::span<const double> h) const {
    std::vector<double> act;
    return forward(h, act);
  }

  double loss(std::span<const double> h, int target) const {
    const auto z = logits(h);
    return log_sum_exp(z) - z.at(static_cast<std::size_t>(target));
  }

  // Cross-entropy (nats) at `target`; adds ∂L/∂φ into `grad` and writes
  // ∂L/∂h into `dh`.
  double loss_and_grad(std::span<const double> h, int target, std::span<double> grad, std::span<double> dh) const {
    if (target < 0 || static_cast<std::size_t>(target) >= classes_) throw std::out_of_range("readout target out of range");
    if (h.size() != inputs_ || dh.size() != inputs_ || grad.size() != params_.size()) {
      throw DimensionError("readout: argument lengths do not match");
    }
    std::vector<double> act;
    auto z = forward(h, act);
    const double lse = log_sum_exp(z);
    const double loss = lse - z[static_cast<std::size_t>(target)];
    for (auto& v : z) v = std::exp(v - lse);
    z[static_cast<std::size_t>(target)] -= 1.0;  // dL/dlogits

    std::fill(dh.begin(), dh.end(), 0.0);
    if (hidden_ == 0) {
      for (std::size_t c = 0; c < classes_; ++c) {
        const double g = z[c];
        const double* w = params_.data() + c * inputs_;
        double* gw = grad.data() + c * inputs_;
        for (std::size_t i = 0; i < inputs_; ++i) {
          gw[i] += g * h[i];
          dh[i] += g * w[i];
        }
        grad[classes_ * inputs_ + c] += g;
      }
    } else {
      const std::size_t b1 = hidden_ * inputs_;
      const std::size_t w2 = b1 + hidden_;
      const std::size_t b2 = w2 + classes_ * hidden_;
      std::vector<double> dact(hidden_, 0.0);
      for (std::size_t c = 0; c < classes_; ++c) {
        const double g = z[c];
        const double* w = params_.data() + w2 + c * hidden_;
        double* gw = grad.data() + w2 + c * hidden_;
        for (std::size_t j = 0; j < hidden_; ++j) {
          gw[j] += g * act[j];
          dact[j] += g * w[j];
        }
        grad[b2 + c] += g;
      }
      for (std::size_t j = 0; j < hidden_; ++j) {
        if (act[j] <= 0.0) continue;
        const double g = dact[j];
        const double* w = params_.data() + j * inputs_;
        double* gw = grad.data() + j * inputs_;
        for (std::size_t i = 0; i < inputs_; ++i) {
          gw[i] += g * h[i];
          dh[i] += g * w[i];
        }
        grad[b1 + j] += g;
      }
    }
    if (!std::isfinite(loss)) throw NumericError("non-finite readout loss");
    return loss;
  }

 private:
  static double log_sum_exp(std::span<const double> z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
  }

  std::vector<double> forward(std::span<const double> h, std::vector<double>& act) const {
    if (h.size() != inputs_) throw DimensionError("readout: input has wrong length");
    std::vector<double> z(classes_, 0.0);
    if (hidden_ == 0) {
      for (std::size_t c = 0; c < classes_; ++c) {
        const double* w = params_.data() + c * inputs_;
        double acc = params_[classes_ * inputs_ + c];
        for (std::size_t i = 0; i < inputs_; ++i) acc += w[i] * h[i];
        z[c] = acc;
      }
      return z;
    }
    const std::size_t b1 = hidden_ * inputs_;
    const std::size_t w2 = b1 + hidden_;
    const std::size_t b2 = w2 + classes_ * hidden_;
    act.assign(hidden_, 0.0);
    for (std::size_t j = 0; j < hidden_; ++j) {
      const double* w = params_.data() + j * inputs_;
      double acc = params_[b1 + j];
      for (std::size_t i = 0; i < inputs_; ++i) acc += w[i] * h[i];
      act[j] = acc > 0.0 ? acc : 0.0;
    }
    for (std::size_t c = 0; c < classes_; ++c) {
      const double* w = params_.data() + w2 + c * hidden_;
      double acc = params_[b2 + c];
      for (std::size_t j = 0; j < hidden_; ++j) acc += w[j] * act[j];
      z[c] = acc;
    }
    return z;
  }

  std::size_t inputs_ = 0;
  std::size_t hidden_ = 0;
  std::size_t classes_ = 0;
  std::vector<double> params_;
};

}  // namespace snap

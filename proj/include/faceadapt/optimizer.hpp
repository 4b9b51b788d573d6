// SPDX-License-Identifier: Apache-2.0
// Decoupled-weight-decay Adam over a registry of named parameter matrices,
// plus the cosine step-size schedule used for fine-tuning.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "faceadapt/common.hpp"
#include "faceadapt/container.hpp"

namespace faceadapt {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// lr(step): half-cosine from base_lr at step 0 down to zero once the step
/// counter reaches total_steps. Monotone non-increasing on [0, total_steps].
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
  if (total_steps <= 0) return base_lr;
  if (step <= 0) return base_lr;
  if (step >= total_steps) return 0.0;
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(step) / double(total_steps)));
}

/// Weight decay multiplies the parameter itself, not the gradient, so the
/// shrinkage is independent of the adaptive scaling.
template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void add(const std::string& name, MatX<Scalar>& value, MatX<Scalar>& grad) {
    Slot s;
    s.name = name;
    s.value = &value;
    s.grad = &grad;
    s.m = MatX<Scalar>::Zero(value.rows(), value.cols());
    s.v = MatX<Scalar>::Zero(value.rows(), value.cols());
    slots_.push_back(std::move(s));
  }

  void step(double lr) {
    ++t_;
    const Scalar b1 = Scalar(cfg_.beta1), b2 = Scalar(cfg_.beta2);
    const Scalar bc1 = Scalar(1) - Scalar(std::pow(cfg_.beta1, double(t_)));
    const Scalar bc2 = Scalar(1) - Scalar(std::pow(cfg_.beta2, double(t_)));
    for (auto& s : slots_) {
      const MatX<Scalar>& g = *s.grad;
      s.m = b1 * s.m + (Scalar(1) - b1) * g;
      s.v = b2 * s.v + (Scalar(1) - b2) * g.cwiseProduct(g);
      const MatX<Scalar> update =
          (s.m / bc1).cwiseQuotient(((s.v / bc2).cwiseSqrt().array() + Scalar(cfg_.eps)).matrix()) +
          Scalar(cfg_.weight_decay) * (*s.value);
      *s.value -= Scalar(lr) * update;
    }
  }

  std::int64_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  /// First/second moments under "opt.<name>.m" / "opt.<name>.v".
  void save_state(Container& c) const {
    for (const auto& s : slots_) {
      c.set_matrix("opt." + s.name + ".m", s.m);
      c.set_matrix("opt." + s.name + ".v", s.v);
    }
  }

  void load_state(const Container& c, std::int64_t steps) {
    for (auto& s : slots_) {
      s.m = c.matrix<Scalar>("opt." + s.name + ".m");
      s.v = c.matrix<Scalar>("opt." + s.name + ".v");
      if (s.m.rows() != s.value->rows() || s.m.cols() != s.value->cols())
        throw DataError("optimizer state for '" + s.name + "' has the wrong shape");
    }
    t_ = steps;
  }

  /// Global L2 clip across every registered gradient; no-op for max_norm <= 0.
  Scalar clip_gradients(Scalar max_norm) {
    Scalar sq = 0;
    for (const auto& s : slots_) sq += s.grad->squaredNorm();
    const Scalar norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
      const Scalar f = max_norm / norm;
      for (auto& s : slots_) *s.grad *= f;
    }
    return norm;
  }

  template <typename Fn>  // Fn(name, value, grad)
  void for_each_slot(Fn&& fn) const {
    for (const auto& s : slots_) fn(s.name, *s.value, *s.grad);
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& s : slots_) n += s.value->size();
    return n;
  }

 private:
  struct Slot {
    std::string name;
    MatX<Scalar>* value = nullptr;
    MatX<Scalar>* grad = nullptr;
    MatX<Scalar> m, v;
  };

  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::int64_t t_ = 0;
};

}  // namespace faceadapt

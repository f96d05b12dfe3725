#pragma once

// Adam optimizer with bias-corrected moment estimates.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcam/tensor.hpp"

namespace mcam {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    detail::check(learning_rate > 0.0, "adam: learning_rate must be positive");
    detail::check(beta1 >= 0.0 && beta1 < 1.0, "adam: beta1 must be in [0,1)");
    detail::check(beta2 >= 0.0 && beta2 < 1.0, "adam: beta2 must be in [0,1)");
    detail::check(epsilon > 0.0, "adam: epsilon must be positive");
  }
};

// First/second moment buffers for a fixed parameter list.  The list order is
// pinned at construction; step() rejects any change of count or shape.
class OptimizerState {
 public:
  OptimizerState() = default;

  explicit OptimizerState(const std::vector<Tensor>& params, AdamConfig config = {})
      : config_(config) {
    config_.validate();
    slots_.reserve(params.size());
    for (const Tensor& p : params)
      slots_.push_back(Slot{p.shape(), std::vector<double>(p.data().size(), 0.0),
                            std::vector<double>(p.data().size(), 0.0)});
  }

  const AdamConfig& config() const { return config_; }
  uint64_t step_count() const { return step_count_; }
  size_t slot_count() const { return slots_.size(); }
  const Shape& slot_shape(size_t i) const { return slots_.at(i).shape; }
  std::vector<double>& first_moment(size_t i) { return slots_.at(i).m; }
  std::vector<double>& second_moment(size_t i) { return slots_.at(i).v; }
  const std::vector<double>& first_moment(size_t i) const { return slots_.at(i).m; }
  const std::vector<double>& second_moment(size_t i) const { return slots_.at(i).v; }

  // For checkpoint restore.
  void set_step_count(uint64_t t) { step_count_ = t; }

  // Applies one update using the gradients currently stored on the params.
  // A parameter whose gradient buffer was never touched is treated as having
  // zero gradient (its moments still decay).
  void step(std::vector<Tensor>& params) {
    detail::check(params.size() == slots_.size(),
                  "adam: got " + std::to_string(params.size()) + " params, state has " +
                      std::to_string(slots_.size()));
    for (size_t i = 0; i < params.size(); ++i) {
      detail::check(params[i].shape() == slots_[i].shape,
                    "adam: param " + std::to_string(i) + " shape " +
                        shape_str(params[i].shape()) + " != state shape " +
                        shape_str(slots_[i].shape));
      if (params[i].has_grad())
        for (double gv : params[i].grad())
          detail::check(std::isfinite(gv),
                        "adam: non-finite gradient in param " + std::to_string(i));
    }
    ++step_count_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double bias1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
    const double bias2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto pv = params[i].data();
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      const bool has_grad = params[i].has_grad();
      std::span<const double> gv = has_grad ? params[i].grad() : std::span<const double>();
      for (size_t j = 0; j < pv.size(); ++j) {
        const double gj = has_grad ? gv[j] : 0.0;
        m[j] = b1 * m[j] + (1.0 - b1) * gj;
        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
        const double mhat = m[j] / bias1;
        const double vhat = v[j] / bias2;
        pv[j] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
  }

 private:
  struct Slot {
    Shape shape;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  AdamConfig config_;
  uint64_t step_count_ = 0;
};

inline void adam_step(std::vector<Tensor>& params, OptimizerState& state) { state.step(params); }

}  // namespace mcam

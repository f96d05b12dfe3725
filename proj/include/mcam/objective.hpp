#pragma once

// Training objective: attribute cross-entropy for the per-attribute heads and
// the multi-label head, a reconstruction penalty, and an L1 sparsity term on
// the attention masks, combined with fixed weights.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mcam/graph.hpp"
#include "mcam/model.hpp"
#include "mcam/ops.hpp"
#include "mcam/tensor.hpp"

namespace mcam {

struct LossWeights {
  double alpha = 1.0;    // binary attribute term
  double beta = 1.0;     // multi-label term
  double gamma = 4.0;    // reconstruction term
  double lambda = 1e-5;  // mask sparsity term

  void validate() const {
    detail::check(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0 && lambda >= 0.0,
                  "loss weights must be non-negative");
  }
};

// Cross-entropy summed over attributes, averaged over samples:
//   (1/N) sum_n sum_k -[ y log p + (1-y) log(1-p) ]
// with p clamped to [1e-7, 1-1e-7] before the logs, so perfect predictions
// cost ~1e-7 per attribute instead of producing infinities.  Labels must be
// exactly 0 or 1.
inline Tensor attribute_bce(Graph& g, const Tensor& probs, const Tensor& labels) {
  detail::check(probs.ndim() == 2, "attribute_bce: probs must be [N,K], got " + shape_str(probs.shape()));
  detail::check_same_shape(probs, labels, "attribute_bce");
  detail::check_finite(probs, "attribute_bce", "probs");
  for (double y : labels.data())
    detail::check(y == 0.0 || y == 1.0, "attribute_bce: labels must be exactly 0 or 1");

  constexpr double kLo = 1e-7, kHi = 1.0 - 1e-7;
  const int64_t n = probs.dim(0);
  double acc = 0.0;
  {
    auto p = probs.data();
    auto y = labels.data();
    for (int64_t i = 0; i < probs.numel(); ++i) {
      const double pc = p[i] < kLo ? kLo : (p[i] > kHi ? kHi : p[i]);
      acc -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
    }
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  if (detail::grad_needed(g, {&probs})) {
    out.set_requires_grad(true);
    Tensor p_c = probs, y_c = labels, out_c = out;
    g.record(
        {probs, labels}, out,
        [p_c, y_c, out_c, n]() mutable {
          const double go = out_c.grad()[0] / static_cast<double>(n);
          auto p = p_c.data();
          auto y = y_c.data();
          auto dp = p_c.grad();
          for (int64_t i = 0; i < p_c.numel(); ++i) {
            if (p[i] <= kLo || p[i] >= kHi) continue;  // clamp is flat outside
            dp[i] -= go * (y[i] / p[i] - (1.0 - y[i]) / (1.0 - p[i]));
          }
        },
        "attribute_bce");
  }
  return out;
}

// Squared reconstruction error summed per sample, averaged over the batch:
//   (1/N) sum_n || x_n - xhat_n ||^2.
inline Tensor reconstruction_error(Graph& g, const Tensor& images, const Tensor& recon) {
  detail::check_same_shape(images, recon, "reconstruction_error");
  detail::check_finite(recon, "reconstruction_error", "reconstruction");
  const int64_t n = images.dim(0);
  double acc = 0.0;
  {
    auto x = images.data();
    auto r = recon.data();
    for (int64_t i = 0; i < images.numel(); ++i) {
      const double d = x[i] - r[i];
      acc += d * d;
    }
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  if (detail::grad_needed(g, {&images, &recon})) {
    out.set_requires_grad(true);
    Tensor x_c = images, r_c = recon, out_c = out;
    g.record(
        {images, recon}, out,
        [x_c, r_c, out_c, n]() mutable {
          const double go = 2.0 * out_c.grad()[0] / static_cast<double>(n);
          auto x = x_c.data();
          auto r = r_c.data();
          if (r_c.requires_grad()) {
            auto dr = r_c.grad();
            for (int64_t i = 0; i < r_c.numel(); ++i) dr[i] += go * (r[i] - x[i]);
          }
          if (x_c.requires_grad()) {
            auto dx = x_c.grad();
            for (int64_t i = 0; i < x_c.numel(); ++i) dx[i] += go * (x[i] - r[i]);
          }
        },
        "reconstruction_error");
  }
  return out;
}

// L1 of all K attention masks; with per_sample the sum is divided by the
// batch size so the value is comparable across batch sizes.
inline Tensor mask_sparsity(Graph& g, const std::vector<Tensor>& masks, bool per_sample = true) {
  detail::check(!masks.empty(), "mask_sparsity: no masks given");
  Tensor acc = l1_norm(g, masks[0]);
  for (size_t k = 1; k < masks.size(); ++k) acc = add(g, acc, l1_norm(g, masks[k]));
  if (per_sample) acc = scale(g, acc, 1.0 / static_cast<double>(masks[0].dim(0)));
  return acc;
}

struct LossBreakdown {
  double binary = 0.0;
  double multilabel = 0.0;
  double reconstruction = 0.0;
  double mask_l1 = 0.0;
  double total = 0.0;
};

struct TotalLoss {
  Tensor total;  // differentiable scalar
  LossBreakdown values;
};

// alpha*Lb + beta*Lm + gamma*Lr + lambda*L1 as a graph expression.
inline Tensor weighted_total(Graph& g, const Tensor& binary, const Tensor& multilabel,
                             const Tensor& recon, const Tensor& mask_l1,
                             const LossWeights& w) {
  w.validate();
  Tensor total = scale(g, binary, w.alpha);
  total = add(g, total, scale(g, multilabel, w.beta));
  total = add(g, total, scale(g, recon, w.gamma));
  total = add(g, total, scale(g, mask_l1, w.lambda));
  return total;
}

// Full objective for one forward pass.  `labels` is [N,K] in {0,1} and
// `images` the network input the reconstruction is compared against.
inline TotalLoss total_loss(Graph& g, const ForwardOutputs& outputs, const Tensor& labels,
                            const Tensor& images, const LossWeights& weights,
                            bool mask_l1_per_sample = true) {
  Tensor lb = attribute_bce(g, outputs.binary_probs, labels);
  Tensor lm = attribute_bce(g, outputs.multilabel_probs, labels);
  Tensor lr = reconstruction_error(g, images, outputs.reconstruction);
  Tensor l1 = mask_sparsity(g, outputs.masks, mask_l1_per_sample);
  TotalLoss result;
  result.total = weighted_total(g, lb, lm, lr, l1, weights);
  result.values = LossBreakdown{lb.item(), lm.item(), lr.item(), l1.item(),
                                result.total.item()};
  return result;
}

}  // namespace mcam

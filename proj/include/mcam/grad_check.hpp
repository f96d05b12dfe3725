#pragma once

// Finite-difference validation of backward passes.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcam/graph.hpp"
#include "mcam/model.hpp"
#include "mcam/objective.hpp"
#include "mcam/ops.hpp"
#include "mcam/random.hpp"
#include "mcam/tensor.hpp"

namespace mcam {

// Builds a scalar loss on the given graph; must be a pure function of the
// tensors it captures.
using LossFn = std::function<Tensor(Graph&)>;

// Compares analytic gradients of `fn` w.r.t. every element of `inputs`
// against central differences with the given step.  Relative error uses
// |a - n| / max(|a|, |n|, 1e-8).  Returns the worst error seen.  Throws if
// the loss is not scalar or if two evaluations of `fn` disagree bitwise
// (a non-deterministic function cannot be finite-differenced).
inline double grad_check(const LossFn& fn, std::vector<Tensor> inputs, double step = 1e-5) {
  detail::check(!inputs.empty(), "grad_check: no inputs given");
  detail::check(step > 0.0, "grad_check: step must be positive");
  for (Tensor& t : inputs) t.set_requires_grad(true);

  auto eval = [&fn]() {
    Graph g(Graph::Mode::no_grad);
    Tensor loss = fn(g);
    detail::check(loss.numel() == 1,
                  "grad_check: loss must be scalar, got shape " + shape_str(loss.shape()));
    return loss.item();
  };

  const double probe1 = eval();
  const double probe2 = eval();
  if (std::bit_cast<uint64_t>(probe1) != std::bit_cast<uint64_t>(probe2))
    throw std::runtime_error("grad_check: function is non-deterministic (two evaluations differ)");

  for (Tensor& t : inputs) t.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    Tensor loss = fn(g);
    detail::check(loss.numel() == 1,
                  "grad_check: loss must be scalar, got shape " + shape_str(loss.shape()));
    g.backward(loss);
    for (Tensor& t : inputs) {
      auto gv = t.grad();
      analytic.emplace_back(gv.begin(), gv.end());
    }
  }

  double max_rel = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto data = inputs[ti].data();
    for (size_t j = 0; j < data.size(); ++j) {
      const double saved = data[j];
      data[j] = saved + step;
      const double f_plus = eval();
      data[j] = saved - step;
      const double f_minus = eval();
      data[j] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = analytic[ti][j];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel > max_rel) max_rel = rel;
    }
  }
  return max_rel;
}

// ---------------------------------------------------------------------------
// Standard battery: one finite-difference check per differentiable op plus
// the full composite loss through a small network.

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
};

inline constexpr double kGradCheckTolerance = 1e-4;

namespace detail {

// Uniform values in [lo, hi]; |v| is kept at least `keep_away` from zero so
// central differences never straddle a kink (leaky_relu, |x|).
inline Tensor seeded_tensor(Rng& rng, Shape shape, double lo, double hi,
                            double keep_away = 0.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) {
    v = rng.uniform(lo, hi);
    if (keep_away > 0.0 && std::abs(v) < keep_away) v = v < 0.0 ? -keep_away : keep_away;
  }
  return t;
}

}  // namespace detail

inline std::vector<GradCheckCase> run_gradient_battery(uint64_t seed = 0) {
  Rng rng(hash_mix(seed, 0x67726164));  // "grad"
  std::vector<GradCheckCase> results;
  // A quadratic readout makes the output gradient depend on the values, so
  // sign and scaling mistakes in an op's backward cannot cancel out.
  auto quad = [](Graph& g, const Tensor& t) { return mean(g, mul(g, t, t)); };
  auto run = [&](const std::string& name, const LossFn& fn, std::vector<Tensor> inputs) {
    results.push_back({name, grad_check(fn, std::move(inputs))});
  };

  {
    Tensor x = detail::seeded_tensor(rng, {2, 2, 5, 5}, -1.0, 1.0);
    Tensor k = detail::seeded_tensor(rng, {3, 2, 3, 3}, -0.5, 0.5);
    Tensor b = detail::seeded_tensor(rng, {3}, -0.5, 0.5);
    run("conv2d dilation 1",
        [&](Graph& g) { return mean(g, mul(g, conv2d(g, x, k, b, 1), conv2d(g, x, k, b, 1))); },
        {x, k, b});
  }
  {
    Tensor x = detail::seeded_tensor(rng, {1, 2, 8, 8}, -1.0, 1.0);
    Tensor k = detail::seeded_tensor(rng, {2, 2, 3, 3}, -0.5, 0.5);
    Tensor b = detail::seeded_tensor(rng, {2}, -0.5, 0.5);
    for (int64_t dilation : {2, 4}) {
      run("conv2d dilation " + std::to_string(dilation),
          [&, dilation](Graph& g) { return quad(g, conv2d(g, x, k, b, dilation)); }, {x, k, b});
    }
  }
  {
    Tensor x = detail::seeded_tensor(rng, {3, 4}, -1.0, 1.0);
    Tensor w = detail::seeded_tensor(rng, {3, 4}, -0.7, 0.7);
    Tensor b = detail::seeded_tensor(rng, {3}, -0.5, 0.5);
    run("linear", [&](Graph& g) { return quad(g, linear(g, x, w, b)); }, {x, w, b});
  }
  {
    Tensor x = detail::seeded_tensor(rng, {2, 5}, -3.0, 3.0);
    run("sigmoid", [&](Graph& g) { return quad(g, sigmoid(g, x)); }, {x});
  }
  {
    Tensor x = detail::seeded_tensor(rng, {2, 6}, -1.0, 1.0, 0.05);
    run("leaky_relu", [&](Graph& g) { return quad(g, leaky_relu(g, x, 0.1)); }, {x});
  }
  {
    Tensor a = detail::seeded_tensor(rng, {2, 3, 2}, -1.0, 1.0);
    Tensor b = detail::seeded_tensor(rng, {2, 3, 2}, -1.0, 1.0);
    run("mul", [&](Graph& g) { return quad(g, mul(g, a, b)); }, {a, b});
    run("add", [&](Graph& g) { return quad(g, add(g, a, b)); }, {a, b});
    run("sub", [&](Graph& g) { return quad(g, sub(g, a, b)); }, {a, b});
  }
  {
    Tensor x = detail::seeded_tensor(rng, {7}, -1.0, 1.0);
    run("add_scalar", [&](Graph& g) { return quad(g, add_scalar(g, x, 0.37)); }, {x});
    run("scale", [&](Graph& g) { return quad(g, scale(g, x, 1.7)); }, {x});
  }
  {
    Tensor x = detail::seeded_tensor(rng, {2, 3, 4, 4}, -1.0, 1.0);
    run("global_avg_pool", [&](Graph& g) { return quad(g, global_avg_pool(g, x)); }, {x});
  }
  {
    Tensor x = detail::seeded_tensor(rng, {2, 5}, -1.0, 1.0);
    run("sum", [&](Graph& g) { return mul(g, sum(g, x), sum(g, x)); }, {x});
    run("mean", [&](Graph& g) { return mul(g, mean(g, x), mean(g, x)); }, {x});
  }
  {
    Tensor x = detail::seeded_tensor(rng, {2, 5}, -1.0, 1.0, 0.05);
    run("l1_norm", [&](Graph& g) { return mul(g, l1_norm(g, x), l1_norm(g, x)); }, {x});
  }
  {
    Tensor x = detail::seeded_tensor(rng, {2, 6}, -1.0, 1.0);
    run("reshape", [&](Graph& g) { return quad(g, reshape(g, x, {3, 4})); }, {x});
  }
  {
    Tensor c0 = detail::seeded_tensor(rng, {4}, -1.0, 1.0);
    Tensor c1 = detail::seeded_tensor(rng, {4}, -1.0, 1.0);
    Tensor c2 = detail::seeded_tensor(rng, {4}, -1.0, 1.0);
    run("stack_columns", [&](Graph& g) { return quad(g, stack_columns(g, {c0, c1, c2})); },
        {c0, c1, c2});
  }
  {
    Tensor f = detail::seeded_tensor(rng, {2, 4, 3, 3}, -1.0, 1.0);
    Tensor m = detail::seeded_tensor(rng, {2, 4, 3, 3}, 0.05, 0.95);
    run("attention application",
        [&](Graph& g) { return quad(g, apply_attention(g, f, m)); }, {f, m});
    run("attention pooling",
        [&](Graph& g) { return quad(g, attention_pool(g, f, m)); }, {f, m});
  }
  {
    Tensor probs = detail::seeded_tensor(rng, {3, 2}, 0.05, 0.95);
    Tensor labels = Tensor::zeros({3, 2});
    for (double& y : labels.data()) y = static_cast<double>(rng.uniform_int(0, 1));
    run("attribute bce", [&](Graph& g) { return attribute_bce(g, probs, labels); }, {probs});
  }
  {
    Tensor images = detail::seeded_tensor(rng, {2, 1, 4, 4}, 0.0, 1.0);
    Tensor recon = detail::seeded_tensor(rng, {2, 1, 4, 4}, 0.05, 0.95);
    run("reconstruction error",
        [&](Graph& g) { return reconstruction_error(g, images, recon); }, {recon});
  }
  {
    Tensor m0 = detail::seeded_tensor(rng, {2, 2, 3, 3}, 0.05, 0.95);
    Tensor m1 = detail::seeded_tensor(rng, {2, 2, 3, 3}, 0.05, 0.95);
    run("mask sparsity",
        [&](Graph& g) { return mask_sparsity(g, {m0, m1}, true); }, {m0, m1});
  }
  {
    NetworkConfig nc;
    nc.image_size = 8;
    nc.image_channels = 1;
    nc.feature_channels = 4;
    nc.num_attributes = 2;
    nc.dilation_schedule = {1, 2};
    nc.extractor_channels = {3};
    nc.mask_hidden = 2;
    nc.head_hidden = 3;
    nc.recon_hidden = 2;
    nc.seed = hash_mix(seed, 0x6e6574);  // "net"
    Network net = init_network(nc);
    Tensor images = detail::seeded_tensor(rng, {2, 1, 8, 8}, 0.0, 1.0);
    Tensor labels = Tensor::zeros({2, 2});
    for (double& y : labels.data()) y = static_cast<double>(rng.uniform_int(0, 1));
    const LossWeights weights;
    run("composite loss",
        [&](Graph& g) {
          ForwardOutputs out = forward_full(g, net, images);
          return total_loss(g, out, labels, images, weights, true).total;
        },
        net.parameters());
    {
      Tensor f = detail::seeded_tensor(rng, {2, 4, 8, 8}, -1.0, 1.0);
      const Network::MaskHead& head = net.mask_heads[0];
      run("attention mask head",
          [&](Graph& g) { return quad(g, attention_mask(g, net, f, 0)); },
          {f, head.reduce.kernel, head.reduce.bias, head.expand.kernel, head.expand.bias});
    }
    // Gradient into the modulated volume itself: in the fused all-heads node
    // this drives a distinct backward path from the mask and pooled outputs.
    run("modulated features path",
        [&](Graph& g) {
          ForwardOutputs out = forward_full(g, net, images);
          return quad(g, out.masked_features[0]);
        },
        net.parameters());
  }
  return results;
}

}  // namespace mcam

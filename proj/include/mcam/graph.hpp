#pragma once

// Operation tape for reverse-mode differentiation.
//
// Ops append nodes in execution order; backward() walks the tape in reverse,
// which is a valid topological order because every node's inputs were created
// before it.  A node's backward closure runs only if a gradient actually
// reached its output, and intermediate gradient buffers are released as soon
// as they have been consumed to keep peak memory proportional to the widest
// layer rather than the whole forward pass.

#include <chrono>
#include <cstddef>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mcam/tensor.hpp"

namespace mcam {

class Graph {
 public:
  enum class Mode { record, no_grad };

  explicit Graph(Mode mode = Mode::record) : mode_(mode) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Ops skip node creation entirely when recording is off.
  bool recording() const { return mode_ == Mode::record; }

  size_t size() const { return nodes_.size(); }

  // Called by ops: registers output = op(inputs) with its backward closure.
  // The closure must read output.grad() and accumulate into the inputs' grads.
  void record(std::vector<Tensor> inputs, const Tensor& output,
              std::function<void()> backward_fn, const char* op_name) {
    record_multi(std::move(inputs), {output}, std::move(backward_fn), op_name);
  }

  // Fused ops produce several result tensors from one execution record.  The
  // backward closure runs once if a gradient reached any of the outputs and
  // must check per output which gradients are present.
  void record_multi(std::vector<Tensor> inputs, std::vector<Tensor> outputs,
                    std::function<void()> backward_fn, const char* op_name) {
    if (!recording())
      throw std::logic_error(std::string(op_name) + ": record() on a no-grad graph");
    for (const Tensor& out : outputs) {
      out.impl_->node_output = true;
      outputs_.insert(out.id());
    }
    nodes_.push_back(Node{std::move(inputs), std::move(outputs), std::move(backward_fn), op_name});
  }

  bool contains(const Tensor& t) const { return outputs_.count(t.id()) != 0; }

  // True exactly once per tensor buffer per graph.  Ops use it to run
  // expensive input validation a single time even when one tensor feeds many
  // consumers; within a graph's lifetime op inputs are immutable, so one scan
  // vouches for all later uses.
  bool first_sight(const Tensor& t) { return seen_.insert(t.id()).second; }

  // Accumulates d(loss)/d(tensor) into the grad of every requires_grad tensor
  // reachable from loss.  Repeated calls without zero_grad add up.  Gradients
  // of non-leaf tensors are released unless retain_grad() was set on them.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be a single element, got shape " +
                                  shape_str(loss.shape()));
    if (!contains(loss))
      throw std::invalid_argument("backward: loss tensor was not produced on this graph");
    if (!loss.requires_grad())
      throw std::invalid_argument("backward: loss does not require grad");
    Tensor seed = loss;
    seed.grad()[0] += 1.0;
    static const bool prof = std::getenv("MCAM_PROF") != nullptr;
    std::map<std::string, double> agg;
    for (size_t i = nodes_.size(); i-- > 0;) {
      Node& node = nodes_[i];
      bool live = false;  // a gradient reached at least one output
      for (const Tensor& out : node.outputs)
        if (out.requires_grad() && out.has_grad()) {
          live = true;
          break;
        }
      if (!live) continue;  // not on the loss path
      if (prof) {
        auto t0 = std::chrono::steady_clock::now();
        node.backward();
        auto t1 = std::chrono::steady_clock::now();
        agg[node.name] += std::chrono::duration<double, std::milli>(t1 - t0).count();
      } else {
        node.backward();
      }
      for (Tensor& out : node.outputs)
        if (!out.impl_->retain_grad) out.release_grad();
    }
    if (prof)
      for (auto& [k, v] : agg) std::fprintf(stderr, "  bwd %-18s %8.2f ms\n", k.c_str(), v);
  }

  void clear() {
    nodes_.clear();
    outputs_.clear();
    seen_.clear();
  }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    std::vector<Tensor> outputs;
    std::function<void()> backward;
    const char* name;
  };

  std::vector<Node> nodes_;
  std::unordered_set<const void*> outputs_;
  std::unordered_set<const void*> seen_;
  Mode mode_;
};

namespace detail {

// True when the result of an op over these inputs should be differentiable.
inline bool grad_needed(const Graph& g, std::initializer_list<const Tensor*> inputs) {
  if (!g.recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

}  // namespace mcam

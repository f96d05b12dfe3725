#pragma once

// Dense double-precision tensors with reverse-mode gradient storage.
//
// A Tensor is a shared handle: copies alias the same buffer, so passing
// tensors around is cheap and a parameter updated in place is visible to
// every holder.  Shapes are immutable after construction and every extent
// must be positive.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#if __has_include(<malloc.h>)
#include <malloc.h>
#endif

namespace mcam {

// glibc hands allocations above its mmap threshold (capped at 32 MiB) back to
// the kernel on free, so activation-sized tensors would fault in fresh zeroed
// pages on every training step.  Raising the threshold keeps those blocks in
// the heap for reuse.  Call once at program start; a no-op elsewhere.
inline void tune_allocator_for_large_tensors() {
#if defined(M_MMAP_THRESHOLD) && defined(M_TRIM_THRESHOLD)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline void check(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

inline void check_shape_valid(const Shape& shape) {
  for (int64_t d : shape)
    check(d > 0, "tensor shape " + shape_str(shape) + " has a non-positive extent");
}

// Leaves elements default-initialized (i.e. uninitialized for double) when a
// container value-constructs them without an explicit value.  Buffers that
// are fully overwritten right after allocation skip a redundant zero-fill
// pass, which matters at the multi-megabyte sizes activations reach.
template <class T>
struct default_init_allocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = default_init_allocator<U>;
  };
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

using Buffer = std::vector<double, default_init_allocator<double>>;

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until first touched
  bool requires_grad = false;
  bool node_output = false;  // produced by a recorded op (non-leaf)
  bool retain_grad = false;  // keep grad after backward even if non-leaf
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    detail::check_shape_valid(shape);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  // Allocates without zero-filling.  Only for buffers whose every element is
  // written before being read, e.g. op outputs produced by a full overwrite.
  static Tensor uninitialized(Shape shape) {
    detail::check_shape_valid(shape);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.resize(static_cast<size_t>(shape_numel(shape)));
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = value;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false) {
    detail::check_shape_valid(shape);
    detail::check(shape_numel(shape) == static_cast<int64_t>(values.size()),
                  "from_data: shape " + shape_str(shape) + " wants " +
                      std::to_string(shape_numel(shape)) + " values, got " +
                      std::to_string(values.size()));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(values.begin(), values.end());
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t dim(size_t i) const { return impl_->shape.at(i); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  bool same_shape(const Tensor& other) const { return impl_->shape == other.impl_->shape; }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }

  // Value of a single-element tensor.
  double item() const {
    detail::check(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }

  // Gradient buffer, allocated (zero-filled) on first access.
  std::span<double> grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }

  // Gradient buffer for a backward pass that writes every element: when the
  // buffer is fresh (second == true) it is uninitialized and must be fully
  // overwritten; otherwise contributions must be accumulated into it.  This
  // skips the zero-fill that grad() would pay only to be added onto.
  std::pair<std::span<double>, bool> grad_sink() {
    const bool fresh = impl_->grad.empty();
    if (fresh) impl_->grad.resize(impl_->data.size());
    return {std::span<double>(impl_->grad), fresh};
  }

  std::span<const double> grad() const {
    detail::check(has_grad(), "grad() read before any backward reached this tensor");
    return impl_->grad;
  }

  void zero_grad() {
    if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  // Frees the gradient buffer (memory is returned, unlike zero_grad).
  void release_grad() { detail::Buffer().swap(impl_->grad); }

  // Non-leaf tensors have their gradient buffers released during backward
  // unless this is set.
  void retain_grad() { impl_->retain_grad = true; }

  // Branch-free scan (v - v is NaN exactly for NaN/Inf inputs) so the loop
  // vectorizes; an early-exit isfinite() loop would run scalar.
  bool all_finite() const {
    const double* p = impl_->data.data();
    const size_t n = impl_->data.size();
    int64_t bad = 0;
    for (size_t i = 0; i < n; ++i) bad += (p[i] - p[i] != 0.0);
    return bad == 0;
  }

  // Stable identity of the underlying buffer, for graph bookkeeping.
  const void* id() const { return impl_.get(); }

 private:
  friend class Graph;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op, const char* arg) {
  check(t.all_finite(), std::string(op) + ": non-finite values in " + arg);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check(a.same_shape(b), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

}  // namespace detail

}  // namespace mcam

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "turbo/errors.hpp"
#include "turbo/rng.hpp"

namespace turbo {

// Dense fp32 tensor, row-major. Value-semantic handle: copies share the same
// data and grad storage. Values are immutable after an op completes except
// through the grad slot; training code mutates parameter data directly
// between steps.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<float>> data;
  std::shared_ptr<std::vector<float>> grad;  // allocated iff requires_grad
  bool requires_grad = false;

  Tensor() = default;

  static std::size_t numel_of(const std::vector<int>& shape);

  static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false);
  static Tensor full(const std::vector<int>& shape, float value, bool requires_grad = false);
  static Tensor from(const std::vector<int>& shape, const std::vector<float>& values,
                     bool requires_grad = false);
  static Tensor randn(const std::vector<int>& shape, Rng& rng, float std_dev,
                      bool requires_grad = false);

  std::size_t numel() const { return data ? data->size() : 0; }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  float* ptr() { return data->data(); }
  const float* ptr() const { return data->data(); }
  // handles share storage; a const handle still exposes the mutable grad slot
  float* grad_ptr() const { return grad ? grad->data() : nullptr; }

  float scalar() const;

  // New handle over the same storage with a different shape (numel preserved).
  Tensor reshaped(const std::vector<int>& new_shape) const;

  void ensure_grad();
  void zero_grad();

  std::string shape_str() const;
};

// Record of one differentiable op. Nodes are appended in execution order, so
// the tape is topologically sorted by construction.
struct Tape {
  struct Node {
    const char* op;
    std::function<void()> backward;
  };

  std::vector<Node> nodes;

  // Runs every node's backward rule exactly once, in reverse order, then
  // consumes the tape.
  void backward();

  std::size_t size() const { return nodes.size(); }
};

// RAII activation of a tape on the current thread. Ops record onto the
// active tape; with no active tape they run inference-only.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

Tape* active_tape();

// Throws NumericError if the tensor holds NaN or Inf. Every op calls this on
// its output before returning.
void ensure_finite(const Tensor& t, const char* op);

}  // namespace turbo

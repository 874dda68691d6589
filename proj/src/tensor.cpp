#include "turbo/tensor.hpp"

#include <sstream>

#include "turbo/kernels.hpp"

namespace turbo {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t Tensor::numel_of(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor Tensor::zeros(const std::vector<int>& shape, bool requires_grad) {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<float>>(numel_of(shape), 0.0f);
  t.requires_grad = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::full(const std::vector<int>& shape, float value, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  for (float& v : *t.data) v = value;
  return t;
}

Tensor Tensor::from(const std::vector<int>& shape, const std::vector<float>& values,
                    bool requires_grad) {
  if (numel_of(shape) != values.size())
    throw DimensionError("Tensor::from: value count does not match shape");
  Tensor t = zeros(shape, requires_grad);
  *t.data = values;
  return t;
}

Tensor Tensor::randn(const std::vector<int>& shape, Rng& rng, float std_dev,
                     bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  for (float& v : *t.data) v = static_cast<float>(rng.normal()) * std_dev;
  return t;
}

float Tensor::scalar() const {
  if (numel() != 1) throw DimensionError("scalar() on tensor with numel " + std::to_string(numel()));
  return (*data)[0];
}

Tensor Tensor::reshaped(const std::vector<int>& new_shape) const {
  if (numel_of(new_shape) != numel())
    throw DimensionError("reshape from " + shape_str() + ": element count mismatch");
  Tensor t = *this;
  t.shape = new_shape;
  return t;
}

void Tensor::ensure_grad() {
  if (!grad) grad = std::make_shared<std::vector<float>>(numel(), 0.0f);
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0f);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void Tape::backward() {
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) it->backward();
  nodes.clear();  // each node runs exactly once per recording
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

Tape* active_tape() { return g_active_tape; }

void ensure_finite(const Tensor& t, const char* op) {
  if (kernels::has_nonfinite(t.ptr(), t.numel()))
    throw NumericError(std::string(op) + ": produced non-finite values");
}

}  // namespace turbo

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "dfca/tensor.hpp"

namespace dfca {

/// Collects input gradients produced by one node's backward function.
class GradSink {
 public:
  explicit GradSink(const std::vector<std::shared_ptr<TensorImpl>>& inputs);

  std::size_t size() const { return wants_.size(); }
  bool wants(std::size_t i) const { return wants_[i]; }
  /// Zero-initialized on first access.
  Buffer& grad(std::size_t i);
  std::optional<Buffer>& slot(std::size_t i) { return grads_[i]; }

 private:
  const std::vector<std::shared_ptr<TensorImpl>>& inputs_;
  std::vector<bool> wants_;
  std::vector<std::optional<Buffer>> grads_;
};

using BackwardFn = std::function<void(const Buffer& grad_out, GradSink& sink)>;

/// One recorded operation. Sequence numbers are assigned at execution, so
/// descending sequence order is a valid reverse topological order.
struct Node {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  bool consumed = false;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Wraps a forward result and, when any input requires grad and recording is
/// on, attaches a node that routes upstream gradients through fn.
Tensor record(Shape shape, Buffer data, const char* op, std::vector<Tensor> inputs, BackwardFn fn);

struct BackwardStats {
  std::size_t nodes_visited = 0;
};

/// Reverse pass from a scalar. Accumulates into every reachable leaf that
/// requires grad and consumes the recorded graph.
BackwardStats backward(const Tensor& loss);

}  // namespace dfca

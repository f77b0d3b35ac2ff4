#include "dfca/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace dfca {

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_seq{1};

#ifndef NDEBUG
void check_finite(const Buffer& b, const char* op) {
  dispatch(b.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (T v : b.as<T>())
      if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value produced by ") + op);
  });
}
#endif
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

GradSink::GradSink(const std::vector<std::shared_ptr<TensorImpl>>& inputs)
    : inputs_(inputs), wants_(inputs.size()), grads_(inputs.size()) {
  for (std::size_t i = 0; i < inputs.size(); ++i) wants_[i] = inputs[i]->requires_grad;
}

Buffer& GradSink::grad(std::size_t i) {
  if (!grads_[i]) grads_[i] = Buffer(inputs_[i]->data.dtype(), inputs_[i]->data.size());
  return *grads_[i];
}

Tensor record(Shape shape, Buffer data, const char* op, std::vector<Tensor> inputs, BackwardFn fn) {
#ifndef NDEBUG
  bool inputs_finite = true;
  for (const auto& in : inputs) {
    dispatch(in.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (T v : in.data<T>())
        if (!std::isfinite(v)) inputs_finite = false;
    });
  }
  if (inputs_finite) check_finite(data, op);
#endif
  Tensor out = Tensor::from_buffer(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;

  auto node = std::make_shared<Node>();
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (const auto& in : inputs) node->inputs.push_back(in.impl_ptr());
  node->backward = std::move(fn);
  out.impl().requires_grad = true;
  out.impl().grad_fn = std::move(node);
  return out;
}

BackwardStats backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw std::invalid_argument("backward(): loss does not depend on any parameter");

  BackwardStats stats;
  Buffer seed(loss.dtype(), 1);
  seed.set(0, 1.0);

  const auto& root = loss.impl().grad_fn;
  if (!root) {
    // Leaf scalar: d loss / d loss = 1.
    auto& g = loss.impl().grad;
    if (!g) g = Buffer(loss.dtype(), 1);
    g->add_inplace(seed);
    return stats;
  }

  // Collect the reachable subgraph.
  // Owning references: clearing a node's inputs may drop the last other owner of its predecessors.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::shared_ptr<Node>> stack{root};
  while (!stack.empty()) {
    std::shared_ptr<Node> n = stack.back();
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    if (n->consumed)
      throw std::logic_error(std::string("backward(): graph through '") + n->op +
                             "' was already consumed; re-run the forward pass");
    order.push_back(n);
    for (const auto& in : n->inputs)
      if (in->grad_fn) stack.push_back(in->grad_fn);
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

  std::unordered_map<Node*, Buffer> pending;
  pending.emplace(root.get(), std::move(seed));
  for (const auto& n : order) {
    auto it = pending.find(n.get());
    if (it != pending.end()) {
      GradSink sink(n->inputs);
      n->backward(it->second, sink);
      pending.erase(it);
      for (std::size_t i = 0; i < n->inputs.size(); ++i) {
        auto& g = sink.slot(i);
        if (!g || !sink.wants(i)) continue;
        TensorImpl& in = *n->inputs[i];
        if (in.grad_fn) {
          auto [pos, fresh] = pending.try_emplace(in.grad_fn.get(), std::move(*g));
          if (!fresh) pos->second.add_inplace(*g);
        } else {
          if (!in.grad)
            in.grad = std::move(*g);
          else
            in.grad->add_inplace(*g);
        }
      }
    }
    n->consumed = true;
    n->backward = nullptr;
    n->inputs.clear();
    ++stats.nodes_visited;
  }
  return stats;
}

}  // namespace dfca

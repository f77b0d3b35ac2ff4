#include "dfca/tensor.hpp"

#include <sstream>

#include "dfca/autograd.hpp"

namespace dfca {

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

Buffer::Buffer(DType dt, std::size_t n) {
  if (dt == DType::f32)
    data_ = std::vector<float>(n, 0.0f);
  else
    data_ = std::vector<double>(n, 0.0);
}

std::size_t Buffer::size() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

double Buffer::get(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, data_);
}

void Buffer::set(std::size_t i, double x) {
  std::visit([i, x](auto& v) { v.at(i) = static_cast<typename std::decay_t<decltype(v)>::value_type>(x); },
             data_);
}

void Buffer::add_inplace(const Buffer& other) {
  if (other.dtype() != dtype() || other.size() != size())
    throw std::logic_error("gradient accumulation: buffer mismatch");
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto dst = as<T>();
    auto src = other.as<T>();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  });
}

static void check_shape(const Shape& shape) {
  for (auto e : shape)
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
}

Tensor Tensor::zeros(Shape shape, DType dt) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data = Buffer(dt, static_cast<std::size_t>(shape_numel(shape)));
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(value);
  });
  return t;
}

Tensor Tensor::from(Shape shape, const std::vector<double>& values, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  if (static_cast<std::int64_t>(values.size()) != t.numel())
    throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                                shape_str(t.shape()));
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.mutable_data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_buffer(Shape shape, Buffer data) {
  check_shape(shape);
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
    throw std::invalid_argument("buffer size does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::out_of_range("axis out of range for shape " + shape_str(shape()));
  return shape()[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = at(i);
  return out;
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf() && !on) throw std::logic_error("cannot clear requires_grad on a non-leaf tensor");
  impl().requires_grad = on;
  return *this;
}

Tensor Tensor::grad() const {
  if (impl().grad) return from_buffer(shape(), *impl().grad);
  return zeros(shape(), dtype());
}

Tensor Tensor::detach() const { return from_buffer(shape(), impl().data); }

Tensor Tensor::to(DType dt) const {
  if (dt == dtype()) return detach();
  Tensor out = zeros(shape(), dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto d = out.mutable_data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(at(i));
  });
  return out;
}

}  // namespace dfca

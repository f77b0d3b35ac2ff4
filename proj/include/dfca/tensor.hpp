#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace dfca {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(DType dt);

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

/// Calls f with a value-initialized float or double matching dt.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::f32) return f(float{});
  return f(double{});
}

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Flat typed storage. Exactly one alternative is live; its element type is the dtype.
class Buffer {
 public:
  Buffer() = default;
  Buffer(DType dt, std::size_t n);

  DType dtype() const { return data_.index() == 0 ? DType::f32 : DType::f64; }
  std::size_t size() const;

  template <class T>
  std::span<T> as() {
    auto* v = std::get_if<std::vector<T>>(&data_);
    if (!v) throw std::logic_error(std::string("buffer holds ") + dtype_name(dtype()));
    return {v->data(), v->size()};
  }
  template <class T>
  std::span<const T> as() const {
    auto* v = std::get_if<std::vector<T>>(&data_);
    if (!v) throw std::logic_error(std::string("buffer holds ") + dtype_name(dtype()));
    return {v->data(), v->size()};
  }

  double get(std::size_t i) const;
  void set(std::size_t i, double v);
  void add_inplace(const Buffer& other);

 private:
  std::variant<std::vector<float>, std::vector<double>> data_;
};

struct Node;

struct TensorImpl {
  Shape shape;
  Buffer data;
  bool requires_grad = false;
  std::optional<Buffer> grad;
  std::shared_ptr<Node> grad_fn;
};

/// Shared handle to a dense row-major tensor. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, DType dt = DType::f32);
  static Tensor full(Shape shape, double value, DType dt = DType::f32);
  static Tensor from(Shape shape, const std::vector<double>& values, DType dt = DType::f32);
  static Tensor scalar(double value, DType dt = DType::f32) { return from({}, {value}, dt); }
  static Tensor from_buffer(Shape shape, Buffer data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  int rank() const { return static_cast<int>(impl().shape.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl().data.size()); }
  DType dtype() const { return impl().data.dtype(); }

  template <class T>
  std::span<const T> data() const { return impl().data.as<T>(); }
  /// Writes bypass autograd; only for leaves (parameter updates, initialization).
  template <class T>
  std::span<T> mutable_data() { return impl().data.as<T>(); }

  const Buffer& buffer() const { return impl().data; }
  Buffer& mutable_buffer() { return impl().data; }

  double item() const;
  double at(std::size_t flat) const { return impl().data.get(flat); }
  std::vector<double> to_vector() const;

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return impl().grad.has_value(); }
  /// Accumulated gradient as a fresh tensor without history; zeros when none was accumulated.
  Tensor grad() const;
  void zero_grad() { impl().grad.reset(); }
  bool is_leaf() const { return impl().grad_fn == nullptr; }

  Tensor detach() const;
  Tensor clone() const { return detach(); }
  Tensor to(DType dt) const;

  TensorImpl& impl() const {
    if (!impl_) throw std::logic_error("use of undefined tensor");
    return *impl_;
  }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

}  // namespace dfca

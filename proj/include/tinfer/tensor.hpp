#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "tinfer/error.hpp"

namespace tinfer {

using Half = Eigen::half;

enum class DType : std::uint8_t { F32 = 0, F16 = 1 };

template <typename Scalar>
inline constexpr DType dtype_of = std::is_same_v<Scalar, Half> ? DType::F16 : DType::F32;

std::size_t dtype_size(DType dtype);
std::string_view to_string(DType dtype);
DType parse_dtype(std::string_view name);

inline constexpr float kHalfMax = 65504.0f;

/// Round-to-nearest-even conversion that saturates out-of-range values
/// (including infinities) to +/-65504. NaN stays NaN. Subnormals are kept.
inline Half to_half(float x) {
  if (x > kHalfMax) x = kHalfMax;
  if (x < -kHalfMax) x = -kHalfMax;
  return Half(x);
}

inline float to_float(float x) { return x; }
inline float to_float(Half x) { return static_cast<float>(x); }

template <typename Scalar>
inline Scalar from_float(float x) {
  if constexpr (std::is_same_v<Scalar, Half>) {
    return to_half(x);
  } else {
    return x;
  }
}

/// Dense row-major tensor. Storage is either 32-bit floats or Eigen::half;
/// every element of an F16 tensor is a representable 16-bit value by
/// construction.
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor() = default;
  Tensor(Shape shape, DType dtype);

  /// Builds a tensor from 32-bit values, rounding to `dtype`.
  static Tensor from_f32(Shape shape, std::span<const float> values, DType dtype = DType::F32);
  static Tensor from_f32(Shape shape, std::initializer_list<float> values, DType dtype = DType::F32) {
    return from_f32(std::move(shape), std::span<const float>(values.begin(), values.size()), dtype);
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept;
  DType dtype() const noexcept { return dtype_; }
  std::size_t byte_size() const noexcept { return size() * dtype_size(dtype_); }
  bool empty() const noexcept { return shape_.empty(); }

  template <typename Scalar>
  std::span<const Scalar> data() const {
    check_scalar<Scalar>();
    const auto& v = std::get<std::vector<Scalar>>(data_);
    return {v.data(), v.size()};
  }

  template <typename Scalar>
  std::span<Scalar> mutable_data() {
    check_scalar<Scalar>();
    auto& v = std::get<std::vector<Scalar>>(data_);
    return {v.data(), v.size()};
  }

  std::span<const std::byte> bytes() const;
  std::span<std::byte> mutable_bytes();

  float at(std::size_t flat_index) const;
  std::vector<float> to_f32() const;

  /// Bit-exact equality: shape, dtype and raw bytes.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  template <typename Scalar>
  void check_scalar() const {
    if (dtype_of<Scalar> != dtype_) throw Error(ErrorKind::Precision, "tensor dtype does not match requested scalar");
  }

  Shape shape_;
  DType dtype_ = DType::F32;
  std::variant<std::vector<float>, std::vector<Half>> data_;
};

enum class Activation : std::uint8_t { None = 0, Gelu = 1 };

/// tanh-approximated GELU, evaluated in float.
inline float gelu(float x) {
  constexpr float kAlpha = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(kAlpha * (x + 0.044715f * x * x * x)));
}

namespace kernels {

inline float madd(float a, float b, float acc) {
#if defined(__FMA__)
  return std::fma(a, b, acc);
#else
  return a * b + acc;
#endif
}

void widen(std::span<const Half> src, std::span<float> dst);
void narrow(std::span<const float> src, std::span<Half> dst);

/// Optional post-accumulation terms: out = residual + act(acc + bias).
template <typename Scalar>
struct Epilogue {
  std::span<const Scalar> bias{};      // length n, or empty
  Activation act = Activation::None;
  std::span<const Scalar> residual{};  // m x n, or empty
};

/// out[m x n] = epilogue(a[m x k] * b[k x n]). Every output element sums its
/// k products in ascending k order starting from 0, in float, regardless of
/// m, n or blocking; identical inputs therefore give identical bits whether a
/// row is computed alone or inside a larger batch.
template <typename Scalar>
void gemm(std::span<const Scalar> a, std::span<const Scalar> b, std::size_t m, std::size_t k, std::size_t n,
          std::span<Scalar> out, const Epilogue<Scalar>& epilogue = {});

template <typename Scalar>
float dot(const Scalar* a, const Scalar* b, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc = madd(to_float(a[i]), to_float(b[i]), acc);
  return acc;
}

/// In-place max-subtracted softmax over one row of floats.
void softmax(std::span<float> row);

template <typename Scalar>
void layer_norm_rows(std::span<const Scalar> x, std::size_t rows, std::size_t n, std::span<const Scalar> gamma,
                     std::span<const Scalar> beta, float eps, std::span<Scalar> out);

}  // namespace kernels

Tensor gemm(const Tensor& a, const Tensor& b, DType out_dtype);
Tensor gemm(const Tensor& a, const Tensor& b, const Tensor& bias, DType out_dtype);
/// gemm + bias + activation evaluated in one pass (the fused kernel).
Tensor gemm_bias_act(const Tensor& a, const Tensor& b, const Tensor& bias, Activation act, DType out_dtype);

Tensor cast(const Tensor& t, DType target);
Tensor softmax_rows(const Tensor& t);
Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, float eps);
Tensor gelu(const Tensor& t);
Tensor transpose(const Tensor& t);

/// Elementwise ops. Each operand is either the full output shape or a rank-1
/// tensor matching the last extent, which is broadcast across rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// (x + b) * m in one pass.
Tensor affine(const Tensor& x, const Tensor& b, const Tensor& m);
/// Left-to-right sum of all operands.
Tensor add_n(std::span<const Tensor> operands);

float max_abs_diff(const Tensor& a, const Tensor& b);
double cosine_similarity(std::span<const float> a, std::span<const float> b);

}  // namespace tinfer

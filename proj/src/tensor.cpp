#include "tinfer/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <functional>
#include <numeric>
#include <string>

#if defined(__F16C__)
#include <immintrin.h>
#endif

namespace tinfer {

std::size_t dtype_size(DType dtype) { return dtype == DType::F16 ? 2 : 4; }

std::string_view to_string(DType dtype) { return dtype == DType::F16 ? "F16" : "F32"; }

DType parse_dtype(std::string_view name) {
  if (name == "F32") return DType::F32;
  if (name == "F16") return DType::F16;
  throw Error(ErrorKind::Parameter, "unknown dtype '" + std::string(name) + "'");
}

namespace {

std::size_t shape_product(const Tensor::Shape& shape) {
  if (shape.empty()) throw Error(ErrorKind::Dimension, "tensor shape must be non-empty");
  std::size_t n = 1;
  for (auto extent : shape) {
    if (extent == 0) throw Error(ErrorKind::Dimension, "tensor extents must be >= 1");
    n *= extent;
  }
  return n;
}

std::string shape_str(const Tensor::Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  const auto n = shape_product(shape_);
  if (dtype_ == DType::F16) {
    data_ = std::vector<Half>(n, Half(0.0f));
  } else {
    data_ = std::vector<float>(n, 0.0f);
  }
}

Tensor Tensor::from_f32(Shape shape, std::span<const float> values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (values.size() != t.size()) {
    throw Error(ErrorKind::Dimension, "value count " + std::to_string(values.size()) + " does not match shape " +
                                          shape_str(t.shape()));
  }
  if (dtype == DType::F16) {
    kernels::narrow(values, t.mutable_data<Half>());
  } else {
    std::copy(values.begin(), values.end(), t.mutable_data<float>().begin());
  }
  return t;
}

std::size_t Tensor::size() const noexcept {
  if (shape_.empty()) return 0;
  return std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
}

std::span<const std::byte> Tensor::bytes() const {
  return std::visit([](const auto& v) { return std::as_bytes(std::span(v)); }, data_);
}

std::span<std::byte> Tensor::mutable_bytes() {
  return std::visit([](auto& v) { return std::as_writable_bytes(std::span(v)); }, data_);
}

float Tensor::at(std::size_t flat_index) const {
  if (flat_index >= size()) throw Error(ErrorKind::Dimension, "flat index out of range");
  return dtype_ == DType::F16 ? to_float(std::get<std::vector<Half>>(data_)[flat_index])
                              : std::get<std::vector<float>>(data_)[flat_index];
}

std::vector<float> Tensor::to_f32() const {
  std::vector<float> out(size());
  if (dtype_ == DType::F16) {
    kernels::widen(data<Half>(), out);
  } else {
    auto src = data<float>();
    std::copy(src.begin(), src.end(), out.begin());
  }
  return out;
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_ || a.dtype_ != b.dtype_) return false;
  auto x = a.bytes();
  auto y = b.bytes();
  return x.size() == y.size() && (x.empty() || std::memcmp(x.data(), y.data(), x.size()) == 0);
}

// ---------------------------------------------------------------------------
// kernels

namespace kernels {

void widen(std::span<const Half> src, std::span<float> dst) {
  const std::size_t n = std::min(src.size(), dst.size());
  std::size_t i = 0;
#if defined(__F16C__)
  const auto* raw = reinterpret_cast<const std::uint16_t*>(src.data());
  for (; i + 8 <= n; i += 8) {
    __m128i h = _mm_loadu_si128(reinterpret_cast<const __m128i*>(raw + i));
    _mm256_storeu_ps(dst.data() + i, _mm256_cvtph_ps(h));
  }
#endif
  for (; i < n; ++i) dst[i] = static_cast<float>(src[i]);
}

void narrow(std::span<const float> src, std::span<Half> dst) {
  const std::size_t n = std::min(src.size(), dst.size());
  for (std::size_t i = 0; i < n; ++i) dst[i] = to_half(src[i]);
}

namespace {

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColBlock = 16;

inline void widen16(const Half* src, float* dst) {
#if defined(__F16C__)
  const auto* raw = reinterpret_cast<const __m128i*>(src);
  _mm256_storeu_ps(dst, _mm256_cvtph_ps(_mm_loadu_si128(raw)));
  _mm256_storeu_ps(dst + 8, _mm256_cvtph_ps(_mm_loadu_si128(raw + 1)));
#else
  for (std::size_t j = 0; j < 16; ++j) dst[j] = static_cast<float>(src[j]);
#endif
}

thread_local std::vector<float> tl_a_buffer;
thread_local std::vector<float> tl_panel;

template <std::size_t Rows>
void micro_kernel(const float* a, std::size_t lda, const float* panel, std::size_t ldp, std::size_t k,
                  float (&acc)[kRowBlock][kColBlock]) {
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] = 0.0f;
  for (std::size_t p = 0; p < k; ++p) {
    const float* bp = panel + p * ldp;
#pragma GCC unroll 4
    for (std::size_t r = 0; r < Rows; ++r) {
      const float av = a[r * lda + p];
#pragma GCC unroll 16
      for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] = madd(av, bp[j], acc[r][j]);
    }
  }
}

// Reads F16 weights straight from b, converting one 16-wide row segment per
// step; used when there are too few rows to amortize packing.
template <std::size_t Rows>
void micro_kernel_half(const float* a, std::size_t lda, const Half* b, std::size_t ldb, std::size_t k,
                       float (&acc)[kRowBlock][kColBlock]) {
#if defined(__F16C__) && defined(__AVX__)
  __m256 lo[Rows], hi[Rows];
  for (std::size_t r = 0; r < Rows; ++r) lo[r] = hi[r] = _mm256_setzero_ps();
  for (std::size_t p = 0; p < k; ++p) {
    const auto* raw = reinterpret_cast<const __m128i*>(b + p * ldb);
    const __m256 b0 = _mm256_cvtph_ps(_mm_loadu_si128(raw));
    const __m256 b1 = _mm256_cvtph_ps(_mm_loadu_si128(raw + 1));
    for (std::size_t r = 0; r < Rows; ++r) {
      const __m256 av = _mm256_set1_ps(a[r * lda + p]);
#if defined(__FMA__)
      lo[r] = _mm256_fmadd_ps(av, b0, lo[r]);
      hi[r] = _mm256_fmadd_ps(av, b1, hi[r]);
#else
      lo[r] = _mm256_add_ps(_mm256_mul_ps(av, b0), lo[r]);
      hi[r] = _mm256_add_ps(_mm256_mul_ps(av, b1), hi[r]);
#endif
    }
  }
  for (std::size_t r = 0; r < Rows; ++r) {
    _mm256_storeu_ps(acc[r], lo[r]);
    _mm256_storeu_ps(acc[r] + 8, hi[r]);
  }
#else
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] = 0.0f;
  for (std::size_t p = 0; p < k; ++p) {
    const Half* bp = b + p * ldb;
    for (std::size_t r = 0; r < Rows; ++r) {
      const float av = a[r * lda + p];
      for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] = madd(av, static_cast<float>(bp[j]), acc[r][j]);
    }
  }
#endif
}

template <typename Scalar>
void store_block(const float (&acc)[kRowBlock][kColBlock], std::size_t rows, std::size_t cols, std::size_t i0,
                 std::size_t j0, std::size_t n, const Epilogue<Scalar>& ep, Scalar* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t row = i0 + r;
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t col = j0 + j;
      float v = acc[r][j];
      if (!ep.bias.empty()) v = v + to_float(ep.bias[col]);
      if (ep.act == Activation::Gelu) v = gelu(v);
      if (!ep.residual.empty()) v = to_float(ep.residual[row * n + col]) + v;
      out[row * n + col] = from_float<Scalar>(v);
    }
  }
}

}  // namespace

template <typename Scalar>
void gemm(std::span<const Scalar> a, std::span<const Scalar> b, std::size_t m, std::size_t k, std::size_t n,
          std::span<Scalar> out, const Epilogue<Scalar>& ep) {
  if (a.size() < m * k || b.size() < k * n || out.size() < m * n) {
    throw Error(ErrorKind::Dimension, "gemm operand spans too small");
  }
  if (!ep.bias.empty() && ep.bias.size() != n) throw Error(ErrorKind::Dimension, "gemm bias length mismatch");
  if (!ep.residual.empty() && ep.residual.size() != m * n) {
    throw Error(ErrorKind::Dimension, "gemm residual shape mismatch");
  }

  const float* a_f32 = nullptr;
  if constexpr (std::is_same_v<Scalar, float>) {
    a_f32 = a.data();
  } else {
    tl_a_buffer.resize(m * k);
    widen(a.first(m * k), tl_a_buffer);
    a_f32 = tl_a_buffer.data();
  }

  float acc[kRowBlock][kColBlock];
  tl_panel.resize(k * kColBlock);

  for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
    const std::size_t cols = std::min(kColBlock, n - j0);
    if constexpr (std::is_same_v<Scalar, Half>) {
      if (m < kRowBlock && cols == kColBlock) {
        const Half* bcol = b.data() + j0;
        switch (m) {
          case 3: micro_kernel_half<3>(a_f32, k, bcol, n, k, acc); break;
          case 2: micro_kernel_half<2>(a_f32, k, bcol, n, k, acc); break;
          default: micro_kernel_half<1>(a_f32, k, bcol, n, k, acc); break;
        }
        store_block(acc, m, cols, 0, j0, n, ep, out.data());
        continue;
      }
    }
    const float* panel = nullptr;
    std::size_t ldp = kColBlock;
    if constexpr (std::is_same_v<Scalar, float>) {
      if (cols == kColBlock) {
        panel = b.data() + j0;
        ldp = n;
      }
    }
    if (panel == nullptr) {
      float* dst = tl_panel.data();
      for (std::size_t p = 0; p < k; ++p) {
        const Scalar* src = b.data() + p * n + j0;
        float* row = dst + p * kColBlock;
        if constexpr (std::is_same_v<Scalar, Half>) {
          if (cols == kColBlock) {
            widen16(src, row);
            continue;
          }
        }
        for (std::size_t j = 0; j < cols; ++j) row[j] = to_float(src[j]);
        for (std::size_t j = cols; j < kColBlock; ++j) row[j] = 0.0f;
      }
      panel = dst;
    }

    std::size_t i0 = 0;
    for (; i0 + kRowBlock <= m; i0 += kRowBlock) {
      micro_kernel<kRowBlock>(a_f32 + i0 * k, k, panel, ldp, k, acc);
      store_block(acc, kRowBlock, cols, i0, j0, n, ep, out.data());
    }
    const std::size_t rest = m - i0;
    const float* a_rest = a_f32 + i0 * k;
    switch (rest) {
      case 3: micro_kernel<3>(a_rest, k, panel, ldp, k, acc); break;
      case 2: micro_kernel<2>(a_rest, k, panel, ldp, k, acc); break;
      case 1: micro_kernel<1>(a_rest, k, panel, ldp, k, acc); break;
      default: break;
    }
    if (rest) store_block(acc, rest, cols, i0, j0, n, ep, out.data());
  }
}

template void gemm<float>(std::span<const float>, std::span<const float>, std::size_t, std::size_t, std::size_t,
                          std::span<float>, const Epilogue<float>&);
template void gemm<Half>(std::span<const Half>, std::span<const Half>, std::size_t, std::size_t, std::size_t,
                         std::span<Half>, const Epilogue<Half>&);

void softmax(std::span<float> row) {
  if (row.empty()) return;
  float max = row[0];
  for (float v : row) max = std::max(max, v);
  float sum = 0.0f;
  for (float& v : row) {
    v = std::exp(v - max);
    sum += v;
  }
  const float inv = 1.0f / sum;
  for (float& v : row) v *= inv;
}

template <typename Scalar>
void layer_norm_rows(std::span<const Scalar> x, std::size_t rows, std::size_t n, std::span<const Scalar> gamma,
                     std::span<const Scalar> beta, float eps, std::span<Scalar> out) {
  const float inv_n = 1.0f / static_cast<float>(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* row = x.data() + r * n;
    float mean = 0.0f;
    for (std::size_t j = 0; j < n; ++j) mean += to_float(row[j]);
    mean *= inv_n;
    float var = 0.0f;
    for (std::size_t j = 0; j < n; ++j) {
      const float d = to_float(row[j]) - mean;
      var = madd(d, d, var);
    }
    var *= inv_n;
    const float inv_std = 1.0f / std::sqrt(var + eps);
    Scalar* dst = out.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) {
      const float normed = (to_float(row[j]) - mean) * inv_std;
      dst[j] = from_float<Scalar>(normed * to_float(gamma[j]) + to_float(beta[j]));
    }
  }
}

template void layer_norm_rows<float>(std::span<const float>, std::size_t, std::size_t, std::span<const float>,
                                     std::span<const float>, float, std::span<float>);
template void layer_norm_rows<Half>(std::span<const Half>, std::size_t, std::size_t, std::span<const Half>,
                                    std::span<const Half>, float, std::span<Half>);

}  // namespace kernels

// ---------------------------------------------------------------------------
// Tensor-level operations

namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw Error(ErrorKind::Dimension, std::string(what) + " must be 2-D");
}

void require_same_dtype(const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype()) throw Error(ErrorKind::Precision, "operands mix F16 and F32");
}

template <typename Scalar>
Tensor gemm_impl(const Tensor& a, const Tensor& b, const Tensor* bias, Activation act, DType out_dtype) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (out_dtype == a.dtype()) {
    Tensor out({m, n}, out_dtype);
    kernels::Epilogue<Scalar> ep;
    if (bias) ep.bias = bias->data<Scalar>();
    ep.act = act;
    kernels::gemm<Scalar>(a.data<Scalar>(), b.data<Scalar>(), m, k, n, out.mutable_data<Scalar>(), ep);
    return out;
  }
  // Different output precision: accumulate at full float precision, round once.
  Tensor af = cast(a, DType::F32), bf = cast(b, DType::F32);
  Tensor out({m, n}, DType::F32);
  Tensor bias_f;
  kernels::Epilogue<float> ep;
  if (bias) {
    bias_f = cast(*bias, DType::F32);
    ep.bias = bias_f.data<float>();
  }
  ep.act = act;
  kernels::gemm<float>(af.data<float>(), bf.data<float>(), m, k, n, out.mutable_data<float>(), ep);
  return cast(out, out_dtype);
}

Tensor gemm_checked(const Tensor& a, const Tensor& b, const Tensor* bias, Activation act, DType out_dtype) {
  require_matrix(a, "gemm lhs");
  require_matrix(b, "gemm rhs");
  if (a.dim(1) != b.dim(0)) {
    throw Error(ErrorKind::Dimension, "gemm inner dimensions disagree: " + std::to_string(a.dim(1)) + " vs " +
                                          std::to_string(b.dim(0)));
  }
  require_same_dtype(a, b);
  if (bias) {
    require_same_dtype(a, *bias);
    if (bias->size() != b.dim(1)) throw Error(ErrorKind::Dimension, "gemm bias length must equal N");
  }
  return a.dtype() == DType::F16 ? gemm_impl<Half>(a, b, bias, act, out_dtype)
                                 : gemm_impl<float>(a, b, bias, act, out_dtype);
}

Tensor::Shape elementwise_shape(std::span<const Tensor* const> operands) {
  const Tensor* full = nullptr;
  for (const Tensor* t : operands) {
    if (!full || t->size() > full->size()) full = t;
  }
  const std::size_t last = full->shape().back();
  for (const Tensor* t : operands) {
    require_same_dtype(*full, *t);
    const bool same = t->shape() == full->shape();
    const bool row = t->rank() == 1 && t->size() == last;
    if (!same && !row) throw Error(ErrorKind::Dimension, "elementwise operand is neither full-shape nor a row vector");
  }
  return full->shape();
}

template <typename Fn>
Tensor elementwise(std::span<const Tensor* const> operands, Fn&& fn) {
  auto shape = elementwise_shape(operands);
  const DType dtype = operands.front()->dtype();
  Tensor out(shape, dtype);
  const std::size_t total = out.size();
  const std::size_t last = shape.back();
  std::vector<std::vector<float>> values;
  values.reserve(operands.size());
  for (const Tensor* t : operands) values.push_back(t->to_f32());
  std::vector<float> result(total);
  std::vector<float> args(operands.size());
  for (std::size_t i = 0; i < total; ++i) {
    for (std::size_t o = 0; o < operands.size(); ++o) {
      const auto& v = values[o];
      args[o] = v.size() == total ? v[i] : v[i % last];
    }
    result[i] = fn(std::span<const float>(args));
  }
  return Tensor::from_f32(std::move(shape), result, dtype);
}

}  // namespace

Tensor gemm(const Tensor& a, const Tensor& b, DType out_dtype) {
  return gemm_checked(a, b, nullptr, Activation::None, out_dtype);
}

Tensor gemm(const Tensor& a, const Tensor& b, const Tensor& bias, DType out_dtype) {
  return gemm_checked(a, b, &bias, Activation::None, out_dtype);
}

Tensor gemm_bias_act(const Tensor& a, const Tensor& b, const Tensor& bias, Activation act, DType out_dtype) {
  return gemm_checked(a, b, &bias, act, out_dtype);
}

Tensor cast(const Tensor& t, DType target) {
  if (t.dtype() == target) return t;
  auto values = t.to_f32();
  return Tensor::from_f32(t.shape(), values, target);
}

Tensor softmax_rows(const Tensor& t) {
  require_matrix(t, "softmax input");
  auto values = t.to_f32();
  for (float v : values) {
    if (!std::isfinite(v)) throw Error(ErrorKind::Numeric, "softmax input contains a non-finite value");
  }
  const std::size_t cols = t.dim(1);
  for (std::size_t r = 0; r < t.dim(0); ++r) kernels::softmax(std::span<float>(values.data() + r * cols, cols));
  return Tensor::from_f32(t.shape(), values, t.dtype());
}

Tensor layer_norm(const Tensor& t, const Tensor& gamma, const Tensor& beta, float eps) {
  require_matrix(t, "layer_norm input");
  const std::size_t n = t.dim(1);
  if (gamma.size() != n || beta.size() != n) throw Error(ErrorKind::Dimension, "layer_norm gamma/beta length");
  require_same_dtype(t, gamma);
  require_same_dtype(t, beta);
  Tensor out(t.shape(), t.dtype());
  if (t.dtype() == DType::F16) {
    kernels::layer_norm_rows<Half>(t.data<Half>(), t.dim(0), n, gamma.data<Half>(), beta.data<Half>(), eps,
                                   out.mutable_data<Half>());
  } else {
    kernels::layer_norm_rows<float>(t.data<float>(), t.dim(0), n, gamma.data<float>(), beta.data<float>(), eps,
                                    out.mutable_data<float>());
  }
  return out;
}

Tensor gelu(const Tensor& t) {
  auto values = t.to_f32();
  for (float& v : values) v = gelu(v);
  return Tensor::from_f32(t.shape(), values, t.dtype());
}

Tensor transpose(const Tensor& t) {
  require_matrix(t, "transpose input");
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  auto values = t.to_f32();
  std::vector<float> out(values.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = values[r * cols + c];
  return Tensor::from_f32({cols, rows}, out, t.dtype());
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Tensor* ops[] = {&a, &b};
  return elementwise(ops, [](std::span<const float> v) { return v[0] + v[1]; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Tensor* ops[] = {&a, &b};
  return elementwise(ops, [](std::span<const float> v) { return v[0] * v[1]; });
}

Tensor affine(const Tensor& x, const Tensor& b, const Tensor& m) {
  const Tensor* ops[] = {&x, &b, &m};
  return elementwise(ops, [](std::span<const float> v) { return (v[0] + v[1]) * v[2]; });
}

Tensor add_n(std::span<const Tensor> operands) {
  if (operands.size() < 2) throw Error(ErrorKind::Parameter, "add_n needs at least two operands");
  std::vector<const Tensor*> ops;
  for (const auto& t : operands) ops.push_back(&t);
  return elementwise(std::span<const Tensor* const>(ops), [](std::span<const float> v) {
    float acc = v[0];
    for (std::size_t i = 1; i < v.size(); ++i) acc = acc + v[i];
    return acc;
  });
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw Error(ErrorKind::Dimension, "max_abs_diff shape mismatch");
  auto x = a.to_f32();
  auto y = b.to_f32();
  float worst = 0.0f;
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
  return worst;
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::Dimension, "cosine_similarity length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return na == nb ? 1.0 : 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace tinfer

#pragma once

// Straight-line transformer forward in double precision, written directly
// from the architecture definition (pre-norm blocks, causal multi-head
// attention, tanh-GELU feed-forward, untied head). It reads weights from a
// Model but shares no code with the library's forward engine.

#include <cmath>
#include <vector>

#include "tinfer/model.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const tinfer::Tensor& t) {
  auto v = t.to_f32();
  const std::size_t rows = t.rank() == 1 ? 1 : t.dim(0);
  const std::size_t cols = t.rank() == 1 ? t.dim(0) : t.dim(1);
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = v[r * cols + c];
  return m;
}

inline std::vector<double> layer_norm(const std::vector<double>& x, const std::vector<double>& g,
                                      const std::vector<double>& b) {
  double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
  return out;
}

inline std::vector<double> affine(const std::vector<double>& x, const Mat& w, const std::vector<double>* bias) {
  std::vector<double> out(w[0].size(), 0.0);
  for (std::size_t j = 0; j < out.size(); ++j) {
    double acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * w[i][j];
    out[j] = acc + (bias ? (*bias)[j] : 0.0);
  }
  return out;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

/// Logits [T][vocab] for every position.
inline Mat reference_forward(const tinfer::Model& model, const std::vector<tinfer::TokenId>& tokens) {
  const auto& c = model.config;
  const std::size_t T = tokens.size(), H = c.hidden_size, hd = c.head_dim;
  const Mat tok = to_mat(model.token_embedding), pos = to_mat(model.position_embedding);
  Mat x(T, std::vector<double>(H));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < H; ++j) x[t][j] = tok[tokens[t]][j] + pos[t][j];

  for (const auto& layer : model.layers) {
    const auto g1 = to_mat(layer.ln1_gamma)[0], b1 = to_mat(layer.ln1_beta)[0];
    const auto wqkv = to_mat(layer.w_qkv), wo = to_mat(layer.w_out), wi = to_mat(layer.w_ffn_in),
               wf = to_mat(layer.w_ffn_out);
    const auto bqkv = to_mat(layer.b_qkv)[0], bo = to_mat(layer.b_out)[0], bi = to_mat(layer.b_ffn_in)[0],
               bf = to_mat(layer.b_ffn_out)[0];
    const auto g2 = to_mat(layer.ln2_gamma)[0], b2 = to_mat(layer.ln2_beta)[0];

    Mat q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      auto qkv = affine(layer_norm(x[t], g1, b1), wqkv, &bqkv);
      q[t].assign(qkv.begin(), qkv.begin() + H);
      k[t].assign(qkv.begin() + H, qkv.begin() + 2 * H);
      v[t].assign(qkv.begin() + 2 * H, qkv.end());
    }
    Mat attn(T, std::vector<double>(H, 0.0));
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t head = 0; head < c.num_heads; ++head) {
        std::vector<double> s(t + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= t; ++j) {
          double d = 0;
          for (std::size_t e = 0; e < hd; ++e) d += q[t][head * hd + e] * k[j][head * hd + e];
          s[j] = d / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= t; ++j)
          for (std::size_t e = 0; e < hd; ++e) attn[t][head * hd + e] += s[j] / z * v[j][head * hd + e];
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      auto o = affine(attn[t], wo, &bo);
      for (std::size_t j = 0; j < H; ++j) x[t][j] += o[j];
      auto f = affine(layer_norm(x[t], g2, b2), wi, &bi);
      for (auto& e : f) e = gelu(e);
      auto o2 = affine(f, wf, &bf);
      for (std::size_t j = 0; j < H; ++j) x[t][j] += o2[j];
    }
  }
  const auto gf = to_mat(model.final_ln_gamma)[0], bf = to_mat(model.final_ln_beta)[0];
  const auto head = to_mat(model.lm_head);
  Mat logits(T);
  for (std::size_t t = 0; t < T; ++t) logits[t] = affine(layer_norm(x[t], gf, bf), head, nullptr);
  return logits;
}

}  // namespace oracle

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tinfer/tensor.hpp"
#include "tinfer/tinf_io.hpp"

namespace tinfer {

using TokenId = std::int32_t;

inline constexpr float kLayerNormEps = 1e-5f;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden_size = 0;
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::size_t head_dim = 0;
  std::size_t ffn_size = 0;
  std::size_t max_position = 0;
  DType dtype = DType::F32;
  TokenId eos_token = 0;
  TokenId pad_token = 0;

  /// Throws ErrorKind::Config on any invariant violation.
  void validate() const;

  /// Flat JSON object with exactly the field names of this struct.
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  /// Desk-scale reference: 4 layers, hidden 128, 4 heads, ffn 512,
  /// vocab 4096, 512 positions.
  static ModelConfig reference();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor w_qkv, b_qkv;  // [hidden x 3*hidden], [3*hidden]; columns are Q | K | V, head-major
  Tensor w_out, b_out;  // [hidden x hidden], [hidden]
  Tensor ln2_gamma, ln2_beta;
  Tensor w_ffn_in, b_ffn_in;    // [hidden x ffn], [ffn]
  Tensor w_ffn_out, b_ffn_out;  // [ffn x hidden], [hidden]
};

/// Pre-norm decoder-only transformer with GELU feed-forward blocks and an
/// untied output head.
struct Model {
  ModelConfig config;
  Tensor token_embedding;     // [vocab x hidden]
  Tensor position_embedding;  // [max_position x hidden]
  std::vector<LayerWeights> layers;
  Tensor final_ln_gamma, final_ln_beta;
  Tensor lm_head;  // [hidden x vocab]

  /// Canonical (name, tensor) list in serialization order.
  std::vector<NamedTensor> named_tensors() const;
  static Model from_named(const ModelConfig& config, std::vector<NamedTensor> tensors);

  /// Checks every weight's shape and dtype against `config`.
  void validate() const;
};

Model init_random(const ModelConfig& config, std::uint64_t seed);
Model cast_model(const Model& model, DType dtype);

/// Weights go to `path` as TINF v1, the config to `path` + ".json".
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);
std::filesystem::path config_path_for(const std::filesystem::path& model_path);

/// Per-layer key/value store. Slots [0, len) are written once and never
/// touched again.
class KVCache {
 public:
  explicit KVCache(const ModelConfig& config);
  KVCache(const ModelConfig& config, std::size_t capacity);

  std::size_t len() const noexcept { return len_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t num_layers() const noexcept { return keys_.size(); }

  /// [num_heads x capacity x head_dim]
  const Tensor& keys(std::size_t layer) const { return keys_.at(layer); }
  const Tensor& values(std::size_t layer) const { return values_.at(layer); }

  /// Raw bytes of slots [0, len), slot-major, for append-only checks.
  std::vector<std::byte> filled_bytes() const;

 private:
  friend struct CacheAccess;
  std::vector<Tensor> keys_, values_;
  std::size_t capacity_;
  std::size_t len_ = 0;
};

struct ExecOptions {
  bool use_cache = true;
  bool fused = false;  // bias/activation/residual folded into the GEMM epilogue
  bool arena = false;  // activation buffers reused across layers and steps
};

/// Row t = token_embedding[id_t] + position_embedding[start_position + t].
Tensor embed(const Model& model, std::span<const TokenId> token_ids, std::size_t start_position);

/// Next-token logits for every position, recomputing all keys/values.
Tensor forward_full(const Model& model, std::span<const TokenId> token_ids, const ExecOptions& options = {});

/// Appends one token to `cache` and returns its next-token logits [1 x vocab].
Tensor decode_step(const Model& model, TokenId token_id, KVCache& cache, const ExecOptions& options = {});

/// Runs the prompt through the model into an empty cache; returns the last
/// position's logits.
Tensor prefill(const Model& model, std::span<const TokenId> prompt, KVCache& cache, const ExecOptions& options = {});

/// Lowest index among the maximal entries of a single logits row.
TokenId argmax(std::span<const float> logits);
TokenId argmax_last_row(const Tensor& logits);

/// Returns prompt followed by the generated tokens (including a final eos).
std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> prompt, std::size_t max_new_tokens,
                                   bool use_cache);
std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> prompt, std::size_t max_new_tokens,
                                   const ExecOptions& options);

/// Greedy generation for a group of prompts in lockstep. Prompts are
/// left-padded to the longest one and padded slots are masked out of
/// attention, so each continuation is bit-identical to decoding that prompt
/// alone. Returns generated tokens only.
std::vector<std::vector<TokenId>> generate_batch(const Model& model, std::span<const std::vector<TokenId>> prompts,
                                                 std::size_t max_new_tokens, const ExecOptions& options);

/// Teacher-forced logits: row s is the next-token distribution after the
/// model has consumed sequence[0, prompt_len + s). One row per token after
/// the prompt. Returned as F32.
Tensor stepwise_logits(const Model& model, std::span<const TokenId> sequence, std::size_t prompt_len,
                       const ExecOptions& options = {});

/// Instrumentation, per thread.
struct OpCounters {
  std::uint64_t attention_macs = 0;
  std::uint64_t gemm_macs = 0;
  std::uint64_t kernel_launches = 0;
};
OpCounters& op_counters();

}  // namespace tinfer

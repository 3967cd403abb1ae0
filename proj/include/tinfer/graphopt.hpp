#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tinfer/model.hpp"
#include "tinfer/tensor.hpp"

namespace tinfer {

enum class OpKind : std::uint8_t {
  MatMul,
  Add,
  Mul,
  Gelu,
  Softmax,
  LayerNorm,
  FusedAddN,
  FusedAffine,
  FusedMatMulBiasAct,
};

enum class TensorClass : std::uint8_t { Input, Weight, Intermediate, Output };

std::string_view to_string(OpKind kind);
std::string_view to_string(TensorClass cls);
OpKind parse_op_kind(std::string_view name);
TensorClass parse_tensor_class(std::string_view name);

struct TensorInfo {
  int id = 0;
  std::string name;
  Tensor::Shape shape;
  DType dtype = DType::F32;
  TensorClass cls = TensorClass::Intermediate;

  std::size_t bytes() const;
  friend bool operator==(const TensorInfo&, const TensorInfo&) = default;
};

struct OpAttrs {
  bool transpose_b = false;             // MatMul, FusedMatMulBiasAct
  Activation act = Activation::None;    // FusedMatMulBiasAct
  float eps = kLayerNormEps;            // LayerNorm
  friend bool operator==(const OpAttrs&, const OpAttrs&) = default;
};

/// Node semantics (elementwise operands are either the output shape or a
/// rank-1 tensor broadcast along the last axis):
///   MatMul(a, b)                    a * b, or a * b^T with transpose_b
///   Add(a, b), Mul(a, b)            elementwise
///   Gelu(x), Softmax(x)             Softmax normalizes the last axis of a matrix
///   LayerNorm(x, gamma, beta)       over the last axis
///   FusedAddN(x0, x1, ...)          ((x0 + x1) + x2) + ...
///   FusedAffine(x, b, m)            (x + b) * m
///   FusedMatMulBiasAct(a, w, bias)  act(a * w + bias)
struct OpNode {
  int id = 0;
  OpKind kind = OpKind::Add;
  std::vector<int> inputs;
  int output = 0;
  OpAttrs attrs;
  friend bool operator==(const OpNode&, const OpNode&) = default;
};

/// Operator graph. Nodes are stored in a topological order; every
/// intermediate or output tensor has exactly one producer.
class OpGraph {
 public:
  int add_tensor(std::string name, Tensor::Shape shape, DType dtype, TensorClass cls);
  /// Appends a node writing `output`; shapes are checked by validate().
  int add_node(OpKind kind, std::vector<int> inputs, int output, OpAttrs attrs = {});

  const std::vector<TensorInfo>& tensors() const noexcept { return tensors_; }
  const std::vector<OpNode>& nodes() const noexcept { return nodes_; }
  const TensorInfo& tensor(int id) const;
  int tensor_id(std::string_view name) const;
  std::size_t node_count() const noexcept { return nodes_.size(); }

  /// Throws ErrorKind::Graph on cycles, bad references, multiple producers or
  /// shape/dtype inconsistencies.
  void validate() const;

  /// Number of input slots, across all nodes, that read tensor `id`.
  std::size_t use_count(int id) const;
  /// Index of the node producing tensor `id`, or nullopt.
  std::optional<std::size_t> producer(int id) const;

  /// JSON object with "tensors", "nodes" and a derived "edges" list of
  /// {from, to, tensor} node-index pairs.
  std::string to_json() const;
  static OpGraph from_json(const std::string& text);

  friend bool operator==(const OpGraph&, const OpGraph&) = default;

 private:
  friend class GraphRewriter;
  std::vector<TensorInfo> tensors_;
  std::vector<OpNode> nodes_;
};

/// Collapses maximal dataflow chains of Add nodes (each intermediate used
/// once, by the next Add) into FusedAddN nodes.
OpGraph fuse_horizontal(const OpGraph& graph);

/// Rewrites MatMul -> Add(rank-1 bias) [-> Gelu] into FusedMatMulBiasAct and
/// Add -> Mul into FusedAffine, when every fused intermediate has a single use.
OpGraph fuse_vertical(const OpGraph& graph);

/// fuse_vertical followed by fuse_horizontal.
OpGraph fuse_all(const OpGraph& graph);

struct Lifetime {
  int tensor = 0;
  std::size_t first_def = 0;
  std::size_t last_use = 0;
  friend bool operator==(const Lifetime&, const Lifetime&) = default;
};

struct Lifetimes {
  std::vector<Lifetime> intervals;  // intermediates only, in producer order
  std::vector<std::string> warnings;

  const Lifetime& of(int tensor) const;
};

/// For each intermediate: producer index and last consumer index. A tensor
/// nobody reads gets (def, def) and a dead-code warning.
Lifetimes analyze_lifetimes(const OpGraph& graph);

struct BufferAssignment {
  int tensor = 0;
  std::size_t buffer = 0;
  std::size_t offset = 0;  // always 0: one tensor per buffer at a time
  std::size_t bytes = 0;
  friend bool operator==(const BufferAssignment&, const BufferAssignment&) = default;
};

struct ArenaPlan {
  std::vector<std::size_t> buffer_sizes;
  std::vector<BufferAssignment> assignments;
  std::vector<Lifetime> lifetimes;

  std::size_t buffer_count() const noexcept { return buffer_sizes.size(); }
  std::size_t peak_bytes() const;
  const BufferAssignment& of(int tensor) const;
};

/// First fit in producer order: each tensor takes the lowest-index buffer that
/// is large enough and holds no tensor with an overlapping lifetime, else a
/// new buffer of exactly its size.
ArenaPlan plan_memory(const OpGraph& graph, const Lifetimes& lifetimes);

/// Returns the number of pairs of same-buffer tensors with intersecting
/// lifetimes, plus any undersized assignment. Zero for a valid plan.
std::size_t count_plan_violations(const ArenaPlan& plan);

std::size_t total_intermediate_bytes(const OpGraph& graph);

using Bindings = std::map<int, Tensor>;

struct ExecStats {
  std::size_t launch_count = 0;
  std::size_t peak_bytes = 0;
};

struct ExecResult {
  Bindings outputs;  // keyed by output tensor id
  ExecStats stats;
};

/// Runs every node in order. With a plan, intermediates live in the plan's
/// buffers and every read checks that the buffer still holds the tensor
/// (ErrorKind::Plan otherwise). Without a plan each intermediate gets a fresh
/// allocation. Missing or mis-shaped bindings raise ErrorKind::Binding.
ExecResult execute(const OpGraph& graph, const ArenaPlan* plan, const Bindings& bindings);

/// Uniform values in [lo, hi] for every input and weight tensor.
Bindings random_bindings(const OpGraph& graph, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f);

/// One pre-norm decoder block at sequence length `seq_len`, with attention
/// heads folded into a single head of width hidden_size. Inputs: "x",
/// "mask" (additive, [T x T]) and "scale" ([T], multiplies the scores).
OpGraph transformer_block_graph(const ModelConfig& config, std::size_t seq_len);

/// Bindings for transformer_block_graph: random weights and activations,
/// causal mask and 1/sqrt(hidden) scale.
Bindings transformer_block_bindings(const OpGraph& graph, std::uint64_t seed);

}  // namespace tinfer

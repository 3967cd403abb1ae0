#include "tinfer/graphopt.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include <json.hpp>

#include "tinfer/random.hpp"

namespace tinfer {

namespace {

constexpr std::pair<OpKind, std::string_view> kKindNames[] = {
    {OpKind::MatMul, "MatMul"},       {OpKind::Add, "Add"},
    {OpKind::Mul, "Mul"},             {OpKind::Gelu, "Gelu"},
    {OpKind::Softmax, "Softmax"},     {OpKind::LayerNorm, "LayerNorm"},
    {OpKind::FusedAddN, "FusedAddN"}, {OpKind::FusedAffine, "FusedAffine"},
    {OpKind::FusedMatMulBiasAct, "FusedMatMulBiasAct"},
};

constexpr std::pair<TensorClass, std::string_view> kClassNames[] = {
    {TensorClass::Input, "input"},
    {TensorClass::Weight, "weight"},
    {TensorClass::Intermediate, "intermediate"},
    {TensorClass::Output, "output"},
};

[[noreturn]] void graph_error(const std::string& what) { throw Error(ErrorKind::Graph, what); }

bool produced(TensorClass c) { return c == TensorClass::Intermediate || c == TensorClass::Output; }

}  // namespace

std::string_view to_string(OpKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "?";
}

std::string_view to_string(TensorClass cls) {
  for (const auto& [c, name] : kClassNames) {
    if (c == cls) return name;
  }
  return "?";
}

OpKind parse_op_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  graph_error("unknown op kind '" + std::string(name) + "'");
}

TensorClass parse_tensor_class(std::string_view name) {
  for (const auto& [c, n] : kClassNames) {
    if (n == name) return c;
  }
  graph_error("unknown tensor class '" + std::string(name) + "'");
}

std::size_t TensorInfo::bytes() const {
  std::size_t n = dtype_size(dtype);
  for (auto e : shape) n *= e;
  return n;
}

// ---------------------------------------------------------------------------
// OpGraph

int OpGraph::add_tensor(std::string name, Tensor::Shape shape, DType dtype, TensorClass cls) {
  const int id = tensors_.empty() ? 0 : tensors_.back().id + 1;
  tensors_.push_back({id, std::move(name), std::move(shape), dtype, cls});
  return id;
}

int OpGraph::add_node(OpKind kind, std::vector<int> inputs, int output, OpAttrs attrs) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back({id, kind, std::move(inputs), output, attrs});
  return id;
}

const TensorInfo& OpGraph::tensor(int id) const {
  const auto it = std::lower_bound(tensors_.begin(), tensors_.end(), id,
                                   [](const TensorInfo& t, int v) { return t.id < v; });
  if (it == tensors_.end() || it->id != id) graph_error("unknown tensor id " + std::to_string(id));
  return *it;
}

int OpGraph::tensor_id(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t.id;
  }
  graph_error("unknown tensor '" + std::string(name) + "'");
}

std::size_t OpGraph::use_count(int id) const {
  std::size_t n = 0;
  for (const auto& node : nodes_) n += static_cast<std::size_t>(std::count(node.inputs.begin(), node.inputs.end(), id));
  return n;
}

std::optional<std::size_t> OpGraph::producer(int id) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].output == id) return i;
  }
  return std::nullopt;
}

namespace {

// Shape of an elementwise result: the common full shape of the operands;
// rank-1 operands must match its last extent.
Tensor::Shape broadcast_shape(const std::vector<const TensorInfo*>& ops) {
  const TensorInfo* full = ops.front();
  for (const auto* t : ops) {
    if (t->shape.size() > full->shape.size()) full = t;
  }
  for (const auto* t : ops) {
    if (t->shape == full->shape) continue;
    if (t->shape.size() == 1 && t->shape[0] == full->shape.back()) continue;
    graph_error("operand '" + t->name + "' does not broadcast against '" + full->name + "'");
  }
  return full->shape;
}

Tensor::Shape matmul_shape(const TensorInfo& a, const TensorInfo& b, bool transpose_b) {
  if (a.shape.size() != 2 || b.shape.size() != 2) graph_error("MatMul operands must be 2-D");
  const std::size_t k = transpose_b ? b.shape[1] : b.shape[0];
  const std::size_t n = transpose_b ? b.shape[0] : b.shape[1];
  if (a.shape[1] != k) graph_error("MatMul inner dimensions differ ('" + a.name + "', '" + b.name + "')");
  return {a.shape[0], n};
}

Tensor::Shape infer_shape(const OpGraph& g, const OpNode& node) {
  std::vector<const TensorInfo*> in;
  for (int id : node.inputs) in.push_back(&g.tensor(id));
  const auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      graph_error(std::string(to_string(node.kind)) + " expects " + std::to_string(n) + " inputs");
    }
  };
  switch (node.kind) {
    case OpKind::MatMul:
      arity(2);
      return matmul_shape(*in[0], *in[1], node.attrs.transpose_b);
    case OpKind::Add:
    case OpKind::Mul:
      arity(2);
      return broadcast_shape(in);
    case OpKind::FusedAffine:
      arity(3);
      return broadcast_shape(in);
    case OpKind::FusedAddN:
      if (in.size() < 2) graph_error("FusedAddN expects at least 2 inputs");
      return broadcast_shape(in);
    case OpKind::Gelu:
      arity(1);
      return in[0]->shape;
    case OpKind::Softmax:
      arity(1);
      if (in[0]->shape.size() != 2) graph_error("Softmax input must be 2-D");
      return in[0]->shape;
    case OpKind::LayerNorm:
      arity(3);
      for (int i = 1; i < 3; ++i) {
        if (in[i]->shape != Tensor::Shape{in[0]->shape.back()}) graph_error("LayerNorm gamma/beta length mismatch");
      }
      return in[0]->shape;
    case OpKind::FusedMatMulBiasAct: {
      arity(3);
      auto s = matmul_shape(*in[0], *in[1], node.attrs.transpose_b);
      if (in[2]->shape != Tensor::Shape{s[1]}) graph_error("FusedMatMulBiasAct bias length mismatch");
      return s;
    }
  }
  graph_error("unknown op kind");
}

}  // namespace

void OpGraph::validate() const {
  std::set<std::string> names;
  int prev = -1;
  for (const auto& t : tensors_) {
    if (t.id <= prev) graph_error("tensor ids must be strictly increasing");
    prev = t.id;
    if (!t.name.empty() && !names.insert(t.name).second) graph_error("duplicate tensor name '" + t.name + "'");
    if (t.shape.empty()) graph_error("tensor '" + t.name + "' has an empty shape");
    for (auto e : t.shape) {
      if (e == 0) graph_error("tensor '" + t.name + "' has a zero extent");
    }
    if (t.dtype != tensors_.front().dtype) graph_error("graph mixes dtypes");
  }

  std::set<int> available;
  for (const auto& t : tensors_) {
    if (!produced(t.cls)) available.insert(t.id);
  }
  std::set<int> written;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& node = nodes_[i];
    for (int in : node.inputs) {
      tensor(in);
      if (!available.count(in)) {
        graph_error("node " + std::to_string(i) + " reads tensor " + std::to_string(in) +
                    " before it is produced (cycle or bad order)");
      }
    }
    const auto& out = tensor(node.output);
    if (!produced(out.cls)) graph_error("node " + std::to_string(i) + " writes an input or weight tensor");
    if (!written.insert(node.output).second) {
      graph_error("tensor " + std::to_string(node.output) + " has more than one producer");
    }
    if (infer_shape(*this, node) != out.shape) {
      graph_error("node " + std::to_string(i) + " output shape does not match tensor '" + out.name + "'");
    }
    available.insert(node.output);
  }
  for (const auto& t : tensors_) {
    if (produced(t.cls) && !written.count(t.id)) {
      graph_error("tensor '" + t.name + "' has no producer");
    }
  }
}

std::string OpGraph::to_json() const {
  using nlohmann::json;
  json j;
  j["tensors"] = json::array();
  for (const auto& t : tensors_) {
    j["tensors"].push_back({{"id", t.id},
                            {"name", t.name},
                            {"shape", t.shape},
                            {"dtype", std::string(tinfer::to_string(t.dtype))},
                            {"class", std::string(tinfer::to_string(t.cls))}});
  }
  j["nodes"] = json::array();
  j["edges"] = json::array();
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    json attrs = json::object();
    if (n.attrs.transpose_b) attrs["transpose_b"] = true;
    if (n.attrs.act == Activation::Gelu) attrs["act"] = "gelu";
    if (n.kind == OpKind::LayerNorm) attrs["eps"] = n.attrs.eps;
    j["nodes"].push_back({{"id", n.id},
                          {"kind", std::string(tinfer::to_string(n.kind))},
                          {"inputs", n.inputs},
                          {"output", n.output},
                          {"attrs", attrs}});
    for (int in : n.inputs) {
      if (auto p = producer(in)) j["edges"].push_back({{"from", *p}, {"to", i}, {"tensor", in}});
    }
  }
  return j.dump(2);
}

OpGraph OpGraph::from_json(const std::string& text) {
  using nlohmann::json;
  OpGraph g;
  try {
    const json j = json::parse(text);
    for (const auto& t : j.at("tensors")) {
      g.tensors_.push_back({t.at("id").get<int>(), t.at("name").get<std::string>(),
                            t.at("shape").get<Tensor::Shape>(), parse_dtype(t.at("dtype").get<std::string>()),
                            parse_tensor_class(t.at("class").get<std::string>())});
    }
    for (const auto& n : j.at("nodes")) {
      OpAttrs attrs;
      const auto& a = n.value("attrs", json::object());
      attrs.transpose_b = a.value("transpose_b", false);
      const auto act = a.value("act", std::string("none"));
      if (act != "none" && act != "gelu") graph_error("unknown activation '" + act + "'");
      attrs.act = act == "gelu" ? Activation::Gelu : Activation::None;
      attrs.eps = a.value("eps", kLayerNormEps);
      g.nodes_.push_back({n.at("id").get<int>(), parse_op_kind(n.at("kind").get<std::string>()),
                          n.at("inputs").get<std::vector<int>>(), n.at("output").get<int>(), attrs});
    }
    g.validate();
    if (j.contains("edges")) {
      std::set<std::tuple<std::size_t, std::size_t, int>> expected, given;
      for (std::size_t i = 0; i < g.nodes_.size(); ++i) {
        for (int in : g.nodes_[i].inputs) {
          if (auto p = g.producer(in)) expected.insert({*p, i, in});
        }
      }
      for (const auto& e : j.at("edges")) {
        given.insert({e.at("from").get<std::size_t>(), e.at("to").get<std::size_t>(), e.at("tensor").get<int>()});
      }
      if (expected != given) graph_error("edge list does not match node inputs");
    }
  } catch (const json::exception& e) {
    graph_error(std::string("malformed graph JSON: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Graph) throw;
    graph_error(e.what());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Fusion

class GraphRewriter {
 public:
  // Builds a graph from `g` where node i is replaced by replacement[i]
  // (nullopt drops it) and the listed tensors are removed.
  static OpGraph rebuild(const OpGraph& g, const std::vector<std::optional<OpNode>>& replacement,
                         const std::set<int>& dropped_tensors) {
    OpGraph out;
    for (const auto& t : g.tensors_) {
      if (!dropped_tensors.count(t.id)) out.tensors_.push_back(t);
    }
    for (const auto& r : replacement) {
      if (!r) continue;
      OpNode n = *r;
      n.id = static_cast<int>(out.nodes_.size());
      out.nodes_.push_back(std::move(n));
    }
    out.validate();
    return out;
  }
};

namespace {

// True when `t` is an intermediate read exactly once.
bool fusible_intermediate(const OpGraph& g, int t) {
  return g.tensor(t).cls == TensorClass::Intermediate && g.use_count(t) == 1;
}

// Index of the (single) node reading `t`.
std::optional<std::size_t> sole_consumer(const OpGraph& g, int t) {
  for (std::size_t i = 0; i < g.nodes().size(); ++i) {
    const auto& in = g.nodes()[i].inputs;
    if (std::find(in.begin(), in.end(), t) != in.end()) return i;
  }
  return std::nullopt;
}

}  // namespace

OpGraph fuse_horizontal(const OpGraph& g) {
  g.validate();
  const auto& nodes = g.nodes();
  // absorbed_by[i] = index of the Add that swallows Add i's result.
  std::vector<std::optional<std::size_t>> absorbed_by(nodes.size());
  std::vector<std::optional<std::size_t>> absorbs(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].kind != OpKind::Add) continue;
    for (int in : nodes[i].inputs) {
      const auto p = g.producer(in);
      if (p && nodes[*p].kind == OpKind::Add && !absorbed_by[*p] && fusible_intermediate(g, in)) {
        absorbed_by[*p] = i;
        absorbs[i] = *p;
        break;
      }
    }
  }

  std::vector<std::optional<OpNode>> replacement(nodes.begin(), nodes.end());
  std::set<int> dropped;
  for (std::size_t tail = 0; tail < nodes.size(); ++tail) {
    if (nodes[tail].kind != OpKind::Add || absorbed_by[tail] || !absorbs[tail]) continue;
    std::vector<std::size_t> chain{tail};
    while (absorbs[chain.back()]) chain.push_back(*absorbs[chain.back()]);
    std::reverse(chain.begin(), chain.end());

    std::vector<int> leaves = nodes[chain[0]].inputs;
    for (std::size_t c = 1; c < chain.size(); ++c) {
      const int prev_out = nodes[chain[c - 1]].output;
      const auto& in = nodes[chain[c]].inputs;
      // Swap the operands if the chain value came second; addition commutes exactly.
      leaves.push_back(in[0] == prev_out ? in[1] : in[0]);
      dropped.insert(prev_out);
      replacement[chain[c - 1]].reset();
    }
    replacement[tail] = OpNode{0, OpKind::FusedAddN, leaves, nodes[tail].output, {}};
  }
  return GraphRewriter::rebuild(g, replacement, dropped);
}

OpGraph fuse_vertical(const OpGraph& g) {
  g.validate();
  const auto& nodes = g.nodes();
  std::vector<std::optional<OpNode>> replacement(nodes.begin(), nodes.end());
  std::vector<bool> consumed(nodes.size(), false);
  std::set<int> dropped;

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (consumed[i] || nodes[i].kind != OpKind::MatMul) continue;
    const int mm_out = nodes[i].output;
    if (!fusible_intermediate(g, mm_out)) continue;
    const std::size_t add = *sole_consumer(g, mm_out);
    if (consumed[add] || nodes[add].kind != OpKind::Add) continue;
    const auto& add_in = nodes[add].inputs;
    const int bias = add_in[0] == mm_out ? add_in[1] : add_in[0];
    if (g.tensor(bias).shape != Tensor::Shape{g.tensor(mm_out).shape[1]}) continue;

    std::size_t last = add;
    Activation act = Activation::None;
    const int add_out = nodes[add].output;
    if (fusible_intermediate(g, add_out)) {
      const std::size_t next = *sole_consumer(g, add_out);
      if (!consumed[next] && nodes[next].kind == OpKind::Gelu) {
        act = Activation::Gelu;
        last = next;
        dropped.insert(add_out);
        replacement[add].reset();
        consumed[next] = true;
      }
    }
    OpAttrs attrs;
    attrs.transpose_b = nodes[i].attrs.transpose_b;
    attrs.act = act;
    // The fused node sits where the pattern ended so every operand is ready.
    replacement[last] = OpNode{0, OpKind::FusedMatMulBiasAct, {nodes[i].inputs[0], nodes[i].inputs[1], bias},
                               nodes[last].output, attrs};
    replacement[i].reset();
    dropped.insert(mm_out);
    consumed[i] = consumed[add] = true;
  }

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (consumed[i] || nodes[i].kind != OpKind::Add) continue;
    const int add_out = nodes[i].output;
    if (!fusible_intermediate(g, add_out)) continue;
    const std::size_t mul = *sole_consumer(g, add_out);
    if (consumed[mul] || nodes[mul].kind != OpKind::Mul) continue;
    const auto& mul_in = nodes[mul].inputs;
    const int m = mul_in[0] == add_out ? mul_in[1] : mul_in[0];
    replacement[mul] =
        OpNode{0, OpKind::FusedAffine, {nodes[i].inputs[0], nodes[i].inputs[1], m}, nodes[mul].output, {}};
    replacement[i].reset();
    dropped.insert(add_out);
    consumed[i] = consumed[mul] = true;
  }
  return GraphRewriter::rebuild(g, replacement, dropped);
}

OpGraph fuse_all(const OpGraph& graph) { return fuse_horizontal(fuse_vertical(graph)); }

// ---------------------------------------------------------------------------
// Lifetimes and planning

const Lifetime& Lifetimes::of(int tensor) const {
  for (const auto& l : intervals) {
    if (l.tensor == tensor) return l;
  }
  throw Error(ErrorKind::Plan, "no lifetime for tensor " + std::to_string(tensor));
}

Lifetimes analyze_lifetimes(const OpGraph& g) {
  g.validate();
  Lifetimes out;
  const auto& nodes = g.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& t = g.tensor(nodes[i].output);
    if (t.cls != TensorClass::Intermediate) continue;
    Lifetime l{t.id, i, i};
    bool used = false;
    for (std::size_t j = i + 1; j < nodes.size(); ++j) {
      const auto& in = nodes[j].inputs;
      if (std::find(in.begin(), in.end(), t.id) != in.end()) {
        l.last_use = j;
        used = true;
      }
    }
    if (!used) out.warnings.push_back("dead code: tensor '" + t.name + "' is never read");
    out.intervals.push_back(l);
  }
  return out;
}

namespace {

bool overlaps(const Lifetime& a, const Lifetime& b) {
  return !(a.last_use < b.first_def || b.last_use < a.first_def);
}

}  // namespace

std::size_t ArenaPlan::peak_bytes() const {
  std::size_t total = 0;
  for (auto s : buffer_sizes) total += s;
  return total;
}

const BufferAssignment& ArenaPlan::of(int tensor) const {
  for (const auto& a : assignments) {
    if (a.tensor == tensor) return a;
  }
  throw Error(ErrorKind::Plan, "tensor " + std::to_string(tensor) + " has no buffer");
}

ArenaPlan plan_memory(const OpGraph& g, const Lifetimes& lifetimes) {
  ArenaPlan plan;
  plan.lifetimes = lifetimes.intervals;
  std::vector<std::vector<Lifetime>> members;
  for (const auto& l : lifetimes.intervals) {
    const std::size_t bytes = g.tensor(l.tensor).bytes();
    std::size_t chosen = plan.buffer_sizes.size();
    for (std::size_t b = 0; b < plan.buffer_sizes.size(); ++b) {
      if (plan.buffer_sizes[b] < bytes) continue;
      if (std::none_of(members[b].begin(), members[b].end(), [&](const Lifetime& o) { return overlaps(o, l); })) {
        chosen = b;
        break;
      }
    }
    if (chosen == plan.buffer_sizes.size()) {
      plan.buffer_sizes.push_back(bytes);
      members.emplace_back();
    }
    members[chosen].push_back(l);
    plan.assignments.push_back({l.tensor, chosen, 0, bytes});
  }
  return plan;
}

std::size_t count_plan_violations(const ArenaPlan& plan) {
  std::size_t violations = 0;
  const auto lifetime_of = [&](int t) -> const Lifetime& {
    for (const auto& l : plan.lifetimes) {
      if (l.tensor == t) return l;
    }
    throw Error(ErrorKind::Plan, "plan lacks lifetime for tensor " + std::to_string(t));
  };
  for (std::size_t i = 0; i < plan.assignments.size(); ++i) {
    const auto& a = plan.assignments[i];
    if (a.buffer >= plan.buffer_sizes.size() || plan.buffer_sizes[a.buffer] < a.bytes || a.offset != 0) {
      ++violations;
      continue;
    }
    for (std::size_t j = i + 1; j < plan.assignments.size(); ++j) {
      const auto& b = plan.assignments[j];
      if (a.buffer == b.buffer && overlaps(lifetime_of(a.tensor), lifetime_of(b.tensor))) ++violations;
    }
  }
  return violations;
}

std::size_t total_intermediate_bytes(const OpGraph& g) {
  std::size_t total = 0;
  for (const auto& t : g.tensors()) {
    if (t.cls == TensorClass::Intermediate) total += t.bytes();
  }
  return total;
}

// ---------------------------------------------------------------------------
// Execution

namespace {

struct View {
  const TensorInfo* info;
  std::byte* data;

  template <typename S>
  const S* in() const {
    return reinterpret_cast<const S*>(data);
  }
  template <typename S>
  S* out() const {
    return reinterpret_cast<S*>(data);
  }
  std::size_t size() const { return info->bytes() / dtype_size(info->dtype); }
};

// Element i of the output reads operand element i, or i mod n for a rank-1
// operand broadcast across rows.
template <typename S>
float elem(const View& v, std::size_t i, std::size_t out_size) {
  const std::size_t n = v.size();
  return to_float(v.in<S>()[n == out_size ? i : i % n]);
}

template <typename S>
void run_matmul(const View& a, const View& b, const View* bias, Activation act, bool transpose_b, const View& out) {
  const std::size_t m = a.info->shape[0], k = a.info->shape[1];
  const std::size_t n = transpose_b ? b.info->shape[0] : b.info->shape[1];
  std::span<const S> bspan(b.in<S>(), k * n);
  std::vector<S> bt;
  if (transpose_b) {
    bt.resize(k * n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < k; ++c) bt[c * n + r] = b.in<S>()[r * k + c];
    bspan = bt;
  }
  kernels::Epilogue<S> ep;
  if (bias) ep.bias = {bias->in<S>(), n};
  ep.act = act;
  kernels::gemm<S>({a.in<S>(), m * k}, bspan, m, k, n, {out.out<S>(), m * n}, ep);
}

template <typename S>
void run_node(const OpNode& node, const std::vector<View>& in, const View& out) {
  const std::size_t size = out.size();
  S* dst = out.out<S>();
  switch (node.kind) {
    case OpKind::MatMul:
      run_matmul<S>(in[0], in[1], nullptr, Activation::None, node.attrs.transpose_b, out);
      return;
    case OpKind::FusedMatMulBiasAct:
      run_matmul<S>(in[0], in[1], &in[2], node.attrs.act, node.attrs.transpose_b, out);
      return;
    case OpKind::Add:
      for (std::size_t i = 0; i < size; ++i) dst[i] = from_float<S>(elem<S>(in[0], i, size) + elem<S>(in[1], i, size));
      return;
    case OpKind::Mul:
      for (std::size_t i = 0; i < size; ++i) dst[i] = from_float<S>(elem<S>(in[0], i, size) * elem<S>(in[1], i, size));
      return;
    case OpKind::FusedAddN:
      for (std::size_t i = 0; i < size; ++i) {
        float acc = elem<S>(in[0], i, size);
        for (std::size_t o = 1; o < in.size(); ++o) acc = acc + elem<S>(in[o], i, size);
        dst[i] = from_float<S>(acc);
      }
      return;
    case OpKind::FusedAffine:
      for (std::size_t i = 0; i < size; ++i) {
        const float t = elem<S>(in[0], i, size) + elem<S>(in[1], i, size);
        dst[i] = from_float<S>(t * elem<S>(in[2], i, size));
      }
      return;
    case OpKind::Gelu:
      for (std::size_t i = 0; i < size; ++i) dst[i] = from_float<S>(gelu(to_float(in[0].in<S>()[i])));
      return;
    case OpKind::Softmax: {
      const std::size_t rows = out.info->shape[0], cols = out.info->shape[1];
      std::vector<float> row(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          row[c] = to_float(in[0].in<S>()[r * cols + c]);
          if (!std::isfinite(row[c])) throw Error(ErrorKind::Numeric, "non-finite softmax input");
        }
        kernels::softmax(row);
        for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] = from_float<S>(row[c]);
      }
      return;
    }
    case OpKind::LayerNorm: {
      const std::size_t n = out.info->shape.back(), rows = size / n;
      kernels::layer_norm_rows<S>({in[0].in<S>(), size}, rows, n, {in[1].in<S>(), n}, {in[2].in<S>(), n},
                                  node.attrs.eps, {dst, size});
      return;
    }
  }
}

}  // namespace

ExecResult execute(const OpGraph& g, const ArenaPlan* plan, const Bindings& bindings) {
  g.validate();
  ExecResult result;

  std::map<int, const std::byte*> bound;
  for (const auto& t : g.tensors()) {
    if (produced(t.cls)) continue;
    const auto it = bindings.find(t.id);
    if (it == bindings.end()) throw Error(ErrorKind::Binding, "no binding for tensor '" + t.name + "'");
    if (it->second.shape() != t.shape || it->second.dtype() != t.dtype) {
      throw Error(ErrorKind::Binding, "binding for '" + t.name + "' has the wrong shape or dtype");
    }
    bound[t.id] = it->second.bytes().data();
  }

  std::vector<std::vector<std::byte>> buffers;
  std::vector<int> owner;
  std::map<int, std::size_t> buffer_of;
  std::map<int, std::vector<std::byte>> fresh;
  if (plan) {
    for (auto s : plan->buffer_sizes) buffers.emplace_back(s);
    owner.assign(buffers.size(), -1);
    for (const auto& t : g.tensors()) {
      if (t.cls != TensorClass::Intermediate) continue;
      const auto& a = plan->of(t.id);
      if (a.buffer >= buffers.size() || buffers[a.buffer].size() < t.bytes() || a.offset != 0) {
        throw Error(ErrorKind::Plan, "buffer for '" + t.name + "' is missing or too small");
      }
      buffer_of[t.id] = a.buffer;
    }
    result.stats.peak_bytes = plan->peak_bytes();
  } else {
    result.stats.peak_bytes = total_intermediate_bytes(g);
  }
  for (const auto& t : g.tensors()) {
    if (t.cls == TensorClass::Output) result.outputs[t.id] = Tensor(t.shape, t.dtype);
  }

  std::map<int, std::size_t> last_use;
  for (const auto& l : analyze_lifetimes(g).intervals) last_use[l.tensor] = l.last_use;
  std::size_t step = 0;
  const auto locate = [&](int id, bool writing) -> std::byte* {
    const auto& t = g.tensor(id);
    if (t.cls == TensorClass::Output) return result.outputs[id].mutable_bytes().data();
    if (t.cls != TensorClass::Intermediate) return const_cast<std::byte*>(bound.at(id));
    if (!plan) {
      auto& buf = fresh[id];
      if (writing) buf.resize(t.bytes());
      return buf.data();
    }
    const std::size_t b = buffer_of.at(id);
    if (writing) {
      if (owner[b] >= 0 && last_use.at(owner[b]) >= step) {
        throw Error(ErrorKind::Plan, "tensor '" + t.name + "' would overwrite live tensor " +
                                         std::to_string(owner[b]) + " in buffer " + std::to_string(b));
      }
      owner[b] = id;
    } else if (owner[b] != id) {
      throw Error(ErrorKind::Plan, "tensor '" + t.name + "' was overwritten in buffer " + std::to_string(b) +
                                       " before its last use");
    }
    return buffers[b].data();
  };

  for (const auto& node : g.nodes()) {
    std::vector<View> in;
    for (int id : node.inputs) in.push_back({&g.tensor(id), locate(id, false)});
    const View out{&g.tensor(node.output), locate(node.output, true)};
    if (out.info->dtype == DType::F16) {
      run_node<Half>(node, in, out);
    } else {
      run_node<float>(node, in, out);
    }
    ++result.stats.launch_count;
    ++step;
  }
  return result;
}

Bindings random_bindings(const OpGraph& g, std::uint64_t seed, float lo, float hi) {
  SplitMix64 rng(seed);
  Bindings b;
  std::vector<float> values;
  for (const auto& t : g.tensors()) {
    if (produced(t.cls)) continue;
    values.resize(t.bytes() / dtype_size(t.dtype));
    for (auto& v : values) v = rng.uniform(lo, hi);
    b[t.id] = Tensor::from_f32(t.shape, values, t.dtype);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Transformer block

OpGraph transformer_block_graph(const ModelConfig& config, std::size_t seq_len) {
  config.validate();
  const std::size_t T = seq_len, H = config.hidden_size, F = config.ffn_size;
  const DType dt = config.dtype;
  OpGraph g;
  const auto input = [&](const char* name, Tensor::Shape s) { return g.add_tensor(name, std::move(s), dt, TensorClass::Input); };
  const auto weight = [&](const char* name, Tensor::Shape s) { return g.add_tensor(name, std::move(s), dt, TensorClass::Weight); };
  const auto inter = [&](const char* name, Tensor::Shape s) {
    return g.add_tensor(name, std::move(s), dt, TensorClass::Intermediate);
  };

  const int x = input("x", {T, H}), mask = input("mask", {T, T}), scale = input("scale", {T});
  const int g1 = weight("ln1.gamma", {H}), b1 = weight("ln1.beta", {H});
  const int wq = weight("attn.q.weight", {H, H}), bq = weight("attn.q.bias", {H});
  const int wk = weight("attn.k.weight", {H, H}), bk = weight("attn.k.bias", {H});
  const int wv = weight("attn.v.weight", {H, H}), bv = weight("attn.v.bias", {H});
  const int wo = weight("attn.out.weight", {H, H}), bo = weight("attn.out.bias", {H});
  const int g2 = weight("ln2.gamma", {H}), b2 = weight("ln2.beta", {H});
  const int wi = weight("ffn.in.weight", {H, F}), bi = weight("ffn.in.bias", {F});
  const int wf = weight("ffn.out.weight", {F, H}), bf = weight("ffn.out.bias", {H});

  const int h1 = inter("ln1", {T, H});
  g.add_node(OpKind::LayerNorm, {x, g1, b1}, h1);
  const int q0 = inter("q.matmul", {T, H}), q = inter("q", {T, H});
  g.add_node(OpKind::MatMul, {h1, wq}, q0);
  g.add_node(OpKind::Add, {q0, bq}, q);
  const int k0 = inter("k.matmul", {T, H}), k = inter("k", {T, H});
  g.add_node(OpKind::MatMul, {h1, wk}, k0);
  g.add_node(OpKind::Add, {k0, bk}, k);
  const int v0 = inter("v.matmul", {T, H}), v = inter("v", {T, H});
  g.add_node(OpKind::MatMul, {h1, wv}, v0);
  g.add_node(OpKind::Add, {v0, bv}, v);

  const int s0 = inter("scores", {T, T}), s1 = inter("scores.masked", {T, T}), s2 = inter("scores.scaled", {T, T});
  OpAttrs tb;
  tb.transpose_b = true;
  g.add_node(OpKind::MatMul, {q, k}, s0, tb);
  g.add_node(OpKind::Add, {s0, mask}, s1);
  g.add_node(OpKind::Mul, {s1, scale}, s2);
  const int p = inter("probs", {T, T});
  g.add_node(OpKind::Softmax, {s2}, p);
  const int ctx = inter("context", {T, H});
  g.add_node(OpKind::MatMul, {p, v}, ctx);

  const int o0 = inter("attn.matmul", {T, H}), o1 = inter("attn.biased", {T, H}), r1 = inter("resid1", {T, H});
  g.add_node(OpKind::MatMul, {ctx, wo}, o0);
  g.add_node(OpKind::Add, {o0, bo}, o1);
  g.add_node(OpKind::Add, {o1, x}, r1);

  const int h2 = inter("ln2", {T, H});
  g.add_node(OpKind::LayerNorm, {r1, g2, b2}, h2);
  const int f0 = inter("ffn.matmul", {T, F}), f1 = inter("ffn.biased", {T, F}), f2 = inter("ffn.act", {T, F});
  g.add_node(OpKind::MatMul, {h2, wi}, f0);
  g.add_node(OpKind::Add, {f0, bi}, f1);
  g.add_node(OpKind::Gelu, {f1}, f2);
  const int d0 = inter("ffn.out.matmul", {T, H}), d1 = inter("ffn.out.biased", {T, H});
  g.add_node(OpKind::MatMul, {f2, wf}, d0);
  g.add_node(OpKind::Add, {d0, bf}, d1);
  const int y = g.add_tensor("y", {T, H}, dt, TensorClass::Output);
  g.add_node(OpKind::Add, {d1, r1}, y);
  g.validate();
  return g;
}

Bindings transformer_block_bindings(const OpGraph& g, std::uint64_t seed) {
  auto b = random_bindings(g, seed, -0.05f, 0.05f);
  const auto& mask_info = g.tensor(g.tensor_id("mask"));
  const std::size_t T = mask_info.shape[0];
  std::vector<float> mask(T * T, 0.0f);
  for (std::size_t r = 0; r < T; ++r)
    for (std::size_t c = r + 1; c < T; ++c) mask[r * T + c] = -1e4f;
  b[mask_info.id] = Tensor::from_f32({T, T}, mask, mask_info.dtype);
  const std::size_t H = g.tensor(g.tensor_id("x")).shape[1];
  std::vector<float> scale(T, 1.0f / std::sqrt(static_cast<float>(H)));
  b[g.tensor_id("scale")] = Tensor::from_f32({T}, scale, mask_info.dtype);
  const auto ones = [&](const char* name) {
    const auto& info = g.tensor(g.tensor_id(name));
    b[info.id] = Tensor::from_f32(info.shape, std::vector<float>(info.shape[0], 1.0f), info.dtype);
  };
  ones("ln1.gamma");
  ones("ln2.gamma");
  return b;
}

}  // namespace tinfer

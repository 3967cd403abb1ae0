#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "tinfer/graphopt.hpp"

namespace oracle {

using namespace tinfer;

// Random DAG of MatMul/Add/Mul/Gelu/Softmax/LayerNorm nodes over an m x n
// activation shape with rank-1 biases and square weights, so fusion patterns
// show up often. Unread results become graph outputs.
inline OpGraph random_dag(oracle::Rng& rng, std::size_t max_nodes) {
  const std::size_t m = 1 + rng.below(16), n = 1 + rng.below(16), node_count = 1 + rng.below(max_nodes);
  struct Pending {
    OpKind kind;
    std::vector<int> inputs;
    Tensor::Shape shape;
    OpAttrs attrs;
  };
  OpGraph skeleton;  // inputs and weights only
  std::vector<int> acts, biases, weights;
  for (int i = 0; i < 2; ++i) acts.push_back(skeleton.add_tensor("x" + std::to_string(i), {m, n}, DType::F32, TensorClass::Input));
  for (int i = 0; i < 3; ++i) biases.push_back(skeleton.add_tensor("b" + std::to_string(i), {n}, DType::F32, TensorClass::Weight));
  for (int i = 0; i < 2; ++i) weights.push_back(skeleton.add_tensor("w" + std::to_string(i), {n, n}, DType::F32, TensorClass::Weight));

  std::vector<Pending> pending;
  int next_id = skeleton.tensors().back().id + 1;
  std::vector<int> produced;
  const auto pick = [&](const std::vector<int>& v) { return v[rng.below(v.size())]; };
  for (std::size_t i = 0; i < node_count; ++i) {
    // Prefer the newest result to grow chains.
    const int a = !produced.empty() && rng.below(3) != 0 ? produced.back() : pick(acts);
    const auto other = [&] {
      switch (rng.below(3)) {
        case 0: return pick(biases);
        case 1: return pick(acts);
        default: return produced.empty() ? pick(acts) : pick(produced);
      }
    };
    Pending p{OpKind::Add, {}, {m, n}, {}};
    switch (rng.below(7)) {
      case 0:
      case 1:
        p.kind = OpKind::Add;
        p.inputs = rng.below(4) == 0 ? std::vector<int>{other(), a} : std::vector<int>{a, other()};
        break;
      case 2:
        p.kind = OpKind::Mul;
        p.inputs = {a, other()};
        break;
      case 3:
        p.kind = OpKind::MatMul;
        p.attrs.transpose_b = rng.below(2) == 0;
        p.inputs = {a, pick(weights)};
        break;
      case 4:
        p.kind = OpKind::Gelu;
        p.inputs = {a};
        break;
      case 5:
        p.kind = OpKind::Softmax;
        p.inputs = {a};
        break;
      default:
        p.kind = OpKind::LayerNorm;
        p.inputs = {a, pick(biases), pick(biases)};
        break;
    }
    produced.push_back(next_id++);
    pending.push_back(p);
  }

  OpGraph g = skeleton;
  for (std::size_t i = 0; i < pending.size(); ++i) {
    const int id = produced[i];
    bool read = false;
    for (const auto& p : pending) read = read || std::count(p.inputs.begin(), p.inputs.end(), id) > 0;
    g.add_tensor("t" + std::to_string(i), pending[i].shape, DType::F32,
                 read && rng.below(8) != 0 ? TensorClass::Intermediate : TensorClass::Output);
  }
  for (std::size_t i = 0; i < pending.size(); ++i) g.add_node(pending[i].kind, pending[i].inputs, produced[i], pending[i].attrs);
  g.validate();
  return g;
}

inline bool same_outputs(const ExecResult& a, const ExecResult& b) {
  if (a.outputs.size() != b.outputs.size()) return false;
  for (const auto& [id, t] : a.outputs) {
    if (!b.outputs.count(id) || !(b.outputs.at(id) == t)) return false;
  }
  return true;
}

// Last reader index recomputed by scanning every node's inputs.
inline std::map<int, std::pair<std::size_t, std::size_t>> lifetime_oracle(const OpGraph& g) {
  std::map<int, std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < g.nodes().size(); ++i) {
    const int t = g.nodes()[i].output;
    if (g.tensor(t).cls != TensorClass::Intermediate) continue;
    std::size_t last = i;
    for (std::size_t j = 0; j < g.nodes().size(); ++j)
      for (int in : g.nodes()[j].inputs)
        if (in == t) last = std::max(last, j);
    out[t] = {i, last};
  }
  return out;
}

struct Item {
  std::size_t def, last, bytes;
};

inline std::vector<Item> items_of(const OpGraph& g) {
  std::vector<Item> items;
  for (const auto& [t, span] : lifetime_oracle(g)) items.push_back({span.first, span.second, g.tensor(t).bytes()});
  return items;
}

inline bool conflict(const Item& a, const Item& b) { return !(a.last < b.def || b.last < a.def); }

// Fewest buffers in any conflict-free assignment (exhaustive search).
inline std::size_t min_buffer_count(const std::vector<Item>& items) {
  for (std::size_t k = 1;; ++k) {
    std::vector<int> color(items.size(), -1);
    std::function<bool(std::size_t)> place = [&](std::size_t i) {
      if (i == items.size()) return true;
      for (int c = 0; c < static_cast<int>(k); ++c) {
        bool ok = true;
        for (std::size_t j = 0; j < i && ok; ++j) ok = color[j] != c || !conflict(items[i], items[j]);
        if (!ok) continue;
        color[i] = c;
        if (place(i + 1)) return true;
        // Symmetry: an unused color is as good as any other unused one.
        bool fresh = true;
        for (std::size_t j = 0; j < i; ++j) fresh = fresh && color[j] != c;
        color[i] = -1;
        if (fresh) break;
      }
      return false;
    };
    if (items.empty() || place(0)) return items.empty() ? 0 : k;
  }
}

// Smallest sum over buffers of the largest member, over every conflict-free
// assignment, by branch and bound on the running cost.
inline std::size_t min_total_bytes(std::vector<Item> items) {
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.bytes > b.bytes; });
  std::size_t best = 0;
  for (const auto& it : items) best += it.bytes;
  std::vector<std::vector<std::size_t>> members;
  std::function<void(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t cost) {
    if (cost >= best) return;
    if (i == items.size()) {
      best = cost;
      return;
    }
    // Items arrive largest first, so joining an existing buffer never grows it.
    for (std::size_t b = 0; b < members.size(); ++b) {
      bool ok = true;
      for (std::size_t j : members[b]) ok = ok && !conflict(items[i], items[j]);
      if (!ok) continue;
      members[b].push_back(i);
      go(i + 1, cost);
      members[b].pop_back();
    }
    members.push_back({i});
    go(i + 1, cost + items[i].bytes);
    members.pop_back();
  };
  go(0, 0);
  return best;
}

}  // namespace oracle

#include "tinfer/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "tinfer/random.hpp"

namespace tinfer {

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::Config, what); };
  if (vocab_size == 0 || hidden_size == 0 || num_layers == 0 || num_heads == 0 || head_dim == 0 || ffn_size == 0) {
    fail("all sizes must be positive");
  }
  if (hidden_size != num_heads * head_dim) {
    fail("hidden_size (" + std::to_string(hidden_size) + ") != num_heads * head_dim (" +
         std::to_string(num_heads * head_dim) + ")");
  }
  if (max_position < 1) fail("max_position must be >= 1");
  if (eos_token < 0 || pad_token < 0) fail("special token ids must be non-negative");
  if (vocab_size <= static_cast<std::size_t>(std::max(eos_token, pad_token))) {
    fail("vocab_size must exceed eos_token and pad_token");
  }
}

namespace {
const char* const kConfigFields[] = {"vocab_size", "hidden_size",  "num_layers", "num_heads", "head_dim",
                                     "ffn_size",   "max_position", "dtype",      "eos_token", "pad_token"};
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["vocab_size"] = vocab_size;
  j["hidden_size"] = hidden_size;
  j["num_layers"] = num_layers;
  j["num_heads"] = num_heads;
  j["head_dim"] = head_dim;
  j["ffn_size"] = ffn_size;
  j["max_position"] = max_position;
  j["dtype"] = std::string(to_string(dtype));
  j["eos_token"] = eos_token;
  j["pad_token"] = pad_token;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("invalid config JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::Config, "config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(kConfigFields), std::end(kConfigFields), key) == std::end(kConfigFields)) {
      throw Error(ErrorKind::Config, "unknown config field '" + key + "'");
    }
  }
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.hidden_size = j.at("hidden_size").get<std::size_t>();
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    c.ffn_size = j.at("ffn_size").get<std::size_t>();
    c.max_position = j.at("max_position").get<std::size_t>();
    c.dtype = parse_dtype(j.at("dtype").get<std::string>());
    c.eos_token = j.at("eos_token").get<TokenId>();
    c.pad_token = j.at("pad_token").get<TokenId>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("bad config field: ") + e.what());
  } catch (const Error& e) {
    throw Error(ErrorKind::Config, e.what());
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::reference() {
  ModelConfig c;
  c.vocab_size = 4096;
  c.hidden_size = 128;
  c.num_layers = 4;
  c.num_heads = 4;
  c.head_dim = 32;
  c.ffn_size = 512;
  c.max_position = 512;
  c.dtype = DType::F32;
  c.eos_token = 1;
  c.pad_token = 2;
  return c;
}

// ---------------------------------------------------------------------------
// Model weights

namespace {

struct WeightSlot {
  std::string name;
  Tensor::Shape shape;
  Tensor* (*get)(Model&, std::size_t layer);
  std::size_t layer;
};

std::vector<WeightSlot> weight_layout(const ModelConfig& c) {
  const std::size_t h = c.hidden_size, f = c.ffn_size;
  std::vector<WeightSlot> slots;
  slots.push_back({"token_embedding", {c.vocab_size, h}, [](Model& m, std::size_t) { return &m.token_embedding; }, 0});
  slots.push_back(
      {"position_embedding", {c.max_position, h}, [](Model& m, std::size_t) { return &m.position_embedding; }, 0});
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    slots.push_back({p + "ln1.gamma", {h}, [](Model& m, std::size_t i) { return &m.layers[i].ln1_gamma; }, l});
    slots.push_back({p + "ln1.beta", {h}, [](Model& m, std::size_t i) { return &m.layers[i].ln1_beta; }, l});
    slots.push_back({p + "attn.qkv.weight", {h, 3 * h}, [](Model& m, std::size_t i) { return &m.layers[i].w_qkv; }, l});
    slots.push_back({p + "attn.qkv.bias", {3 * h}, [](Model& m, std::size_t i) { return &m.layers[i].b_qkv; }, l});
    slots.push_back({p + "attn.out.weight", {h, h}, [](Model& m, std::size_t i) { return &m.layers[i].w_out; }, l});
    slots.push_back({p + "attn.out.bias", {h}, [](Model& m, std::size_t i) { return &m.layers[i].b_out; }, l});
    slots.push_back({p + "ln2.gamma", {h}, [](Model& m, std::size_t i) { return &m.layers[i].ln2_gamma; }, l});
    slots.push_back({p + "ln2.beta", {h}, [](Model& m, std::size_t i) { return &m.layers[i].ln2_beta; }, l});
    slots.push_back({p + "ffn.in.weight", {h, f}, [](Model& m, std::size_t i) { return &m.layers[i].w_ffn_in; }, l});
    slots.push_back({p + "ffn.in.bias", {f}, [](Model& m, std::size_t i) { return &m.layers[i].b_ffn_in; }, l});
    slots.push_back(
        {p + "ffn.out.weight", {f, h}, [](Model& m, std::size_t i) { return &m.layers[i].w_ffn_out; }, l});
    slots.push_back({p + "ffn.out.bias", {h}, [](Model& m, std::size_t i) { return &m.layers[i].b_ffn_out; }, l});
  }
  slots.push_back({"final_ln.gamma", {h}, [](Model& m, std::size_t) { return &m.final_ln_gamma; }, 0});
  slots.push_back({"final_ln.beta", {h}, [](Model& m, std::size_t) { return &m.final_ln_beta; }, 0});
  slots.push_back({"lm_head", {h, c.vocab_size}, [](Model& m, std::size_t) { return &m.lm_head; }, 0});
  return slots;
}

}  // namespace

std::vector<NamedTensor> Model::named_tensors() const {
  auto& self = const_cast<Model&>(*this);
  std::vector<NamedTensor> out;
  for (const auto& slot : weight_layout(config)) out.push_back({slot.name, *slot.get(self, slot.layer)});
  return out;
}

Model Model::from_named(const ModelConfig& config, std::vector<NamedTensor> tensors) {
  config.validate();
  std::map<std::string, Tensor> by_name;
  for (auto& nt : tensors) {
    if (!by_name.emplace(nt.name, std::move(nt.tensor)).second) {
      throw Error(ErrorKind::Shape, "duplicate tensor '" + nt.name + "'");
    }
  }
  Model model;
  model.config = config;
  model.layers.resize(config.num_layers);
  const auto layout = weight_layout(config);
  if (by_name.size() != layout.size()) {
    throw Error(ErrorKind::Shape, "expected " + std::to_string(layout.size()) + " tensors, found " +
                                      std::to_string(by_name.size()));
  }
  for (const auto& slot : layout) {
    auto it = by_name.find(slot.name);
    if (it == by_name.end()) throw Error(ErrorKind::Shape, "missing tensor '" + slot.name + "'");
    *slot.get(model, slot.layer) = std::move(it->second);
  }
  model.validate();
  return model;
}

void Model::validate() const {
  config.validate();
  if (layers.size() != config.num_layers) throw Error(ErrorKind::Shape, "layer count does not match config");
  auto& self = const_cast<Model&>(*this);
  for (const auto& slot : weight_layout(config)) {
    const Tensor& t = *slot.get(self, slot.layer);
    if (t.shape() != slot.shape) throw Error(ErrorKind::Shape, "tensor '" + slot.name + "' has the wrong shape");
    if (t.dtype() != config.dtype) throw Error(ErrorKind::Shape, "tensor '" + slot.name + "' has the wrong dtype");
  }
}

Model init_random(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  SplitMix64 rng(seed);
  Model model;
  model.config = config;
  model.layers.resize(config.num_layers);
  std::vector<float> values;
  for (const auto& slot : weight_layout(config)) {
    Tensor::Shape shape = slot.shape;
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    values.resize(n);
    for (auto& v : values) v = rng.uniform(-0.05f, 0.05f);
    *slot.get(model, slot.layer) = Tensor::from_f32(std::move(shape), values, config.dtype);
  }
  return model;
}

Model cast_model(const Model& model, DType dtype) {
  auto named = model.named_tensors();
  for (auto& nt : named) nt.tensor = cast(nt.tensor, dtype);
  ModelConfig config = model.config;
  config.dtype = dtype;
  return Model::from_named(config, std::move(named));
}

std::filesystem::path config_path_for(const std::filesystem::path& model_path) {
  auto p = model_path;
  p += ".json";
  return p;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  save_tinf(path, model.named_tensors());
  std::ofstream out(config_path_for(path), std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + config_path_for(path).string());
  out << model.config.to_json() << "\n";
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(config_path_for(path));
  if (!in) throw Error(ErrorKind::Io, "cannot open " + config_path_for(path).string());
  std::stringstream ss;
  ss << in.rdbuf();
  return Model::from_named(ModelConfig::from_json(ss.str()), load_tinf(path));
}

// ---------------------------------------------------------------------------
// KVCache

KVCache::KVCache(const ModelConfig& config) : KVCache(config, config.max_position) {}

KVCache::KVCache(const ModelConfig& config, std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw Error(ErrorKind::Capacity, "cache capacity must be positive");
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    keys_.emplace_back(Tensor::Shape{config.num_heads, capacity, config.head_dim}, config.dtype);
    values_.emplace_back(Tensor::Shape{config.num_heads, capacity, config.head_dim}, config.dtype);
  }
}

std::vector<std::byte> KVCache::filled_bytes() const {
  // Slot-major so that an earlier snapshot is a prefix of a later one.
  std::vector<std::byte> out;
  for (std::size_t s = 0; s < len_; ++s) {
    for (std::size_t l = 0; l < keys_.size(); ++l) {
      for (const Tensor* t : {&keys_[l], &values_[l]}) {
        const std::size_t heads = t->dim(0), head_dim = t->dim(2), esz = dtype_size(t->dtype());
        const auto bytes = t->bytes();
        for (std::size_t h = 0; h < heads; ++h) {
          const auto* begin = bytes.data() + (h * capacity_ + s) * head_dim * esz;
          out.insert(out.end(), begin, begin + head_dim * esz);
        }
      }
    }
  }
  return out;
}

struct CacheAccess {
  template <typename Scalar>
  static Scalar* keys(KVCache& c, std::size_t layer) {
    return c.keys_[layer].mutable_data<Scalar>().data();
  }
  template <typename Scalar>
  static Scalar* values(KVCache& c, std::size_t layer) {
    return c.values_[layer].mutable_data<Scalar>().data();
  }
  static void advance(KVCache& c, std::size_t n) { c.len_ += n; }
};

// ---------------------------------------------------------------------------
// Forward engine

OpCounters& op_counters() {
  thread_local OpCounters counters;
  return counters;
}

namespace {

struct SeqSlot {
  KVCache* cache;
  std::size_t pad;  // leading slots holding padding, masked out of attention
};

template <typename Scalar>
struct Workspace {
  std::vector<Scalar> x, h, qkv, attn, proj, ffn, last;
  std::vector<float> scores, head_acc;
};

// With an arena the buffer only ever grows and is reused as-is; without one
// every op gets a fresh zeroed allocation.
template <typename Scalar>
std::span<Scalar> acquire(std::vector<Scalar>& buffer, std::size_t n, bool arena) {
  if (arena) {
    if (buffer.size() < n) buffer.resize(n);
  } else {
    buffer = std::vector<Scalar>(n);
  }
  return {buffer.data(), n};
}

template <typename Scalar>
std::span<const Scalar> cspan(std::span<Scalar> s) {
  return {s.data(), s.size()};
}

/// out (= / +=) act(in * w + bias). With `residual_into_out` the result is
/// added onto the existing contents of `out`.
template <typename Scalar>
void linear(std::span<const Scalar> in, std::size_t rows, const Tensor& w, const Tensor& bias, Activation act,
            bool residual_into_out, std::span<Scalar> out, std::vector<Scalar>& scratch, const ExecOptions& opts) {
  const std::size_t k = w.dim(0), n = w.dim(1);
  auto& counters = op_counters();
  counters.gemm_macs += rows * k * n;
  if (opts.fused) {
    kernels::Epilogue<Scalar> ep;
    ep.bias = bias.data<Scalar>();
    ep.act = act;
    if (residual_into_out) ep.residual = cspan(out);
    kernels::gemm<Scalar>(in, w.data<Scalar>(), rows, k, n, out, ep);
    counters.kernel_launches += 1;
    return;
  }
  auto tmp = residual_into_out ? acquire(scratch, rows * n, opts.arena) : out;
  kernels::gemm<Scalar>(in, w.data<Scalar>(), rows, k, n, tmp);
  const auto b = bias.data<Scalar>();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) tmp[r * n + j] = from_float<Scalar>(to_float(tmp[r * n + j]) + to_float(b[j]));
  counters.kernel_launches += 2;
  if (act == Activation::Gelu) {
    for (auto& v : tmp) v = from_float<Scalar>(gelu(to_float(v)));
    counters.kernel_launches += 1;
  }
  if (residual_into_out) {
    for (std::size_t i = 0; i < rows * n; ++i) out[i] = from_float<Scalar>(to_float(out[i]) + to_float(tmp[i]));
    counters.kernel_launches += 1;
  }
}

template <typename Scalar>
void attend(const Scalar* q, const Scalar* keys, const Scalar* values, std::size_t lo, std::size_t hi,
            std::size_t head_dim, float scale, std::vector<float>& scores, std::vector<float>& acc, Scalar* out) {
  const std::size_t n = hi - lo + 1;
  scores.resize(n);
  for (std::size_t j = 0; j < n; ++j) scores[j] = kernels::dot(q, keys + (lo + j) * head_dim, head_dim) * scale;
  kernels::softmax(std::span<float>(scores.data(), n));
  acc.assign(head_dim, 0.0f);
  for (std::size_t j = 0; j < n; ++j) {
    const float p = scores[j];
    const Scalar* v = values + (lo + j) * head_dim;
    for (std::size_t d = 0; d < head_dim; ++d) acc[d] = kernels::madd(p, to_float(v[d]), acc[d]);
  }
  for (std::size_t d = 0; d < head_dim; ++d) out[d] = from_float<Scalar>(acc[d]);
}

template <typename Scalar>
void embed_row(const Model& model, TokenId id, std::size_t position, Scalar* out) {
  const auto& c = model.config;
  if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
    throw Error(ErrorKind::Vocab, "token id " + std::to_string(id) + " outside vocab of " +
                                      std::to_string(c.vocab_size));
  }
  if (position >= c.max_position) {
    throw Error(ErrorKind::Position, "position " + std::to_string(position) + " exceeds max_position " +
                                         std::to_string(c.max_position));
  }
  const std::size_t h = c.hidden_size;
  const Scalar* tok = model.token_embedding.data<Scalar>().data() + static_cast<std::size_t>(id) * h;
  const Scalar* pos = model.position_embedding.data<Scalar>().data() + position * h;
  for (std::size_t j = 0; j < h; ++j) out[j] = from_float<Scalar>(to_float(tok[j]) + to_float(pos[j]));
}

/// Runs `n` new slots for every sequence in `seqs` (tokens laid out
/// sequence-major) starting at `start_slot`, appending keys/values to each
/// sequence's cache. Produces logits for every row or only for each
/// sequence's last row.
template <typename Scalar>
Tensor run_rows(const Model& model, std::span<const TokenId> tokens, std::size_t n, std::span<const SeqSlot> seqs,
                std::size_t start_slot, bool all_logits, const ExecOptions& opts, Workspace<Scalar>& ws) {
  const auto& c = model.config;
  const std::size_t batch = seqs.size(), rows = batch * n, h = c.hidden_size, hd = c.head_dim;
  auto& counters = op_counters();

  for (const auto& s : seqs) {
    if (s.cache->len() != start_slot) throw Error(ErrorKind::Capacity, "cache length out of step with batch");
    if (start_slot + n > s.cache->capacity()) {
      throw Error(ErrorKind::Capacity, "cache full: capacity " + std::to_string(s.cache->capacity()));
    }
  }

  auto x = acquire(ws.x, rows * h, opts.arena);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t slot = start_slot + t, r = b * n + t;
      if (slot < seqs[b].pad) {
        embed_row(model, c.pad_token, 0, x.data() + r * h);
      } else {
        embed_row(model, tokens[r], slot - seqs[b].pad, x.data() + r * h);
      }
    }
  }
  counters.kernel_launches += 1;

  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const LayerWeights& w = model.layers[l];

    auto hbuf = acquire(ws.h, rows * h, opts.arena);
    kernels::layer_norm_rows<Scalar>(cspan(x), rows, h, w.ln1_gamma.data<Scalar>(), w.ln1_beta.data<Scalar>(),
                                     kLayerNormEps, hbuf);
    auto qkv = acquire(ws.qkv, rows * 3 * h, opts.arena);
    linear<Scalar>(cspan(hbuf), rows, w.w_qkv, w.b_qkv, Activation::None, false, qkv, ws.proj, opts);
    counters.kernel_launches += 1;

    for (std::size_t b = 0; b < batch; ++b) {
      KVCache& cache = *seqs[b].cache;
      const std::size_t cap = cache.capacity();
      Scalar* kc = CacheAccess::keys<Scalar>(cache, l);
      Scalar* vc = CacheAccess::values<Scalar>(cache, l);
      for (std::size_t t = 0; t < n; ++t) {
        const Scalar* row = qkv.data() + (b * n + t) * 3 * h;
        const std::size_t slot = start_slot + t;
        for (std::size_t head = 0; head < c.num_heads; ++head) {
          std::copy_n(row + h + head * hd, hd, kc + (head * cap + slot) * hd);
          std::copy_n(row + 2 * h + head * hd, hd, vc + (head * cap + slot) * hd);
        }
      }
    }

    auto attn = acquire(ws.attn, rows * h, opts.arena);
    for (std::size_t b = 0; b < batch; ++b) {
      KVCache& cache = *seqs[b].cache;
      const std::size_t cap = cache.capacity(), pad = seqs[b].pad;
      const Scalar* kc = CacheAccess::keys<Scalar>(cache, l);
      const Scalar* vc = CacheAccess::values<Scalar>(cache, l);
      for (std::size_t t = 0; t < n; ++t) {
        const std::size_t slot = start_slot + t, r = b * n + t;
        const std::size_t lo = slot < pad ? slot : pad;
        for (std::size_t head = 0; head < c.num_heads; ++head) {
          attend<Scalar>(qkv.data() + r * 3 * h + head * hd, kc + head * cap * hd, vc + head * cap * hd, lo, slot,
                         hd, scale, ws.scores, ws.head_acc, attn.data() + r * h + head * hd);
          counters.attention_macs += 2 * (slot - lo + 1) * hd;
        }
      }
    }
    counters.kernel_launches += 1;

    linear<Scalar>(cspan(attn), rows, w.w_out, w.b_out, Activation::None, true, x, ws.proj, opts);

    hbuf = acquire(ws.h, rows * h, opts.arena);
    kernels::layer_norm_rows<Scalar>(cspan(x), rows, h, w.ln2_gamma.data<Scalar>(), w.ln2_beta.data<Scalar>(),
                                     kLayerNormEps, hbuf);
    counters.kernel_launches += 1;
    auto ffn = acquire(ws.ffn, rows * c.ffn_size, opts.arena);
    linear<Scalar>(cspan(hbuf), rows, w.w_ffn_in, w.b_ffn_in, Activation::Gelu, false, ffn, ws.proj, opts);
    linear<Scalar>(cspan(ffn), rows, w.w_ffn_out, w.b_ffn_out, Activation::None, true, x, ws.proj, opts);
  }
  for (const auto& s : seqs) CacheAccess::advance(*s.cache, n);

  const std::size_t out_rows = all_logits ? rows : batch;
  std::span<const Scalar> final_in = cspan(x);
  if (!all_logits && n > 1) {
    auto last = acquire(ws.last, batch * h, opts.arena);
    for (std::size_t b = 0; b < batch; ++b) std::copy_n(x.data() + (b * n + n - 1) * h, h, last.data() + b * h);
    final_in = cspan(last);
  }
  auto hbuf = acquire(ws.h, out_rows * h, opts.arena);
  kernels::layer_norm_rows<Scalar>(final_in.first(out_rows * h), out_rows, h, model.final_ln_gamma.data<Scalar>(),
                                   model.final_ln_beta.data<Scalar>(), kLayerNormEps, hbuf);
  Tensor logits({out_rows, c.vocab_size}, c.dtype);
  kernels::gemm<Scalar>(cspan(hbuf), model.lm_head.data<Scalar>(), out_rows, h, c.vocab_size,
                        logits.mutable_data<Scalar>());
  counters.gemm_macs += out_rows * h * c.vocab_size;
  counters.kernel_launches += 2;
  return logits;
}

template <typename Scalar>
Tensor run_single(const Model& model, std::span<const TokenId> tokens, KVCache& cache, bool all_logits,
                  const ExecOptions& opts) {
  Workspace<Scalar> ws;
  const SeqSlot seq{&cache, 0};
  return run_rows<Scalar>(model, tokens, tokens.size(), std::span<const SeqSlot>(&seq, 1), cache.len(), all_logits,
                          opts, ws);
}

Tensor dispatch_single(const Model& model, std::span<const TokenId> tokens, KVCache& cache, bool all_logits,
                       const ExecOptions& opts) {
  return model.config.dtype == DType::F16 ? run_single<Half>(model, tokens, cache, all_logits, opts)
                                          : run_single<float>(model, tokens, cache, all_logits, opts);
}

void check_prompt(const ModelConfig& c, std::size_t prompt_len, std::size_t max_new_tokens) {
  if (prompt_len == 0) throw Error(ErrorKind::Parameter, "prompt must contain at least one token");
  if (prompt_len + max_new_tokens > c.max_position) {
    throw Error(ErrorKind::Position, "prompt length " + std::to_string(prompt_len) + " + " +
                                         std::to_string(max_new_tokens) + " new tokens exceeds max_position " +
                                         std::to_string(c.max_position));
  }
}

template <typename Scalar>
std::vector<std::vector<TokenId>> generate_cached(const Model& model, std::span<const std::vector<TokenId>> prompts,
                                                  std::size_t max_new_tokens, const ExecOptions& opts) {
  const auto& c = model.config;
  const std::size_t batch = prompts.size();
  std::size_t longest = 0;
  for (const auto& p : prompts) {
    check_prompt(c, p.size(), max_new_tokens);
    longest = std::max(longest, p.size());
  }
  std::vector<std::vector<TokenId>> generated(batch);
  if (batch == 0 || max_new_tokens == 0) return generated;

  std::vector<KVCache> caches;
  caches.reserve(batch);
  std::vector<SeqSlot> seqs;
  std::vector<TokenId> tokens(batch * longest, c.pad_token);
  for (std::size_t b = 0; b < batch; ++b) {
    caches.emplace_back(c);
    const std::size_t pad = longest - prompts[b].size();
    seqs.push_back({&caches[b], pad});
    std::copy(prompts[b].begin(), prompts[b].end(), tokens.begin() + b * longest + pad);
  }

  Workspace<Scalar> ws;
  Tensor logits = run_rows<Scalar>(model, tokens, longest, seqs, 0, false, opts, ws);
  std::vector<std::size_t> active(batch);
  for (std::size_t b = 0; b < batch; ++b) active[b] = b;
  std::size_t slot = longest;
  std::vector<float> row(c.vocab_size);

  while (!active.empty()) {
    std::vector<std::size_t> still;
    std::vector<SeqSlot> step_seqs;
    std::vector<TokenId> step_tokens;
    const auto values = logits.data<Scalar>();
    for (std::size_t i = 0; i < active.size(); ++i) {
      for (std::size_t j = 0; j < c.vocab_size; ++j) row[j] = to_float(values[i * c.vocab_size + j]);
      const TokenId next = argmax(row);
      const std::size_t b = active[i];
      generated[b].push_back(next);
      if (next != c.eos_token && generated[b].size() < max_new_tokens) {
        still.push_back(b);
        step_seqs.push_back(seqs[b]);
        step_tokens.push_back(next);
      }
    }
    active = std::move(still);
    if (active.empty()) break;
    logits = run_rows<Scalar>(model, step_tokens, 1, step_seqs, slot, false, opts, ws);
    ++slot;
  }
  return generated;
}

}  // namespace

Tensor embed(const Model& model, std::span<const TokenId> token_ids, std::size_t start_position) {
  const auto& c = model.config;
  if (token_ids.empty()) throw Error(ErrorKind::Parameter, "embed needs at least one token");
  if (start_position + token_ids.size() > c.max_position) {
    throw Error(ErrorKind::Position, "positions up to " + std::to_string(start_position + token_ids.size()) +
                                         " exceed max_position " + std::to_string(c.max_position));
  }
  Tensor out({token_ids.size(), c.hidden_size}, c.dtype);
  for (std::size_t t = 0; t < token_ids.size(); ++t) {
    if (c.dtype == DType::F16) {
      embed_row<Half>(model, token_ids[t], start_position + t, out.mutable_data<Half>().data() + t * c.hidden_size);
    } else {
      embed_row<float>(model, token_ids[t], start_position + t, out.mutable_data<float>().data() + t * c.hidden_size);
    }
  }
  return out;
}

Tensor forward_full(const Model& model, std::span<const TokenId> token_ids, const ExecOptions& options) {
  const auto& c = model.config;
  if (token_ids.empty()) throw Error(ErrorKind::Parameter, "forward_full needs at least one token");
  if (token_ids.size() > c.max_position) {
    throw Error(ErrorKind::Position, "sequence of " + std::to_string(token_ids.size()) +
                                         " tokens exceeds max_position " + std::to_string(c.max_position));
  }
  KVCache scratch(c, token_ids.size());
  return dispatch_single(model, token_ids, scratch, true, options);
}

Tensor decode_step(const Model& model, TokenId token_id, KVCache& cache, const ExecOptions& options) {
  if (cache.len() >= cache.capacity()) {
    throw Error(ErrorKind::Capacity, "cache full at " + std::to_string(cache.capacity()) + " positions");
  }
  return dispatch_single(model, std::span<const TokenId>(&token_id, 1), cache, false, options);
}

Tensor prefill(const Model& model, std::span<const TokenId> prompt, KVCache& cache, const ExecOptions& options) {
  if (prompt.empty()) throw Error(ErrorKind::Parameter, "prefill needs at least one token");
  return dispatch_single(model, prompt, cache, false, options);
}

TokenId argmax(std::span<const float> logits) {
  if (logits.empty()) throw Error(ErrorKind::Parameter, "argmax of empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

TokenId argmax_last_row(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<float> row(cols);
  for (std::size_t j = 0; j < cols; ++j) row[j] = logits.at((rows - 1) * cols + j);
  return argmax(row);
}

std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> prompt, std::size_t max_new_tokens,
                                   bool use_cache) {
  ExecOptions options;
  options.use_cache = use_cache;
  return greedy_decode(model, prompt, max_new_tokens, options);
}

std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> prompt, std::size_t max_new_tokens,
                                   const ExecOptions& options) {
  check_prompt(model.config, prompt.size(), max_new_tokens);
  std::vector<TokenId> sequence(prompt.begin(), prompt.end());
  if (options.use_cache) {
    const std::vector<TokenId> p(prompt.begin(), prompt.end());
    auto generated = generate_batch(model, std::span<const std::vector<TokenId>>(&p, 1), max_new_tokens, options);
    sequence.insert(sequence.end(), generated[0].begin(), generated[0].end());
    return sequence;
  }
  for (std::size_t i = 0; i < max_new_tokens; ++i) {
    const TokenId next = argmax_last_row(forward_full(model, sequence, options));
    sequence.push_back(next);
    if (next == model.config.eos_token) break;
  }
  return sequence;
}

Tensor stepwise_logits(const Model& model, std::span<const TokenId> sequence, std::size_t prompt_len,
                       const ExecOptions& options) {
  if (prompt_len == 0 || prompt_len >= sequence.size()) {
    throw Error(ErrorKind::Parameter, "stepwise_logits needs a prompt and at least one following token");
  }
  const std::size_t steps = sequence.size() - prompt_len, vocab = model.config.vocab_size;
  Tensor out({steps, vocab}, DType::F32);
  auto dst = out.mutable_data<float>();
  KVCache cache(model.config);
  Tensor logits = prefill(model, sequence.first(prompt_len), cache, options);
  for (std::size_t s = 0;; ++s) {
    auto row = logits.to_f32();
    std::copy(row.begin(), row.end(), dst.begin() + static_cast<std::ptrdiff_t>(s * vocab));
    if (s + 1 == steps) break;
    logits = decode_step(model, sequence[prompt_len + s], cache, options);
  }
  return out;
}

std::vector<std::vector<TokenId>> generate_batch(const Model& model, std::span<const std::vector<TokenId>> prompts,
                                                 std::size_t max_new_tokens, const ExecOptions& options) {
  if (!options.use_cache) {
    std::vector<std::vector<TokenId>> out;
    for (const auto& p : prompts) {
      auto full = greedy_decode(model, p, max_new_tokens, options);
      out.emplace_back(full.begin() + static_cast<std::ptrdiff_t>(p.size()), full.end());
    }
    return out;
  }
  return model.config.dtype == DType::F16 ? generate_cached<Half>(model, prompts, max_new_tokens, options)
                                          : generate_cached<float>(model, prompts, max_new_tokens, options);
}

}  // namespace tinfer

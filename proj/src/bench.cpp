#include "tinfer/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <set>

#include <json.hpp>

#include "tinfer/graphopt.hpp"
#include "tinfer/random.hpp"

namespace tinfer {

namespace {

constexpr Stage kLadder[] = {Stage::Baseline, Stage::FastTransformer, Stage::Pruning, Stage::Pipeline};

// P(L = k) for a sum of three geometrics on {1, 2, ...} with success rate p.
std::vector<double> length_pmf(double p, std::size_t max) {
  std::vector<double> pmf(max + 1, 0.0);
  for (std::size_t k = 3; k <= max; ++k) {
    const double ways = 0.5 * double(k - 1) * double(k - 2);
    pmf[k] = ways * p * p * p * std::pow(1.0 - p, double(k - 3));
  }
  return pmf;
}

double truncated_mean(double p, std::size_t max) {
  const auto pmf = length_pmf(p, max);
  double mass = 0, sum = 0;
  for (std::size_t k = 0; k <= max; ++k) {
    mass += pmf[k];
    sum += pmf[k] * double(k);
  }
  return sum / mass;
}

// Success rate whose truncated mean equals `mean`; the mean falls as p rises.
double solve_success_rate(double mean, std::size_t max) {
  double lo = 1e-6, hi = 1.0;
  if (!(mean >= 3.0) || mean > truncated_mean(lo, max)) {
    throw Error(ErrorKind::Parameter, "length mean " + std::to_string(mean) + " is not reachable with max " +
                                          std::to_string(max));
  }
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (truncated_mean(mid, max) > mean ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::size_t geometric(SplitMix64& rng, double p) {
  if (p >= 1.0) return 1;
  const double u = 1.0 - rng.uniform();  // (0, 1]
  return 1 + static_cast<std::size_t>(std::floor(std::log(u) / std::log1p(-p)));
}

bool same_outputs(const std::vector<WorkItem>& a, const std::vector<WorkItem>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].sample_index != b[i].sample_index || a[i].generated_ids != b[i].generated_ids ||
        a[i].output_text != b[i].output_text) {
      return false;
    }
  }
  return true;
}

[[noreturn]] void fail_check(Stage stage, const std::string& what) {
  throw Error(ErrorKind::Correctness, std::string(to_string(stage)) + ": " + what);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::size_t longest_prompt(const Tokenizer& tokenizer, std::span<const std::string> texts) {
  std::size_t longest = 0;
  for (const auto& t : texts) longest = std::max(longest, tokenizer.encode(t).size());
  return longest;
}

Model as_dtype(const Model& model, DType dtype) {
  return model.config.dtype == dtype ? model : cast_model(model, dtype);
}

}  // namespace

Vocab synthetic_vocab(std::size_t size, std::uint64_t seed) {
  if (size < 4) throw Error(ErrorKind::Parameter, "synthetic vocab needs at least 4 tokens");
  SplitMix64 rng(seed);
  std::vector<std::string> tokens{"<unk>", "<eos>", "<pad>"};
  std::set<std::string> seen;
  while (tokens.size() < size) {
    std::string word;
    for (std::size_t len = 2 + rng.below(7); len > 0; --len) word += static_cast<char>('a' + rng.below(26));
    word += ' ';
    if (seen.insert(word).second) tokens.push_back(std::move(word));
  }
  return Vocab(std::move(tokens), SpecialIds{0, 1, 2});
}

std::vector<std::string> gen_dataset(const Vocab& vocab, std::size_t n, std::uint64_t seed,
                                     const LengthDistribution& lengths, std::size_t hot_words) {
  if (n == 0) throw Error(ErrorKind::Parameter, "dataset size must be at least 1");
  if (lengths.max < 3) throw Error(ErrorKind::Parameter, "max length must be at least 3");
  const std::size_t words = vocab.size() > 3 ? vocab.size() - 3 : 0;
  if (hot_words == 0 || hot_words > words) {
    throw Error(ErrorKind::Parameter, "hot_words must be in [1, " + std::to_string(words) + "]");
  }
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < vocab.size() && ids.size() < hot_words; ++i) {
    if (!vocab.is_special(TokenId(i))) ids.push_back(TokenId(i));
  }
  const double p = solve_success_rate(lengths.mean, lengths.max);

  std::vector<double> cdf(hot_words);
  double total = 0;
  for (std::size_t r = 0; r < hot_words; ++r) cdf[r] = total += std::pow(double(r + 1), -1.1);

  SplitMix64 rng(seed);
  std::vector<std::string> texts(n);
  for (auto& text : texts) {
    std::size_t len;
    do {
      len = geometric(rng, p) + geometric(rng, p) + geometric(rng, p);
    } while (len > lengths.max);
    for (std::size_t k = 0; k < len; ++k) {
      const double u = rng.uniform() * total;
      const std::size_t r = std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(),
                                                  hot_words - 1);
      text += vocab.token(ids[r]);
    }
  }
  return texts;
}

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::Baseline: return "baseline";
    case Stage::FastTransformer: return "fast_transformer";
    case Stage::Pruning: return "pruning";
    case Stage::Pipeline: return "pipeline";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  for (Stage s : kLadder) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorKind::Parameter, "unknown stage '" + std::string(name) + "'");
}

std::vector<Stage> parse_stages(std::string_view list) {
  std::vector<Stage> stages;
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t comma = std::min(list.find(',', start), list.size());
    stages.push_back(parse_stage(list.substr(start, comma - start)));
    start = comma + 1;
  }
  check_ladder(stages);
  return stages;
}

void check_ladder(std::span<const Stage> stages) {
  if (stages.empty() || stages.size() > std::size(kLadder) ||
      !std::equal(stages.begin(), stages.end(), std::begin(kLadder))) {
    throw Error(ErrorKind::Parameter, "stages must be a prefix of baseline,fast_transformer,pruning,pipeline");
  }
}

std::string config_hash(const ModelConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : config.to_json()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

StageSetup::StageSetup(Stage stage, const Model& model, const Vocab& vocab, std::span<const std::string> texts,
                       const BenchSettings& settings)
    : stage_(stage), tokenizer_(vocab) {
  if (vocab.size() != model.config.vocab_size) {
    throw Error(ErrorKind::Shape, "vocab has " + std::to_string(vocab.size()) + " tokens, model expects " +
                                      std::to_string(model.config.vocab_size));
  }
  const DType dtype = stage == Stage::Baseline || settings.fp32_ladder ? DType::F32 : DType::F16;
  pipeline_.max_new_tokens = settings.max_new_tokens;
  pipeline_.queue_capacity = settings.queue_capacity;
  pipeline_.bucket_width = settings.bucket_width;
  pipeline_.max_batch_size = stage == Stage::Pipeline ? settings.max_batch_size : 1;
  pipeline_.window = 4 * pipeline_.max_batch_size;
  pipeline_.exec = stage == Stage::Baseline ? ExecOptions{false, false, false} : ExecOptions{true, true, true};

  if (stage == Stage::Baseline || stage == Stage::FastTransformer) {
    model_ = as_dtype(model, dtype);
  } else {
    const auto counts = scan_frequencies(texts, tokenizer_);
    const auto& sp = vocab.specials();
    const TokenId specials[] = {sp.unk, sp.eos, sp.pad};
    map_ = build_pruned_vocab(counts, std::min(settings.keep_count, vocab.size()), specials);
    const std::size_t needed = longest_prompt(tokenizer_, texts) + settings.max_new_tokens;
    const std::size_t positions = std::min(settings.trimmed_positions, model.config.max_position);
    if (needed > positions) {
      throw Error(ErrorKind::Parameter, "trimmed position table (" + std::to_string(positions) +
                                            ") is shorter than the longest prompt plus max_new_tokens (" +
                                            std::to_string(needed) + ")");
    }
    model_ = as_dtype(prune_position_embedding(prune_token_embedding(as_dtype(model, DType::F32), *map_), positions),
                      dtype);
  }
  codec_ = std::make_unique<TextCodec>(tokenizer_, vocab_map());
}

PipelineResult StageSetup::run(std::span<const std::string> texts) const {
  return concurrent() ? run_pipeline(texts, model_, *codec_, pipeline_)
                      : run_sequential(texts, model_, *codec_, pipeline_);
}

std::size_t StageSetup::peak_arena_bytes(std::size_t seq_len) const {
  const OpGraph block = transformer_block_graph(model_.config, std::min(seq_len, model_.config.max_position));
  std::size_t per_sequence;
  if (pipeline_.exec.fused && pipeline_.exec.arena) {
    const OpGraph fused = fuse_all(block);
    per_sequence = plan_memory(fused, analyze_lifetimes(fused)).peak_bytes();
  } else {
    per_sequence = total_intermediate_bytes(block);
  }
  return per_sequence * pipeline_.max_batch_size;
}

namespace {

// Each stage's outputs on the first gate prompts must equal a direct engine
// call on the same model, decoded independently.
void check_against_engine(const StageSetup& setup, const std::vector<WorkItem>& items, std::size_t count) {
  const auto& exec = setup.settings().exec;
  for (std::size_t i = 0; i < std::min(count, items.size()); ++i) {
    const auto prompt = setup.codec().encode(items[i].text);
    const auto full = greedy_decode(setup.model(), prompt, setup.settings().max_new_tokens, exec);
    const std::vector<TokenId> generated(full.begin() + static_cast<std::ptrdiff_t>(prompt.size()), full.end());
    if (items[i].generated_ids != generated) fail_check(setup.stage(), "sample " + std::to_string(i) + " differs from the engine");
    std::span<const TokenId> shown = generated;
    if (!shown.empty() && shown.back() == setup.model().config.eos_token) shown = shown.first(shown.size() - 1);
    if (items[i].output_text != setup.codec().decode(shown)) {
      fail_check(setup.stage(), "summary of sample " + std::to_string(i) + " does not decode its tokens");
    }
  }
}

// KV cache and fusion are exact in F32: the F32 fast path must reproduce the
// uncached, unfused baseline token for token.
void check_cache_and_fusion(const Model& model, const StageSetup& setup, const std::vector<WorkItem>& baseline,
                            std::size_t count) {
  const Model f32 = as_dtype(model, DType::F32);
  for (std::size_t i = 0; i < std::min(count, baseline.size()); ++i) {
    const auto& prompt = *baseline[i].token_ids;
    const auto full = greedy_decode(f32, prompt, setup.settings().max_new_tokens, ExecOptions{true, true, true});
    const std::vector<TokenId> generated(full.begin() + static_cast<std::ptrdiff_t>(prompt.size()), full.end());
    if (generated != *baseline[i].generated_ids) {
      fail_check(setup.stage(), "cached fused F32 decode of sample " + std::to_string(i) + " differs from baseline");
    }
  }
}

// Half precision tracks the F32 reference: teacher-forced logits along the
// baseline continuation have cosine similarity >= 0.999 at every step.
void check_half_fidelity(const Model& model, const StageSetup& setup, const std::vector<WorkItem>& baseline,
                         std::size_t count) {
  const Model f32 = as_dtype(model, DType::F32);
  for (std::size_t i = 0; i < std::min(count, baseline.size()); ++i) {
    const auto& prompt = *baseline[i].token_ids;
    const auto& gen = *baseline[i].generated_ids;
    if (gen.empty()) continue;
    std::vector<TokenId> seq(prompt);
    seq.insert(seq.end(), gen.begin(), gen.end());
    const Tensor ref = stepwise_logits(f32, seq, prompt.size());
    const Tensor half = stepwise_logits(setup.model(), seq, prompt.size(), setup.settings().exec);
    const auto a = ref.to_f32(), b = half.to_f32();
    const std::size_t vocab = ref.shape().back();
    for (std::size_t r = 0; r < ref.shape().front(); ++r) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t c = r * vocab; c < (r + 1) * vocab; ++c) {
        dot += double(a[c]) * b[c];
        na += double(a[c]) * a[c];
        nb += double(b[c]) * b[c];
      }
      if (dot < 0.999 * std::sqrt(na * nb)) {
        fail_check(setup.stage(), "F16 logits of sample " + std::to_string(i) + " drift below cosine 0.999");
      }
    }
  }
}

// Pruning is exact at the kept ids: for prompts made only of kept tokens the
// pruned model's logits equal the unpruned model's kept columns.
void check_pruned_logits(const StageSetup& unpruned, const StageSetup& pruned, const std::vector<WorkItem>& items,
                         std::size_t count) {
  const PrunedVocabMap& map = *pruned.vocab_map();
  std::size_t compared = 0;
  for (std::size_t i = 0; i < items.size() && compared < count; ++i) {
    const auto original = unpruned.codec().encode(items[i].text);
    if (!std::all_of(original.begin(), original.end(), [&](TokenId t) { return map.kept(t); })) continue;
    const auto remapped = pruned.codec().encode(items[i].text);
    const auto full = forward_full(unpruned.model(), original, unpruned.settings().exec).to_f32();
    const auto small = forward_full(pruned.model(), remapped, pruned.settings().exec).to_f32();
    const std::size_t v_old = map.old_vocab_size, v_new = map.size();
    for (std::size_t t = 0; t < original.size(); ++t) {
      for (std::size_t n = 0; n < v_new; ++n) {
        const float x = full[t * v_old + static_cast<std::size_t>(map.kept_old_ids[n])];
        const float y = small[t * v_new + n];
        if (std::memcmp(&x, &y, sizeof x) != 0) {
          fail_check(pruned.stage(), "pruned logits of sample " + std::to_string(i) + " differ at kept ids");
        }
      }
    }
    ++compared;
  }
  if (compared == 0) fail_check(pruned.stage(), "no prompt is fully covered by the kept vocab");
}

}  // namespace

std::vector<BenchReport> run_ablation(std::span<const std::string> texts, const Model& model, const Vocab& vocab,
                                      std::span<const Stage> stages, const BenchSettings& settings) {
  check_ladder(stages);
  if (texts.empty()) throw Error(ErrorKind::Parameter, "empty dataset");
  if (settings.repeats == 0) throw Error(ErrorKind::Parameter, "repeats must be at least 1");
  const auto log = [&](const std::string& msg) {
    if (settings.log) settings.log(msg);
  };

  const Fingerprint fingerprint{config_hash(model.config), settings.seed, texts.size(), settings.max_new_tokens};
  struct Measured {
    Stage stage;
    double wall;
    std::size_t tokens;
    std::size_t peak;
  };
  std::vector<Measured> measured;
  std::vector<std::vector<WorkItem>> outputs;
  std::unique_ptr<StageSetup> fast_setup;

  for (Stage stage : stages) {
    auto setup = std::make_unique<StageSetup>(stage, model, vocab, texts, settings);
    log("stage " + std::string(to_string(stage)) + ": warmup");
    setup->run(texts.first(std::min(texts.size(), settings.warmup_samples)));

    std::vector<double> walls;
    std::vector<WorkItem> first;
    std::size_t tokens = 0;
    for (std::size_t r = 0; r < settings.repeats; ++r) {
      auto result = setup->run(texts);
      log("stage " + std::string(to_string(stage)) + ": run " + std::to_string(r + 1) + " took " +
          std::to_string(result.stats.wall_seconds) + " s");
      walls.push_back(result.stats.wall_seconds);
      if (r == 0) {
        first = std::move(result.items);
        tokens = result.stats.generated_tokens;
      } else if (!same_outputs(first, result.items)) {
        fail_check(stage, "outputs differ between repeated runs");
      }
    }
    if (settings.corrupt_outputs) settings.corrupt_outputs(stage, first);

    const std::size_t gates = settings.gate_samples;
    check_against_engine(*setup, first, gates);
    switch (stage) {
      case Stage::Baseline:
        break;
      case Stage::FastTransformer:
        check_cache_and_fusion(model, *setup, outputs[0], gates);
        if (settings.fp32_ladder) {
          if (!same_outputs(first, outputs[0])) fail_check(stage, "F32 outputs differ from baseline");
        } else {
          check_half_fidelity(model, *setup, outputs[0], gates);
        }
        break;
      case Stage::Pruning:
        check_pruned_logits(*fast_setup, *setup, first, gates);
        break;
      case Stage::Pipeline:
        // Batching and concurrency are exact: same outputs as the batch-1
        // sequential run of the same model.
        if (!same_outputs(first, outputs[2])) fail_check(stage, "outputs differ from the sequential pruned run");
        break;
    }
    log("stage " + std::string(to_string(stage)) + ": checks passed");

    std::size_t longest = 0;
    for (const auto& item : first) longest = std::max(longest, item.token_ids->size());
    measured.push_back({stage, median(walls), tokens, setup->peak_arena_bytes(longest + settings.max_new_tokens)});
    outputs.push_back(std::move(first));
    if (stage == Stage::FastTransformer) fast_setup = std::move(setup);
  }

  std::vector<BenchReport> reports;
  const double base_rate = double(texts.size()) / measured.front().wall;
  for (const auto& m : measured) {
    BenchReport r;
    r.stage_name = std::string(to_string(m.stage));
    r.wall_seconds = m.wall;
    r.samples_per_sec = double(texts.size()) / m.wall;
    r.tokens_per_sec = double(m.tokens) / m.wall;
    r.peak_arena_bytes = m.peak;
    r.speedup_vs_baseline = r.samples_per_sec / base_rate;
    r.fingerprint = fingerprint;
    reports.push_back(std::move(r));
  }
  return reports;
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "table") return ReportFormat::Table;
  if (name == "json") return ReportFormat::Json;
  throw Error(ErrorKind::Parameter, "unknown report format '" + std::string(name) + "'");
}

namespace {

nlohmann::json fingerprint_json(const Fingerprint& f) {
  return {{"model_config_hash", f.model_config_hash}, {"seed", f.seed}, {"n", f.n}, {"max_new_tokens", f.max_new_tokens}};
}

}  // namespace

std::string emit_report(std::span<const BenchReport> reports, ReportFormat format) {
  if (reports.empty()) throw Error(ErrorKind::Parameter, "no reports to emit");
  const Fingerprint& fp = reports.front().fingerprint;

  if (format == ReportFormat::Json) {
    nlohmann::json j;
    j["fingerprint"] = fingerprint_json(fp);
    j["reports"] = nlohmann::json::array();
    for (const auto& r : reports) {
      j["reports"].push_back({{"stage_name", r.stage_name},
                              {"samples_per_sec", r.samples_per_sec},
                              {"tokens_per_sec", r.tokens_per_sec},
                              {"wall_seconds", r.wall_seconds},
                              {"peak_arena_bytes", r.peak_arena_bytes},
                              {"speedup_vs_baseline", r.speedup_vs_baseline},
                              {"fingerprint", fingerprint_json(r.fingerprint)}});
    }
    auto& published = j["published_ladder"] = nlohmann::json::array();
    for (const auto& p : kPublishedLadder) published.push_back({{"stage_name", p.name}, {"samples_per_sec", p.samples_per_sec}});
    j["published_speedup"] = kPublishedLadder[3].samples_per_sec / kPublishedLadder[0].samples_per_sec;
    return j.dump(2) + "\n";
  }

  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "# model %s  seed %llu  n %zu  max_new_tokens %zu\n", fp.model_config_hash.c_str(),
                static_cast<unsigned long long>(fp.seed), fp.n, fp.max_new_tokens);
  out += line;
  std::snprintf(line, sizeof line, "%-18s %12s %12s %10s %14s %8s\n", "method", "samples/s", "tokens/s", "wall_s",
                "peak_arena_B", "speedup");
  out += line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-18s %12.2f %12.1f %10.3f %14zu %7.2fx\n", r.stage_name.c_str(),
                  r.samples_per_sec, r.tokens_per_sec, r.wall_seconds, r.peak_arena_bytes, r.speedup_vs_baseline);
    out += line;
  }
  out += "# published samples/s:";
  for (const auto& p : kPublishedLadder) {
    std::snprintf(line, sizeof line, " %s %.2f", p.name, p.samples_per_sec);
    out += line;
  }
  std::snprintf(line, sizeof line, " (%.2fx; reference only)\n",
                kPublishedLadder[3].samples_per_sec / kPublishedLadder[0].samples_per_sec);
  out += line;
  return out;
}

std::vector<BenchReport> parse_report_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    std::vector<BenchReport> reports;
    for (const auto& e : j.at("reports")) {
      BenchReport r;
      r.stage_name = e.at("stage_name").get<std::string>();
      r.samples_per_sec = e.at("samples_per_sec").get<double>();
      r.tokens_per_sec = e.at("tokens_per_sec").get<double>();
      r.wall_seconds = e.at("wall_seconds").get<double>();
      r.peak_arena_bytes = e.at("peak_arena_bytes").get<std::size_t>();
      r.speedup_vs_baseline = e.at("speedup_vs_baseline").get<double>();
      const auto& f = e.at("fingerprint");
      r.fingerprint.model_config_hash = f.at("model_config_hash").get<std::string>();
      r.fingerprint.seed = f.at("seed").get<std::uint64_t>();
      r.fingerprint.n = f.at("n").get<std::size_t>();
      r.fingerprint.max_new_tokens = f.at("max_new_tokens").get<std::size_t>();
      reports.push_back(std::move(r));
    }
    return reports;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("bench report: ") + e.what());
  }
}

}  // namespace tinfer

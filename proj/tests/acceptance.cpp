// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <set>
#include <sstream>
#include <string>

#define DOCTEST_CONFIG_DISABLE
#include "graph_oracles.hpp"
#include "reference_model.hpp"
#include "test_util.hpp"
#include "tinfer/bench.hpp"
#include "tinfer/graphopt.hpp"
#include "tinfer/pipeline.hpp"

using namespace tinfer;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds.
constexpr double kCacheBudgetSeconds = 60.0;
constexpr double kOracleMaxAbs = 1e-5;
constexpr double kHalfCosine = 0.999;
constexpr double kArenaSlack = 1.25;
constexpr auto kWatchdog = std::chrono::seconds(30);
constexpr double kFastFloor = 2.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

ModelConfig random_config(oracle::Rng& rng) {
  ModelConfig c;
  c.num_layers = 1 + rng.below(3);
  c.num_heads = 1 + rng.below(4);
  c.head_dim = 2 + rng.below(7);
  c.hidden_size = c.num_heads * c.head_dim;
  c.ffn_size = 4 * c.hidden_size;
  c.vocab_size = 16 + rng.below(49);
  c.max_position = 48;
  c.eos_token = 1;
  c.pad_token = 2;
  return c;
}

Outcome kv_cache_exactness() {
  oracle::Rng rng(2001);
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t tokens = 0;
  for (int i = 0; i < 20; ++i) {
    const auto config = random_config(rng);
    const auto model = testutil::scaled(init_random(config, 1000 + i), 1.0f + 30.0f * float(rng.uniform()));
    const auto prompt = testutil::random_prompt(rng, 1 + rng.below(20), config.vocab_size);
    const std::size_t max_new = 1 + rng.below(24);
    const auto cached = greedy_decode(model, prompt, max_new, true);
    const auto uncached = greedy_decode(model, prompt, max_new, false);
    if (cached != uncached) return {false, "case " + std::to_string(i) + " diverged"};
    tokens += cached.size() - prompt.size();
  }
  const double secs = seconds_since(t0);
  return {secs < kCacheBudgetSeconds,
          "20 cases, " + std::to_string(tokens) + " generated tokens identical, " + fmt("%.2f s", secs)};
}

Outcome reference_numerics() {
  double worst = 0;
  for (float factor : {1.0f, 20.0f}) {
    const auto model = testutil::scaled(init_random(testutil::tiny_config(1, 4, 1, 8, 16), 21), factor);
    const std::vector<TokenId> tokens{0, 3, 7, 1, 5, 5, 2};
    const auto ref = oracle::reference_forward(model, tokens);
    const auto got = forward_full(model, tokens).to_f32();
    for (std::size_t t = 0; t < tokens.size(); ++t)
      for (std::size_t v = 0; v < 8; ++v) worst = std::max(worst, std::abs(ref[t][v] - got[t * 8 + v]));
  }
  return {worst <= kOracleMaxAbs, "max |diff| " + fmt("%.3g", worst)};
}

Outcome half_fidelity() {
  double worst = 1;
  for (const auto& config : {testutil::fidelity_config(), ModelConfig::reference()}) {
    const auto m32 = init_random(config, 42);
    const auto m16 = cast_model(m32, DType::F16);
    oracle::Rng rng(42);
    for (int p = 0; p < 3; ++p) {
      const auto prompt = testutil::random_prompt(rng, 4 + rng.below(20), config.vocab_size);
      // Force exactly 8 decode steps: eos cannot end the run early under teacher forcing.
      auto sequence = greedy_decode(m32, prompt, 8, true);
      while (sequence.size() < prompt.size() + 8) sequence.push_back(3);
      const auto l32 = stepwise_logits(m32, sequence, prompt.size()).to_f32();
      const auto l16 = stepwise_logits(m16, sequence, prompt.size(), ExecOptions{true, true, true}).to_f32();
      const std::size_t v = config.vocab_size;
      for (std::size_t s = 0; s < 8; ++s) {
        worst = std::min(worst, testutil::cosine(std::span(l32).subspan(s * v, v), std::span(l16).subspan(s * v, v)));
      }
    }
  }
  return {worst >= kHalfCosine, "min cosine " + fmt("%.8f", worst) + " over 8 steps x 6 prompts"};
}

Outcome pruning_exactness() {
  const auto model = init_random(ModelConfig::reference(), 42);
  const Vocab vocab = synthetic_vocab(4096, 42);
  const Tokenizer tokenizer(vocab);
  const auto texts = gen_dataset(vocab, 20, 7, LengthDistribution{60, 96});
  constexpr std::size_t kMaxNew = 32;

  // Calibrate on prompts and their original continuations: full coverage.
  std::vector<std::vector<TokenId>> prompts, originals;
  std::vector<std::uint64_t> counts(vocab.size(), 0);
  for (const auto& t : texts) {
    prompts.push_back(tokenizer.encode(t));
    originals.push_back(greedy_decode(model, prompts.back(), kMaxNew, true));
    for (TokenId id : originals.back()) ++counts[static_cast<std::size_t>(id)];
  }
  const TokenId specials[] = {0, 1, 2};
  const auto map = build_pruned_vocab_by_frequency(counts, 1, specials);
  const auto pruned = prune_position_embedding(prune_token_embedding(model, map), 128);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto got = greedy_decode(pruned, remap_ids(map, prompts[i], 0), kMaxNew, true);
    if (got != remap_ids(map, originals[i], 0)) return {false, "sample " + std::to_string(i) + " diverged"};
  }

  const auto& before = model.position_embedding;
  const auto& after = pruned.position_embedding;
  const auto b0 = before.bytes(), b1 = after.bytes();
  const bool rows_equal = std::equal(b1.begin(), b1.end(), b0.begin());
  const bool quarter = after.shape() == Tensor::Shape{128, 128} && after.byte_size() * 4 == before.byte_size();
  return {rows_equal && quarter, "20 prompts identical with " + std::to_string(map.size()) +
                                     " kept tokens; position table 512x128 -> 128x128, first 128 rows byte-identical"};
}

Outcome fusion_soundness() {
  oracle::Rng rng(5005);
  int matched = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto g = oracle::random_dag(rng, 12);
    const auto fused = fuse_all(g);
    const auto bind = random_bindings(g, static_cast<std::uint64_t>(trial));
    const auto before = execute(g, nullptr, bind);
    const auto after = execute(fused, nullptr, bind);
    if (!oracle::same_outputs(before, after)) return {false, "DAG " + std::to_string(trial) + " outputs differ"};
    if (after.stats.launch_count > before.stats.launch_count) return {false, "launch count grew"};
    const bool pattern = fused.node_count() < g.node_count() ||
                         std::any_of(fused.nodes().begin(), fused.nodes().end(),
                                     [](const OpNode& n) { return n.kind >= OpKind::FusedAddN; });
    if (pattern) {
      if (after.stats.launch_count >= before.stats.launch_count) return {false, "pattern matched, no launch saved"};
      ++matched;
    }
  }
  return {true, "50 DAGs bit-identical, " + std::to_string(matched) + " with fused patterns"};
}

Outcome arena() {
  std::size_t graphs = 0;
  oracle::Rng rng(6006);
  for (int trial = 0; trial < 50; ++trial) {
    const auto g = oracle::random_dag(rng, 12);
    for (const auto& graph : {g, fuse_all(g)}) {
      const auto plan = plan_memory(graph, analyze_lifetimes(graph));
      if (count_plan_violations(plan) != 0) return {false, "violation in random DAG " + std::to_string(trial)};
      const auto bind = random_bindings(graph, 3);
      if (!oracle::same_outputs(execute(graph, nullptr, bind), execute(graph, &plan, bind))) {
        return {false, "planned execution differs on DAG " + std::to_string(trial)};
      }
      ++graphs;
    }
  }
  std::string detail;
  const auto block = transformer_block_graph(ModelConfig::reference(), 128);
  for (const auto& graph : {block, fuse_all(block)}) {
    const auto plan = plan_memory(graph, analyze_lifetimes(graph));
    ++graphs;
    if (count_plan_violations(plan) != 0) return {false, "violation in the block graph"};
    const auto optimum = oracle::min_total_bytes(oracle::items_of(graph));
    const auto sum = total_intermediate_bytes(graph);
    const auto peak = plan.peak_bytes();
    if (double(peak) > kArenaSlack * double(optimum) || peak >= sum) {
      return {false, "block peak " + std::to_string(peak) + " vs optimum " + std::to_string(optimum)};
    }
    detail += (detail.empty() ? "block " : ", ") + std::to_string(graph.node_count()) + " nodes: " +
              std::to_string(peak) + " B (optimum " + std::to_string(optimum) + ", sum " + std::to_string(sum) + ")";
  }
  return {true, std::to_string(graphs) + " plans valid; " + detail};
}

template <typename Fn>
bool within_watchdog(Fn fn) {
  auto done = std::async(std::launch::async, std::move(fn));
  if (done.wait_for(kWatchdog) != std::future_status::ready) {
    std::fprintf(stderr, "watchdog expired\n");
    std::fflush(nullptr);
    std::_Exit(1);  // a hung pipeline cannot be joined
  }
  done.get();
  return true;
}

Outcome pipeline_equivalence() {
  const auto model = init_random(ModelConfig::reference(), 42);
  const Vocab vocab = synthetic_vocab(4096, 42);
  const Tokenizer tokenizer(vocab);
  const TextCodec codec(tokenizer);
  const auto texts = gen_dataset(vocab, 200, 9, LengthDistribution{60, 96});
  PipelineSettings settings;
  settings.max_new_tokens = 16;

  PipelineResult piped, seq;
  within_watchdog([&] { piped = run_pipeline(texts, model, codec, settings); });
  seq = run_sequential(texts, model, codec, settings);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (piped.items[i].sample_index != i || piped.items[i].text != texts[i] ||
        piped.items[i].generated_ids != seq.items[i].generated_ids ||
        piped.items[i].output_text != seq.items[i].output_text) {
      return {false, "sample " + std::to_string(i) + " differs"};
    }
  }

  const auto many = gen_dataset(vocab, 500, 10, LengthDistribution{20, 40});
  std::string walls;
  for (std::size_t capacity : {1, 2, 8}) {
    auto s = settings;
    s.queue_capacity = capacity;
    s.max_new_tokens = 2;
    PipelineResult r;
    const auto t0 = std::chrono::steady_clock::now();
    within_watchdog([&] { r = run_pipeline(many, model, codec, s); });
    if (r.items.size() != many.size()) return {false, "capacity " + std::to_string(capacity) + " lost items"};
    walls += (walls.empty() ? "" : ", ") + std::string("cap ") + std::to_string(capacity) + " " +
             fmt("%.1f s", seconds_since(t0));
  }
  return {true, "200 outputs equal and ordered; N=500 under watchdog: " + walls};
}

Outcome ladder() {
  const auto model = init_random(ModelConfig::reference(), 42);
  const Vocab vocab = synthetic_vocab(4096, 42);
  const auto texts = gen_dataset(vocab, 500, 42, LengthDistribution{60, 96});
  BenchSettings settings;
  settings.log = [](const std::string& m) { std::fprintf(stderr, "  %s\n", m.c_str()); };
  const std::vector<Stage> stages{Stage::Baseline, Stage::FastTransformer, Stage::Pruning, Stage::Pipeline};
  const auto reports = run_ablation(texts, model, vocab, stages, settings);
  std::fputs(emit_report(reports, ReportFormat::Table).c_str(), stderr);

  const double base = reports[0].samples_per_sec, fast = reports[1].samples_per_sec,
               pruned = reports[2].samples_per_sec, piped = reports[3].samples_per_sec;
  std::string detail;
  for (const auto& r : reports) {
    detail += (detail.empty() ? "" : " -> ") + fmt("%.2f", r.samples_per_sec);
  }
  detail += " samples/s (" + fmt("%.2fx", reports[3].speedup_vs_baseline) + ")";
  const bool ok = fast >= kFastFloor * base && pruned > fast && piped > pruned;
  return {ok, detail};
}

int run_cli(const std::string& args, const fs::path& stdout_file) {
  const std::string cmd = std::string(TINFER_CLI) + " " + args + " > " + stdout_file.string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome correctness_gate() {
  const fs::path dir = fs::temp_directory_path() / "tinfer_acceptance_gate";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto config = testutil::tiny_config(1, 16, 2, 256, 64);
  {
    std::ofstream(dir / "config.json") << config.to_json();
  }
  const std::string d = dir.string() + "/";
  const fs::path out = dir / "stdout.txt";
  if (run_cli("gen-vocab --size 256 --out " + d + "v.tsv", out) != 0 ||
      run_cli("init-model --config " + d + "config.json --seed 3 --out " + d + "m.tinf", out) != 0 ||
      run_cli("gen-data --vocab " + d + "v.tsv --n 12 --mean 10 --max 20 --hot-words 100 --out " + d + "d.jsonl", out) != 0) {
    return {false, "could not prepare inputs"};
  }
  const std::string bench = "bench --quiet --model " + d + "m.tinf --vocab " + d + "v.tsv --data " + d +
                            "d.jsonl --keep-count 128 --positions 40 --max-new 6 --repeats 1 --batch 4";
  std::string detail;
  for (const char* stage : {"baseline", "fast_transformer", "pruning", "pipeline"}) {
    const int code = run_cli(bench + " --inject-fault " + stage, out);
    const std::string text = slurp(out);
    if (code != 2 || text.find("samples/s") != std::string::npos || !text.empty()) {
      return {false, std::string("fault in ") + stage + " gave exit " + std::to_string(code)};
    }
  }
  const int clean = run_cli(bench, out);
  const bool table = slurp(out).find("samples/s") != std::string::npos;
  return {clean == 0 && table, "injected faults in all 4 stages -> exit 2, no output; clean run exit " +
                                   std::to_string(clean)};
}

Outcome format_stability() {
  const fs::path dir = fs::temp_directory_path() / "tinfer_acceptance_formats";
  fs::create_directories(dir);

  const auto model = init_random(testutil::tiny_config(2, 16, 2, 64, 32), 4);
  const auto half = cast_model(model, DType::F16);
  bool ok = true;
  for (const auto* m : {&model, &half}) {
    save_model(*m, dir / "a.tinf");
    save_model(load_model(dir / "a.tinf"), dir / "b.tinf");
    ok = ok && slurp(dir / "a.tinf") == slurp(dir / "b.tinf") &&
         slurp(config_path_for(dir / "a.tinf")) == slurp(config_path_for(dir / "b.tinf"));
  }

  std::vector<std::optional<std::uint64_t>> freq(300);
  for (std::size_t i = 0; i < freq.size(); i += 2) freq[i] = i * 7;
  const Vocab base = synthetic_vocab(300, 8);
  const Vocab vocab(base.tokens(), base.specials(), freq);
  save_vocab(vocab, dir / "a.tsv");
  save_vocab(load_vocab(dir / "a.tsv"), dir / "b.tsv");
  ok = ok && slurp(dir / "a.tsv") == slurp(dir / "b.tsv");

  std::vector<std::uint64_t> counts(300);
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] = (i * 37) % 11;
  const TokenId specials[] = {0, 1, 2};
  save_vocab_map(build_pruned_vocab(counts, 100, specials), dir / "a.map");
  save_vocab_map(load_vocab_map(dir / "a.map"), dir / "b.map");
  ok = ok && slurp(dir / "a.map") == slurp(dir / "b.map");

  auto texts = gen_dataset(base, 30, 2, LengthDistribution{10, 20}, 100);
  texts.push_back("quote \" backslash \\ tab \t newline \n unicode \xc3\xa9");
  {
    std::ofstream a(dir / "a.jsonl");
    write_contents(a, texts);
  }
  {
    std::ofstream b(dir / "b.jsonl");
    write_contents(b, load_contents(dir / "a.jsonl"));
  }
  ok = ok && slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl");
  return {ok, "TINF (F32, F16) with config sidecar, vocab TSV, vocab map, JSONL: write -> read -> write identical"};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"KV-cache exactness", kv_cache_exactness},
      {"reference-block numerics", reference_numerics},
      {"FP16 fidelity", half_fidelity},
      {"pruning exactness", pruning_exactness},
      {"fusion soundness", fusion_soundness},
      {"arena validity and effectiveness", arena},
      {"pipeline equivalence and liveness", pipeline_equivalence},
      {"ablation ladder monotonicity", ladder},
      {"correctness gate", correctness_gate},
      {"format stability", format_stability},
  };
  int failed = 0;
  for (std::size_t i = 0; i < std::size(criteria); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s criterion %zu: %s (%s)\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}

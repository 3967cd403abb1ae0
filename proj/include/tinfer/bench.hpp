#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tinfer/model.hpp"
#include "tinfer/pipeline.hpp"
#include "tinfer/pruning.hpp"
#include "tinfer/tokenizer.hpp"

namespace tinfer {

/// `<unk>`, `<eos>`, `<pad>` (ids 0, 1, 2), then distinct lowercase words
/// each ending in one space. No token is a prefix of another.
Vocab synthetic_vocab(std::size_t size, std::uint64_t seed);

struct LengthDistribution {
  double mean = 60;      // tokens, after truncation
  std::size_t max = 96;  // hard cap, inclusive
};

/// Texts of whole vocab words. Lengths are a sum of three geometrics on
/// {1, 2, ...} conditioned on <= max, with the success rate solved so the
/// conditioned mean equals `mean`. Words follow a Zipf law over the first
/// `hot_words` non-special ids. Deterministic per seed.
std::vector<std::string> gen_dataset(const Vocab& vocab, std::size_t n, std::uint64_t seed,
                                     const LengthDistribution& lengths, std::size_t hot_words = 1000);

enum class Stage : std::uint8_t { Baseline, FastTransformer, Pruning, Pipeline };

std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view name);
/// Comma-separated stage names; must be a prefix of the full ladder.
std::vector<Stage> parse_stages(std::string_view list);
void check_ladder(std::span<const Stage> stages);

struct Fingerprint {
  std::string model_config_hash;  // FNV-1a 64 of the config JSON, hex
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::size_t max_new_tokens = 0;
  friend bool operator==(const Fingerprint&, const Fingerprint&) = default;
};

std::string config_hash(const ModelConfig& config);

struct BenchReport {
  std::string stage_name;
  double samples_per_sec = 0;
  double tokens_per_sec = 0;
  double wall_seconds = 0;
  std::size_t peak_arena_bytes = 0;
  double speedup_vs_baseline = 0;
  Fingerprint fingerprint;
  friend bool operator==(const BenchReport&, const BenchReport&) = default;
};

struct BenchSettings {
  std::size_t max_new_tokens = 32;
  std::size_t repeats = 3;          // timed runs; the median is reported
  std::size_t warmup_samples = 16;  // untimed pass over this many samples
  std::size_t gate_samples = 16;    // prompts used by the per-stage oracles
  std::size_t keep_count = 1024;
  std::size_t trimmed_positions = 128;
  std::size_t max_batch_size = 8;
  std::size_t bucket_width = 16;
  std::size_t queue_capacity = 8;
  bool fp32_ladder = false;  // keep F32 everywhere so every stage is exact
  std::uint64_t seed = 42;   // recorded in the fingerprint
  /// Test hook: mutates a stage's outputs before they are checked.
  std::function<void(Stage, std::vector<WorkItem>&)> corrupt_outputs;
  /// Progress messages; silent when empty.
  std::function<void(const std::string&)> log;
};

/// A ladder stage with its model, codec inputs and execution settings.
/// Holds what TextCodec points into, so it is not copyable or movable.
class StageSetup {
 public:
  StageSetup(Stage stage, const Model& model, const Vocab& vocab, std::span<const std::string> texts,
             const BenchSettings& settings);
  StageSetup(const StageSetup&) = delete;
  StageSetup& operator=(const StageSetup&) = delete;

  Stage stage() const noexcept { return stage_; }
  const Model& model() const noexcept { return model_; }
  const TextCodec& codec() const noexcept { return *codec_; }
  const PipelineSettings& settings() const noexcept { return pipeline_; }
  const PrunedVocabMap* vocab_map() const noexcept { return map_ ? &*map_ : nullptr; }
  bool concurrent() const noexcept { return stage_ == Stage::Pipeline; }

  PipelineResult run(std::span<const std::string> texts) const;
  /// Peak activation bytes of one block at `seq_len` per concurrent sequence:
  /// the planned arena for fused stages, every intermediate otherwise.
  std::size_t peak_arena_bytes(std::size_t seq_len) const;

 private:
  Stage stage_;
  Model model_;
  Tokenizer tokenizer_;
  std::optional<PrunedVocabMap> map_;
  std::unique_ptr<TextCodec> codec_;
  PipelineSettings pipeline_;
};

/// Runs each cumulative stage on the same texts and model. Every stage's
/// outputs pass its equivalence oracle and repeat identically across runs
/// before any report is returned; otherwise throws ErrorKind::Correctness.
std::vector<BenchReport> run_ablation(std::span<const std::string> texts, const Model& model, const Vocab& vocab,
                                      std::span<const Stage> stages, const BenchSettings& settings);

enum class ReportFormat : std::uint8_t { Table, Json };
ReportFormat parse_report_format(std::string_view name);

/// Throws ErrorKind::Parameter for an empty list.
std::string emit_report(std::span<const BenchReport> reports, ReportFormat format);
std::vector<BenchReport> parse_report_json(const std::string& text);

struct PublishedStage {
  const char* name;
  double samples_per_sec;
};
/// Published reference ladder, carried as report metadata only.
inline constexpr PublishedStage kPublishedLadder[] = {
    {"baseline", 16.11}, {"fast_transformer", 98.46}, {"pruning", 125.32}, {"pipeline", 144.45}};

}  // namespace tinfer

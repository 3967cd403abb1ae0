#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tinfer/model.hpp"
#include "tinfer/pruning.hpp"
#include "tinfer/tokenizer.hpp"

namespace tinfer {

/// Multi-producer multi-consumer FIFO with a fixed capacity. push blocks
/// while full; pop blocks while empty. close() lets consumers drain what is
/// queued; cancel() wakes everyone and discards the rest.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw Error(ErrorKind::Parameter, "queue capacity must be at least 1");
  }

  /// False if the queue was closed or cancelled; the value is dropped.
  bool push(T value) {
    std::unique_lock lock(mutex_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_ || cancelled_; });
    if (closed_ || cancelled_) return false;
    items_.push_back(std::move(value));
    not_empty_.notify_one();
    return true;
  }

  /// nullopt once the queue is closed and empty, or cancelled.
  std::optional<T> pop() {
    std::unique_lock lock(mutex_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_ || cancelled_; });
    if (cancelled_ || items_.empty()) return std::nullopt;
    T value = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return value;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  void cancel() {
    std::lock_guard lock(mutex_);
    cancelled_ = true;
    items_.clear();
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  std::size_t capacity() const noexcept { return capacity_; }

 private:
  const std::size_t capacity_;
  std::mutex mutex_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
  bool cancelled_ = false;
};

struct BatchPlan {
  std::vector<std::vector<std::size_t>> groups;
  std::size_t max_batch_size = 0;
  std::size_t bucket_width = 0;

  /// Sum over groups of (group max - length) for each member.
  std::size_t padding(std::span<const std::size_t> lengths) const;
};

/// Stable sort by descending length, then greedy chunking: a group closes
/// when it holds max_batch_size items or the next length is more than
/// bucket_width below the group's first (longest) item.
BatchPlan plan_batches(std::span<const std::size_t> lengths, std::size_t max_batch_size, std::size_t bucket_width);

/// Text <-> model ids. With a vocab map the tokenizer's ids are renumbered
/// into the pruned model's space (dropped ids become `unk`) and mapped back
/// for decoding.
class TextCodec {
 public:
  explicit TextCodec(const Tokenizer& tokenizer, const PrunedVocabMap* map = nullptr);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

 private:
  const Tokenizer* tokenizer_;
  const PrunedVocabMap* map_;
  TokenId unk_;
};

struct WorkItem {
  std::size_t sample_index = 0;
  std::string text;
  std::optional<std::vector<TokenId>> token_ids;
  std::optional<std::vector<TokenId>> generated_ids;
  std::optional<std::string> output_text;
  // Seconds since the run started at which each stage finished with the item.
  double t_fed = 0, t_preprocessed = 0, t_inferred = 0, t_postprocessed = 0;
};

struct StageTimes {
  double busy_seconds = 0;
  double wait_seconds = 0;  // blocked on a queue push or pop
  std::size_t items = 0;
};

struct StageStats {
  StageTimes feed, preprocess, inference, postprocess, collect;
  double wall_seconds = 0;
  std::size_t prompt_tokens = 0;
  std::size_t generated_tokens = 0;
  std::size_t batches = 0;
  std::size_t padding_tokens = 0;
};

struct PipelineSettings {
  std::size_t queue_capacity = 8;
  std::size_t max_batch_size = 8;
  std::size_t bucket_width = 16;
  std::size_t max_new_tokens = 32;
  /// Items the preprocess stage collects before planning batches over them.
  std::size_t window = 32;
  ExecOptions exec{};
  /// Called by the preprocess stage for every item before tokenizing.
  /// Used to weight the stage (sleeps) or to inject failures.
  std::function<void(const WorkItem&)> preprocess_hook;
};

struct PipelineResult {
  std::vector<WorkItem> items;  // ordered by sample_index
  StageStats stats;
};

/// Feeder, preprocess, inference and postprocess workers joined by bounded
/// queues; the calling thread collects. Outputs equal run_sequential's.
PipelineResult run_pipeline(std::span<const std::string> texts, const Model& model, const TextCodec& codec,
                            const PipelineSettings& settings);

/// The same computation one stage at a time on the calling thread.
PipelineResult run_sequential(std::span<const std::string> texts, const Model& model, const TextCodec& codec,
                              const PipelineSettings& settings);

/// JSON lines: input objects carry "content"; output objects carry
/// "content", "summary" and "sample_index".
std::vector<std::string> read_contents(std::istream& in);
std::vector<std::string> load_contents(const std::filesystem::path& path);
void write_contents(std::ostream& out, std::span<const std::string> contents);
void write_results(std::ostream& out, std::span<const WorkItem> items);
void save_results(const std::filesystem::path& path, std::span<const WorkItem> items);

}  // namespace tinfer

#include "tinfer/pipeline.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <thread>

#include <json.hpp>

namespace tinfer {

using Clock = std::chrono::steady_clock;

namespace {

double seconds_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double>(b - a).count();
}

void check_settings(const PipelineSettings& s) {
  if (s.queue_capacity == 0) throw Error(ErrorKind::Parameter, "queue_capacity must be at least 1");
  if (s.max_batch_size == 0) throw Error(ErrorKind::Parameter, "max_batch_size must be at least 1");
  if (s.window == 0) throw Error(ErrorKind::Parameter, "window must be at least 1");
}

using Batch = std::vector<WorkItem>;

// Stage bodies shared by the concurrent and sequential drivers, so both do
// exactly the same arithmetic on exactly the same groups.
struct Stages {
  const Model& model;
  const TextCodec& codec;
  const PipelineSettings& settings;
  Clock::time_point start;

  double now() const { return seconds_between(start, Clock::now()); }

  void preprocess(WorkItem& item) const {
    if (settings.preprocess_hook) settings.preprocess_hook(item);
    item.token_ids = codec.encode(item.text);
    item.t_preprocessed = now();
  }

  // Splits a window of tokenized items into planned batches, moving items.
  std::vector<Batch> plan(std::vector<WorkItem>& window, StageStats& stats) const {
    std::vector<std::size_t> lengths(window.size());
    for (std::size_t i = 0; i < window.size(); ++i) lengths[i] = window[i].token_ids->size();
    const BatchPlan plan = plan_batches(lengths, settings.max_batch_size, settings.bucket_width);
    stats.padding_tokens += plan.padding(lengths);
    std::vector<Batch> batches;
    batches.reserve(plan.groups.size());
    for (const auto& group : plan.groups) {
      Batch batch;
      batch.reserve(group.size());
      for (std::size_t i : group) batch.push_back(std::move(window[i]));
      batches.push_back(std::move(batch));
    }
    window.clear();
    return batches;
  }

  void infer(Batch& batch) const {
    std::vector<std::vector<TokenId>> prompts;
    prompts.reserve(batch.size());
    for (const auto& item : batch) prompts.push_back(*item.token_ids);
    auto generated = generate_batch(model, prompts, settings.max_new_tokens, settings.exec);
    const double t = now();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      batch[i].generated_ids = std::move(generated[i]);
      batch[i].t_inferred = t;
    }
  }

  void postprocess(WorkItem& item) const {
    std::span<const TokenId> ids = *item.generated_ids;
    if (!ids.empty() && ids.back() == model.config.eos_token) ids = ids.first(ids.size() - 1);
    item.output_text = codec.decode(ids);
    item.t_postprocessed = now();
  }
};

void count_tokens(const std::vector<WorkItem>& items, StageStats& stats) {
  for (const auto& item : items) {
    stats.prompt_tokens += item.token_ids ? item.token_ids->size() : 0;
    stats.generated_tokens += item.generated_ids ? item.generated_ids->size() : 0;
  }
}

// First failure wins; later ones are consequences of the shutdown.
class FailureSlot {
 public:
  template <typename Fn>
  void record(Fn&& on_first) {
    std::lock_guard lock(mutex_);
    if (!error_) {
      error_ = std::current_exception();
      on_first();
    }
  }
  std::exception_ptr get() {
    std::lock_guard lock(mutex_);
    return error_;
  }

 private:
  std::mutex mutex_;
  std::exception_ptr error_;
};

// Wraps queue calls so time spent blocked is charged to wait, the rest to busy.
class StageClock {
 public:
  explicit StageClock(StageTimes& times) : times_(times), begin_(Clock::now()) {}
  ~StageClock() { times_.busy_seconds = seconds_between(begin_, Clock::now()) - times_.wait_seconds; }

  template <typename Fn>
  auto wait(Fn&& fn) {
    const auto t0 = Clock::now();
    auto result = fn();
    times_.wait_seconds += seconds_between(t0, Clock::now());
    return result;
  }

 private:
  StageTimes& times_;
  Clock::time_point begin_;
};

}  // namespace

std::size_t BatchPlan::padding(std::span<const std::size_t> lengths) const {
  std::size_t waste = 0;
  for (const auto& group : groups) {
    std::size_t longest = 0;
    for (std::size_t i : group) longest = std::max(longest, lengths[i]);
    for (std::size_t i : group) waste += longest - lengths[i];
  }
  return waste;
}

BatchPlan plan_batches(std::span<const std::size_t> lengths, std::size_t max_batch_size, std::size_t bucket_width) {
  if (max_batch_size == 0) throw Error(ErrorKind::Parameter, "max_batch_size must be at least 1");
  BatchPlan plan;
  plan.max_batch_size = max_batch_size;
  plan.bucket_width = bucket_width;

  std::vector<std::size_t> order(lengths.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lengths[a] > lengths[b]; });

  for (std::size_t i : order) {
    if (plan.groups.empty() || plan.groups.back().size() == max_batch_size ||
        lengths[plan.groups.back().front()] - lengths[i] > bucket_width) {
      plan.groups.emplace_back();
    }
    plan.groups.back().push_back(i);
  }
  return plan;
}

TextCodec::TextCodec(const Tokenizer& tokenizer, const PrunedVocabMap* map)
    : tokenizer_(&tokenizer), map_(map), unk_(tokenizer.vocab().specials().unk) {
  if (map_) {
    if (map_->old_vocab_size != tokenizer.vocab().size()) {
      throw Error(ErrorKind::Shape, "vocab map was built for a vocab of " + std::to_string(map_->old_vocab_size) +
                                        " tokens, tokenizer has " + std::to_string(tokenizer.vocab().size()));
    }
    unk_ = map_->new_id(unk_);
    if (unk_ < 0) throw Error(ErrorKind::Shape, "vocab map drops the unk token");
  }
}

std::vector<TokenId> TextCodec::encode(std::string_view text) const {
  auto ids = tokenizer_->encode(text);
  if (map_) return remap_ids(*map_, ids, unk_);
  return ids;
}

std::string TextCodec::decode(std::span<const TokenId> ids) const {
  if (!map_) return tokenizer_->decode(ids);
  std::vector<TokenId> original(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) original[i] = map_->old_id(ids[i]);
  return tokenizer_->decode(original);
}

PipelineResult run_pipeline(std::span<const std::string> texts, const Model& model, const TextCodec& codec,
                            const PipelineSettings& settings) {
  check_settings(settings);
  PipelineResult result;
  StageStats& stats = result.stats;
  const Stages stages{model, codec, settings, Clock::now()};

  BoundedQueue<WorkItem> q_in(settings.queue_capacity);
  BoundedQueue<Batch> q_batch(settings.queue_capacity);
  BoundedQueue<Batch> q_post(settings.queue_capacity);
  BoundedQueue<WorkItem> q_out(settings.queue_capacity);

  FailureSlot failure;
  auto fail = [&] {
    failure.record([&] {
      q_in.cancel();
      q_batch.cancel();
      q_post.cancel();
      q_out.cancel();
    });
  };

  {
    std::jthread feeder([&] {
      StageClock clock(stats.feed);
      try {
        for (std::size_t i = 0; i < texts.size(); ++i) {
          WorkItem item;
          item.sample_index = i;
          item.text = texts[i];
          item.t_fed = stages.now();
          if (!clock.wait([&] { return q_in.push(std::move(item)); })) return;
          ++stats.feed.items;
        }
        q_in.close();
      } catch (...) {
        fail();
      }
    });

    std::jthread preprocessor([&] {
      StageClock clock(stats.preprocess);
      try {
        std::vector<WorkItem> window;
        auto flush = [&] {
          for (auto& batch : stages.plan(window, stats)) {
            ++stats.batches;
            if (!clock.wait([&] { return q_batch.push(std::move(batch)); })) return false;
          }
          return true;
        };
        while (auto item = clock.wait([&] { return q_in.pop(); })) {
          stages.preprocess(*item);
          ++stats.preprocess.items;
          window.push_back(std::move(*item));
          if (window.size() == settings.window && !flush()) return;
        }
        if (!window.empty() && !flush()) return;
        q_batch.close();
      } catch (...) {
        fail();
      }
    });

    std::jthread inference([&] {
      StageClock clock(stats.inference);
      try {
        while (auto batch = clock.wait([&] { return q_batch.pop(); })) {
          stages.infer(*batch);
          stats.inference.items += batch->size();
          if (!clock.wait([&] { return q_post.push(std::move(*batch)); })) return;
        }
        q_post.close();
      } catch (...) {
        fail();
      }
    });

    std::jthread postprocessor([&] {
      StageClock clock(stats.postprocess);
      try {
        while (auto batch = clock.wait([&] { return q_post.pop(); })) {
          for (auto& item : *batch) {
            stages.postprocess(item);
            ++stats.postprocess.items;
            if (!clock.wait([&] { return q_out.push(std::move(item)); })) return;
          }
        }
        q_out.close();
      } catch (...) {
        fail();
      }
    });

    // Collect on the calling thread; slots are filled by sample_index.
    std::vector<std::optional<WorkItem>> slots(texts.size());
    {
      StageClock clock(stats.collect);
      try {
        while (auto item = clock.wait([&] { return q_out.pop(); })) {
          const std::size_t index = item->sample_index;
          if (index >= slots.size() || slots[index]) {
            throw Error(ErrorKind::Correctness, "pipeline produced sample " + std::to_string(index) + " twice");
          }
          slots[index] = std::move(*item);
          ++stats.collect.items;
        }
      } catch (...) {
        fail();
      }
    }
    // jthreads join here, before the error check: every stage has stopped.
    feeder.join();
    preprocessor.join();
    inference.join();
    postprocessor.join();

    if (auto error = failure.get()) std::rethrow_exception(error);
    result.items.reserve(slots.size());
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (!slots[i]) throw Error(ErrorKind::Correctness, "pipeline lost sample " + std::to_string(i));
      result.items.push_back(std::move(*slots[i]));
    }
  }

  stats.wall_seconds = stages.now();
  count_tokens(result.items, stats);
  return result;
}

PipelineResult run_sequential(std::span<const std::string> texts, const Model& model, const TextCodec& codec,
                              const PipelineSettings& settings) {
  check_settings(settings);
  PipelineResult result;
  StageStats& stats = result.stats;
  const Stages stages{model, codec, settings, Clock::now()};

  std::vector<WorkItem> fed;
  {
    StageClock clock(stats.feed);
    fed.reserve(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) {
      WorkItem item;
      item.sample_index = i;
      item.text = texts[i];
      item.t_fed = stages.now();
      fed.push_back(std::move(item));
    }
    stats.feed.items = fed.size();
  }

  std::vector<Batch> batches;
  {
    StageClock clock(stats.preprocess);
    std::vector<WorkItem> window;
    for (auto& item : fed) {
      stages.preprocess(item);
      ++stats.preprocess.items;
      window.push_back(std::move(item));
      if (window.size() == settings.window) {
        for (auto& b : stages.plan(window, stats)) batches.push_back(std::move(b));
      }
    }
    for (auto& b : stages.plan(window, stats)) batches.push_back(std::move(b));
    stats.batches = batches.size();
  }

  {
    StageClock clock(stats.inference);
    for (auto& batch : batches) {
      stages.infer(batch);
      stats.inference.items += batch.size();
    }
  }

  {
    StageClock clock(stats.postprocess);
    for (auto& batch : batches) {
      for (auto& item : batch) {
        stages.postprocess(item);
        ++stats.postprocess.items;
      }
    }
  }

  {
    StageClock clock(stats.collect);
    result.items.resize(texts.size());
    for (auto& batch : batches) {
      for (auto& item : batch) {
        const std::size_t index = item.sample_index;
        result.items[index] = std::move(item);
        ++stats.collect.items;
      }
    }
  }

  stats.wall_seconds = stages.now();
  count_tokens(result.items, stats);
  return result;
}

std::vector<std::string> read_contents(std::istream& in) {
  std::vector<std::string> contents;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("content") || !j["content"].is_string()) {
      throw Error(ErrorKind::Format, "line " + std::to_string(line_no) + ": expected an object with a string \"content\"");
    }
    contents.push_back(j["content"].get<std::string>());
  }
  return contents;
}

std::vector<std::string> load_contents(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return read_contents(in);
}

void write_contents(std::ostream& out, std::span<const std::string> contents) {
  for (const auto& text : contents) out << nlohmann::json{{"content", text}}.dump() << '\n';
}

void write_results(std::ostream& out, std::span<const WorkItem> items) {
  for (const auto& item : items) {
    nlohmann::json j;
    j["content"] = item.text;
    j["summary"] = item.output_text.value_or("");
    j["sample_index"] = item.sample_index;
    out << j.dump() << '\n';
  }
}

void save_results(const std::filesystem::path& path, std::span<const WorkItem> items) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  write_results(out, items);
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace tinfer

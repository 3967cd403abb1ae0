#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tinfer/model.hpp"
#include "tinfer/tokenizer.hpp"

namespace tinfer {

/// Order-preserving bijection between the kept original ids and 0..K-1.
struct PrunedVocabMap {
  std::size_t old_vocab_size = 0;
  std::vector<TokenId> kept_old_ids;  // ascending; index is the new id
  std::vector<TokenId> old_to_new;    // length old_vocab_size, -1 where dropped
  std::optional<std::size_t> keep_count;
  std::optional<std::uint64_t> min_frequency;

  std::size_t size() const noexcept { return kept_old_ids.size(); }
  bool kept(TokenId old_id) const { return new_id(old_id) >= 0; }
  /// -1 when dropped; Vocab error when outside the original vocab.
  TokenId new_id(TokenId old_id) const;
  TokenId old_id(TokenId new_id) const;

  /// Builds the inverse table from kept ids; throws Parameter if they are
  /// unsorted, duplicated or out of range.
  static PrunedVocabMap from_kept(std::size_t old_vocab_size, std::vector<TokenId> kept_old_ids);

  friend bool operator==(const PrunedVocabMap&, const PrunedVocabMap&) = default;
};

/// counts[id] = occurrences of id over encode(text) for every text.
std::vector<std::uint64_t> scan_frequencies(std::span<const std::string> corpus, const Tokenizer& tokenizer);

/// Keeps the specials plus the highest-count remaining ids (ties to the
/// lower id) up to `keep_count` in total.
PrunedVocabMap build_pruned_vocab(std::span<const std::uint64_t> counts, std::size_t keep_count,
                                  std::span<const TokenId> specials);
/// Keeps the specials plus every id whose count is at least `min_frequency`.
PrunedVocabMap build_pruned_vocab_by_frequency(std::span<const std::uint64_t> counts, std::uint64_t min_frequency,
                                               std::span<const TokenId> specials);

/// Restricts token_embedding rows and lm_head columns to the kept ids, in
/// new-id order. eos/pad in the config are renumbered. Every other weight is
/// copied unchanged.
Model prune_token_embedding(const Model& model, const PrunedVocabMap& map);
/// Keeps the first `new_max_position` position rows.
Model prune_position_embedding(const Model& model, std::size_t new_max_position);

/// Kept tokens in new-id order, with frequencies and specials carried over.
Vocab prune_vocab(const Vocab& vocab, const PrunedVocabMap& map);

/// Maps original ids to new ids; dropped ids become `unk_new`.
std::vector<TokenId> remap_ids(const PrunedVocabMap& map, std::span<const TokenId> old_ids, TokenId unk_new);

/// TSV, one `old_id<TAB>new_id` line per kept id in ascending order. The
/// original vocab size is recorded in a `#old_vocab_size=<n>` header, followed
/// by optional `#keep_count=` / `#min_frequency=` lines.
void write_vocab_map(std::ostream& out, const PrunedVocabMap& map);
PrunedVocabMap read_vocab_map(std::istream& in);
void save_vocab_map(const PrunedVocabMap& map, const std::filesystem::path& path);
PrunedVocabMap load_vocab_map(const std::filesystem::path& path);

}  // namespace tinfer

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tinfer/model.hpp"

namespace tinfer {

struct SpecialIds {
  TokenId unk = 0;
  TokenId eos = 1;
  TokenId pad = 2;

  friend bool operator==(const SpecialIds&, const SpecialIds&) = default;
};

/// Token strings indexed by id. Ids are dense, strings unique, non-empty and
/// valid UTF-8 without tabs or newlines.
class Vocab {
 public:
  Vocab() = default;
  /// Throws ErrorKind::Vocab if the invariants do not hold.
  Vocab(std::vector<std::string> tokens, SpecialIds specials,
        std::vector<std::optional<std::uint64_t>> frequency = {});

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const SpecialIds& specials() const noexcept { return specials_; }
  bool is_special(TokenId id) const noexcept {
    return id == specials_.unk || id == specials_.eos || id == specials_.pad;
  }
  /// Per-token counts; same length as tokens, entries may be absent.
  const std::vector<std::optional<std::uint64_t>>& frequency() const noexcept { return frequency_; }

  friend bool operator==(const Vocab&, const Vocab&) = default;

 private:
  std::vector<std::string> tokens_;
  SpecialIds specials_;
  std::vector<std::optional<std::uint64_t>> frequency_;
};

/// TSV: header lines `#unk=<id>`, `#eos=<id>`, `#pad=<id>`, then one
/// `token<TAB>frequency` line per id (the tab and count may be omitted).
void write_vocab(std::ostream& out, const Vocab& vocab);
Vocab read_vocab(std::istream& in);
void save_vocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab load_vocab(const std::filesystem::path& path);

/// Greedy longest-match tokenizer over a code-point trie. Special tokens are
/// not matchable from text. Immutable after construction.
class Tokenizer {
 public:
  explicit Tokenizer(Vocab vocab);

  const Vocab& vocab() const noexcept { return vocab_; }

  /// Never fails. Unmatched code points (and each byte of invalid UTF-8)
  /// become one unk each.
  std::vector<TokenId> encode(std::string_view text) const;
  /// Concatenated token strings; unk renders as U+FFFD.
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t node_count() const noexcept { return first_child_.size() - 1; }
  std::size_t terminal_count() const noexcept;

 private:
  struct Edge {
    char32_t code_point;
    std::uint32_t target;
  };

  std::uint32_t child(std::uint32_t node, char32_t cp) const;

  Vocab vocab_;
  // CSR layout: children of node n are edges_[first_child_[n], first_child_[n + 1]),
  // sorted by code point.
  std::vector<std::uint32_t> first_child_;
  std::vector<Edge> edges_;
  std::vector<TokenId> terminal_;  // per node, -1 if none
};

namespace utf8 {

inline constexpr char32_t kInvalid = 0xFFFFFFFF;

/// Decodes one code point starting at text[pos]; `length` receives the
/// number of bytes consumed (1 for an invalid byte, with kInvalid returned).
char32_t next(std::string_view text, std::size_t pos, std::size_t& length);
std::size_t count(std::string_view text);
bool valid(std::string_view text);

}  // namespace utf8

}  // namespace tinfer

#include "tinfer/pruning.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>

namespace tinfer {

TokenId PrunedVocabMap::new_id(TokenId old) const {
  if (old < 0 || static_cast<std::size_t>(old) >= old_to_new.size()) {
    throw Error(ErrorKind::Vocab, "token id " + std::to_string(old) + " outside the original vocab");
  }
  return old_to_new[static_cast<std::size_t>(old)];
}

TokenId PrunedVocabMap::old_id(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= kept_old_ids.size()) {
    throw Error(ErrorKind::Vocab, "token id " + std::to_string(id) + " outside the pruned vocab");
  }
  return kept_old_ids[static_cast<std::size_t>(id)];
}

PrunedVocabMap PrunedVocabMap::from_kept(std::size_t old_vocab_size, std::vector<TokenId> kept) {
  PrunedVocabMap map;
  map.old_vocab_size = old_vocab_size;
  map.old_to_new.assign(old_vocab_size, -1);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const TokenId id = kept[i];
    if (id < 0 || static_cast<std::size_t>(id) >= old_vocab_size || (i > 0 && kept[i - 1] >= id)) {
      throw Error(ErrorKind::Parameter, "kept ids must be ascending, unique and inside the vocab");
    }
    map.old_to_new[static_cast<std::size_t>(id)] = static_cast<TokenId>(i);
  }
  map.kept_old_ids = std::move(kept);
  return map;
}

std::vector<std::uint64_t> scan_frequencies(std::span<const std::string> corpus, const Tokenizer& tokenizer) {
  std::vector<std::uint64_t> counts(tokenizer.vocab().size(), 0);
  for (const auto& text : corpus) {
    for (TokenId id : tokenizer.encode(text)) ++counts[static_cast<std::size_t>(id)];
  }
  return counts;
}

namespace {

std::vector<bool> special_mask(std::size_t n, std::span<const TokenId> specials) {
  std::vector<bool> mask(n, false);
  for (TokenId s : specials) {
    if (s < 0 || static_cast<std::size_t>(s) >= n) throw Error(ErrorKind::Parameter, "special id outside vocab");
    mask[static_cast<std::size_t>(s)] = true;
  }
  return mask;
}

std::vector<TokenId> ids_where(const std::vector<bool>& keep) {
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) ids.push_back(static_cast<TokenId>(i));
  }
  return ids;
}

}  // namespace

PrunedVocabMap build_pruned_vocab(std::span<const std::uint64_t> counts, std::size_t keep_count,
                                  std::span<const TokenId> specials) {
  auto keep = special_mask(counts.size(), specials);
  const auto forced = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
  if (keep_count < forced || keep_count > counts.size()) {
    throw Error(ErrorKind::Parameter, "keep count " + std::to_string(keep_count) + " outside [" +
                                          std::to_string(forced) + ", " + std::to_string(counts.size()) + "]");
  }
  std::vector<TokenId> order;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (!keep[i]) order.push_back(static_cast<TokenId>(i));
  }
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return counts[a] > counts[b]; });
  for (std::size_t i = 0; i < keep_count - forced; ++i) keep[static_cast<std::size_t>(order[i])] = true;

  auto map = PrunedVocabMap::from_kept(counts.size(), ids_where(keep));
  map.keep_count = keep_count;
  return map;
}

PrunedVocabMap build_pruned_vocab_by_frequency(std::span<const std::uint64_t> counts, std::uint64_t min_frequency,
                                               std::span<const TokenId> specials) {
  auto keep = special_mask(counts.size(), specials);
  for (std::size_t i = 0; i < counts.size(); ++i) keep[i] = keep[i] || counts[i] >= min_frequency;
  auto map = PrunedVocabMap::from_kept(counts.size(), ids_where(keep));
  map.min_frequency = min_frequency;
  return map;
}

namespace {

// Copies the listed rows of a [rows x cols] tensor.
Tensor select_rows(const Tensor& t, std::span<const TokenId> rows) {
  const std::size_t row_bytes = t.dim(1) * dtype_size(t.dtype());
  Tensor out({rows.size(), t.dim(1)}, t.dtype());
  const auto src = t.bytes();
  auto dst = out.mutable_bytes();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::memcpy(dst.data() + r * row_bytes, src.data() + static_cast<std::size_t>(rows[r]) * row_bytes, row_bytes);
  }
  return out;
}

Tensor select_columns(const Tensor& t, std::span<const TokenId> cols) {
  const std::size_t esz = dtype_size(t.dtype()), in_cols = t.dim(1);
  Tensor out({t.dim(0), cols.size()}, t.dtype());
  const auto src = t.bytes();
  auto dst = out.mutable_bytes();
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      std::memcpy(dst.data() + (r * cols.size() + c) * esz,
                  src.data() + (r * in_cols + static_cast<std::size_t>(cols[c])) * esz, esz);
    }
  }
  return out;
}

}  // namespace

Model prune_token_embedding(const Model& model, const PrunedVocabMap& map) {
  const auto& c = model.config;
  if (map.old_vocab_size != c.vocab_size || map.old_to_new.size() != c.vocab_size || map.kept_old_ids.empty()) {
    throw Error(ErrorKind::Shape, "vocab map was built for a different vocab size");
  }
  for (TokenId s : {c.eos_token, c.pad_token}) {
    if (!map.kept(s)) throw Error(ErrorKind::Shape, "vocab map drops special token " + std::to_string(s));
  }
  Model out = model;
  out.config.vocab_size = map.size();
  out.config.eos_token = map.new_id(c.eos_token);
  out.config.pad_token = map.new_id(c.pad_token);
  out.token_embedding = select_rows(model.token_embedding, map.kept_old_ids);
  out.lm_head = select_columns(model.lm_head, map.kept_old_ids);
  out.validate();
  return out;
}

Model prune_position_embedding(const Model& model, std::size_t new_max_position) {
  if (new_max_position < 1 || new_max_position > model.config.max_position) {
    throw Error(ErrorKind::Parameter, "new max position " + std::to_string(new_max_position) + " outside [1, " +
                                          std::to_string(model.config.max_position) + "]");
  }
  std::vector<TokenId> rows(new_max_position);
  std::iota(rows.begin(), rows.end(), 0);
  Model out = model;
  out.config.max_position = new_max_position;
  out.position_embedding = select_rows(model.position_embedding, rows);
  out.validate();
  return out;
}

Vocab prune_vocab(const Vocab& vocab, const PrunedVocabMap& map) {
  if (map.old_vocab_size != vocab.size()) throw Error(ErrorKind::Shape, "vocab map was built for a different vocab");
  const auto& s = vocab.specials();
  for (TokenId id : {s.unk, s.eos, s.pad}) {
    if (!map.kept(id)) throw Error(ErrorKind::Shape, "vocab map drops special token " + std::to_string(id));
  }
  std::vector<std::string> tokens;
  std::vector<std::optional<std::uint64_t>> frequency;
  for (TokenId old : map.kept_old_ids) {
    tokens.push_back(vocab.tokens()[static_cast<std::size_t>(old)]);
    frequency.push_back(vocab.frequency()[static_cast<std::size_t>(old)]);
  }
  return Vocab(std::move(tokens), SpecialIds{map.new_id(s.unk), map.new_id(s.eos), map.new_id(s.pad)},
               std::move(frequency));
}

std::vector<TokenId> remap_ids(const PrunedVocabMap& map, std::span<const TokenId> old_ids, TokenId unk_new) {
  std::vector<TokenId> out;
  out.reserve(old_ids.size());
  for (TokenId id : old_ids) {
    const TokenId n = map.new_id(id);
    out.push_back(n >= 0 ? n : unk_new);
  }
  return out;
}

void write_vocab_map(std::ostream& out, const PrunedVocabMap& map) {
  out << "#old_vocab_size=" << map.old_vocab_size << '\n';
  if (map.keep_count) out << "#keep_count=" << *map.keep_count << '\n';
  if (map.min_frequency) out << "#min_frequency=" << *map.min_frequency << '\n';
  for (std::size_t i = 0; i < map.kept_old_ids.size(); ++i) out << map.kept_old_ids[i] << '\t' << i << '\n';
  if (!out) throw Error(ErrorKind::Io, "failed writing vocab map");
}

namespace {

template <typename Int>
Int parse_field(std::string_view text) {
  Int value{};
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (text.empty() || ec != std::errc{} || end != text.data() + text.size()) {
    throw Error(ErrorKind::Format, "bad vocab map field '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace

PrunedVocabMap read_vocab_map(std::istream& in) {
  std::string line;
  constexpr std::string_view kHeader = "#old_vocab_size=";
  if (!std::getline(in, line) || !line.starts_with(kHeader)) throw Error(ErrorKind::Format, "missing vocab map header");
  const auto old_size = parse_field<std::size_t>(std::string_view(line).substr(kHeader.size()));
  std::vector<TokenId> kept;
  std::optional<std::size_t> keep_count;
  std::optional<std::uint64_t> min_frequency;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.starts_with("#keep_count=")) {
      keep_count = parse_field<std::size_t>(std::string_view(line).substr(12));
      continue;
    }
    if (line.starts_with("#min_frequency=")) {
      min_frequency = parse_field<std::uint64_t>(std::string_view(line).substr(15));
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(ErrorKind::Format, "vocab map line without tab");
    const auto old_id = parse_field<TokenId>(std::string_view(line).substr(0, tab));
    const auto new_id = parse_field<TokenId>(std::string_view(line).substr(tab + 1));
    if (new_id != static_cast<TokenId>(kept.size())) {
      throw Error(ErrorKind::Format, "vocab map new ids must be 0..K-1 in order");
    }
    kept.push_back(old_id);
  }
  auto map = PrunedVocabMap::from_kept(old_size, std::move(kept));
  map.keep_count = keep_count;
  map.min_frequency = min_frequency;
  return map;
}

void save_vocab_map(const PrunedVocabMap& map, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_vocab_map(out, map);
}

PrunedVocabMap load_vocab_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return read_vocab_map(in);
}

}  // namespace tinfer

#include "tinfer/tokenizer.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <unordered_set>

namespace tinfer {

namespace utf8 {

char32_t next(std::string_view text, std::size_t pos, std::size_t& length) {
  const auto byte = [&](std::size_t i) { return static_cast<unsigned char>(text[i]); };
  const unsigned char lead = byte(pos);
  length = 1;
  if (lead < 0x80) return lead;

  std::size_t extra;
  char32_t cp, min;
  if ((lead & 0xE0) == 0xC0) {
    extra = 1, cp = lead & 0x1F, min = 0x80;
  } else if ((lead & 0xF0) == 0xE0) {
    extra = 2, cp = lead & 0x0F, min = 0x800;
  } else if ((lead & 0xF8) == 0xF0) {
    extra = 3, cp = lead & 0x07, min = 0x10000;
  } else {
    return kInvalid;
  }
  if (pos + extra >= text.size()) return kInvalid;
  for (std::size_t i = 1; i <= extra; ++i) {
    const unsigned char c = byte(pos + i);
    if ((c & 0xC0) != 0x80) return kInvalid;
    cp = (cp << 6) | (c & 0x3F);
  }
  if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return kInvalid;
  length = extra + 1;
  return cp;
}

std::size_t count(std::string_view text) {
  std::size_t n = 0;
  for (std::size_t pos = 0, len; pos < text.size(); pos += len, ++n) next(text, pos, len);
  return n;
}

bool valid(std::string_view text) {
  for (std::size_t pos = 0, len; pos < text.size(); pos += len) {
    if (next(text, pos, len) == kInvalid) return false;
  }
  return true;
}

}  // namespace utf8

Vocab::Vocab(std::vector<std::string> tokens, SpecialIds specials,
             std::vector<std::optional<std::uint64_t>> frequency)
    : tokens_(std::move(tokens)), specials_(specials), frequency_(std::move(frequency)) {
  if (frequency_.empty()) frequency_.resize(tokens_.size());
  if (frequency_.size() != tokens_.size()) throw Error(ErrorKind::Vocab, "frequency list length differs from vocab");

  std::unordered_set<std::string_view> seen;
  for (std::size_t id = 0; id < tokens_.size(); ++id) {
    const auto& t = tokens_[id];
    if (t.empty()) throw Error(ErrorKind::Vocab, "empty token string at id " + std::to_string(id));
    if (t.find_first_of("\t\n\r") != std::string::npos || !utf8::valid(t)) {
      throw Error(ErrorKind::Vocab, "token " + std::to_string(id) + " is not a tab/newline-free UTF-8 string");
    }
    if (!seen.insert(t).second) throw Error(ErrorKind::Vocab, "duplicate token '" + t + "'");
  }
  const auto n = static_cast<TokenId>(tokens_.size());
  for (TokenId s : {specials_.unk, specials_.eos, specials_.pad}) {
    if (s < 0 || s >= n) throw Error(ErrorKind::Vocab, "special id " + std::to_string(s) + " outside vocab");
  }
  if (specials_.unk == specials_.eos || specials_.unk == specials_.pad || specials_.eos == specials_.pad) {
    throw Error(ErrorKind::Vocab, "special ids must be distinct");
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(ErrorKind::Vocab, "token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void write_vocab(std::ostream& out, const Vocab& vocab) {
  const auto& s = vocab.specials();
  out << "#unk=" << s.unk << "\n#eos=" << s.eos << "\n#pad=" << s.pad << '\n';
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    out << vocab.tokens()[id];
    if (const auto& f = vocab.frequency()[id]) out << '\t' << *f;
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "failed writing vocab");
}

namespace {

template <typename Int>
Int parse_int(std::string_view text, const char* what) {
  Int value{};
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || end != text.data() + text.size() || text.empty()) {
    throw Error(ErrorKind::Format, std::string("bad ") + what + " '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace

Vocab read_vocab(std::istream& in) {
  SpecialIds specials;
  std::string line;
  bool have[3] = {false, false, false};
  for (int i = 0; i < 3; ++i) {
    if (!std::getline(in, line)) throw Error(ErrorKind::Format, "vocab header truncated");
    static constexpr std::string_view keys[3] = {"#unk=", "#eos=", "#pad="};
    TokenId* slots[3] = {&specials.unk, &specials.eos, &specials.pad};
    bool matched = false;
    for (int k = 0; k < 3; ++k) {
      if (line.starts_with(keys[k]) && !have[k]) {
        *slots[k] = parse_int<TokenId>(std::string_view(line).substr(keys[k].size()), "special id");
        have[k] = matched = true;
      }
    }
    if (!matched) throw Error(ErrorKind::Format, "bad vocab header line '" + line + "'");
  }

  std::vector<std::string> tokens;
  std::vector<std::optional<std::uint64_t>> frequency;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      tokens.push_back(line);
      frequency.emplace_back();
    } else {
      tokens.push_back(line.substr(0, tab));
      frequency.emplace_back(parse_int<std::uint64_t>(std::string_view(line).substr(tab + 1), "frequency"));
    }
  }
  return Vocab(std::move(tokens), specials, std::move(frequency));
}

void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_vocab(out, vocab);
}

Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return read_vocab(in);
}

Tokenizer::Tokenizer(Vocab vocab) : vocab_(std::move(vocab)) {
  // Build with ordered maps, then flatten into CSR arrays.
  std::vector<std::map<char32_t, std::uint32_t>> children(1);
  std::vector<TokenId> terminal(1, -1);
  for (std::size_t id = 0; id < vocab_.size(); ++id) {
    if (vocab_.is_special(static_cast<TokenId>(id))) continue;
    const std::string_view t = vocab_.tokens()[id];
    std::uint32_t node = 0;
    for (std::size_t pos = 0, len; pos < t.size(); pos += len) {
      const char32_t cp = utf8::next(t, pos, len);
      auto [it, inserted] = children[node].try_emplace(cp, static_cast<std::uint32_t>(children.size()));
      if (inserted) {
        children.emplace_back();
        terminal.push_back(-1);
      }
      node = it->second;
    }
    terminal[node] = static_cast<TokenId>(id);
  }

  first_child_.reserve(children.size() + 1);
  first_child_.push_back(0);
  for (const auto& c : children) {
    for (const auto& [cp, target] : c) edges_.push_back({cp, target});
    first_child_.push_back(static_cast<std::uint32_t>(edges_.size()));
  }
  terminal_ = std::move(terminal);
}

std::size_t Tokenizer::terminal_count() const noexcept {
  return static_cast<std::size_t>(std::count_if(terminal_.begin(), terminal_.end(), [](TokenId t) { return t >= 0; }));
}

std::uint32_t Tokenizer::child(std::uint32_t node, char32_t cp) const {
  const auto begin = edges_.begin() + first_child_[node], end = edges_.begin() + first_child_[node + 1];
  const auto it = std::lower_bound(begin, end, cp, [](const Edge& e, char32_t c) { return e.code_point < c; });
  return it != end && it->code_point == cp ? it->target : 0;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    TokenId best = -1;
    std::size_t best_end = 0, first_len = 0;
    std::uint32_t node = 0;
    for (std::size_t p = pos, len; p < text.size(); p += len) {
      const char32_t cp = utf8::next(text, p, len);
      if (p == pos) first_len = len;
      if (cp == utf8::kInvalid) break;
      node = child(node, cp);
      if (node == 0) break;
      if (terminal_[node] >= 0) {
        best = terminal_[node];
        best_end = p + len;
      }
    }
    if (best >= 0) {
      ids.push_back(best);
      pos = best_end;
    } else {
      ids.push_back(vocab_.specials().unk);
      pos += first_len;
    }
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    const auto& t = vocab_.token(id);
    if (id == vocab_.specials().unk) {
      out += "\xEF\xBF\xBD";
    } else {
      out += t;
    }
  }
  return out;
}

}  // namespace tinfer

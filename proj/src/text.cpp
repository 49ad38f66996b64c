#include "gau/text.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "gau/errors.hpp"
#include "gau/rng.hpp"

namespace gau {

namespace {

constexpr char32_t kReplacement = 0xFFFD;

// Decodes one code point starting at text[i] and advances i.
char32_t decode_utf8(std::string_view text, size_t& i) {
  const auto b0 = static_cast<unsigned char>(text[i]);
  size_t len = 0;
  char32_t cp = 0;
  if (b0 < 0x80) {
    ++i;
    return b0;
  } else if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    ++i;
    return kReplacement;
  }
  if (i + len > text.size()) {
    ++i;
    return kReplacement;
  }
  for (size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(text[i + k]);
    if ((b & 0xC0) != 0x80) {
      ++i;
      return kReplacement;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  i += len;
  return cp;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

bool is_space(char32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\v' || cp == '\f' ||
         cp == 0x3000;
}

const char* const kReservedTokens[kNumReserved] = {"[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"};

}  // namespace

bool is_cjk(char32_t cp) {
  return (cp >= 0x4E00 && cp <= 0x9FFF) || (cp >= 0x3400 && cp <= 0x4DBF) ||
         (cp >= 0xF900 && cp <= 0xFAFF) || (cp >= 0x20000 && cp <= 0x2FA1F) ||
         (cp >= 0x3001 && cp <= 0x303F) || (cp >= 0xFF00 && cp <= 0xFFEF);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) tokens.push_back(std::move(word));
    word.clear();
  };
  for (size_t i = 0; i < text.size();) {
    const char32_t cp = decode_utf8(text, i);
    if (is_space(cp)) {
      flush();
    } else if (is_cjk(cp)) {
      flush();
      std::string ch;
      append_utf8(ch, cp);
      tokens.push_back(std::move(ch));
    } else {
      append_utf8(word, cp);
    }
  }
  flush();
  return tokens;
}

Vocab::Vocab() {
  for (int32_t i = 0; i < kNumReserved; ++i) {
    id_to_token_.emplace_back(kReservedTokens[i]);
    token_to_id_.emplace(kReservedTokens[i], i);
  }
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  Vocab v;
  for (auto& t : tokens) {
    if (v.token_to_id_.count(t)) throw ConfigError("vocab: duplicate token '" + t + "'");
    v.token_to_id_.emplace(t, static_cast<int32_t>(v.id_to_token_.size()));
    v.id_to_token_.push_back(std::move(t));
  }
  return v;
}

int32_t Vocab::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int32_t id) const {
  if (id < 0 || static_cast<size_t>(id) >= id_to_token_.size()) {
    throw DimensionError("vocab: id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(id_to_token_.size()) + ")");
  }
  return id_to_token_[static_cast<size_t>(id)];
}

bool Vocab::contains(std::string_view token) const {
  return token_to_id_.count(std::string(token)) != 0;
}

std::vector<int32_t> Vocab::encode(std::string_view text) const {
  std::vector<int32_t> ids;
  for (const auto& t : tokenize(text)) ids.push_back(id(t));
  return ids;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocab file " + path.string());
  for (size_t i = kNumReserved; i < id_to_token_.size(); ++i) out << id_to_token_[i] << '\n';
  if (!out) throw IoError("error writing vocab file " + path.string());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  return from_tokens(read_lines(path));
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

Vocab build_vocab_from_lines(std::span<const std::string> lines, size_t max_size) {
  if (max_size <= static_cast<size_t>(kNumReserved)) {
    throw ConfigError("vocab_size: must exceed the " + std::to_string(kNumReserved) +
                      " reserved ids, got " + std::to_string(max_size));
  }
  std::map<std::string, uint64_t> counts;
  for (const auto& line : lines) {
    for (auto& t : tokenize(line)) ++counts[std::move(t)];
  }
  // Reserved spellings in the text are treated as ordinary text of another
  // token, so never assign them new ids.
  for (const char* r : kReservedTokens) counts.erase(r);
  if (counts.empty()) throw Error("build_vocab: corpus contains no tokens");
  std::vector<std::pair<std::string, uint64_t>> sorted(counts.begin(), counts.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const size_t keep = std::min(sorted.size(), max_size - kNumReserved);
  std::vector<std::string> tokens;
  tokens.reserve(keep);
  for (size_t i = 0; i < keep; ++i) tokens.push_back(std::move(sorted[i].first));
  return Vocab::from_tokens(std::move(tokens));
}

Vocab build_vocab(const std::filesystem::path& corpus_path, size_t max_size) {
  const auto lines = read_lines(corpus_path);
  return build_vocab_from_lines(lines, max_size);
}

TokenCorpus encode_corpus(std::span<const std::string> all_lines, size_t vocab_max_size,
                          double heldout_fraction) {
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) {
    throw ConfigError("heldout_fraction: must be in [0, 1)");
  }
  std::vector<std::string> lines;
  for (const auto& l : all_lines) {
    if (!tokenize(l).empty()) lines.push_back(l);
  }
  if (lines.empty()) throw Error("corpus contains no tokens");
  size_t held = static_cast<size_t>(heldout_fraction * double(lines.size()));
  if (held == 0 && heldout_fraction > 0 && lines.size() >= 2) held = 1;
  const size_t train_lines = lines.size() - held;

  TokenCorpus corpus;
  corpus.vocab =
      build_vocab_from_lines(std::span<const std::string>(lines.data(), train_lines), vocab_max_size);
  auto append = [&](std::vector<int32_t>& stream, const std::string& line) {
    if (!stream.empty()) stream.push_back(kSepId);
    for (int32_t id : corpus.vocab.encode(line)) stream.push_back(id);
  };
  for (size_t i = 0; i < lines.size(); ++i) append(i < train_lines ? corpus.train : corpus.heldout, lines[i]);
  corpus.train_docs = train_lines;
  corpus.heldout_docs = held;
  return corpus;
}

TokenCorpus load_corpus(const std::filesystem::path& path, size_t vocab_max_size,
                        double heldout_fraction) {
  const auto lines = read_lines(path);
  return encode_corpus(lines, vocab_max_size, heldout_fraction);
}

namespace {

// Samples an index with probability proportional to 1/(rank+1)^exponent.
class ZipfSampler {
 public:
  ZipfSampler(size_t n, double exponent) : cdf_(n) {
    double total = 0;
    for (size_t i = 0; i < n; ++i) {
      total += 1.0 / std::pow(double(i + 1), exponent);
      cdf_[i] = total;
    }
    for (auto& c : cdf_) c /= total;
  }
  size_t operator()(Rng& rng) const {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return std::min(static_cast<size_t>(it - cdf_.begin()), cdf_.size() - 1);
  }

 private:
  std::vector<double> cdf_;
};

}  // namespace

std::string generate_corpus(uint64_t seed, size_t target_bytes) {
  constexpr size_t kChars = 2400;
  constexpr size_t kWords = 6000;
  constexpr size_t kSuccessors = 6;
  Rng rng(seed);

  // Character inventory: distinct ideographs from the basic block, shuffled
  // so frequency rank is unrelated to code point order.
  std::vector<char32_t> chars(0x9FA5 - 0x4E00);
  for (size_t i = 0; i < chars.size(); ++i) chars[i] = static_cast<char32_t>(0x4E00 + i);
  for (size_t i = 0; i < kChars; ++i) std::swap(chars[i], chars[i + rng.below(chars.size() - i)]);
  chars.resize(kChars);

  const ZipfSampler char_zipf(kChars, 1.0);
  const double length_cdf[] = {0.2, 0.65, 0.9, 1.0};
  std::vector<std::string> words(kWords);
  for (auto& w : words) {
    const double u = rng.uniform();
    const size_t len = 1 + static_cast<size_t>(std::upper_bound(std::begin(length_cdf),
                                                                std::end(length_cdf), u) -
                                               std::begin(length_cdf));
    for (size_t k = 0; k < std::min<size_t>(len, 4); ++k) append_utf8(w, chars[char_zipf(rng)]);
  }
  const ZipfSampler word_zipf(kWords, 1.05);
  std::vector<std::array<uint32_t, kSuccessors>> successors(kWords);
  for (auto& s : successors) {
    for (auto& id : s) id = static_cast<uint32_t>(word_zipf(rng));
  }
  const ZipfSampler successor_pick(kSuccessors, 1.0);

  std::string out;
  out.reserve(target_bytes + 1024);
  while (out.size() < target_bytes) {
    const size_t sentences = 3 + rng.below(6);
    for (size_t s = 0; s < sentences; ++s) {
      const size_t len = 4 + rng.below(10);
      size_t w = word_zipf(rng);
      for (size_t k = 0; k < len; ++k) {
        out += words[w];
        if (k + 1 < len && rng.uniform() < 0.08) out += "，";
        w = rng.uniform() < 0.75 ? successors[w][successor_pick(rng)] : word_zipf(rng);
      }
      out += "。";
    }
    out += '\n';
  }
  return out;
}

}  // namespace gau

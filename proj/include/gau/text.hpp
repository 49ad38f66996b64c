#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace gau {

inline constexpr int32_t kPadId = 0;
inline constexpr int32_t kUnkId = 1;
inline constexpr int32_t kMaskId = 2;
inline constexpr int32_t kClsId = 3;
inline constexpr int32_t kSepId = 4;
inline constexpr int32_t kNumReserved = 5;

// True for ideographs, CJK punctuation and fullwidth forms; these are
// tokenized one code point at a time.
bool is_cjk(char32_t cp);

// Splits on whitespace; CJK code points become single-character tokens.
// Invalid UTF-8 bytes are replaced by U+FFFD.
std::vector<std::string> tokenize(std::string_view text);

class Vocab {
 public:
  Vocab();

  // tokens[i] is the token for id kNumReserved + i.
  static Vocab from_tokens(std::vector<std::string> tokens);

  size_t size() const { return id_to_token_.size(); }
  int32_t id(std::string_view token) const;  // kUnkId when absent
  const std::string& token(int32_t id) const;
  bool contains(std::string_view token) const;

  std::vector<int32_t> encode(std::string_view text) const;

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int32_t> token_to_id_;
};

// Frequency-sorted vocabulary (count desc, then bytewise token order),
// truncated so that size() <= max_size including reserved ids.
Vocab build_vocab_from_lines(std::span<const std::string> lines, size_t max_size);
Vocab build_vocab(const std::filesystem::path& corpus_path, size_t max_size);

std::vector<std::string> read_lines(const std::filesystem::path& path);

// Encoded corpus split into a training stream and a held-out stream. Each
// stream is the concatenation of its documents with SEP between them.
struct TokenCorpus {
  Vocab vocab;
  std::vector<int32_t> train;
  std::vector<int32_t> heldout;
  size_t train_docs = 0;
  size_t heldout_docs = 0;
};

// The last `heldout_fraction` of the lines (at least one when there are two
// or more) form the held-out split.
TokenCorpus load_corpus(const std::filesystem::path& path, size_t vocab_max_size,
                        double heldout_fraction = 0.05);
TokenCorpus encode_corpus(std::span<const std::string> lines, size_t vocab_max_size,
                          double heldout_fraction = 0.05);

// Deterministic synthetic Chinese-script corpus of roughly `target_bytes`
// bytes, one document per line. Words of 1-4 ideographs follow a Zipfian law
// with sticky word-to-word transitions, so both character identity and
// context carry learnable signal.
std::string generate_corpus(uint64_t seed, size_t target_bytes);

}  // namespace gau

#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mdctr/errors.hpp"

namespace mdctr {

/// One (domain, user, item, label) interaction with its textual features.
struct InteractionRecord {
  std::string domain;
  std::string user_id;
  std::vector<std::string> click_history;  // item titles, most recent last
  std::string item_id;
  std::string title;
  std::string brand;
  std::string price;  // rendered verbatim, e.g. "25.00"
  int label = 0;      // {0,1}

  void validate(std::size_t max_history = 2) const;
};

enum class PromptMode { Full, IdName, IdOnly };

PromptMode prompt_mode_from_string(const std::string& s);
std::string to_string(PromptMode m);

/// Fill the prompt template from a record. `Full` renders domain, user id,
/// click history (up to the two most recent titles), item id, title, brand
/// and price; `IdName` keeps ids plus the title; `IdOnly` keeps ids only.
std::string render_prompt(const InteractionRecord& rec, PromptMode mode = PromptMode::Full,
                          std::size_t max_history = 2);

/// Word-level token dictionary. Ids 0..3 are reserved (PAD, UNK, BOS, EOS);
/// content ids follow, frequency-ranked with lexicographic tie-breaks.
/// Immutable after build and freely shareable between workers.
class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kBos = 2;
  static constexpr std::int32_t kEos = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary();

  std::int32_t id_of(const std::string& token) const;  // kUnk when absent
  const std::string& token_of(std::int32_t id) const;
  std::size_t size() const { return id_to_token_.size(); }

  void save(const std::string& path) const;  // token<TAB>id lines
  static Vocabulary load(const std::string& path);

  // serialization helpers for checkpoint embedding
  std::vector<std::string> content_tokens() const;
  static Vocabulary from_content_tokens(const std::vector<std::string>& tokens);

  friend Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t max_size);

 private:
  void push_token(const std::string& tok);
  std::unordered_map<std::string, std::int32_t> token_to_id_;
  std::vector<std::string> id_to_token_;
};

/// lowercased word tokens: maximal runs of [a-z0-9_] after lowercasing
std::vector<std::string> split_words(const std::string& text);

/// Build a vocabulary from a text corpus, keeping at most `max_size` entries
/// (reserved ids included). Deterministic: frequency rank, ties broken
/// lexicographically.
Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t max_size);

/// Fixed-length id sequence with its attention mask.
struct TokenSequence {
  std::vector<std::int32_t> ids;        // length == max_seq_len
  std::vector<std::uint8_t> attention;  // 1 exactly on non-PAD positions
};

/// BOS + content ids + EOS, right-truncated then right-padded to
/// `max_seq_len`. Unknown words map to UNK.
TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, std::size_t max_seq_len);

}  // namespace mdctr

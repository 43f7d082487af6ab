#include "mdctr/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

namespace mdctr {

void InteractionRecord::validate(std::size_t max_history) const {
  auto require = [](const std::string& value, const char* field) {
    if (value.empty()) throw ValidationError(std::string("record: missing field '") + field + "'");
  };
  require(domain, "domain");
  require(user_id, "user_id");
  require(item_id, "item_id");
  require(title, "title");
  require(brand, "brand");
  require(price, "price");
  if (label != 0 && label != 1)
    throw ValidationError("record: label " + std::to_string(label) + " outside {0,1}");
  if (click_history.size() > max_history)
    throw ValidationError("record: click history longer than " + std::to_string(max_history));
  for (const auto& h : click_history) require(h, "click_history entry");
}

PromptMode prompt_mode_from_string(const std::string& s) {
  if (s == "full") return PromptMode::Full;
  if (s == "id_name") return PromptMode::IdName;
  if (s == "id_only") return PromptMode::IdOnly;
  throw ValidationError("unknown prompt_mode '" + s + "' (expected full|id_name|id_only)");
}

std::string to_string(PromptMode m) {
  switch (m) {
    case PromptMode::Full: return "full";
    case PromptMode::IdName: return "id_name";
    case PromptMode::IdOnly: return "id_only";
  }
  return "full";
}

std::string render_prompt(const InteractionRecord& rec, PromptMode mode, std::size_t max_history) {
  rec.validate(max_history);
  std::ostringstream os;
  os << rec.domain << ": The user ID is user_" << rec.user_id;
  if (mode == PromptMode::Full) {
    if (rec.click_history.empty()) {
      os << ", who has no recent clicks.";
    } else if (rec.click_history.size() == 1) {
      os << ", who clicked product '" << rec.click_history[0] << "' recently.";
    } else {
      // two-slot history: keep the most recent entries
      const auto& a = rec.click_history[rec.click_history.size() - 2];
      const auto& b = rec.click_history[rec.click_history.size() - 1];
      os << ", who clicked product '" << a << "' and product '" << b << "' recently.";
    }
    os << " The ID of the current product is product_" << rec.item_id << ", the title is " << rec.title
       << ", the brand is " << rec.brand << ", the price is " << rec.price << ".";
  } else if (mode == PromptMode::IdName) {
    os << ". The ID of the current product is product_" << rec.item_id << ", the title is " << rec.title
       << ".";
  } else {
    os << ". The ID of the current product is product_" << rec.item_id << ".";
  }
  return os.str();
}

Vocabulary::Vocabulary() {
  push_token("<pad>");
  push_token("<unk>");
  push_token("<bos>");
  push_token("<eos>");
}

void Vocabulary::push_token(const std::string& tok) {
  token_to_id_.emplace(tok, static_cast<std::int32_t>(id_to_token_.size()));
  id_to_token_.push_back(tok);
}

std::int32_t Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
    throw ValidationError("vocabulary: id " + std::to_string(id) + " out of range");
  return id_to_token_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ValidationError("vocabulary: cannot write '" + path + "'");
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) out << id_to_token_[i] << '\t' << i << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("vocabulary: cannot read '" + path + "'");
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ValidationError("vocabulary: malformed line '" + line + "'");
    std::string tok = line.substr(0, tab);
    std::int32_t id = std::stoi(line.substr(tab + 1));
    if (static_cast<std::size_t>(id) < kReserved) continue;  // reserved ids are implicit
    if (static_cast<std::size_t>(id) != v.id_to_token_.size())
      throw ValidationError("vocabulary: non-contiguous id " + std::to_string(id));
    v.push_token(tok);
  }
  return v;
}

std::vector<std::string> Vocabulary::content_tokens() const {
  return {id_to_token_.begin() + kReserved, id_to_token_.end()};
}

Vocabulary Vocabulary::from_content_tokens(const std::vector<std::string>& tokens) {
  Vocabulary v;
  for (const auto& t : tokens) v.push_token(t);
  return v;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    unsigned char u = static_cast<unsigned char>(c);
    char lower = static_cast<char>(std::tolower(u));
    if (std::isalnum(u) || c == '_') {
      cur.push_back(lower);
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t max_size) {
  if (corpus.empty()) throw ValidationError("build_vocab: empty corpus");
  if (max_size <= Vocabulary::kReserved)
    throw ValidationError("build_vocab: max_size must exceed the reserved ids");
  std::map<std::string, std::size_t> counts;  // ordered map gives the lexicographic tie-break
  for (const auto& text : corpus)
    for (const auto& w : split_words(text)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [tok, cnt] : ranked) {
    if (v.id_to_token_.size() >= max_size) break;
    v.push_token(tok);
  }
  return v;
}

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, std::size_t max_seq_len) {
  if (max_seq_len < 2)
    throw ValidationError("tokenize: max_seq_len must be at least 2 to hold BOS and EOS");
  TokenSequence seq;
  seq.ids.reserve(max_seq_len);
  seq.ids.push_back(Vocabulary::kBos);
  for (const auto& w : split_words(text)) {
    if (seq.ids.size() >= max_seq_len - 1) break;  // leave room for EOS
    seq.ids.push_back(vocab.id_of(w));
  }
  seq.ids.push_back(Vocabulary::kEos);
  seq.ids.resize(max_seq_len, Vocabulary::kPad);
  seq.attention.resize(max_seq_len);
  for (std::size_t i = 0; i < max_seq_len; ++i)
    seq.attention[i] = seq.ids[i] == Vocabulary::kPad ? 0 : 1;
  return seq;
}

}  // namespace mdctr

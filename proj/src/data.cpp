#include "mdctr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

namespace mdctr {

namespace {

const char* kDefaultDomains[] = {"sports", "beauty", "music", "office", "garden", "toys"};
const char* kDimPrefix[] = {"ultra", "deep", "slim", "bold", "airy", "calm"};
constexpr std::size_t kBrands = 24;     // brands per domain
constexpr double kBrandEffectSd = 0.5;  // latent shift a brand adds on the taste axis

// Each domain spells its quality words with four of eight synonyms. The
// subsets overlap so that signal learned on one domain partially transfers
// to the others, while no single domain covers another's vocabulary.
constexpr std::size_t kDomainSynonyms[4][4] = {
    {0, 1, 2, 3},
    {2, 3, 4, 5},
    {4, 5, 0, 1},
    {0, 2, 4, 7},
};

// quality term: one word per latent dimension and quartile of the latent
// value, e.g. "ultramint3" / "deepworn5"; quartile cut points at +-0.675
const char* kQualLevel[] = {"junk", "worn", "fine", "mint"};

std::size_t quartile(double v) {
  if (v < -0.6745) return 0;
  if (v < 0.0) return 1;
  return v < 0.6745 ? 2 : 3;
}

std::string qual_word(std::size_t dim, std::size_t level, std::size_t syn) {
  return std::string(kDimPrefix[dim % 6]) + kQualLevel[level] + std::to_string(syn);
}

std::size_t domain_synonym(std::size_t domain_idx, Rng& rng) {
  return kDomainSynonyms[domain_idx % 4][rng.uniform_int(4)];
}

struct Latent {
  std::vector<double> core;  // shared across domains
  std::vector<double> dom;   // domain-specific part
};

// users lean towards quality on every latent axis (strongest on the first),
// which is what makes item text predictive of clicks on its own
Latent draw_latent(std::size_t k, Rng& rng, double mean0, double mean_rest = 0.0) {
  Latent l;
  l.core.resize(k);
  l.dom.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    l.core[j] = rng.normal(j == 0 ? mean0 : mean_rest, 1.0);
    l.dom[j] = rng.normal(0.0, 1.0);
  }
  return l;
}

std::string format_price(double value) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", value);
  return buf;
}

}  // namespace

void SynthConfig::validate() const {
  if (samples_per_domain.empty()) throw ValidationError("synth: no domains configured");
  if (!domain_names.empty() && domain_names.size() != samples_per_domain.size())
    throw ValidationError("synth: domain_names and samples_per_domain sizes differ");
  for (std::size_t n : samples_per_domain)
    if (n < 10) throw ValidationError("synth: every domain needs at least 10 samples for the splits");
  if (alpha < 0.0 || alpha > 1.0) throw ValidationError("synth: alpha must lie in [0,1]");
  if (label_noise < 0.0 || label_noise > 1.0)
    throw ValidationError("synth: label_noise must lie in [0,1]");
  if (latent_dim == 0) throw ValidationError("synth: latent_dim must be positive");
}

std::vector<std::string> Dataset::domains() const {
  std::vector<std::string> out;
  for (const auto& r : records)
    if (std::find(out.begin(), out.end(), r.domain) == out.end()) out.push_back(r.domain);
  return out;
}

std::vector<std::size_t> Dataset::indices(Split s, const std::string& domain) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (split[i] == s && (domain.empty() || records[i].domain == domain)) out.push_back(i);
  return out;
}

std::vector<std::size_t> Dataset::domain_indices(const std::string& domain) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].domain == domain) out.push_back(i);
  return out;
}

void Dataset::assign_splits(std::uint64_t seed, double train_frac, double valid_frac) {
  split.assign(records.size(), Split::Train);
  auto names = domains();
  for (std::size_t d = 0; d < names.size(); ++d) {
    auto idx = domain_indices(names[d]);
    Rng rng(Rng::derive(seed, 0xd0a1u + d));
    shuffle(idx, rng);
    std::size_t n = idx.size();
    auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(n)));
    auto n_valid = static_cast<std::size_t>(std::llround(valid_frac * static_cast<double>(n)));
    n_train = std::min(n_train, n);
    n_valid = std::min(n_valid, n - n_train);
    for (std::size_t i = 0; i < n; ++i)
      split[idx[i]] = i < n_train ? Split::Train : (i < n_train + n_valid ? Split::Valid : Split::Test);
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx) const {
  Dataset out;
  for (auto i : idx) {
    out.records.push_back(records[i]);
    out.split.push_back(split[i]);
  }
  return out;
}

Dataset generate(const SynthConfig& cfg, std::vector<double>* bayes_probs) {
  cfg.validate();
  const std::size_t M = cfg.samples_per_domain.size();
  const std::size_t k = cfg.latent_dim;
  const double a = cfg.alpha;
  Rng rng(cfg.seed);

  std::vector<std::string> names = cfg.domain_names;
  if (names.empty()) {
    for (std::size_t d = 0; d < M; ++d) {
      std::string base = kDefaultDomains[d % 6];
      names.push_back(d < 6 ? base : base + std::to_string(d / 6));
    }
  }

  Dataset ds;
  if (bayes_probs) bayes_probs->clear();

  for (std::size_t d = 0; d < M; ++d) {
    const std::size_t n = cfg.samples_per_domain[d];
    const std::size_t n_users = cfg.users_per_domain ? cfg.users_per_domain : std::max<std::size_t>(8, n / 5);
    const std::size_t n_items = cfg.items_per_domain ? cfg.items_per_domain : std::max<std::size_t>(8, n / 3);
    const double bias = rng.normal(-0.1, 0.25);

    std::vector<double> brand_shift(kBrands);
    for (auto& b : brand_shift) b = rng.normal(0.0, kBrandEffectSd);

    struct Item {
      Latent latent;
      std::size_t brand = 0;
      std::string id, title, price;
      std::vector<double> effective;  // alpha * (core + brand) + (1-alpha) * dom
    };
    std::vector<Item> items(n_items);
    for (std::size_t i = 0; i < n_items; ++i) {
      Item& it = items[i];
      it.latent = draw_latent(k, rng, 0.0);
      it.brand = rng.uniform_int(kBrands);
      it.id = "p" + std::to_string(d) + "x" + std::to_string(i);
      std::string title;
      for (std::size_t j = 0; j < k; ++j) {
        if (j) title += ' ';
        title += qual_word(j, quartile(it.latent.core[j]), domain_synonym(d, rng));
      }
      it.title = title;
      it.price = format_price(std::max(0.99, 9.99 + 4.0 * it.latent.core[0] + rng.normal(0.0, 0.5)));
      it.effective.resize(k);
      for (std::size_t j = 0; j < k; ++j) {
        double core = it.latent.core[j] + (j == 0 ? brand_shift[it.brand] : 0.0);
        it.effective[j] = a * core + (1.0 - a) * it.latent.dom[j];
      }
    }

    std::vector<std::vector<double>> users(n_users);
    for (auto& u : users) {
      Latent l = draw_latent(k, rng, /*mean0=*/1.5, /*mean_rest=*/0.8);
      u.resize(k);
      for (std::size_t j = 0; j < k; ++j) u[j] = a * l.core[j] + (1.0 - a) * l.dom[j];
    }

    const double scale = 3.6 / std::sqrt(static_cast<double>(k));
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t uidx = rng.uniform_int(n_users);
      const auto& u = users[uidx];
      const Item& it = items[rng.uniform_int(n_items)];

      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += u[j] * it.effective[j];
      double prob = 1.0 / (1.0 + std::exp(-(scale * dot + bias)));
      int label = rng.uniform() < prob ? 1 : 0;
      if (rng.uniform() < cfg.label_noise) label = 1 - label;

      // click history: of four candidates, the two the user likes most
      std::vector<std::pair<double, const Item*>> cand;
      for (int c = 0; c < 4; ++c) {
        const Item& ci = items[rng.uniform_int(n_items)];
        double cd = 0.0;
        for (std::size_t j = 0; j < k; ++j) cd += u[j] * ci.effective[j];
        cand.emplace_back(cd, &ci);
      }
      std::sort(cand.begin(), cand.end(),
                [](const auto& x, const auto& y) { return x.first > y.first; });

      InteractionRecord rec;
      rec.domain = names[d];
      rec.user_id = "u" + std::to_string(d) + "x" + std::to_string(uidx);
      rec.click_history = {cand[1].second->title, cand[0].second->title};
      rec.item_id = it.id;
      rec.title = it.title;
      rec.brand = names[d] + "co" + std::to_string(it.brand);
      rec.price = it.price;
      rec.label = label;
      ds.records.push_back(std::move(rec));
      if (bayes_probs) bayes_probs->push_back(prob);
    }
  }

  ds.assign_splits(Rng::derive(cfg.seed, 0x511u));
  return ds;
}

void write_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("write_jsonl: cannot write '" + path + "'");
  for (const auto& r : ds.records) {
    nlohmann::json j;
    j["domain"] = r.domain;
    j["user_id"] = r.user_id;
    j["history"] = r.click_history;
    j["item_id"] = r.item_id;
    j["title"] = r.title;
    j["brand"] = r.brand;
    j["price"] = r.price;
    j["label"] = r.label;
    out << j.dump() << '\n';
  }
}

Dataset ingest_jsonl(const std::string& path, IngestReport* report) {
  std::ifstream in(path);
  if (!in) throw ValidationError("ingest: cannot read '" + path + "'");
  Dataset ds;
  IngestReport local;
  std::vector<std::string> messages;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ++local.total_lines;
    try {
      auto j = nlohmann::json::parse(line);
      InteractionRecord rec;
      for (const char* field : {"domain", "user_id", "item_id", "title", "brand"}) {
        if (!j.contains(field) || !j[field].is_string())
          throw ValidationError(std::string("missing field '") + field + "'");
      }
      rec.domain = j["domain"].get<std::string>();
      rec.user_id = j["user_id"].get<std::string>();
      rec.item_id = j["item_id"].get<std::string>();
      rec.title = j["title"].get<std::string>();
      rec.brand = j["brand"].get<std::string>();
      if (j.contains("history")) {
        for (const auto& h : j["history"]) rec.click_history.push_back(h.get<std::string>());
        while (rec.click_history.size() > 2)
          rec.click_history.erase(rec.click_history.begin());  // keep the most recent entries
      }
      if (!j.contains("price")) throw ValidationError("missing field 'price'");
      rec.price = j["price"].is_string() ? j["price"].get<std::string>()
                                         : format_price(j["price"].get<double>());
      if (j.contains("rating")) {
        rec.label = j["rating"].get<double>() > 3.0 ? 1 : 0;
      } else if (j.contains("label")) {
        int lab = j["label"].get<int>();
        if (lab != 0 && lab != 1) throw ValidationError("label outside {0,1}");
        rec.label = lab;
      } else {
        throw ValidationError("missing field 'label' (or 'rating')");
      }
      rec.validate();
      ds.records.push_back(std::move(rec));
    } catch (const std::exception& e) {
      ++local.malformed;
      local.bad_lines.push_back(line_no);
      if (messages.size() < 20)
        messages.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (local.total_lines == 0) throw ValidationError("ingest: '" + path + "' holds no records");
  if (local.malformed * 100 > local.total_lines) {
    std::string detail;
    for (const auto& m : messages) detail += "\n  " + m;
    throw ValidationError("ingest: " + std::to_string(local.malformed) + " of " +
                          std::to_string(local.total_lines) + " lines malformed (>1%)" + detail);
  }
  ds.assign_splits(0);
  if (report) *report = local;
  return ds;
}

}  // namespace mdctr

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdctr/errors.hpp"
#include "mdctr/rng.hpp"
#include "mdctr/text.hpp"

namespace mdctr {

enum class Split : int { Train = 0, Valid = 1, Test = 2 };

/// Interaction records grouped with their train/valid/test assignment.
struct Dataset {
  std::vector<InteractionRecord> records;
  std::vector<Split> split;  // parallel to records

  /// domain names in order of first appearance
  std::vector<std::string> domains() const;

  /// indices of records in a split, optionally restricted to one domain
  std::vector<std::size_t> indices(Split s, const std::string& domain = "") const;

  std::vector<std::size_t> domain_indices(const std::string& domain) const;

  /// seeded per-domain shuffle, then 80/10/10 within each domain
  void assign_splits(std::uint64_t seed, double train_frac = 0.8, double valid_frac = 0.1);

  Dataset subset(const std::vector<std::size_t>& idx) const;
};

/// Controls the synthetic multi-domain click log. Users and items carry
/// latent vectors mixing a shared core with a domain-specific part
/// (alpha weighs the shared side); click probability is
/// sigmoid(<u,v> + domain bias); titles and brands are drawn from per-domain
/// term pools so the text carries both the latent signal and the domain
/// identity.
struct SynthConfig {
  std::vector<std::string> domain_names;     // defaults to generated names
  std::vector<std::size_t> samples_per_domain{4000, 4000, 4000};
  std::size_t users_per_domain = 0;  // 0: derived as samples/5
  std::size_t items_per_domain = 0;  // 0: derived as samples/3
  std::size_t latent_dim = 4;
  double alpha = 0.6;
  double label_noise = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
};

Dataset generate(const SynthConfig& cfg, std::vector<double>* bayes_probs = nullptr);

/// serialize as one JSON object per line; byte-identical per (dataset)
void write_jsonl(const Dataset& ds, const std::string& path);

struct IngestReport {
  std::size_t total_lines = 0;
  std::size_t malformed = 0;
  std::vector<std::size_t> bad_lines;  // 1-based line numbers
};

/// Parse a JSONL click log. An optional `rating` field supersedes `label`
/// via the "above 3 is positive" rule. More than 1% malformed lines aborts,
/// listing the offending line numbers.
Dataset ingest_jsonl(const std::string& path, IngestReport* report = nullptr);

}  // namespace mdctr

#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mdctr/backbone.hpp"
#include "mdctr/dsn.hpp"
#include "mdctr/general.hpp"
#include "mdctr/text.hpp"

namespace mdctr {

/// Ordered set of known domain names. Indices are 1-based and contiguous in
/// registration order.
class DomainRegistry {
 public:
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  /// 1-based index, 0 when unknown
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? 0 : it->second;
  }

  void add(const std::string& name) {
    if (contains(name)) throw ValidationError("registry: domain '" + name + "' already registered");
    names_.push_back(name);
    index_[name] = names_.size();
  }

  void remove(const std::string& name) {
    if (!contains(name)) throw ValidationError("registry: domain '" + name + "' not registered");
    names_.erase(names_.begin() + static_cast<std::ptrdiff_t>(index_[name] - 1));
    index_.clear();
    for (std::size_t i = 0; i < names_.size(); ++i) index_[names_[i]] = i + 1;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// A named slice of the model's parameters, freezable as a unit.
template <class S>
struct ParamGroup {
  std::string name;
  bool frozen = false;
  std::vector<Param<S>*> params;
  std::uint64_t checksum() const { return group_checksum(params); }
};

/// The full architecture: shared backbone, one pluggable network per
/// registered domain, and the general head. Owns the vocabulary and prompt
/// configuration so prediction works straight from interaction records.
template <class S>
class Model {
 public:
  Backbone<S> backbone;
  GeneralHead<S> general;
  std::vector<std::unique_ptr<DomainNetwork<S>>> dsns;  // parallel to registry order
  DomainRegistry registry;

  Vocabulary vocab;
  PromptMode prompt_mode = PromptMode::Full;
  std::size_t max_history = 2;
  bool backbone_frozen = false;
  bool general_frozen = false;

  Model(BackboneConfig bb_cfg, GeneralConfig gen_cfg, Vocabulary vocabulary, Rng& rng)
      : backbone(bb_cfg, rng), general(gen_cfg, bb_cfg.hidden, rng), vocab(std::move(vocabulary)) {}

  /// Register a new domain network. Checks the parameter-budget contract:
  /// a domain network must stay smaller than the backbone it taps.
  DomainNetwork<S>& attach(DsnConfig cfg, Rng& rng) {
    registry.add(cfg.domain);  // throws on duplicates
    auto dsn = std::make_unique<DomainNetwork<S>>(cfg, backbone.cfg.layers, backbone.cfg.hidden, rng);
    if (param_count(dsn->params()) >= backbone.parameter_count()) {
      registry.remove(cfg.domain);
      throw ValidationError("dsn '" + cfg.domain + "': parameter count " +
                            std::to_string(param_count(dsn->params())) +
                            " not smaller than backbone's " +
                            std::to_string(backbone.parameter_count()));
    }
    dsns.push_back(std::move(dsn));
    return *dsns.back();
  }

  /// Remove a domain network; never touches the backbone or other networks.
  void detach(const std::string& domain) {
    std::size_t idx = registry.index_of(domain);
    if (idx == 0) throw ValidationError("detach: domain '" + domain + "' not registered");
    registry.remove(domain);
    dsns.erase(dsns.begin() + static_cast<std::ptrdiff_t>(idx - 1));
  }

  DomainNetwork<S>& dsn(const std::string& domain) {
    std::size_t idx = registry.index_of(domain);
    if (idx == 0) throw ValidationError("dsn: domain '" + domain + "' not registered");
    return *dsns[idx - 1];
  }

  bool has_domain(const std::string& domain) const { return registry.contains(domain); }

  std::vector<ParamGroup<S>> groups() {
    std::vector<ParamGroup<S>> out;
    out.push_back({"backbone", backbone_frozen, backbone.params()});
    out.push_back({"general", general_frozen, general.params()});
    for (std::size_t i = 0; i < dsns.size(); ++i)
      out.push_back({"dsn." + registry.names()[i], dsns[i]->frozen, dsns[i]->params()});
    return out;
  }

  std::vector<Param<S>*> trainable_params() {
    std::vector<Param<S>*> out;
    for (auto& g : groups())
      if (!g.frozen) out.insert(out.end(), g.params.begin(), g.params.end());
    return out;
  }

  std::vector<Param<S>*> all_params() {
    std::vector<Param<S>*> out;
    for (auto& g : groups()) out.insert(out.end(), g.params.begin(), g.params.end());
    return out;
  }

  void zero_grad() {
    for (auto* p : all_params()) p->zero_grad();
  }

  /// render + tokenize a set of records into one token batch
  TokenBatch tokenize_records(const std::vector<const InteractionRecord*>& recs) const {
    std::vector<TokenSequence> seqs;
    seqs.reserve(recs.size());
    for (const auto* r : recs)
      seqs.push_back(tokenize(render_prompt(*r, prompt_mode, max_history), vocab,
                              backbone.cfg.max_seq_len));
    return TokenBatch::from_sequences(seqs);
  }
};

}  // namespace mdctr

#pragma once

/// Masked-loss training for the multi-domain model. Per sample, the loss is
/// the sum of the own-domain network's BCE and the general head's BCE; the
/// one-hot domain mask guarantees that networks of absent domains receive
/// exactly zero gradient, so domain units stay decoupled and freezable.
///
/// Two equivalent execution modes: `strict_mask` runs every domain network
/// on the full batch and multiplies the per-sample losses by the mask (the
/// formulation as written); the default dispatch mode runs each network only
/// on its own rows. Both produce the same losses and updates; the
/// equivalence is covered by tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mdctr/data.hpp"
#include "mdctr/metrics.hpp"
#include "mdctr/model.hpp"
#include "mdctr/optim.hpp"

namespace mdctr {

using DomainMask = std::vector<std::uint8_t>;

/// Eq.-style indicator vector over registered domains; all zeros for an
/// unknown domain.
inline DomainMask build_mask(const std::string& domain, const DomainRegistry& registry) {
  DomainMask mask(registry.size(), 0);
  std::size_t idx = registry.index_of(domain);
  if (idx > 0) mask[idx - 1] = 1;
  return mask;
}

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 2;
  double lr_low = 5e-4;
  double lr_high = 2e-3;
  std::size_t lr_cycle_epochs = 4;
  OptKind optimizer = OptKind::AdamW;
  double weight_decay = 0.0;
  double dropout = 0.0;
  double general_loss_weight = 1.0;
  std::uint64_t seed = 1;
  bool strict_mask = false;
  std::vector<std::string> freeze;  // parameter-group names to hold fixed

  void validate() const {
    if (batch_size == 0) throw ValidationError("train: batch_size must be positive");
    if (epochs == 0) throw ValidationError("train: epochs must be positive");
    if (lr_low <= 0 || lr_high <= 0 || lr_low > lr_high)
      throw ValidationError("train: lr bounds must be positive with low <= high");
    if (dropout < 0 || dropout >= 1) throw ValidationError("train: dropout must lie in [0,1)");
  }
};

struct TrainReport {
  struct Row {
    std::size_t epoch;
    std::string domain;
    std::string split;
    std::string metric;
    double value;
  };
  struct StepAudit {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double loss = 0, loss_domain = 0, loss_general = 0;
    std::vector<std::string> updated_groups;  // nonzero gradient, not frozen
  };

  std::vector<Row> rows;
  std::vector<StepAudit> audits;
  std::size_t best_epoch = 0;
  double best_valid_auc = 0.0;

  void add(std::size_t epoch, const std::string& domain, const std::string& split,
           const std::string& metric, double value) {
    rows.push_back({epoch, domain, split, metric, value});
  }

  std::vector<double> series(const std::string& domain, const std::string& split,
                             const std::string& metric) const {
    std::vector<double> out;
    for (const auto& r : rows)
      if (r.domain == domain && r.split == split && r.metric == metric) out.push_back(r.value);
    return out;
  }

  void write_tsv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ValidationError("report: cannot write '" + path + "'");
    out << "epoch\tdomain\tsplit\tmetric\tvalue\n";
    for (const auto& r : rows)
      out << r.epoch << '\t' << r.domain << '\t' << r.split << '\t' << r.metric << '\t' << r.value
          << '\n';
  }

  void write_audit_tsv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ValidationError("report: cannot write '" + path + "'");
    out << "epoch\tstep\tloss\tloss_domain\tloss_general\tupdated_groups\n";
    for (const auto& a : audits) {
      out << a.epoch << '\t' << a.step << '\t' << a.loss << '\t' << a.loss_domain << '\t'
          << a.loss_general << '\t';
      for (std::size_t i = 0; i < a.updated_groups.size(); ++i)
        out << (i ? "," : "") << a.updated_groups[i];
      out << '\n';
    }
  }
};

template <class S>
struct Batch {
  std::vector<std::size_t> rows;  // dataset indices, for fingerprints
  std::vector<const InteractionRecord*> recs;
  TokenBatch tokens;
  std::vector<S> labels;
  std::size_t size() const { return recs.size(); }
};

/// Tokenizes every record once; batches reuse the cached sequences.
template <class S>
class BatchCache {
 public:
  BatchCache(const Model<S>& model, const Dataset& ds) : ds_(&ds) {
    seqs_.reserve(ds.records.size());
    for (const auto& r : ds.records)
      seqs_.push_back(tokenize(render_prompt(r, model.prompt_mode, model.max_history), model.vocab,
                               model.backbone.cfg.max_seq_len));
  }

  Batch<S> make(const std::vector<std::size_t>& idx) const {
    Batch<S> b;
    b.rows = idx;
    std::vector<TokenSequence> seqs;
    seqs.reserve(idx.size());
    for (auto i : idx) {
      b.recs.push_back(&ds_->records[i]);
      b.labels.push_back(static_cast<S>(ds_->records[i].label));
      seqs.push_back(seqs_[i]);
    }
    b.tokens = TokenBatch::from_sequences(seqs);
    return b;
  }

 private:
  const Dataset* ds_;
  std::vector<TokenSequence> seqs_;
};

template <class S>
struct LossParts {
  Tensor<S> total, domain_part, general_part;
  std::vector<S> per_sample_domain_loss;  // for per-domain reporting
};

/// Build the masked loss on the tape. Training requires every sample's
/// domain to be registered. `corrupt_mask_hook` is a test-only switch that
/// destroys the mask (all ones) so negative controls can watch the
/// decoupling guarantee fail.
template <class S>
LossParts<S> masked_loss(Tape<S>& t, Model<S>& model, const Batch<S>& batch, const TapSet<S>& taps,
                         const TrainConfig& cfg, Rng* drop_rng = nullptr,
                         bool corrupt_mask_hook = false) {
  const std::size_t n = batch.size();
  const auto& names = model.registry.names();
  for (const auto* r : batch.recs)
    if (!model.registry.contains(r->domain))
      throw ValidationError("masked_loss: sample from unregistered domain '" + r->domain + "'");

  auto labels = t.constant({n}, batch.labels);
  double drop = drop_rng ? cfg.dropout : 0.0;

  LossParts<S> parts;
  if (cfg.strict_mask) {
    // compute-all-then-mask, the formulation as written
    Tensor<S> acc;
    for (std::size_t m = 0; m < names.size(); ++m) {
      t.bind_requires_grad = !model.dsns[m]->frozen;
      auto pred = model.dsns[m]->predict(t, taps, drop, drop_rng);
      auto lvec = bce_vec(pred, labels);
      std::vector<S> mask_col(n, S(0));
      for (std::size_t s = 0; s < n; ++s) {
        bool own = batch.recs[s]->domain == names[m];
        mask_col[s] = (own || corrupt_mask_hook) ? S(1) : S(0);
      }
      auto masked = mul(lvec, t.constant({n}, mask_col));
      acc = acc.valid() ? add(acc, masked) : masked;
    }
    if (!acc.valid()) throw ValidationError("masked_loss: model has no domain networks");
    parts.per_sample_domain_loss = acc.value();
    parts.domain_part = mean_all(acc);
  } else {
    // dispatch: each domain network sees only its own rows
    Tensor<S> acc;
    parts.per_sample_domain_loss.assign(n, S(0));
    for (std::size_t m = 0; m < names.size(); ++m) {
      std::vector<std::size_t> own;
      for (std::size_t s = 0; s < n; ++s)
        if (batch.recs[s]->domain == names[m]) own.push_back(s);
      if (own.empty()) continue;
      TapSet<S> sub;
      sub.batch = own.size();
      sub.seq = taps.seq;
      sub.mask.reserve(own.size() * taps.seq);
      for (auto s : own)
        sub.mask.insert(sub.mask.end(), taps.mask.begin() + s * taps.seq,
                        taps.mask.begin() + (s + 1) * taps.seq);
      for (const auto& h : taps.h) sub.h.push_back(select_batch(h, own));
      t.bind_requires_grad = !model.dsns[m]->frozen;
      auto pred = model.dsns[m]->predict(t, sub, drop, drop_rng);
      std::vector<S> sub_labels(own.size());
      for (std::size_t i = 0; i < own.size(); ++i) sub_labels[i] = batch.labels[own[i]];
      auto lvec = bce_vec(pred, t.constant({own.size()}, sub_labels));
      for (std::size_t i = 0; i < own.size(); ++i)
        parts.per_sample_domain_loss[own[i]] = lvec.value()[i];
      auto lsum = sum_all(lvec);
      acc = acc.valid() ? add(acc, lsum) : lsum;
    }
    if (!acc.valid()) throw ValidationError("masked_loss: model has no domain networks");
    parts.domain_part = scale(acc, 1.0 / static_cast<double>(n));
  }

  t.bind_requires_grad = !model.general_frozen;
  auto pooled = model.backbone.pool(t, taps.h.back(), taps.mask);
  auto general_pred = model.general.predict(t, pooled, drop, drop_rng);
  parts.general_part = mean_all(bce_vec(general_pred, labels));
  t.bind_requires_grad = true;
  parts.total = add(parts.domain_part, cfg.general_loss_weight == 1.0
                                           ? parts.general_part
                                           : scale(parts.general_part, cfg.general_loss_weight));
  return parts;
}

/// Routed prediction (masked sum over domain networks for known domains,
/// general head for unknown ones). Evaluation path: no gradients recorded.
template <class S>
struct PredictOutput {
  std::vector<S> routed;
  std::vector<S> general;
  std::vector<std::vector<S>> per_dsn;  // filled in strict mode
};

template <class S>
PredictOutput<S> predict_batch(Model<S>& model, const Batch<S>& batch, bool strict_mask) {
  Tape<S> t;
  t.bind_requires_grad = false;
  const std::size_t n = batch.size();
  const auto& names = model.registry.names();
  auto taps = model.backbone.forward_collect(t, batch.tokens);

  PredictOutput<S> out;
  out.routed.assign(n, S(0));
  auto pooled = model.backbone.pool(t, taps.h.back(), taps.mask);
  out.general = model.general.predict(t, pooled).value();

  if (strict_mask) {
    // Eq.-style masked sum over every network's output
    for (std::size_t m = 0; m < names.size(); ++m)
      out.per_dsn.push_back(model.dsns[m]->predict(t, taps).value());
    for (std::size_t s = 0; s < n; ++s) {
      auto mask = build_mask(batch.recs[s]->domain, model.registry);
      bool known = false;
      S acc = S(0);
      for (std::size_t m = 0; m < names.size(); ++m) {
        acc += static_cast<S>(mask[m]) * out.per_dsn[m][s];
        known = known || mask[m];
      }
      out.routed[s] = known ? acc : out.general[s];
    }
  } else {
    for (std::size_t m = 0; m < names.size(); ++m) {
      std::vector<std::size_t> own;
      for (std::size_t s = 0; s < n; ++s)
        if (batch.recs[s]->domain == names[m]) own.push_back(s);
      if (own.empty()) continue;
      TapSet<S> sub;
      sub.batch = own.size();
      sub.seq = taps.seq;
      for (auto s : own)
        sub.mask.insert(sub.mask.end(), taps.mask.begin() + s * taps.seq,
                        taps.mask.begin() + (s + 1) * taps.seq);
      for (const auto& h : taps.h) sub.h.push_back(select_batch(h, own));
      auto pred = model.dsns[m]->predict(t, sub).value();
      for (std::size_t i = 0; i < own.size(); ++i) out.routed[own[i]] = pred[i];
    }
    for (std::size_t s = 0; s < n; ++s)
      if (!model.registry.contains(batch.recs[s]->domain)) out.routed[s] = out.general[s];
  }
  return out;
}

/// One optimizer step over one batch. The audit lists the loss decomposition
/// and every unfrozen parameter group whose gradient norm was nonzero.
template <class S>
TrainReport::StepAudit train_step(Model<S>& model, const Batch<S>& batch, const TrainConfig& cfg,
                                  Optimizer<S>& opt, std::uint64_t step_seed,
                                  bool corrupt_mask_hook = false,
                                  std::vector<double>* sample_domain_losses = nullptr) {
  Tape<S> t;
  Rng drop_rng(step_seed);
  auto groups = model.groups();

  t.bind_requires_grad = !model.backbone_frozen;
  auto taps = model.backbone.forward_collect(t, batch.tokens);
  auto parts = masked_loss(t, model, batch, taps, cfg, cfg.dropout > 0 ? &drop_rng : nullptr,
                           corrupt_mask_hook);
  if (sample_domain_losses) {
    sample_domain_losses->clear();
    for (S v : parts.per_sample_domain_loss)
      sample_domain_losses->push_back(static_cast<double>(v));
  }

  double loss_value = static_cast<double>(parts.total.item());
  if (!std::isfinite(loss_value)) {
    std::string fp = "epoch-seed " + std::to_string(step_seed) + ", rows [";
    for (std::size_t i = 0; i < std::min<std::size_t>(8, batch.rows.size()); ++i)
      fp += (i ? "," : "") + std::to_string(batch.rows[i]);
    fp += batch.rows.size() > 8 ? ",...]" : "]";
    throw NumericError("train_step: non-finite loss on batch " + fp);
  }

  model.zero_grad();
  backward(parts.total);

  TrainReport::StepAudit audit;
  audit.loss = loss_value;
  audit.loss_domain = static_cast<double>(parts.domain_part.item());
  audit.loss_general = static_cast<double>(parts.general_part.item());
  for (auto& g : groups) {
    double norm2 = 0;
    for (auto* p : g.params)
      for (S v : p->grad) norm2 += static_cast<double>(v) * static_cast<double>(v);
    if (norm2 > 0 && !g.frozen) audit.updated_groups.push_back(g.name);
  }

  opt.step(model.trainable_params());
  return audit;
}

namespace detail {

template <class S>
std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> collect_scores(
    Model<S>& model, const BatchCache<S>& cache, const Dataset& ds,
    const std::vector<std::size_t>& idx, std::size_t batch_size, bool strict_mask) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> by_domain;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    std::vector<std::size_t> part(idx.begin() + start,
                                  idx.begin() + std::min(idx.size(), start + batch_size));
    auto batch = cache.make(part);
    auto out = predict_batch(model, batch, strict_mask);
    for (std::size_t i = 0; i < part.size(); ++i) {
      auto& slot = by_domain[ds.records[part[i]].domain];
      slot.first.push_back(static_cast<double>(out.routed[i]));
      slot.second.push_back(ds.records[part[i]].label);
    }
  }
  return by_domain;
}

template <class S>
std::vector<std::vector<S>> snapshot_params(Model<S>& model) {
  std::vector<std::vector<S>> snap;
  for (auto* p : model.all_params()) snap.push_back(p->value);
  return snap;
}

template <class S>
void restore_params(Model<S>& model, const std::vector<std::vector<S>>& snap) {
  auto params = model.all_params();
  if (params.size() != snap.size()) throw ValidationError("restore: parameter set changed");
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i];
}

}  // namespace detail

/// Epochs of seeded shuffled mini-batches with per-epoch per-domain
/// validation AUC; the best-validation parameters are restored at the end.
template <class S>
TrainReport fit(Model<S>& model, const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  auto train_idx = ds.indices(Split::Train);
  auto valid_idx = ds.indices(Split::Valid);
  if (train_idx.empty()) throw ValidationError("fit: empty train split");
  if (valid_idx.empty()) throw ValidationError("fit: empty valid split");

  for (const auto& name : cfg.freeze) {
    if (name == "backbone") model.backbone_frozen = true;
    else if (name == "general") model.general_frozen = true;
    else if (name.rfind("dsn.", 0) == 0) model.dsn(name.substr(4)).frozen = true;
    else throw ValidationError("fit: unknown freeze group '" + name + "'");
  }

  BatchCache<S> cache(model, ds);
  Optimizer<S> opt;
  opt.kind = cfg.optimizer;
  opt.weight_decay = cfg.weight_decay;

  std::size_t steps_per_epoch = (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;
  CyclicLr sched(cfg.lr_low, cfg.lr_high, std::max<std::size_t>(2, cfg.lr_cycle_epochs * steps_per_epoch));

  TrainReport report;
  std::vector<std::vector<S>> best_snapshot;
  double best_auc = -1.0;
  std::size_t global_step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto order = train_idx;
    Rng shuffle_rng(Rng::derive(cfg.seed, 0xe90c + epoch));
    shuffle(order, shuffle_rng);

    std::map<std::string, std::pair<double, std::size_t>> domain_loss;  // sum, count
    std::vector<double> sample_losses;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<std::size_t> part(order.begin() + start,
                                    order.begin() + std::min(order.size(), start + cfg.batch_size));
      auto batch = cache.make(part);
      opt.lr = sched.at(global_step);
      auto audit = train_step(model, batch, cfg, opt, Rng::derive(cfg.seed, epoch, global_step),
                              false, &sample_losses);
      audit.epoch = epoch;
      audit.step = global_step;
      report.audits.push_back(audit);
      ++global_step;
      for (std::size_t i = 0; i < part.size(); ++i) {
        auto& slot = domain_loss[ds.records[part[i]].domain];
        slot.first += sample_losses[i];
        slot.second += 1;
      }
    }

    double epoch_loss = 0;
    std::size_t counted = 0;
    for (const auto& a : report.audits)
      if (a.epoch == epoch) {
        epoch_loss += a.loss;
        ++counted;
      }
    report.add(epoch, "*", "train", "loss", counted ? epoch_loss / counted : 0.0);
    for (auto& [domain, slot] : domain_loss)
      report.add(epoch, domain, "train", "loss", slot.first / static_cast<double>(slot.second));

    auto by_domain = detail::collect_scores(model, cache, ds, valid_idx, cfg.batch_size, cfg.strict_mask);
    double mean_auc = 0;
    std::size_t with_auc = 0;
    for (auto& [domain, sl] : by_domain) {
      double a = auc(sl.first, sl.second);
      report.add(epoch, domain, "valid", "auc", a);
      mean_auc += a;
      ++with_auc;
    }
    mean_auc = with_auc ? mean_auc / with_auc : 0.0;
    report.add(epoch, "*", "valid", "auc", mean_auc);
    if (mean_auc > best_auc) {
      best_auc = mean_auc;
      best_snapshot = detail::snapshot_params(model);
      report.best_epoch = epoch;
      report.best_valid_auc = best_auc;
    }
  }

  if (!best_snapshot.empty()) detail::restore_params(model, best_snapshot);

  auto test_idx = ds.indices(Split::Test);
  if (!test_idx.empty()) {
    auto by_domain = detail::collect_scores(model, cache, ds, test_idx, cfg.batch_size, cfg.strict_mask);
    for (auto& [domain, sl] : by_domain)
      report.add(report.best_epoch, domain, "test", "auc", auc(sl.first, sl.second));
  }
  return report;
}

struct ExtensionAudit {
  std::map<std::string, std::uint64_t> checksums_before, checksums_after;
  bool frozen_groups_intact = true;
};

/// Add one domain to a trained model: freeze everything that exists, attach
/// the new network, train only it, and prove the frozen groups did not move.
template <class S>
TrainReport extend_domain(Model<S>& model, const Dataset& new_domain_data, const TrainConfig& cfg,
                          const DsnConfig& dsn_cfg, Rng& rng, ExtensionAudit* audit = nullptr) {
  if (model.registry.contains(dsn_cfg.domain))
    throw ValidationError("extend_domain: domain '" + dsn_cfg.domain + "' already registered");
  for (const auto& r : new_domain_data.records)
    if (r.domain != dsn_cfg.domain)
      throw ValidationError("extend_domain: dataset holds records of '" + r.domain +
                            "', expected only '" + dsn_cfg.domain + "'");

  model.backbone_frozen = true;
  model.general_frozen = true;
  for (auto& d : model.dsns) d->frozen = true;

  ExtensionAudit local;
  for (auto& g : model.groups()) local.checksums_before[g.name] = g.checksum();

  model.attach(dsn_cfg, rng);
  auto report = fit(model, new_domain_data, cfg);

  for (auto& g : model.groups()) {
    if (g.name == "dsn." + dsn_cfg.domain) continue;
    local.checksums_after[g.name] = g.checksum();
    if (local.checksums_after[g.name] != local.checksums_before[g.name])
      local.frozen_groups_intact = false;
  }
  if (!local.frozen_groups_intact)
    throw NumericError("extend_domain: a frozen parameter group changed during extension");
  if (audit) *audit = local;
  return report;
}

}  // namespace mdctr

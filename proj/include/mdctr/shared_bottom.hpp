#pragma once

/// ID-embedding baseline for the seesaw comparison: one-hot categorical
/// features (user, item, brand) through shared embedding tables and a shared
/// MLP bottom, with one linear head per domain. No text is consumed; ids
/// unseen in the training split fall back to a zero row.

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mdctr/data.hpp"
#include "mdctr/metrics.hpp"
#include "mdctr/nn.hpp"
#include "mdctr/optim.hpp"
#include "mdctr/trainer.hpp"

namespace mdctr {

struct SharedBottomConfig {
  std::size_t embed_dim = 16;
  std::vector<std::size_t> bottom_dims = {64, 32};
};

template <class S>
class SharedBottom {
 public:
  SharedBottomConfig cfg;
  DomainRegistry registry;
  std::unordered_map<std::string, std::int32_t> user_map, item_map, brand_map;  // 0 = unseen
  Param<S> user_emb, item_emb, brand_emb;
  std::vector<Linear<S>> bottom;
  std::vector<Linear<S>> heads;  // one per registered domain

  SharedBottom(const Dataset& ds, SharedBottomConfig config, Rng& rng) : cfg(std::move(config)) {
    auto intern = [](std::unordered_map<std::string, std::int32_t>& map, const std::string& key) {
      auto it = map.find(key);
      if (it == map.end()) map.emplace(key, static_cast<std::int32_t>(map.size() + 1));
    };
    for (auto i : ds.indices(Split::Train)) {
      const auto& r = ds.records[i];
      intern(user_map, r.user_id);
      intern(item_map, r.item_id);
      intern(brand_map, r.brand);
      if (!registry.contains(r.domain)) registry.add(r.domain);
    }
    if (registry.size() == 0) throw ValidationError("shared bottom: empty train split");

    auto make_table = [&](const char* name, std::size_t rows) {
      Param<S> p(std::string("shared_bottom.") + name, {rows + 1, cfg.embed_dim});
      p.init_normal(rng, 0.1);
      for (std::size_t j = 0; j < cfg.embed_dim; ++j) p.value[j] = S(0);  // zero row for unseen ids
      return p;
    };
    user_emb = make_table("user_emb", user_map.size());
    item_emb = make_table("item_emb", item_map.size());
    brand_emb = make_table("brand_emb", brand_map.size());

    std::size_t cur = 3 * cfg.embed_dim;
    for (std::size_t i = 0; i < cfg.bottom_dims.size(); ++i) {
      bottom.emplace_back("shared_bottom.l" + std::to_string(i), cur, cfg.bottom_dims[i], rng);
      cur = cfg.bottom_dims[i];
    }
    for (const auto& name : registry.names())
      heads.emplace_back("shared_bottom.head." + name, cur, 1, rng);
  }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out{&user_emb, &item_emb, &brand_emb};
    for (auto& l : bottom) l.collect(out);
    for (auto& h : heads) h.collect(out);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  Tensor<S> shared_features(Tape<S>& t, const std::vector<const InteractionRecord*>& recs) {
    std::size_t n = recs.size();
    auto look = [&](const std::unordered_map<std::string, std::int32_t>& map, const std::string& key) {
      auto it = map.find(key);
      return it == map.end() ? 0 : it->second;
    };
    std::vector<std::int32_t> uids(n), iids(n), bids(n);
    for (std::size_t i = 0; i < n; ++i) {
      uids[i] = look(user_map, recs[i]->user_id);
      iids[i] = look(item_map, recs[i]->item_id);
      bids[i] = look(brand_map, recs[i]->brand);
    }
    auto u = reshape(embedding(t.param(user_emb), uids), {n, 1, cfg.embed_dim});
    auto v = reshape(embedding(t.param(item_emb), iids), {n, 1, cfg.embed_dim});
    auto b = reshape(embedding(t.param(brand_emb), bids), {n, 1, cfg.embed_dim});
    auto h = reshape(concat_seq(concat_seq(u, v), b), {n, 3 * cfg.embed_dim});
    for (auto& l : bottom) h = relu(l(t, h));
    return h;
  }

  /// per-sample probability through the sample's own domain head
  std::vector<S> predict(const std::vector<const InteractionRecord*>& recs) {
    Tape<S> t;
    t.bind_requires_grad = false;
    auto h = shared_features(t, recs);
    return route_heads(t, h, recs).value();
  }

  Tensor<S> route_heads(Tape<S>& t, Tensor<S> h, const std::vector<const InteractionRecord*>& recs) {
    std::size_t n = recs.size();
    for (std::size_t s = 0; s < n; ++s)
      if (!registry.contains(recs[s]->domain))
        throw ValidationError("shared bottom: unknown domain '" + recs[s]->domain + "'");
    Tensor<S> acc;
    for (std::size_t m = 0; m < registry.size(); ++m) {
      std::vector<std::size_t> own;
      for (std::size_t s = 0; s < n; ++s)
        if (recs[s]->domain == registry.names()[m]) own.push_back(s);
      if (own.empty()) continue;
      auto sub = select_batch(h, own);
      auto pred = sigmoid(reshape(heads[m](t, sub), {own.size()}));
      // place the sub-batch back in batch order with a one-hot scatter matrix
      std::vector<S> scatter(n * own.size(), S(0));
      for (std::size_t i = 0; i < own.size(); ++i) scatter[own[i] * own.size() + i] = S(1);
      auto placed = reshape(matmul(t.constant({n, own.size()}, scatter), reshape(pred, {own.size(), 1})),
                            {n});
      acc = acc.valid() ? add(acc, placed) : placed;
    }
    return acc;
  }
};

/// Same splits, seeds and loop shape as the main trainer, so per-domain AUC
/// columns line up for the paired seesaw comparison.
template <class S>
TrainReport train_shared_bottom(SharedBottom<S>& model, const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  auto train_idx = ds.indices(Split::Train);
  auto valid_idx = ds.indices(Split::Valid);
  if (train_idx.empty() || valid_idx.empty())
    throw ValidationError("shared bottom: empty train or valid split");

  Optimizer<S> opt;
  opt.kind = cfg.optimizer;
  opt.weight_decay = cfg.weight_decay;
  std::size_t steps_per_epoch = (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;
  CyclicLr sched(cfg.lr_low, cfg.lr_high, std::max<std::size_t>(2, cfg.lr_cycle_epochs * steps_per_epoch));

  auto collect = [&](const std::vector<std::size_t>& idx) {
    std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> by_domain;
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
      std::vector<std::size_t> part(idx.begin() + start,
                                    idx.begin() + std::min(idx.size(), start + cfg.batch_size));
      std::vector<const InteractionRecord*> recs;
      for (auto i : part) recs.push_back(&ds.records[i]);
      auto preds = model.predict(recs);
      for (std::size_t i = 0; i < part.size(); ++i) {
        auto& slot = by_domain[ds.records[part[i]].domain];
        slot.first.push_back(static_cast<double>(preds[i]));
        slot.second.push_back(ds.records[part[i]].label);
      }
    }
    return by_domain;
  };

  TrainReport report;
  std::vector<std::vector<S>> best;
  double best_auc = -1;
  std::size_t global_step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto order = train_idx;
    Rng shuffle_rng(Rng::derive(cfg.seed, 0xba5e + epoch));
    shuffle(order, shuffle_rng);
    double loss_sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<std::size_t> part(order.begin() + start,
                                    order.begin() + std::min(order.size(), start + cfg.batch_size));
      std::vector<const InteractionRecord*> recs;
      std::vector<S> labels;
      for (auto i : part) {
        recs.push_back(&ds.records[i]);
        labels.push_back(static_cast<S>(ds.records[i].label));
      }
      Tape<S> t;
      auto h = model.shared_features(t, recs);
      auto pred = model.route_heads(t, h, recs);
      auto loss = bce_loss(pred, t.constant({recs.size()}, labels));
      double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) throw NumericError("shared bottom: non-finite loss");
      loss_sum += lv;
      ++steps;
      model.zero_grad();
      backward(loss);
      opt.lr = sched.at(global_step++);
      opt.step(model.params());
    }
    report.add(epoch, "*", "train", "loss", steps ? loss_sum / steps : 0.0);

    auto by_domain = collect(valid_idx);
    double mean_auc = 0;
    std::size_t counted = 0;
    for (auto& [domain, sl] : by_domain) {
      double a = auc(sl.first, sl.second);
      report.add(epoch, domain, "valid", "auc", a);
      mean_auc += a;
      ++counted;
    }
    mean_auc = counted ? mean_auc / counted : 0;
    report.add(epoch, "*", "valid", "auc", mean_auc);
    if (mean_auc > best_auc) {
      best_auc = mean_auc;
      best.clear();
      for (auto* p : model.params()) best.push_back(p->value);
      report.best_epoch = epoch;
      report.best_valid_auc = best_auc;
    }
  }

  if (!best.empty()) {
    auto params = model.params();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  }

  auto test_idx = ds.indices(Split::Test);
  if (!test_idx.empty()) {
    auto by_domain = collect(test_idx);
    for (auto& [domain, sl] : by_domain)
      report.add(report.best_epoch, domain, "test", "auc", auc(sl.first, sl.second));
  }
  return report;
}

}  // namespace mdctr

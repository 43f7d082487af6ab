#include "mdctr/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "mdctr/checkpoint.hpp"
#include "mdctr/config.hpp"
#include "mdctr/gradcheck.hpp"
#include "mdctr/shared_bottom.hpp"

namespace mdctr {

namespace {

namespace fs = std::filesystem;

struct GlobalOpts {
  std::string config_path;
  int precision = 32;
  std::uint64_t seed = 0;  // 0: keep the config's seed
  bool seed_set = false;
  bool strict_mask = false;
  bool strict_mask_set = false;
  std::vector<std::string> overrides;  // section.key=value
};

RunConfig resolve_config(const GlobalOpts& g, bool config_required) {
  IniConfig ini;
  if (!g.config_path.empty()) ini = IniConfig::parse_file(g.config_path);
  else if (config_required) throw ValidationError("missing --config");
  for (const auto& e : g.overrides) ini.set_entry(e);
  RunConfig rc = RunConfig::from_ini(ini);
  if (g.seed_set) {
    rc.train.seed = g.seed;
    rc.synth.seed = g.seed;
  }
  if (g.strict_mask_set) rc.train.strict_mask = g.strict_mask;
  return rc;
}

Dataset load_dataset(const std::string& path, std::uint64_t split_seed) {
  IngestReport report;
  Dataset ds = ingest_jsonl(path, &report);
  if (report.malformed > 0)
    std::cerr << "warning: skipped " << report.malformed << " malformed line(s) in " << path << "\n";
  ds.assign_splits(split_seed);
  return ds;
}

template <class S>
std::unique_ptr<Model<S>> build_model(const RunConfig& rc, const Dataset& ds, Rng& rng) {
  std::vector<std::string> corpus;
  for (auto i : ds.indices(Split::Train))
    corpus.push_back(render_prompt(ds.records[i], rc.prompt_mode, rc.max_history));
  auto vocab = build_vocab(corpus, rc.vocab_max);

  BackboneConfig bb = rc.backbone;
  bb.vocab_size = vocab.size();
  auto model = std::make_unique<Model<S>>(bb, rc.general, std::move(vocab), rng);
  model->prompt_mode = rc.prompt_mode;
  model->max_history = rc.max_history;

  std::vector<std::string> train_domains;
  for (auto i : ds.indices(Split::Train)) {
    const auto& d = ds.records[i].domain;
    if (std::find(train_domains.begin(), train_domains.end(), d) == train_domains.end())
      train_domains.push_back(d);
  }
  for (const auto& d : train_domains) model->attach(rc.dsn_for(d), rng);
  return model;
}

void write_metrics_tsv(const std::string& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  out << "domain\tauc\tsamples";
  if (!report.base_run.empty()) out << "\trela_impr_vs_" << report.base_run;
  out << "\n";
  for (const auto& m : report.per_domain) {
    out << m.domain << '\t' << m.auc << '\t' << m.samples;
    if (!report.base_run.empty()) out << '\t' << m.rela_impr_pct;
    out << "\n";
  }
}

std::map<std::string, double> read_metrics_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read base metrics '" + path + "'");
  std::map<std::string, double> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string domain;
    double a;
    if (ss >> domain >> a) out[domain] = a;
  }
  return out;
}

int cmd_synth(const GlobalOpts& g, const std::string& out_path) {
  RunConfig rc = resolve_config(g, true);
  auto ds = generate(rc.synth);
  write_jsonl(ds, out_path);
  std::map<std::string, std::size_t> counts;
  for (const auto& r : ds.records) counts[r.domain]++;
  std::cout << "wrote " << ds.records.size() << " records to " << out_path << "\n";
  for (const auto& [domain, n] : counts) std::cout << "  " << domain << ": " << n << "\n";
  return 0;
}

template <class S>
int cmd_train(const GlobalOpts& g, std::string data_path, const std::string& out_dir,
              const std::string& baseline) {
  RunConfig rc = resolve_config(g, true);
  if (data_path.empty()) data_path = rc.data_path;
  if (data_path.empty()) throw ValidationError("train: no dataset (give --data or [data] path)");
  Dataset ds = load_dataset(data_path, rc.train.seed);
  rc.check_domains(ds.domains());

  fs::create_directories(out_dir);

  if (baseline == "shared-bottom") {
    Rng rng(rc.train.seed);
    SharedBottom<S> model(ds, rc.shared_bottom, rng);
    auto report = train_shared_bottom(model, ds, rc.train);
    report.write_tsv(out_dir + "/report.tsv");
    std::cout << "shared-bottom baseline, best epoch " << report.best_epoch << "\n";
    for (const auto& d : ds.domains()) {
      auto a = report.series(d, "test", "auc");
      if (!a.empty()) std::cout << "  test auc " << d << ": " << a.back() << "\n";
    }
    return 0;
  }
  if (!baseline.empty()) throw ValidationError("unknown --baseline '" + baseline + "'");

  Rng rng(rc.train.seed);
  auto model = build_model<S>(rc, ds, rng);
  auto report = fit(*model, ds, rc.train);

  save_model(*model, out_dir + "/checkpoint.bin");
  model->vocab.save(out_dir + "/vocab.tsv");
  report.write_tsv(out_dir + "/report.tsv");
  report.write_audit_tsv(out_dir + "/audit.tsv");

  std::cout << "trained " << model->registry.size() << " domain(s), best epoch "
            << report.best_epoch << " (mean valid auc " << report.best_valid_auc << ")\n";
  for (const auto& d : ds.domains()) {
    auto a = report.series(d, "test", "auc");
    if (!a.empty()) std::cout << "  test auc " << d << ": " << a.back() << "\n";
  }
  std::cout << "checkpoint: " << out_dir << "/checkpoint.bin\n";
  return 0;
}

template <class S>
int cmd_eval(const GlobalOpts& g, const std::string& ckpt_path, const std::string& data_path,
             const std::string& zero_shot_domain, const std::string& base_path,
             const std::string& out_path, const std::string& split_name) {
  RunConfig rc = resolve_config(g, false);
  auto model = load_model<S>(ckpt_path);
  Dataset ds = load_dataset(data_path, rc.train.seed);

  Split split = Split::Test;
  if (split_name == "valid") split = Split::Valid;
  else if (split_name == "train") split = Split::Train;
  else if (split_name != "test") throw ValidationError("unknown --split '" + split_name + "'");

  auto idx = ds.indices(split);
  if (idx.empty()) throw ValidationError("eval: empty split");

  BatchCache<S> cache(*model, ds);
  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> by_domain;
  const std::size_t bs = rc.train.batch_size;
  for (std::size_t start = 0; start < idx.size(); start += bs) {
    std::vector<std::size_t> part(idx.begin() + start, idx.begin() + std::min(idx.size(), start + bs));
    auto batch = cache.make(part);
    auto out = predict_batch(*model, batch, rc.train.strict_mask);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const auto& rec = ds.records[part[i]];
      double score = (rec.domain == zero_shot_domain && !zero_shot_domain.empty())
                         ? static_cast<double>(out.general[i])
                         : static_cast<double>(out.routed[i]);
      by_domain[rec.domain].first.push_back(score);
      by_domain[rec.domain].second.push_back(rec.label);
    }
  }

  MetricsReport report;
  std::map<std::string, double> base;
  if (!base_path.empty()) {
    base = read_metrics_tsv(base_path);
    report.base_run = fs::path(base_path).stem().string();
  }
  for (auto& [domain, sl] : by_domain) {
    DomainMetric m;
    m.domain = domain;
    m.auc = auc(sl.first, sl.second);
    m.samples = sl.second.size();
    if (base.count(domain)) m.rela_impr_pct = rela_impr(m.auc, base[domain]);
    report.per_domain.push_back(m);
  }

  for (const auto& m : report.per_domain) {
    std::cout << m.domain << ": auc " << m.auc << " (" << m.samples << " samples)";
    if (base.count(m.domain)) std::cout << ", rela_impr " << m.rela_impr_pct << "%";
    if (m.domain == zero_shot_domain) std::cout << " [zero-shot]";
    std::cout << "\n";
  }
  if (!out_path.empty()) write_metrics_tsv(out_path, report);
  return 0;
}

template <class S>
int cmd_add_domain(const GlobalOpts& g, const std::string& ckpt_path, const std::string& data_path,
                   const std::string& domain, const std::string& out_path) {
  RunConfig rc = resolve_config(g, true);
  auto model = load_model<S>(ckpt_path);
  Dataset ds = load_dataset(data_path, rc.train.seed);
  for (const auto& r : ds.records)
    if (r.domain != domain)
      throw ValidationError("add-domain: dataset holds records of '" + r.domain + "'");

  DsnConfig dc = rc.dsn_for(domain);
  Rng rng(rc.train.seed);
  ExtensionAudit audit;
  auto report = extend_domain(*model, ds, rc.train, dc, rng, &audit);

  save_model(*model, out_path);
  report.write_tsv(out_path + ".report.tsv");

  auto old_sums = checkpoint_checksums(ckpt_path);
  auto new_sums = checkpoint_checksums(out_path);
  std::size_t changed = 0;
  for (const auto& [name, sum] : old_sums) {
    bool same = new_sums.count(name) && new_sums[name] == sum;
    std::cout << "group " << name << ": " << (same ? "unchanged" : "CHANGED") << "\n";
    if (!same) ++changed;
  }
  std::cout << "group dsn." << domain << ": added\n";
  if (changed > 0) throw NumericError("add-domain: frozen groups changed on disk");
  auto a = report.series(domain, "test", "auc");
  if (!a.empty()) std::cout << "new domain test auc: " << a.back() << "\n";
  std::cout << "checkpoint: " << out_path << "\n";
  return 0;
}

// tiny twin of the training stack for the gradient audits; always double
int cmd_grad_check(const GlobalOpts& g, bool corrupt_mask) {
  SynthConfig sc;
  sc.samples_per_domain = {40, 40, 40};
  sc.latent_dim = 2;
  sc.seed = g.seed_set ? g.seed : 13;
  Dataset ds = generate(sc);

  std::vector<std::string> corpus;
  for (auto i : ds.indices(Split::Train)) corpus.push_back(render_prompt(ds.records[i]));
  auto vocab = build_vocab(corpus, 600);

  BackboneConfig bb;
  bb.layers = 2;
  bb.hidden = 16;
  bb.heads = 2;
  bb.ffn = 24;
  bb.max_seq_len = 48;
  bb.vocab_size = vocab.size();
  Rng rng(sc.seed);
  Model<double> model(bb, GeneralConfig{{8, 4}}, std::move(vocab), rng);
  for (const auto& d : ds.domains()) {
    DsnConfig dc;
    dc.domain = d;
    dc.tap_frequency = 2;
    dc.ladder_dim = 8;
    dc.tower_dims = {8, 4};
    model.attach(dc, rng);
  }

  TrainConfig tc;
  tc.optimizer = OptKind::Sgd;
  tc.strict_mask = corrupt_mask;  // the hook needs the compute-all path
  BatchCache<double> cache(model, ds);

  // 1. full-model finite differences on a 2-sample batch
  auto fd_batch = cache.make({0, static_cast<std::size_t>(41)});
  auto report = finite_diff_check<double>(
      [&](Tape<double>& t) {
        auto taps = model.backbone.forward_collect(t, fd_batch.tokens);
        return masked_loss(t, model, fd_batch, taps, tc, nullptr, corrupt_mask).total;
      },
      model.trainable_params());

  std::map<std::string, double> group_err;
  for (auto& grp : model.groups())
    for (auto* p : grp.params)
      for (const auto& e : report.entries)
        if (e.param == p->name) group_err[grp.name] = std::max(group_err[grp.name], e.max_rel_err);
  for (const auto& [name, err] : group_err)
    std::cout << "group " << name << ": max rel err " << err << "\n";
  bool fd_ok = report.pass(1e-3);
  std::cout << "finite-difference audit: " << (fd_ok ? "ok" : "FAILED")
            << " (worst " << report.worst_rel_err << ", deterministic "
            << (report.deterministic ? "yes" : "no") << ")\n";

  // 2. decoupling: single-domain batches must leave other units untouched
  std::size_t violations = 0;
  auto names = ds.domains();
  Rng pick(sc.seed + 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t m = pick.uniform_int(names.size());
    auto rows = ds.domain_indices(names[m]);
    std::vector<std::size_t> take;
    for (int i = 0; i < 4; ++i) take.push_back(rows[pick.uniform_int(rows.size())]);
    auto batch = cache.make(take);
    Tape<double> t;
    auto taps = model.backbone.forward_collect(t, batch.tokens);
    auto parts = masked_loss(t, model, batch, taps, tc, nullptr, corrupt_mask);
    model.zero_grad();
    backward(parts.total);
    for (std::size_t other = 0; other < names.size(); ++other) {
      if (other == m) continue;
      for (auto* p : model.dsn(names[other]).params())
        for (double gv : p->grad)
          if (gv != 0.0) {
            ++violations;
            goto next_trial;
          }
    }
  next_trial:;
  }
  std::cout << "decoupling: " << (violations == 0 ? "ok" : "VIOLATED") << " (" << violations
            << " of 20 single-domain batches leaked gradient)\n";

  if (!fd_ok || violations > 0) {
    std::cout << "grad-check: FAILED\n";
    return 2;
  }
  std::cout << "grad-check: ok\n";
  return 0;
}

template <class S>
int cmd_dump_reps(const GlobalOpts& g, const std::string& ckpt_path, const std::string& data_path,
                  const std::string& selector, const std::string& out_path, std::size_t limit) {
  RunConfig rc = resolve_config(g, false);
  auto model = load_model<S>(ckpt_path);
  Dataset ds = load_dataset(data_path, rc.train.seed);
  auto idx = ds.indices(Split::Test);
  if (idx.size() > limit) idx.resize(limit);
  if (idx.empty()) throw ValidationError("dump-reps: empty test split");

  BatchCache<S> cache(*model, ds);
  std::ofstream out(out_path);
  if (!out) throw ValidationError("cannot write '" + out_path + "'");

  bool header_done = false;
  const std::size_t bs = 32;
  for (std::size_t start = 0; start < idx.size(); start += bs) {
    std::vector<std::size_t> part(idx.begin() + start, idx.begin() + std::min(idx.size(), start + bs));
    auto batch = cache.make(part);
    Tape<S> t;
    t.bind_requires_grad = false;
    auto taps = model->backbone.forward_collect(t, batch.tokens);

    Tensor<S> reps;
    if (selector.rfind("h_", 0) == 0) {
      std::size_t layer = std::stoul(selector.substr(2));
      if (layer >= taps.h.size())
        throw ValidationError("dump-reps: tap " + selector + " out of range (backbone has " +
                              std::to_string(taps.h.size() - 1) + " layers)");
      reps = model->backbone.pool(t, taps.h[layer], taps.mask);
    } else if (selector.rfind("dsn:", 0) == 0) {
      reps = model->dsn(selector.substr(4)).tower_representation(t, taps);
    } else {
      throw ValidationError("dump-reps: unknown selector '" + selector + "' (use h_<l> or dsn:<name>)");
    }

    std::size_t dim = reps.shape()[1];
    if (!header_done) {
      out << "domain\tsample_id";
      for (std::size_t j = 0; j < dim; ++j) out << "\tc" << j;
      out << "\n";
      header_done = true;
    }
    for (std::size_t i = 0; i < part.size(); ++i) {
      out << ds.records[part[i]].domain << '\t' << part[i];
      for (std::size_t j = 0; j < dim; ++j) out << '\t' << reps.value()[i * dim + j];
      out << "\n";
    }
  }
  std::cout << "wrote " << idx.size() << " rows to " << out_path << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"multi-domain CTR model: tapped transformer backbone, pluggable per-domain "
               "ladder networks, masked-loss training"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "run configuration file");
  app.add_option("--precision", g.precision, "float width for model math (32 or 64)")
      ->check(CLI::IsMember({32, 64}));
  auto* seed_opt = app.add_option("--seed", g.seed, "override the config seed");
  auto* strict_opt = app.add_flag("--strict-mask", g.strict_mask,
                                  "compute every domain network and mask, instead of dispatching");
  app.add_option("--set", g.overrides, "override a config key: section.key=value");

  std::string out_path, data_path, out_dir, baseline, ckpt_path, domain, base_path, split_name,
      selector;
  std::size_t limit = 1000;
  bool corrupt_mask = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-domain click log");
  synth->add_option("--out", out_path, "output JSONL path")->required();

  auto* train = app.add_subcommand("train", "train on a JSONL click log");
  train->add_option("--data", data_path, "dataset path (overrides [data] path)");
  train->add_option("--out-dir", out_dir, "output directory")->required();
  train->add_option("--baseline", baseline, "train a baseline instead: shared-bottom");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  eval->add_option("--data", data_path, "dataset path")->required();
  eval->add_option("--zero-shot", domain, "score this domain with the general head only");
  eval->add_option("--base", base_path, "metrics.tsv of a base run, for RelaImpr");
  eval->add_option("--out", out_path, "write metrics.tsv here");
  eval->add_option("--split", split_name, "split to evaluate (train|valid|test)")->default_val("test");

  auto* zero = app.add_subcommand("zero-shot", "evaluate one domain with the general head");
  zero->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  zero->add_option("--data", data_path, "dataset path")->required();
  zero->add_option("--domain", domain, "domain to score zero-shot")->required();
  zero->add_option("--base", base_path, "metrics.tsv of a base run, for RelaImpr");
  zero->add_option("--out", out_path, "write metrics.tsv here");
  zero->add_option("--split", split_name, "split to evaluate")->default_val("test");

  auto* add = app.add_subcommand("add-domain", "attach and train a new domain network");
  add->add_option("--checkpoint", ckpt_path, "base checkpoint")->required();
  add->add_option("--data", data_path, "new domain dataset")->required();
  add->add_option("--domain", domain, "new domain name")->required();
  add->add_option("--out", out_path, "new checkpoint path")->required();

  auto* grad = app.add_subcommand("grad-check", "finite-difference and decoupling audit");
  std::string scale = "tiny";
  grad->add_option("--scale", scale, "model scale for the audit")->check(CLI::IsMember({"tiny"}));
  grad->add_flag("--corrupt-mask", corrupt_mask,
                 "test hook: destroy the domain mask to watch the audit fail");

  auto* dump = app.add_subcommand("dump-reps", "dump pooled representations as TSV");
  dump->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  dump->add_option("--data", data_path, "dataset path")->required();
  dump->add_option("--selector", selector, "h_<layer> or dsn:<domain>")->required();
  dump->add_option("--out", out_path, "output TSV path")->required();
  dump->add_option("--limit", limit, "cap on dumped rows");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  std::vector<const char*> argv;
  argv.push_back("mdctr");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  g.seed_set = seed_opt->count() > 0;
  g.strict_mask_set = strict_opt->count() > 0;

  try {
    bool wide = g.precision == 64;
    if (synth->parsed()) return cmd_synth(g, out_path);
    if (train->parsed())
      return wide ? cmd_train<double>(g, data_path, out_dir, baseline)
                  : cmd_train<float>(g, data_path, out_dir, baseline);
    if (eval->parsed())
      return wide ? cmd_eval<double>(g, ckpt_path, data_path, domain, base_path, out_path, split_name)
                  : cmd_eval<float>(g, ckpt_path, data_path, domain, base_path, out_path, split_name);
    if (zero->parsed())
      return wide ? cmd_eval<double>(g, ckpt_path, data_path, domain, base_path, out_path, split_name)
                  : cmd_eval<float>(g, ckpt_path, data_path, domain, base_path, out_path, split_name);
    if (add->parsed())
      return wide ? cmd_add_domain<double>(g, ckpt_path, data_path, domain, out_path)
                  : cmd_add_domain<float>(g, ckpt_path, data_path, domain, out_path);
    if (grad->parsed()) return cmd_grad_check(g, corrupt_mask);
    if (dump->parsed())
      return wide ? cmd_dump_reps<double>(g, ckpt_path, data_path, selector, out_path, limit)
                  : cmd_dump_reps<float>(g, ckpt_path, data_path, selector, out_path, limit);
    throw ValidationError("no subcommand given");
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mdctr

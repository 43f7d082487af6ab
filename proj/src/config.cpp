#include "mdctr/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace mdctr {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

IniConfig IniConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str());
}

IniConfig IniConfig::parse_string(const std::string& text) {
  IniConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ValidationError("config line " + std::to_string(line_no) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      cfg.sections_[section];
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(line_no) + ": expected key = value");
    cfg.sections_[section][trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return cfg;
}

bool IniConfig::has(const std::string& section, const std::string& key) const {
  auto it = sections_.find(section);
  return it != sections_.end() && it->second.count(key) > 0;
}

std::string IniConfig::get(const std::string& section, const std::string& key,
                           const std::string& fallback) const {
  auto it = sections_.find(section);
  if (it == sections_.end()) return fallback;
  auto kt = it->second.find(key);
  return kt == it->second.end() ? fallback : kt->second;
}

std::string IniConfig::require(const std::string& section, const std::string& key) const {
  if (!has(section, key))
    throw ValidationError("config: missing [" + section + "] " + key);
  return get(section, key, "");
}

long IniConfig::get_int(const std::string& section, const std::string& key, long fallback) const {
  if (!has(section, key)) return fallback;
  try {
    return std::stol(get(section, key, ""));
  } catch (const std::exception&) {
    throw ValidationError("config: [" + section + "] " + key + " is not an integer");
  }
}

double IniConfig::get_double(const std::string& section, const std::string& key,
                             double fallback) const {
  if (!has(section, key)) return fallback;
  try {
    return std::stod(get(section, key, ""));
  } catch (const std::exception&) {
    throw ValidationError("config: [" + section + "] " + key + " is not a number");
  }
}

bool IniConfig::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  if (!has(section, key)) return fallback;
  std::string v = get(section, key, "");
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError("config: [" + section + "] " + key + " is not a boolean");
}

std::vector<std::size_t> IniConfig::get_dims(const std::string& section, const std::string& key,
                                             std::vector<std::size_t> fallback) const {
  if (!has(section, key)) return fallback;
  std::string v = get(section, key, "");
  std::vector<std::size_t> out;
  std::string cur;
  for (char c : v + "x") {
    if (c == 'x' || c == ',' || c == ' ') {
      if (!cur.empty()) {
        out.push_back(static_cast<std::size_t>(std::stoul(cur)));
        cur.clear();
      }
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      cur.push_back(c);
    } else {
      throw ValidationError("config: [" + section + "] " + key + " has a bad dimension list");
    }
  }
  return out;
}

std::vector<std::string> IniConfig::get_list(const std::string& section, const std::string& key) const {
  std::vector<std::string> out;
  if (!has(section, key)) return out;
  std::istringstream ss(get(section, key, ""));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void IniConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  sections_[section][key] = value;
}

void IniConfig::set_entry(const std::string& entry) {
  auto eq = entry.find('=');
  if (eq == std::string::npos)
    throw ValidationError("override '" + entry + "': expected section.key=value");
  std::string lhs = trim(entry.substr(0, eq));
  auto dot = lhs.rfind('.');
  if (dot == std::string::npos)
    throw ValidationError("override '" + entry + "': expected section.key=value");
  set(lhs.substr(0, dot), lhs.substr(dot + 1), trim(entry.substr(eq + 1)));
}

std::vector<std::string> IniConfig::sections_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, kv] : sections_)
    if (name.rfind(prefix, 0) == 0 && name != prefix) out.push_back(name);
  return out;
}

namespace {

DsnConfig dsn_from_section(const IniConfig& ini, const std::string& section, DsnConfig base) {
  base.tap_frequency =
      static_cast<std::size_t>(ini.get_int(section, "tap_frequency", static_cast<long>(base.tap_frequency)));
  base.ladder_dim =
      static_cast<std::size_t>(ini.get_int(section, "ladder_dim", static_cast<long>(base.ladder_dim)));
  base.ladder_heads =
      static_cast<std::size_t>(ini.get_int(section, "ladder_heads", static_cast<long>(base.ladder_heads)));
  if (ini.has(section, "ladder_block"))
    base.ladder_block = ladder_kind_from_string(ini.get(section, "ladder_block", ""));
  base.tower_dims = ini.get_dims(section, "tower", base.tower_dims);
  return base;
}

}  // namespace

RunConfig RunConfig::from_ini(const IniConfig& ini) {
  RunConfig rc;

  rc.backbone.layers = static_cast<std::size_t>(ini.get_int("backbone", "layers", 8));
  rc.backbone.hidden = static_cast<std::size_t>(ini.get_int("backbone", "hidden", 128));
  rc.backbone.heads = static_cast<std::size_t>(ini.get_int("backbone", "heads", 4));
  rc.backbone.ffn = static_cast<std::size_t>(ini.get_int("backbone", "ffn", 256));
  rc.backbone.max_seq_len = static_cast<std::size_t>(ini.get_int("backbone", "max_seq_len", 128));
  rc.backbone.causal = ini.get_bool("backbone", "causal", false);
  rc.backbone.pooling = pooling_from_string(ini.get("backbone", "pooling", "mean"));

  rc.general.tower_dims = ini.get_dims("general", "tower", {64, 32, 16});

  rc.train.batch_size = static_cast<std::size_t>(ini.get_int("train", "batch_size", 64));
  rc.train.epochs = static_cast<std::size_t>(ini.get_int("train", "epochs", 2));
  rc.train.lr_low = ini.get_double("train", "lr_low", 5e-4);
  rc.train.lr_high = ini.get_double("train", "lr_high", 2e-3);
  rc.train.lr_cycle_epochs = static_cast<std::size_t>(ini.get_int("train", "lr_cycle_epochs", 4));
  std::string opt = ini.get("train", "optimizer", "adamw");
  if (opt == "adamw") rc.train.optimizer = OptKind::AdamW;
  else if (opt == "sgd") rc.train.optimizer = OptKind::Sgd;
  else throw ValidationError("config: unknown optimizer '" + opt + "'");
  rc.train.weight_decay = ini.get_double("train", "weight_decay", 0.0);
  rc.train.dropout = ini.get_double("train", "dropout", 0.0);
  rc.train.general_loss_weight = ini.get_double("train", "general_loss_weight", 1.0);
  rc.train.seed = static_cast<std::uint64_t>(ini.get_int("train", "seed", 1));
  rc.train.strict_mask = ini.get_bool("train", "strict_mask", false);
  rc.train.freeze = ini.get_list("train", "freeze");

  rc.data_path = ini.get("data", "path", "");
  rc.prompt_mode = prompt_mode_from_string(ini.get("data", "prompt_mode", "full"));
  rc.max_history = static_cast<std::size_t>(ini.get_int("data", "max_history", 2));
  rc.vocab_max = static_cast<std::size_t>(ini.get_int("data", "vocab_size", 20000));

  rc.synth.domain_names = ini.get_list("synth", "domains");
  if (ini.has("synth", "counts")) {
    rc.synth.samples_per_domain.clear();
    for (const auto& c : ini.get_list("synth", "counts"))
      rc.synth.samples_per_domain.push_back(static_cast<std::size_t>(std::stoul(c)));
  }
  rc.synth.users_per_domain = static_cast<std::size_t>(ini.get_int("synth", "users_per_domain", 0));
  rc.synth.items_per_domain = static_cast<std::size_t>(ini.get_int("synth", "items_per_domain", 0));
  rc.synth.latent_dim = static_cast<std::size_t>(ini.get_int("synth", "latent_dim", 4));
  rc.synth.alpha = ini.get_double("synth", "alpha", 0.6);
  rc.synth.label_noise = ini.get_double("synth", "noise", 0.1);
  rc.synth.seed = static_cast<std::uint64_t>(ini.get_int("synth", "seed", 1));

  rc.shared_bottom.embed_dim = static_cast<std::size_t>(ini.get_int("baseline", "embed_dim", 16));
  rc.shared_bottom.bottom_dims = ini.get_dims("baseline", "bottom", {64, 32});

  rc.dsn_defaults = dsn_from_section(ini, "dsn", DsnConfig{});
  for (const auto& section : ini.sections_with_prefix("dsn.")) {
    std::string domain = section.substr(4);
    DsnConfig dc = dsn_from_section(ini, section, rc.dsn_defaults);
    dc.domain = domain;
    rc.dsn_overrides.push_back(dc);
    if (ini.get_bool(section, "new", false)) rc.dsn_declared_new.push_back(domain);
  }
  return rc;
}

DsnConfig RunConfig::dsn_for(const std::string& domain) const {
  for (const auto& dc : dsn_overrides)
    if (dc.domain == domain) return dc;
  DsnConfig dc = dsn_defaults;
  dc.domain = domain;
  return dc;
}

void RunConfig::check_domains(const std::vector<std::string>& dataset_domains) const {
  for (const auto& dc : dsn_overrides) {
    bool in_data =
        std::find(dataset_domains.begin(), dataset_domains.end(), dc.domain) != dataset_domains.end();
    bool declared =
        std::find(dsn_declared_new.begin(), dsn_declared_new.end(), dc.domain) != dsn_declared_new.end();
    if (!in_data && !declared)
      throw ValidationError("config: [dsn." + dc.domain +
                            "] names a domain absent from the dataset and not declared new");
  }
}

}  // namespace mdctr

#pragma once

#include <map>
#include <string>
#include <vector>

#include "mdctr/backbone.hpp"
#include "mdctr/data.hpp"
#include "mdctr/dsn.hpp"
#include "mdctr/general.hpp"
#include "mdctr/shared_bottom.hpp"
#include "mdctr/trainer.hpp"

namespace mdctr {

/// Sectioned key-value file: `[section]` headers, `key = value` lines,
/// `#`/`;` comments. Later assignments win, so command-line overrides are
/// plain `set()` calls on top of the parsed file.
class IniConfig {
 public:
  static IniConfig parse_file(const std::string& path);
  static IniConfig parse_string(const std::string& text);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const;
  std::string require(const std::string& section, const std::string& key) const;
  long get_int(const std::string& section, const std::string& key, long fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  /// "64x32x16" or "64,32,16"
  std::vector<std::size_t> get_dims(const std::string& section, const std::string& key,
                                    std::vector<std::size_t> fallback) const;
  std::vector<std::string> get_list(const std::string& section, const std::string& key) const;

  void set(const std::string& section, const std::string& key, const std::string& value);
  /// "section.key=value" (CLI override syntax)
  void set_entry(const std::string& entry);

  std::vector<std::string> sections_with_prefix(const std::string& prefix) const;

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

/// Fully resolved run configuration.
struct RunConfig {
  BackboneConfig backbone;  // vocab_size filled in after the vocabulary is built
  GeneralConfig general;
  TrainConfig train;
  SynthConfig synth;
  SharedBottomConfig shared_bottom;

  std::string data_path;
  PromptMode prompt_mode = PromptMode::Full;
  std::size_t max_history = 2;
  std::size_t vocab_max = 20000;

  DsnConfig dsn_defaults;                       // [dsn]
  std::vector<DsnConfig> dsn_overrides;         // [dsn.<name>]
  std::vector<std::string> dsn_declared_new;    // [dsn.<name>] with new = true

  static RunConfig from_ini(const IniConfig& ini);

  /// template for one domain: defaults overlaid with any [dsn.<name>] section
  DsnConfig dsn_for(const std::string& domain) const;

  /// every [dsn.<name>] domain must appear in the dataset or be declared new
  void check_domains(const std::vector<std::string>& dataset_domains) const;
};

}  // namespace mdctr

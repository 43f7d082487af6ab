#pragma once

/// Checkpoint format: a text header, a JSON manifest, then raw parameter
/// blobs as little-endian 32-bit floats.
///
///   MDCTR1\n
///   <manifest byte count>\n
///   <manifest JSON>
///   <blob bytes>
///
/// The manifest carries the full model configuration (backbone, domain
/// networks, general head, prompt mode, vocabulary, registry order), one
/// entry per parameter (name, shape, byte offset, count) and an FNV-1a
/// checksum per parameter group over its stored bytes. Groups are keyed
/// "backbone", "general" and "dsn.<domain>", so a single domain network can
/// be loaded selectively into an existing model.

#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdctr/model.hpp"

namespace mdctr {

namespace ckpt_detail {

inline constexpr char kMagic[] = "MDCTR1";

inline void append_f32_le(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  out.push_back(static_cast<char>(bits & 0xff));
  out.push_back(static_cast<char>((bits >> 8) & 0xff));
  out.push_back(static_cast<char>((bits >> 16) & 0xff));
  out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline float read_f32_le(const unsigned char* p) {
  std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                       (static_cast<std::uint32_t>(p[2]) << 16) |
                       (static_cast<std::uint32_t>(p[3]) << 24);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline nlohmann::json read_manifest(std::ifstream& in, const std::string& path) {
  std::string magic, len_line;
  if (!std::getline(in, magic) || magic != kMagic)
    throw ValidationError("checkpoint '" + path + "': bad magic");
  if (!std::getline(in, len_line)) throw ValidationError("checkpoint '" + path + "': truncated header");
  std::size_t len = std::stoul(len_line);
  std::string manifest(len, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(len));
  if (!in) throw ValidationError("checkpoint '" + path + "': truncated manifest");
  return nlohmann::json::parse(manifest);
}

}  // namespace ckpt_detail

template <class S>
void save_model(Model<S>& model, const std::string& path) {
  using nlohmann::json;
  json manifest;
  manifest["format"] = 1;
  manifest["precision_stored"] = "f32le";

  const auto& bb = model.backbone.cfg;
  manifest["backbone"] = {{"layers", bb.layers},       {"hidden", bb.hidden},
                          {"heads", bb.heads},         {"ffn", bb.ffn},
                          {"max_seq_len", bb.max_seq_len}, {"vocab_size", bb.vocab_size},
                          {"causal", bb.causal},
                          {"pooling", bb.pooling == Pooling::Mean ? "mean" : "first-token"}};
  manifest["general"] = {{"tower_dims", model.general.cfg.tower_dims}};
  manifest["prompt_mode"] = to_string(model.prompt_mode);
  manifest["max_history"] = model.max_history;
  manifest["backbone_frozen"] = model.backbone_frozen;
  manifest["general_frozen"] = model.general_frozen;
  manifest["registry"] = model.registry.names();
  manifest["vocab"] = model.vocab.content_tokens();

  json dsns = json::array();
  for (const auto& d : model.dsns)
    dsns.push_back({{"domain", d->cfg.domain},
                    {"tap_frequency", d->cfg.tap_frequency},
                    {"ladder_dim", d->cfg.ladder_dim},
                    {"ladder_heads", d->cfg.ladder_heads},
                    {"ladder_block", to_string(d->cfg.ladder_block)},
                    {"tower_dims", d->cfg.tower_dims},
                    {"frozen", d->frozen}});
  manifest["dsns"] = dsns;

  std::string blob;
  json groups = json::array();
  for (auto& g : model.groups()) {
    json jg;
    jg["name"] = g.name;
    json params = json::array();
    std::size_t group_start = blob.size();
    for (auto* p : g.params) {
      json jp;
      jp["name"] = p->name;
      jp["shape"] = p->shape;
      jp["offset"] = blob.size();
      jp["count"] = p->size();
      for (S v : p->value) ckpt_detail::append_f32_le(blob, static_cast<float>(v));
      params.push_back(std::move(jp));
    }
    jg["params"] = std::move(params);
    char hex[24];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(
                      ckpt_detail::fnv1a(blob.substr(group_start, blob.size() - group_start))));
    jg["checksum"] = hex;
    groups.push_back(std::move(jg));
  }
  manifest["groups"] = std::move(groups);

  std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("checkpoint: cannot write '" + path + "'");
  out << ckpt_detail::kMagic << '\n' << text.size() << '\n' << text << blob;
}

namespace ckpt_detail {

template <class S>
void load_params_from_blob(const nlohmann::json& group, const std::string& blob,
                           std::map<std::string, Param<S>*>& by_name, const std::string& path) {
  for (const auto& jp : group["params"]) {
    std::string name = jp["name"].get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ValidationError("checkpoint '" + path + "': parameter '" + name + "' has no home");
    Param<S>* p = it->second;
    auto shape = jp["shape"].get<Shape>();
    if (shape != p->shape)
      throw ValidationError("checkpoint '" + path + "': shape mismatch for '" + name + "', stored " +
                            shape_str(shape) + " vs model " + shape_str(p->shape));
    std::size_t offset = jp["offset"].get<std::size_t>();
    std::size_t count = jp["count"].get<std::size_t>();
    if (offset + 4 * count > blob.size())
      throw ValidationError("checkpoint '" + path + "': blob too short for '" + name + "'");
    for (std::size_t i = 0; i < count; ++i)
      p->value[i] = static_cast<S>(
          read_f32_le(reinterpret_cast<const unsigned char*>(blob.data()) + offset + 4 * i));
  }
}

}  // namespace ckpt_detail

template <class S>
std::unique_ptr<Model<S>> load_model(const std::string& path) {
  using nlohmann::json;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("checkpoint: cannot read '" + path + "'");
  json manifest = ckpt_detail::read_manifest(in, path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const auto& jb = manifest["backbone"];
  BackboneConfig bb;
  bb.layers = jb["layers"].get<std::size_t>();
  bb.hidden = jb["hidden"].get<std::size_t>();
  bb.heads = jb["heads"].get<std::size_t>();
  bb.ffn = jb["ffn"].get<std::size_t>();
  bb.max_seq_len = jb["max_seq_len"].get<std::size_t>();
  bb.vocab_size = jb["vocab_size"].get<std::size_t>();
  bb.causal = jb["causal"].get<bool>();
  bb.pooling = pooling_from_string(jb["pooling"].get<std::string>());

  GeneralConfig gc;
  gc.tower_dims = manifest["general"]["tower_dims"].get<std::vector<std::size_t>>();

  auto vocab = Vocabulary::from_content_tokens(manifest["vocab"].get<std::vector<std::string>>());
  if (vocab.size() != bb.vocab_size)
    throw ValidationError("checkpoint '" + path + "': vocab size mismatch");

  Rng rng(0);  // values are overwritten from the blob
  auto model = std::make_unique<Model<S>>(bb, gc, std::move(vocab), rng);
  model->prompt_mode = prompt_mode_from_string(manifest["prompt_mode"].get<std::string>());
  model->max_history = manifest["max_history"].get<std::size_t>();
  model->backbone_frozen = manifest["backbone_frozen"].get<bool>();
  model->general_frozen = manifest["general_frozen"].get<bool>();

  for (const auto& jd : manifest["dsns"]) {
    DsnConfig dc;
    dc.domain = jd["domain"].get<std::string>();
    dc.tap_frequency = jd["tap_frequency"].get<std::size_t>();
    dc.ladder_dim = jd["ladder_dim"].get<std::size_t>();
    dc.ladder_heads = jd["ladder_heads"].get<std::size_t>();
    dc.ladder_block = ladder_kind_from_string(jd["ladder_block"].get<std::string>());
    dc.tower_dims = jd["tower_dims"].get<std::vector<std::size_t>>();
    auto& dsn = model->attach(dc, rng);
    dsn.frozen = jd["frozen"].get<bool>();
  }

  std::map<std::string, Param<S>*> by_name;
  for (auto* p : model->all_params()) by_name[p->name] = p;
  for (const auto& jg : manifest["groups"])
    ckpt_detail::load_params_from_blob<S>(jg, blob, by_name, path);
  return model;
}

/// Load just one parameter group (e.g. "dsn.music") into an existing model.
template <class S>
void load_group(Model<S>& model, const std::string& path, const std::string& group_name) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("checkpoint: cannot read '" + path + "'");
  auto manifest = ckpt_detail::read_manifest(in, path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::map<std::string, Param<S>*> by_name;
  for (auto* p : model.all_params()) by_name[p->name] = p;
  for (const auto& jg : manifest["groups"]) {
    if (jg["name"].get<std::string>() != group_name) continue;
    ckpt_detail::load_params_from_blob<S>(jg, blob, by_name, path);
    return;
  }
  throw ValidationError("checkpoint '" + path + "': no group named '" + group_name + "'");
}

/// group name -> stored checksum, straight from the manifest
inline std::map<std::string, std::string> checkpoint_checksums(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("checkpoint: cannot read '" + path + "'");
  auto manifest = ckpt_detail::read_manifest(in, path);
  std::map<std::string, std::string> out;
  for (const auto& jg : manifest["groups"])
    out[jg["name"].get<std::string>()] = jg["checksum"].get<std::string>();
  return out;
}

}  // namespace mdctr

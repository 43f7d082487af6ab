#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "mdctr/checkpoint.hpp"
#include "mdctr/config.hpp"
#include "mdctr/trainer.hpp"

using namespace mdctr;

namespace {

std::unique_ptr<Model<float>> tiny_model(std::uint64_t seed) {
  std::vector<std::string> corpus{"ultra fine goods arrive", "worn dull stock leaves"};
  auto vocab = build_vocab(corpus, 64);
  BackboneConfig bb;
  bb.layers = 2;
  bb.hidden = 16;
  bb.heads = 2;
  bb.ffn = 24;
  bb.max_seq_len = 16;
  bb.vocab_size = vocab.size();
  Rng rng(seed);
  auto model = std::make_unique<Model<float>>(bb, GeneralConfig{{8, 4}}, std::move(vocab), rng);
  for (const char* name : {"alpha", "beta"}) {
    DsnConfig dc;
    dc.domain = name;
    dc.tap_frequency = 2;
    dc.ladder_dim = 8;
    dc.tower_dims = {8, 4};
    model->attach(dc, rng);
  }
  return model;
}

Batch<float> tiny_batch(const Model<float>& model) {
  InteractionRecord rec;
  rec.domain = "alpha";
  rec.user_id = "u1";
  rec.item_id = "p1";
  rec.title = "ultra fine goods";
  rec.brand = "acme";
  rec.price = "3.00";
  rec.label = 1;
  static Dataset ds;
  ds.records = {rec, rec};
  ds.records[1].domain = "beta";
  ds.split = {Split::Train, Split::Train};
  BatchCache<float> cache(model, ds);
  return cache.make({0, 1});
}

}  // namespace

TEST_CASE("checkpoint round trip restores values and predictions bitwise") {
  auto model = tiny_model(3);
  save_model(*model, "ckpt_rt.bin");
  auto loaded = load_model<float>("ckpt_rt.bin");

  CHECK(loaded->registry.names() == model->registry.names());
  CHECK(loaded->backbone.cfg.layers == model->backbone.cfg.layers);
  CHECK(loaded->vocab.size() == model->vocab.size());

  auto pa = model->all_params();
  auto pb = loaded->all_params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value == pb[i]->value);
  }

  auto batch = tiny_batch(*model);
  auto a = predict_batch(*model, batch, true);
  auto b = predict_batch(*loaded, batch, true);
  CHECK(a.routed == b.routed);
  CHECK(a.general == b.general);
  std::remove("ckpt_rt.bin");
}

TEST_CASE("checkpoint loads into 64-bit mode for audits") {
  auto model = tiny_model(4);
  save_model(*model, "ckpt_wide.bin");
  auto wide = load_model<double>("ckpt_wide.bin");
  auto pa = model->all_params();
  auto pb = wide->all_params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i]->value.size(); ++j)
      CHECK(static_cast<double>(pa[i]->value[j]) == pb[i]->value[j]);
  std::remove("ckpt_wide.bin");
}

TEST_CASE("selective group load touches only the requested unit") {
  auto donor = tiny_model(5);
  Rng scramble(99);
  for (auto* p : donor->dsn("beta").params()) p->init_normal(scramble, 1.0);
  save_model(*donor, "ckpt_donor.bin");

  auto target = tiny_model(5);
  auto backbone_sum = group_checksum(target->backbone.params());
  auto alpha_sum = group_checksum(target->dsn("alpha").params());
  load_group(*target, "ckpt_donor.bin", "dsn.beta");

  CHECK(group_checksum(target->backbone.params()) == backbone_sum);
  CHECK(group_checksum(target->dsn("alpha").params()) == alpha_sum);
  auto da = donor->dsn("beta").params();
  auto ta = target->dsn("beta").params();
  for (std::size_t i = 0; i < da.size(); ++i) CHECK(da[i]->value == ta[i]->value);

  CHECK_THROWS_AS(load_group(*target, "ckpt_donor.bin", "dsn.nonexistent"), ValidationError);
  std::remove("ckpt_donor.bin");
}

TEST_CASE("manifest checksums flag exactly the groups that changed") {
  auto model = tiny_model(6);
  save_model(*model, "ckpt_a.bin");
  Rng scramble(1);
  for (auto* p : model->dsn("alpha").params()) p->init_normal(scramble, 1.0);
  save_model(*model, "ckpt_b.bin");

  auto a = checkpoint_checksums("ckpt_a.bin");
  auto b = checkpoint_checksums("ckpt_b.bin");
  CHECK(a.at("backbone") == b.at("backbone"));
  CHECK(a.at("general") == b.at("general"));
  CHECK(a.at("dsn.beta") == b.at("dsn.beta"));
  CHECK(a.at("dsn.alpha") != b.at("dsn.alpha"));
  std::remove("ckpt_a.bin");
  std::remove("ckpt_b.bin");
}

TEST_CASE("ini parsing: sections, types, lists and overrides") {
  auto ini = IniConfig::parse_string(R"(
# run settings
[backbone]
layers = 4
causal = true
pooling = first-token

[train]
lr_low = 1e-5
freeze = backbone, dsn.music

[dsn]
tower = 64x32x16

[dsn.music]
ladder_dim = 32
)");
  CHECK(ini.get_int("backbone", "layers", 0) == 4);
  CHECK(ini.get_bool("backbone", "causal", false));
  CHECK(ini.get_double("train", "lr_low", 0) == doctest::Approx(1e-5));
  CHECK(ini.get_dims("dsn", "tower", {}) == std::vector<std::size_t>{64, 32, 16});
  CHECK(ini.get_list("train", "freeze") == std::vector<std::string>{"backbone", "dsn.music"});
  CHECK(ini.sections_with_prefix("dsn.") == std::vector<std::string>{"dsn.music"});

  ini.set_entry("backbone.layers=8");
  CHECK(ini.get_int("backbone", "layers", 0) == 8);

  CHECK_THROWS_AS(IniConfig::parse_string("[open\n"), ValidationError);
  CHECK_THROWS_AS(IniConfig::parse_string("keyvalue\n"), ValidationError);
  CHECK_THROWS_AS(ini.set_entry("nodots"), ValidationError);
}

TEST_CASE("run config resolves dsn templates and checks domain presence") {
  auto ini = IniConfig::parse_string(R"(
[backbone]
layers = 2
hidden = 16
heads = 2

[dsn]
tap_frequency = 2
ladder_dim = 8

[dsn.music]
ladder_dim = 32

[dsn.future]
new = true

[train]
seed = 9
)");
  auto rc = RunConfig::from_ini(ini);
  CHECK(rc.backbone.layers == 2);
  CHECK(rc.train.seed == 9);

  auto music = rc.dsn_for("music");
  CHECK(music.ladder_dim == 32);
  CHECK(music.tap_frequency == 2);  // inherited from [dsn]
  auto other = rc.dsn_for("sports");
  CHECK(other.ladder_dim == 8);

  rc.check_domains({"music", "sports"});  // future is declared new
  auto ini2 = IniConfig::parse_string("[dsn.ghost]\nladder_dim = 8\n");
  auto rc2 = RunConfig::from_ini(ini2);
  CHECK_THROWS_AS(rc2.check_domains({"music"}), ValidationError);

  auto bad = IniConfig::parse_string("[train]\noptimizer = rmsprop\n");
  CHECK_THROWS_AS(RunConfig::from_ini(bad), ValidationError);
}

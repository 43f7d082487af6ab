#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "mdctr/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / "mdctr_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }
};

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kConfig = R"(
[backbone]
layers = 2
hidden = 16
heads = 2
ffn = 24
max_seq_len = 48

[general]
tower = 8x4

[dsn]
tap_frequency = 2
ladder_dim = 8
tower = 8x4

[train]
batch_size = 32
epochs = 2
optimizer = adamw
lr_low = 1e-4
lr_high = 1e-3
seed = 7

[synth]
counts = 200,200
latent_dim = 2
alpha = 0.6
noise = 0.1
seed = 7
)";

// epoch -> domain -> value for one (split, metric)
std::map<std::string, std::map<std::string, double>> parse_report(const std::string& path,
                                                                  const std::string& split,
                                                                  const std::string& metric) {
  std::ifstream in(path);
  std::map<std::string, std::map<std::string, double>> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string epoch, domain, sp, me, val;
    std::getline(ss, epoch, '\t');
    std::getline(ss, domain, '\t');
    std::getline(ss, sp, '\t');
    std::getline(ss, me, '\t');
    std::getline(ss, val, '\t');
    if (sp == split && me == metric) out[epoch][domain] = std::stod(val);
  }
  return out;
}

}  // namespace

TEST_CASE("synth command: counts match, reruns are byte-identical, zero counts rejected") {
  Workspace ws;
  write_file(ws.p("run.ini"), kConfig);

  CHECK(mdctr::run_cli({"synth", "--config", ws.p("run.ini"), "--out", ws.p("a.jsonl")}) == 0);
  CHECK(mdctr::run_cli({"synth", "--config", ws.p("run.ini"), "--out", ws.p("b.jsonl")}) == 0);
  auto a = read_file(ws.p("a.jsonl"));
  CHECK(a == read_file(ws.p("b.jsonl")));
  CHECK(std::count(a.begin(), a.end(), '\n') == 400);

  CHECK(mdctr::run_cli({"synth", "--config", ws.p("run.ini"), "--set", "synth.counts=0,200",
                        "--out", ws.p("c.jsonl")}) == 1);
}

TEST_CASE("train/eval pipeline: reproducible reports, eval matches the trainer bitwise") {
  Workspace ws;
  write_file(ws.p("run.ini"), kConfig);
  REQUIRE(mdctr::run_cli({"synth", "--config", ws.p("run.ini"), "--out", ws.p("data.jsonl")}) == 0);

  REQUIRE(mdctr::run_cli({"train", "--config", ws.p("run.ini"), "--data", ws.p("data.jsonl"),
                          "--out-dir", ws.p("run1")}) == 0);
  REQUIRE(mdctr::run_cli({"train", "--config", ws.p("run.ini"), "--data", ws.p("data.jsonl"),
                          "--out-dir", ws.p("run2")}) == 0);
  CHECK(read_file(ws.p("run1/report.tsv")) == read_file(ws.p("run2/report.tsv")));
  CHECK(fs::exists(ws.p("run1/checkpoint.bin")));
  CHECK(fs::exists(ws.p("run1/vocab.tsv")));
  CHECK(fs::exists(ws.p("run1/audit.tsv")));

  // one valid-AUC series per domain, every epoch
  auto valid = parse_report(ws.p("run1/report.tsv"), "valid", "auc");
  REQUIRE(valid.count("1"));
  REQUIRE(valid.count("2"));
  CHECK(valid["1"].count("sports"));
  CHECK(valid["1"].count("beauty"));

  // eval on the valid split reproduces the trainer's numbers on its best epoch
  REQUIRE(mdctr::run_cli({"eval", "--checkpoint", ws.p("run1/checkpoint.bin"), "--data",
                          ws.p("data.jsonl"), "--seed", "7", "--split", "valid", "--out",
                          ws.p("metrics.tsv")}) == 0);
  std::string best_epoch;
  {
    // best epoch is the one whose "*" valid auc is maximal (ties: first)
    double best = -1;
    for (auto& [epoch, by_domain] : valid)
      if (by_domain.count("*") && by_domain["*"] > best) {
        best = by_domain["*"];
        best_epoch = epoch;
      }
  }
  std::ifstream metrics(ws.p("metrics.tsv"));
  std::string line;
  std::getline(metrics, line);
  while (std::getline(metrics, line)) {
    std::istringstream ss(line);
    std::string domain;
    double a;
    std::size_t n;
    ss >> domain >> a >> n;
    CHECK(std::abs(a - valid[best_epoch][domain]) < 1e-7);
  }
}

TEST_CASE("strict-mask and dispatch training agree per step") {
  Workspace ws;
  write_file(ws.p("run.ini"), kConfig);
  REQUIRE(mdctr::run_cli({"synth", "--config", ws.p("run.ini"), "--out", ws.p("data.jsonl")}) == 0);
  REQUIRE(mdctr::run_cli({"train", "--config", ws.p("run.ini"), "--data", ws.p("data.jsonl"),
                          "--out-dir", ws.p("plain")}) == 0);
  REQUIRE(mdctr::run_cli({"train", "--config", ws.p("run.ini"), "--data", ws.p("data.jsonl"),
                          "--strict-mask", "--out-dir", ws.p("strict")}) == 0);

  std::ifstream a(ws.p("plain/audit.tsv")), b(ws.p("strict/audit.tsv"));
  std::string la, lb;
  std::getline(a, la);
  std::getline(b, lb);
  std::size_t steps = 0;
  while (std::getline(a, la) && std::getline(b, lb)) {
    std::istringstream sa(la), sb(lb);
    std::string f;
    double loss_a, loss_b;
    std::getline(sa, f, '\t');
    std::getline(sa, f, '\t');
    std::getline(sa, f, '\t');
    loss_a = std::stod(f);
    std::getline(sb, f, '\t');
    std::getline(sb, f, '\t');
    std::getline(sb, f, '\t');
    loss_b = std::stod(f);
    CHECK(std::abs(loss_a - loss_b) < 1e-6);
    ++steps;
  }
  CHECK(steps >= 20);  // both epochs, every batch
}

TEST_CASE("baseline flag trains the shared-bottom model") {
  Workspace ws;
  write_file(ws.p("run.ini"), kConfig);
  REQUIRE(mdctr::run_cli({"synth", "--config", ws.p("run.ini"), "--out", ws.p("data.jsonl")}) == 0);
  CHECK(mdctr::run_cli({"train", "--config", ws.p("run.ini"), "--data", ws.p("data.jsonl"),
                        "--baseline", "shared-bottom", "--out-dir", ws.p("base")}) == 0);
  CHECK(fs::exists(ws.p("base/report.tsv")));
  CHECK(mdctr::run_cli({"train", "--config", ws.p("run.ini"), "--data", ws.p("data.jsonl"),
                        "--baseline", "nonsense", "--out-dir", ws.p("x")}) == 1);
}

TEST_CASE("eval on a single-class domain slice is a numerical failure (exit 2)") {
  Workspace ws;
  write_file(ws.p("run.ini"), kConfig);
  REQUIRE(mdctr::run_cli({"synth", "--config", ws.p("run.ini"), "--out", ws.p("data.jsonl")}) == 0);
  REQUIRE(mdctr::run_cli({"train", "--config", ws.p("run.ini"), "--data", ws.p("data.jsonl"),
                          "--out-dir", ws.p("run")}) == 0);
  std::ostringstream single;
  for (int i = 0; i < 50; ++i)
    single << R"({"domain":"sports","user_id":"u","item_id":"p)" << i
           << R"(","title":"ultrafine0 deepfine2","brand":"b","price":"1.00","label":1})"
           << "\n";
  write_file(ws.p("single.jsonl"), single.str());
  CHECK(mdctr::run_cli({"eval", "--checkpoint", ws.p("run/checkpoint.bin"), "--data",
                        ws.p("single.jsonl")}) == 2);
}

TEST_CASE("add-domain extends a checkpoint and the result evaluates on all domains") {
  Workspace ws;
  write_file(ws.p("run.ini"), kConfig);
  REQUIRE(mdctr::run_cli({"synth", "--config", ws.p("run.ini"), "--out", ws.p("data.jsonl")}) == 0);
  REQUIRE(mdctr::run_cli({"train", "--config", ws.p("run.ini"), "--data", ws.p("data.jsonl"),
                          "--out-dir", ws.p("run")}) == 0);

  write_file(ws.p("office.ini"),
             "[synth]\ndomains = office\ncounts = 200\nlatent_dim = 2\nseed = 3\n");
  REQUIRE(mdctr::run_cli({"synth", "--config", ws.p("office.ini"), "--out", ws.p("office.jsonl")}) ==
          0);
  REQUIRE(mdctr::run_cli({"add-domain", "--config", ws.p("run.ini"), "--checkpoint",
                          ws.p("run/checkpoint.bin"), "--data", ws.p("office.jsonl"), "--domain",
                          "office", "--out", ws.p("ext.bin")}) == 0);

  // the extended checkpoint loads and evaluates on old and new domains alike
  CHECK(mdctr::run_cli({"eval", "--checkpoint", ws.p("ext.bin"), "--data", ws.p("data.jsonl"),
                        "--seed", "7"}) == 0);
  CHECK(mdctr::run_cli({"eval", "--checkpoint", ws.p("ext.bin"), "--data", ws.p("office.jsonl"),
                        "--seed", "7"}) == 0);

  // re-adding a registered domain is rejected
  write_file(ws.p("sports.ini"), "[synth]\ndomains = sports\ncounts = 100\nlatent_dim = 2\nseed = 3\n");
  REQUIRE(mdctr::run_cli({"synth", "--config", ws.p("sports.ini"), "--out", ws.p("more.jsonl")}) == 0);
  CHECK(mdctr::run_cli({"add-domain", "--config", ws.p("run.ini"), "--checkpoint",
                        ws.p("run/checkpoint.bin"), "--data", ws.p("more.jsonl"), "--domain",
                        "sports", "--out", ws.p("ext2.bin")}) == 1);
}

TEST_CASE("dump-reps writes deterministic TSV with the right width") {
  Workspace ws;
  write_file(ws.p("run.ini"), kConfig);
  REQUIRE(mdctr::run_cli({"synth", "--config", ws.p("run.ini"), "--out", ws.p("data.jsonl")}) == 0);
  REQUIRE(mdctr::run_cli({"train", "--config", ws.p("run.ini"), "--data", ws.p("data.jsonl"),
                          "--out-dir", ws.p("run")}) == 0);

  auto dump = [&](const std::string& selector, const std::string& out) {
    return mdctr::run_cli({"dump-reps", "--checkpoint", ws.p("run/checkpoint.bin"), "--data",
                           ws.p("data.jsonl"), "--selector", selector, "--out", ws.p(out),
                           "--limit", "10"});
  };
  REQUIRE(dump("h_0", "h0.tsv") == 0);
  auto lines = read_file(ws.p("h0.tsv"));
  CHECK(std::count(lines.begin(), lines.end(), '\n') == 11);  // header + 10 rows
  std::istringstream first(lines.substr(0, lines.find('\n')));
  std::size_t cols = 0;
  std::string col;
  while (std::getline(first, col, '\t')) ++cols;
  CHECK(cols == 2 + 16);  // domain, sample_id, hidden width

  REQUIRE(dump("h_0", "h0_again.tsv") == 0);
  CHECK(read_file(ws.p("h0.tsv")) == read_file(ws.p("h0_again.tsv")));

  REQUIRE(dump("dsn:sports", "dsn.tsv") == 0);
  auto dsn_lines = read_file(ws.p("dsn.tsv"));
  std::istringstream dfirst(dsn_lines.substr(0, dsn_lines.find('\n')));
  cols = 0;
  while (std::getline(dfirst, col, '\t')) ++cols;
  CHECK(cols == 2 + 4);  // penultimate tower width

  CHECK(dump("nonsense", "x.tsv") == 1);
}

TEST_CASE("grad-check passes clean and fails under the corrupted mask") {
  CHECK(mdctr::run_cli({"grad-check"}) == 0);
  CHECK(mdctr::run_cli({"grad-check", "--corrupt-mask"}) == 2);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tiedgnn/checkpoint.hpp"
#include "tiedgnn/config.hpp"
#include "tiedgnn/evaluation.hpp"
#include "tiedgnn/training.hpp"

using namespace tiedgnn;
namespace fs = std::filesystem;

namespace {

// Cyclic item chains: transition i -> i+1 (mod n) everywhere, so even a few
// epochs should pull the loss well below the uniform baseline.
Bundle toy_bundle(int n_items = 10) {
  Bundle b;
  for (int i = 0; i < n_items; ++i) b.vocab.add("item" + std::to_string(i));
  auto make_session = [&](int start) {
    Session s;
    for (int i = 0; i < 4; ++i) s.items.push_back((start + i) % n_items);
    return s;
  };
  for (int s = 0; s < 20; ++s) {
    Session ses = make_session(s % n_items);
    for (const LabeledInstance& ins : augment_split(ses)) b.train.push_back(ins);
    b.train_sessions.push_back(std::move(ses));
  }
  for (int s = 0; s < 5; ++s) {
    for (const LabeledInstance& ins : augment_split(make_session((3 * s + 1) % n_items))) {
      b.valid.push_back(ins);
    }
  }
  for (int s = 0; s < 5; ++s) {
    for (const LabeledInstance& ins : augment_split(make_session((2 * s + 3) % n_items))) {
      b.test.push_back(ins);
    }
  }
  b.stats.items = static_cast<std::size_t>(n_items);
  b.stats.train_sessions = b.train_sessions.size();
  b.stats.train_instances = b.train.size();
  b.stats.valid_instances = b.valid.size();
  b.stats.test_instances = b.test.size();
  return b;
}

GlobalGraph toy_graph(const Bundle& b) {
  return build_global_graph(b.train_sessions, b.vocab.size(), 2, 4);
}

TrainConfig toy_config() {
  TrainConfig cfg;
  cfg.model.num_items = 0;  // filled from the bundle
  cfg.model.d = 8;
  cfg.model.K = 2;
  cfg.model.d_p = 3;
  cfg.model.L = 2;
  cfg.model.L_max = 10;
  cfg.model.epsilon = 2;
  cfg.model.max_neighbors = 4;
  cfg.model.beta = 1.0;
  cfg.model.lambda = 0.1;
  cfg.model.dropout = 0.0;
  cfg.batch_size = 16;
  cfg.base_lr = 0.01;
  cfg.lr_every = 100;
  cfg.max_epochs = 3;
  cfg.patience = 10;
  cfg.seed = 7;
  return cfg;
}

std::string fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "tiedgnn_train_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
  auto pa = a.all();
  auto pb = b.all();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->name != pb[i]->name) return false;
    if (pa[i]->value.rows() != pb[i]->value.rows()) return false;
    if (pa[i]->value.cols() != pb[i]->value.cols()) return false;
    if (!(pa[i]->value.array() == pb[i]->value.array()).all()) return false;
  }
  return true;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  REQUIRE(bool(out));
  out << content;
}

}  // namespace

TEST_CASE("training reduces the loss on a learnable toy corpus") {
  Bundle b = toy_bundle();
  GlobalGraph g = toy_graph(b);
  std::ostringstream progress;
  TrainOutputs out = train(toy_config(), b, g, fresh_dir("loss_down"), progress);
  REQUIRE(out.report.epochs.size() == 3);
  CHECK(out.report.epochs.back().train_loss < out.report.epochs.front().train_loss);
  CHECK(progress.str().rfind("epoch=0 loss=", 0) == 0);
}

TEST_CASE("identical config and seed give an identical report") {
  Bundle b = toy_bundle();
  GlobalGraph g = toy_graph(b);
  std::ostringstream sink1, sink2;
  TrainOutputs a = train(toy_config(), b, g, fresh_dir("det_a"), sink1);
  TrainOutputs c = train(toy_config(), b, g, fresh_dir("det_b"), sink2);
  REQUIRE(a.report.epochs.size() == c.report.epochs.size());
  for (std::size_t e = 0; e < a.report.epochs.size(); ++e) {
    CHECK(a.report.epochs[e].epoch == c.report.epochs[e].epoch);
    CHECK(a.report.epochs[e].train_loss == c.report.epochs[e].train_loss);
    CHECK(a.report.epochs[e].valid_p20 == c.report.epochs[e].valid_p20);
    CHECK(a.report.epochs[e].valid_mrr20 == c.report.epochs[e].valid_mrr20);
    CHECK(a.report.epochs[e].lr == c.report.epochs[e].lr);
  }
  CHECK(a.report.best_epoch == c.report.best_epoch);
  CHECK(a.report.best_mrr20 == c.report.best_mrr20);
  CHECK(params_equal(a.params, c.params));
}

TEST_CASE("zero learning rate with patience one stops after two epochs") {
  Bundle b = toy_bundle();
  GlobalGraph g = toy_graph(b);
  TrainConfig cfg = toy_config();
  cfg.base_lr = 0.0;
  cfg.patience = 1;
  cfg.max_epochs = 10;
  std::ostringstream sink;
  TrainOutputs out = train(cfg, b, g, fresh_dir("frozen"), sink);
  CHECK(out.report.epochs.size() == 2);
  CHECK(out.report.best_epoch == 0);
  CHECK(out.report.stale_epochs == 1);
  CHECK(out.report.epochs[0].valid_mrr20 == out.report.epochs[1].valid_mrr20);
}

TEST_CASE("per-epoch learning rate follows the step schedule exactly") {
  Bundle b = toy_bundle();
  GlobalGraph g = toy_graph(b);
  TrainConfig cfg = toy_config();
  cfg.base_lr = 0.004;
  cfg.lr_decay = 0.5;
  cfg.lr_every = 2;
  cfg.max_epochs = 5;
  std::ostringstream sink;
  TrainOutputs out = train(cfg, b, g, fresh_dir("schedule"), sink);
  REQUIRE(out.report.epochs.size() == 5);
  for (const EpochStats& e : out.report.epochs) {
    CHECK(e.lr == lr_at(e.epoch, cfg.base_lr, cfg.lr_decay, cfg.lr_every));
  }
}

TEST_CASE("parameters stay finite through training") {
  Bundle b = toy_bundle();
  GlobalGraph g = toy_graph(b);
  std::ostringstream sink;
  TrainOutputs out = train(toy_config(), b, g, fresh_dir("finite"), sink);
  for (const Parameter* p : static_cast<const ModelParams&>(out.params).all()) {
    CHECK(p->value.allFinite());
  }
}

TEST_CASE("checkpoints round-trip parameters, optimizer state, and report") {
  Bundle b = toy_bundle();
  GlobalGraph g = toy_graph(b);
  std::ostringstream sink;
  TrainConfig cfg = toy_config();
  TrainOutputs out = train(cfg, b, g, fresh_dir("roundtrip"), sink);

  Checkpoint ck = load_checkpoint(out.last_checkpoint);
  CHECK(params_equal(ck.params, out.params));
  CHECK(ck.adam.t == out.adam.t);
  for (const auto& [name, mom] : out.adam.moments) {
    REQUIRE(ck.adam.moments.count(name) == 1);
    CHECK((ck.adam.moments.at(name).m.array() == mom.m.array()).all());
    CHECK((ck.adam.moments.at(name).v.array() == mom.v.array()).all());
  }
  CHECK(train_config_to_json(ck.config) ==
        train_config_to_json([&] {
          TrainConfig eff = cfg;
          eff.model.num_items = b.vocab.size();
          return eff;
        }()));
  CHECK(train_report_to_json(ck.report, false) == train_report_to_json(out.report, false));
  CHECK(ck.bundle_hash == bundle_fingerprint(b));
  CHECK(ck.graph_hash == graph_fingerprint(g));
}

TEST_CASE("corrupt checkpoints are rejected outright") {
  Bundle b = toy_bundle();
  GlobalGraph g = toy_graph(b);
  std::ostringstream sink;
  TrainConfig cfg = toy_config();
  cfg.max_epochs = 1;
  const std::string dir = fresh_dir("corrupt");
  TrainOutputs out = train(cfg, b, g, dir, sink);
  const std::string good = read_bytes(out.last_checkpoint);

  auto write_variant = [&](const std::string& name, const std::string& bytes) {
    const std::string path = dir + "/" + name;
    std::ofstream f(path, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    return path;
  };

  std::string flipped = good;
  flipped[0] = 'X';
  CHECK_THROWS_AS(load_checkpoint(write_variant("magic.bin", flipped)), IoError);

  std::string versioned = good;
  versioned[8] = 2;
  CHECK_THROWS_AS(load_checkpoint(write_variant("version.bin", versioned)), IoError);

  CHECK_THROWS_AS(
      load_checkpoint(write_variant("short.bin", good.substr(0, good.size() - 64))), IoError);

  CHECK_THROWS_AS(load_checkpoint(write_variant("long.bin", good + "x")), IoError);

  CHECK_THROWS_AS(load_checkpoint(dir + "/does_not_exist.bin"), IoError);
}

TEST_CASE("resuming reproduces the uninterrupted run bit for bit") {
  Bundle b = toy_bundle();
  GlobalGraph g = toy_graph(b);
  std::ostringstream sink;

  TrainConfig two = toy_config();
  two.max_epochs = 2;
  const std::string dir_a = fresh_dir("resume_a");
  TrainOutputs first = train(two, b, g, dir_a, sink);
  REQUIRE(first.report.epochs.size() == 2);

  const std::string dir_b = fresh_dir("resume_b");
  TrainOutputs resumed = resume(first.last_checkpoint, b, g, dir_b, sink, 3);
  REQUIRE(resumed.report.epochs.size() == 3);

  TrainConfig three = toy_config();
  three.max_epochs = 3;
  const std::string dir_c = fresh_dir("resume_c");
  TrainOutputs straight = train(three, b, g, dir_c, sink);
  REQUIRE(straight.report.epochs.size() == 3);

  CHECK(params_equal(resumed.params, straight.params));
  CHECK(read_bytes(resumed.last_checkpoint) == read_bytes(straight.last_checkpoint));
  CHECK(resumed.report.epochs[2].train_loss == straight.report.epochs[2].train_loss);
  CHECK(resumed.report.epochs[2].valid_mrr20 == straight.report.epochs[2].valid_mrr20);
}

TEST_CASE("resume rejects mismatched artifacts") {
  Bundle b = toy_bundle();
  GlobalGraph g = toy_graph(b);
  std::ostringstream sink;
  TrainConfig cfg = toy_config();
  cfg.max_epochs = 1;
  TrainOutputs out = train(cfg, b, g, fresh_dir("resume_mismatch"), sink);

  Bundle other = toy_bundle();
  other.train.push_back(other.train.front());
  CHECK_THROWS_AS(
      resume(out.last_checkpoint, other, g, fresh_dir("resume_mismatch_b"), sink, 2),
      DataError);
}

TEST_CASE("only max_epochs and patience may change on resume") {
  TrainConfig saved = toy_config();
  saved.model.num_items = 10;

  TrainConfig ok = saved;
  ok.max_epochs = 99;
  ok.patience = 4;
  CHECK_NOTHROW(check_resume_compatible(saved, ok));

  TrainConfig unset_items = saved;
  unset_items.model.num_items = 0;
  CHECK_NOTHROW(check_resume_compatible(saved, unset_items));

  TrainConfig changed_d = saved;
  changed_d.model.d = 16;
  CHECK_THROWS_AS(check_resume_compatible(saved, changed_d), ConfigError);

  TrainConfig changed_seed = saved;
  changed_seed.seed = saved.seed + 1;
  CHECK_THROWS_AS(check_resume_compatible(saved, changed_seed), ConfigError);

  TrainConfig changed_lambda = saved;
  changed_lambda.model.lambda = 0.5;
  CHECK_THROWS_AS(check_resume_compatible(saved, changed_lambda), ConfigError);
}

TEST_CASE("training validates its inputs") {
  Bundle b = toy_bundle();
  GlobalGraph g = toy_graph(b);
  std::ostringstream sink;

  Bundle no_valid = toy_bundle();
  no_valid.valid.clear();
  CHECK_THROWS_AS(train(toy_config(), no_valid, toy_graph(no_valid), fresh_dir("no_valid"),
                        sink),
                  DataError);

  GlobalGraph wrong_items = build_global_graph(b.train_sessions, b.vocab.size() + 1, 2, 4);
  CHECK_THROWS_AS(train(toy_config(), b, wrong_items, fresh_dir("wrong_items"), sink),
                  DataError);

  Bundle other = toy_bundle();
  other.train_sessions.pop_back();
  CHECK_THROWS_AS(train(toy_config(), other, g, fresh_dir("wrong_hash"), sink), DataError);

  TrainConfig bad = toy_config();
  bad.model.epsilon = 3;  // graph was built with 2
  CHECK_THROWS_AS(train(bad, b, g, fresh_dir("wrong_eps"), sink), ConfigError);

  TrainConfig bad_batch = toy_config();
  bad_batch.batch_size = 0;
  CHECK_THROWS_AS(train(bad_batch, b, g, fresh_dir("bad_batch"), sink), ConfigError);
}

TEST_CASE("fingerprints react to content changes") {
  Bundle a = toy_bundle();
  Bundle b = toy_bundle();
  CHECK(bundle_fingerprint(a) == bundle_fingerprint(b));
  b.train.back().label = (b.train.back().label + 1) % b.vocab.size();
  CHECK(bundle_fingerprint(a) != bundle_fingerprint(b));

  GlobalGraph g1 = toy_graph(a);
  GlobalGraph g2 = toy_graph(a);
  CHECK(graph_fingerprint(g1) == graph_fingerprint(g2));
  g2.epsilon += 1;
  CHECK(graph_fingerprint(g1) != graph_fingerprint(g2));
}

TEST_CASE("config files parse keys, comments, and quoted values") {
  const std::string dir = fresh_dir("config_parse");
  const std::string path = dir + "/a.toml";
  write_file(path,
             "# full example\n"
             "d = 16\n"
             "K = 4   # trailing comment\n"
             "beta = 2.5\n"
             "ce_mode = \"multiclass\"\n"
             "log_weight = true\n"
             "seed = 9\n"
             "\n");
  TrainConfig cfg = parse_train_config(path);
  CHECK(cfg.model.d == 16);
  CHECK(cfg.model.K == 4);
  CHECK(cfg.model.beta == 2.5);
  CHECK(cfg.model.ce_mode == CeMode::kMulticlass);
  CHECK(cfg.model.log_weight == true);
  CHECK(cfg.seed == 9);
  CHECK(cfg.batch_size == 100);  // untouched default

  write_file(dir + "/bad_key.toml", "frobnicate = 1\n");
  CHECK_THROWS_AS(parse_train_config(dir + "/bad_key.toml"), ConfigError);
  write_file(dir + "/bad_value.toml", "d = abc\n");
  CHECK_THROWS_AS(parse_train_config(dir + "/bad_value.toml"), ConfigError);
  write_file(dir + "/no_eq.toml", "just words\n");
  CHECK_THROWS_AS(parse_train_config(dir + "/no_eq.toml"), ConfigError);
  CHECK_THROWS_AS(parse_train_config(dir + "/missing.toml"), ConfigError);
}

TEST_CASE("dataset presets carry the published hyperparameters") {
  const std::string base = std::string(TIEDGNN_SOURCE_DIR) + "/configs/";

  TrainConfig tmall = parse_train_config(base + "tmall.toml");
  CHECK(tmall.model.d == 275);
  CHECK(tmall.model.K == 5);
  CHECK(tmall.model.L == 2);
  CHECK(tmall.model.beta == 5.0);
  CHECK(tmall.model.lambda == 0.005);

  TrainConfig lastfm = parse_train_config(base + "lastfm.toml");
  CHECK(lastfm.model.d == 128);
  CHECK(lastfm.model.K == 4);
  CHECK(lastfm.model.L == 2);
  CHECK(lastfm.model.beta == 4.0);
  CHECK(lastfm.model.lambda == 0.02);

  TrainConfig nowplaying = parse_train_config(base + "nowplaying.toml");
  CHECK(nowplaying.model.d == 105);
  CHECK(nowplaying.model.K == 7);
  CHECK(nowplaying.model.L == 2);
  CHECK(nowplaying.model.beta == 5.0);
  CHECK(nowplaying.model.lambda == 0.005);

  for (const TrainConfig* cfg : {&tmall, &lastfm, &nowplaying}) {
    CHECK(cfg->model.epsilon == 3);
    CHECK(cfg->model.max_neighbors == 12);
    CHECK(cfg->batch_size == 100);
    CHECK(cfg->weight_decay == 1e-5);
    CHECK(cfg->base_lr == 0.001);
    CHECK(cfg->lr_decay == 0.1);
    CHECK(cfg->lr_every == 3);
    CHECK(cfg->model.d % cfg->model.K == 0);
  }
}

TEST_CASE("config and report JSON round-trips are lossless") {
  TrainConfig cfg = toy_config();
  cfg.model.num_items = 10;
  cfg.model.log_weight = true;
  cfg.model.ce_mode = CeMode::kMulticlass;
  nlohmann::json j = train_config_to_json(cfg);
  TrainConfig back = train_config_from_json(j);
  CHECK(train_config_to_json(back) == j);
  CHECK_NOTHROW(check_resume_compatible(cfg, back));

  TrainReport r;
  for (int e = 0; e < 3; ++e) {
    EpochStats es;
    es.epoch = e;
    es.train_loss = 1.0 / (e + 1);
    es.valid_p20 = 0.1 * e;
    es.valid_mrr20 = 0.05 * e;
    es.lr = 1e-3;
    es.wall_seconds = 2.5 * e;
    r.epochs.push_back(es);
  }
  r.best_epoch = 2;
  r.best_mrr20 = 0.1;
  r.stale_epochs = 0;
  TrainReport back_r = train_report_from_json(train_report_to_json(r, true));
  CHECK(train_report_to_json(back_r, true) == train_report_to_json(r, true));
  TrainReport no_wall = train_report_from_json(train_report_to_json(r, false));
  CHECK(no_wall.epochs[2].wall_seconds == 0.0);
  CHECK(no_wall.epochs[2].train_loss == r.epochs[2].train_loss);
}

TEST_CASE("training writes report and checkpoint files") {
  Bundle b = toy_bundle();
  GlobalGraph g = toy_graph(b);
  std::ostringstream sink;
  const std::string dir = fresh_dir("files");
  TrainConfig cfg = toy_config();
  cfg.max_epochs = 2;
  TrainOutputs out = train(cfg, b, g, dir, sink);
  CHECK(fs::exists(out.best_checkpoint));
  CHECK(fs::exists(out.last_checkpoint));
  CHECK(fs::exists(dir + "/report.json"));

  std::ifstream rep(dir + "/report.json");
  nlohmann::json j = nlohmann::json::parse(rep);
  CHECK(j.at("epochs").size() == 2);
  CHECK(j.at("epochs")[0].contains("wall_seconds"));

  MetricResult test_metrics =
      evaluate_instances(out.params, g, b.test, 20, mix_seed(cfg.seed, fnv1a64("eval-neighbors")));
  CHECK(test_metrics.num_instances == static_cast<int>(b.test.size()));
}

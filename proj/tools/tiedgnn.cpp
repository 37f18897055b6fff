#include <Eigen/Core>
#include <CLI11.hpp>
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tiedgnn/checkpoint.hpp"
#include "tiedgnn/common.hpp"
#include "tiedgnn/config.hpp"
#include "tiedgnn/dataset.hpp"
#include "tiedgnn/evaluation.hpp"
#include "tiedgnn/graphs.hpp"
#include "tiedgnn/manifest.hpp"
#include "tiedgnn/model.hpp"
#include "tiedgnn/training.hpp"

namespace fs = std::filesystem;
using namespace tiedgnn;

namespace {

std::map<std::string, std::string> bundle_file_hashes(const std::string& dir) {
  std::map<std::string, std::string> hashes;
  for (const char* name : {"vocab.tsv", "train.jsonl", "valid.jsonl", "test.jsonl",
                           "train_sessions.jsonl", "stats.json"}) {
    const std::string path = (fs::path(dir) / name).string();
    hashes[path] = file_hash_hex(path);
  }
  return hashes;
}

void ensure_parent_dir(const std::string& file) {
  const fs::path parent = fs::path(file).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  for (std::string& t : out) {
    const std::size_t b = t.find_first_not_of(" \t");
    const std::size_t e = t.find_last_not_of(" \t");
    t = (b == std::string::npos) ? "" : t.substr(b, e - b + 1);
  }
  return out;
}

struct PreprocessOpts {
  std::string input, format = "tsv", out;
  int min_item_count = 5;
  std::int64_t split_gap_seconds = 0;
  std::string split_policy = "tail_fraction";
  double split_param = 0.1;
  std::uint64_t seed = 42;
};

void run_preprocess(const PreprocessOpts& o) {
  if (o.min_item_count < 1) throw ConfigError("--min-item-count must be >= 1");
  if (o.split_gap_seconds < 0) throw ConfigError("--split-gap-seconds must be >= 0");
  const RawFormat fmt = o.format == "jsonl" ? RawFormat::kJsonl : RawFormat::kTsv;
  const SplitPolicy policy = o.split_policy == "last_k_periods" ? SplitPolicy::kLastKPeriods
                                                                : SplitPolicy::kTailFraction;

  LoadReport loaded = load_sessions(o.input, fmt);
  std::cerr << "read " << loaded.events.size() << " events (" << loaded.malformed
            << " malformed lines skipped)\n";
  SessionCorpus corpus = sessionize(loaded.events, o.split_gap_seconds);
  corpus = filter_corpus(corpus, /*min_len=*/2, o.min_item_count);
  Splits splits = make_splits(corpus, policy, o.split_param, o.seed);
  CorpusStats stats = compute_stats(corpus, splits);

  fs::create_directories(o.out);
  write_bundle(o.out, corpus.vocab, splits, stats);
  std::cerr << "bundle: " << stats.items << " items, " << stats.train_sessions
            << " train sessions, " << stats.train_instances << "/" << stats.valid_instances
            << "/" << stats.test_instances << " train/valid/test instances\n";

  RunManifest m;
  m.command = "preprocess";
  m.config = {{"input", o.input},
              {"format", o.format},
              {"min_item_count", o.min_item_count},
              {"split_gap_seconds", o.split_gap_seconds},
              {"split_policy", o.split_policy},
              {"split_param", o.split_param},
              {"seed", o.seed}};
  m.inputs[o.input] = file_hash_hex(o.input);
  m.artifacts = bundle_file_hashes(o.out);
  m.seed = o.seed;
  write_manifest((fs::path(o.out) / "manifest.json").string(), m);
}

struct BuildGraphOpts {
  std::string bundle, out;
  int epsilon = 3;
  int max_neighbors = 12;
  std::uint64_t seed = 42;
};

void run_build_graph(const BuildGraphOpts& o) {
  if (o.epsilon < 1) throw ConfigError("--epsilon must be >= 1");
  if (o.max_neighbors < 1) throw ConfigError("--max-neighbors must be >= 1");
  Bundle bundle = read_bundle(o.bundle);
  GlobalGraph graph = build_global_graph(bundle.train_sessions, bundle.vocab.size(),
                                         o.epsilon, o.max_neighbors);
  ensure_parent_dir(o.out);
  save_global_graph(o.out, graph);
  std::cerr << "graph: " << graph.num_items << " items, epsilon=" << graph.epsilon
            << ", max_neighbors=" << graph.max_neighbors << "\n";

  RunManifest m;
  m.command = "build-graph";
  m.config = {{"bundle", o.bundle},
              {"epsilon", o.epsilon},
              {"max_neighbors", o.max_neighbors},
              {"seed", o.seed}};
  m.inputs = bundle_file_hashes(o.bundle);
  m.artifacts[o.out] = file_hash_hex(o.out);
  m.seed = o.seed;
  write_manifest(o.out + ".manifest.json", m);
}

struct TrainOpts {
  std::string bundle, graph, config, out, resume_from;
  // Raw override pairs funneled through the config-key parser so flags and
  // file values share one validation path.
  std::vector<std::pair<std::string, std::string>> overrides;
};

void run_train(const TrainOpts& o) {
  Bundle bundle = read_bundle(o.bundle);
  GlobalGraph graph = load_global_graph(o.graph);

  bool max_epochs_set = false, patience_set = false;
  for (const auto& [key, value] : o.overrides) {
    if (key == "max_epochs") max_epochs_set = true;
    if (key == "patience") patience_set = true;
  }
  // File values replace the baseline wholesale; flags then override both.
  auto requested_config = [&](const TrainConfig& base) {
    TrainConfig cfg = o.config.empty() ? base : parse_train_config(o.config);
    for (const auto& [key, value] : o.overrides) apply_config_kv(cfg, key, value);
    return cfg;
  };

  TrainConfig effective;
  TrainOutputs outputs = [&] {
    if (!o.resume_from.empty()) {
      Checkpoint ck = load_checkpoint(o.resume_from);
      TrainConfig requested = requested_config(ck.config);
      check_resume_compatible(ck.config, requested);
      const int me = (max_epochs_set || !o.config.empty()) ? requested.max_epochs : -1;
      const int pa = (patience_set || !o.config.empty()) ? requested.patience : -1;
      effective = ck.config;
      if (me >= 0) effective.max_epochs = me;
      if (pa >= 0) effective.patience = pa;
      return resume(o.resume_from, bundle, graph, o.out, std::cout, me, pa);
    }
    TrainConfig cfg = requested_config(TrainConfig{});
    if (cfg.model.num_items == 0) cfg.model.num_items = bundle.vocab.size();
    effective = cfg;
    return train(cfg, bundle, graph, o.out, std::cout);
  }();

  std::cerr << "best epoch " << outputs.report.best_epoch
            << " (mrr20=" << outputs.report.best_mrr20 << "); checkpoints in " << o.out << "\n";

  RunManifest m;
  m.command = "train";
  m.config = train_config_to_json(effective);
  if (!o.resume_from.empty()) m.config["resume_from"] = o.resume_from;
  m.inputs = bundle_file_hashes(o.bundle);
  m.inputs[o.graph] = file_hash_hex(o.graph);
  if (!o.config.empty()) m.inputs[o.config] = file_hash_hex(o.config);
  if (!o.resume_from.empty()) m.inputs[o.resume_from] = file_hash_hex(o.resume_from);
  if (fs::exists(outputs.best_checkpoint)) {
    m.artifacts[outputs.best_checkpoint] = file_hash_hex(outputs.best_checkpoint);
  }
  m.artifacts[outputs.last_checkpoint] = file_hash_hex(outputs.last_checkpoint);
  const std::string report_path = (fs::path(o.out) / "report.json").string();
  m.artifacts[report_path] = file_hash_hex(report_path);
  m.seed = effective.seed;
  write_manifest((fs::path(o.out) / "manifest.json").string(), m);
}

struct EvaluateOpts {
  std::string checkpoint, bundle, graph, out = "metrics.json";
  int k = 20;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void run_evaluate(const EvaluateOpts& o) {
  if (o.k < 1) throw ConfigError("--k must be >= 1");
  Checkpoint ck = load_checkpoint(o.checkpoint);
  Bundle bundle = read_bundle(o.bundle);
  GlobalGraph graph = load_global_graph(o.graph);

  if (graph.num_items != ck.config.model.num_items ||
      bundle.vocab.size() != ck.config.model.num_items) {
    throw DataError("vocabulary mismatch: checkpoint expects " +
                    std::to_string(ck.config.model.num_items) + " items, graph has " +
                    std::to_string(graph.num_items) + ", bundle has " +
                    std::to_string(bundle.vocab.size()));
  }
  if (bundle_fingerprint(bundle) != ck.bundle_hash) {
    std::cerr << "warning: bundle differs from the one this checkpoint trained on\n";
  }
  if (graph_fingerprint(graph) != ck.graph_hash) {
    std::cerr << "warning: graph differs from the one this checkpoint trained on\n";
  }

  const std::uint64_t nbr_seed =
      o.seed_set ? o.seed : mix_seed(ck.config.seed, fnv1a64("eval-neighbors"));
  MetricResult res = evaluate_instances(ck.params, graph, bundle.test, o.k, nbr_seed);
  std::cerr << "p@" << o.k << "=" << res.p_at_k << " mrr@" << o.k << "=" << res.mrr_at_k
            << " n=" << res.num_instances << "\n";

  nlohmann::json metrics{{"k", res.k},
                         {"p_at_k", res.p_at_k},
                         {"mrr_at_k", res.mrr_at_k},
                         {"n", res.num_instances},
                         {"checkpoint_hash", file_hash_hex(o.checkpoint)}};
  ensure_parent_dir(o.out);
  std::ofstream outf(o.out);
  if (!outf) throw IoError("cannot write metrics: " + o.out);
  outf << metrics.dump(2) << "\n";
  outf.close();

  RunManifest m;
  m.command = "evaluate";
  m.config = {{"checkpoint", o.checkpoint},
              {"bundle", o.bundle},
              {"graph", o.graph},
              {"k", o.k}};
  m.inputs = bundle_file_hashes(o.bundle);
  m.inputs[o.graph] = file_hash_hex(o.graph);
  m.inputs[o.checkpoint] = file_hash_hex(o.checkpoint);
  m.artifacts[o.out] = file_hash_hex(o.out);
  m.seed = nbr_seed;
  write_manifest(o.out + ".manifest.json", m);
}

struct PredictOpts {
  std::string checkpoint, bundle, graph, session, out;
  int topk = 20;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void run_predict(const PredictOpts& o) {
  if (o.topk < 1) throw ConfigError("--topk must be >= 1");
  Checkpoint ck = load_checkpoint(o.checkpoint);
  Bundle bundle = read_bundle(o.bundle);
  GlobalGraph graph = load_global_graph(o.graph);
  if (graph.num_items != ck.config.model.num_items ||
      bundle.vocab.size() != ck.config.model.num_items) {
    throw DataError("vocabulary mismatch between checkpoint, graph, and bundle");
  }

  std::vector<int> prefix;
  for (const std::string& raw : split_csv(o.session)) {
    if (raw.empty()) continue;
    const int idx = bundle.vocab.index_of(raw);
    if (idx < 0) throw ConfigError("unknown item id '" + raw + "'");
    prefix.push_back(idx);
  }
  if (prefix.empty()) throw ConfigError("--session must list at least one item id");

  const std::uint64_t nbr_seed =
      o.seed_set ? o.seed : mix_seed(ck.config.seed, fnv1a64("eval-neighbors"));
  Tape tape;
  BatchContext ctx(tape, ck.params, graph, nbr_seed);
  ForwardOutput fw = ctx.forward(prefix, true);
  const Matrix& yhat = fw.yhat.value();

  const int n = static_cast<int>(yhat.rows());
  const int k = std::min(o.topk, n);
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return yhat(a, 0) > yhat(b, 0); });

  nlohmann::json items = nlohmann::json::array();
  for (int r = 0; r < k; ++r) {
    const int item = idx[static_cast<std::size_t>(r)];
    const std::string& raw = bundle.vocab.reverse[static_cast<std::size_t>(item)];
    std::cout << (r + 1) << "\t" << raw << "\t" << yhat(item, 0) << "\n";
    items.push_back({{"rank", r + 1}, {"item", raw}, {"score", yhat(item, 0)}});
  }

  if (!o.out.empty()) {
    nlohmann::json j{{"session", o.session}, {"topk", k}, {"items", std::move(items)}};
    ensure_parent_dir(o.out);
    std::ofstream outf(o.out);
    if (!outf) throw IoError("cannot write predictions: " + o.out);
    outf << j.dump(2) << "\n";
    outf.close();

    RunManifest m;
    m.command = "predict";
    m.config = {{"checkpoint", o.checkpoint},
                {"bundle", o.bundle},
                {"graph", o.graph},
                {"session", o.session},
                {"topk", o.topk}};
    m.inputs = bundle_file_hashes(o.bundle);
    m.inputs[o.graph] = file_hash_hex(o.graph);
    m.inputs[o.checkpoint] = file_hash_hex(o.checkpoint);
    m.artifacts[o.out] = file_hash_hex(o.out);
    m.seed = nbr_seed;
    write_manifest(o.out + ".manifest.json", m);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tiedgnn: session-based recommendation pipeline"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "cap the worker pool")->capture_default_str();
  auto apply_threads = [&threads] { Eigen::setNbThreads(std::max(1, threads)); };

  PreprocessOpts pre;
  CLI::App* cpre = app.add_subcommand("preprocess", "raw event log -> bundle directory");
  cpre->add_option("--input", pre.input, "raw log file")->required();
  cpre->add_option("--format", pre.format, "tsv or jsonl")
      ->check(CLI::IsMember({"tsv", "jsonl"}))
      ->capture_default_str();
  cpre->add_option("--out", pre.out, "bundle directory")->required();
  cpre->add_option("--min-item-count", pre.min_item_count)->capture_default_str();
  cpre->add_option("--split-gap-seconds", pre.split_gap_seconds,
                   "start a new session after this idle gap (0 = off)")
      ->capture_default_str();
  cpre->add_option("--split-policy", pre.split_policy, "tail_fraction or last_k_periods")
      ->check(CLI::IsMember({"tail_fraction", "last_k_periods"}))
      ->capture_default_str();
  cpre->add_option("--split-param", pre.split_param,
                   "test fraction, or number of periods for last_k_periods")
      ->capture_default_str();
  cpre->add_option("--seed", pre.seed)->capture_default_str();
  cpre->callback([&] {
    apply_threads();
    run_preprocess(pre);
  });

  BuildGraphOpts bg;
  CLI::App* cbg = app.add_subcommand("build-graph", "bundle -> global transition graph");
  cbg->add_option("--bundle", bg.bundle)->required();
  cbg->add_option("--epsilon", bg.epsilon, "co-occurrence radius")->capture_default_str();
  cbg->add_option("--max-neighbors", bg.max_neighbors)->capture_default_str();
  cbg->add_option("--out", bg.out, "graph file")->required();
  cbg->add_option("--seed", bg.seed)->capture_default_str();
  cbg->callback([&] {
    apply_threads();
    run_build_graph(bg);
  });

  TrainOpts tr;
  std::vector<std::string> sets;
  CLI::App* ctr = app.add_subcommand("train", "bundle + graph -> checkpoints + report");
  ctr->add_option("--bundle", tr.bundle)->required();
  ctr->add_option("--graph", tr.graph)->required();
  ctr->add_option("--config", tr.config, "TOML-style key = value file");
  ctr->add_option("--out", tr.out, "output directory")->required();
  ctr->add_option("--resume", tr.resume_from, "continue from a checkpoint file");
  ctr->add_option("--set", sets, "override a config key, e.g. --set max_epochs=5");
  // Common keys surfaced as first-class flags; all funnel into the same parser.
  for (const char* key : {"d", "K", "L", "epsilon", "max_neighbors", "beta", "lambda",
                          "dropout", "batch_size", "base_lr", "max_epochs", "patience",
                          "seed"}) {
    std::string flag = std::string("--") + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    ctr->add_option_function<std::string>(
        flag,
        [&tr, key = std::string(key)](const std::string& v) {
          tr.overrides.emplace_back(key, v);
        },
        std::string("config key ") + key);
  }
  ctr->callback([&] {
    apply_threads();
    for (const std::string& kv : sets) {
      const std::size_t eq = kv.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("--set expects key=value, got '" + kv + "'");
      }
      tr.overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    run_train(tr);
  });

  EvaluateOpts ev;
  CLI::App* cev = app.add_subcommand("evaluate", "checkpoint + test split -> metrics.json");
  cev->add_option("--checkpoint", ev.checkpoint)->required();
  cev->add_option("--bundle", ev.bundle)->required();
  cev->add_option("--graph", ev.graph)->required();
  cev->add_option("--k", ev.k)->capture_default_str();
  cev->add_option("--out", ev.out)->capture_default_str();
  CLI::Option* evseed = cev->add_option("--seed", ev.seed, "neighbor tie-break seed");
  cev->callback([&] {
    apply_threads();
    ev.seed_set = evseed->count() > 0;
    run_evaluate(ev);
  });

  PredictOpts pd;
  CLI::App* cpd = app.add_subcommand("predict", "rank items for one session");
  cpd->add_option("--checkpoint", pd.checkpoint)->required();
  cpd->add_option("--bundle", pd.bundle, "bundle directory (item vocabulary)")->required();
  cpd->add_option("--graph", pd.graph)->required();
  cpd->add_option("--session", pd.session, "comma-separated raw item ids")->required();
  cpd->add_option("--topk", pd.topk)->capture_default_str();
  cpd->add_option("--out", pd.out, "also write predictions (and a manifest) here");
  CLI::Option* pdseed = cpd->add_option("--seed", pd.seed, "neighbor tie-break seed");
  cpd->callback([&] {
    apply_threads();
    pd.seed_set = pdseed->count() > 0;
    run_predict(pd);
  });

  try {
    app.parse(argc, argv);
    return 0;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}

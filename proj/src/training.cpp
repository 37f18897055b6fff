#include "tiedgnn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <utility>

#include "tiedgnn/checkpoint.hpp"
#include "tiedgnn/common.hpp"
#include "tiedgnn/config.hpp"
#include "tiedgnn/evaluation.hpp"

namespace tiedgnn {

void TrainConfig::validate() const {
  model.validate();
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (base_lr < 0.0) throw ConfigError("train: base_lr must be >= 0");
  if (lr_decay < 0.0) throw ConfigError("train: lr_decay must be >= 0");
  if (lr_every < 1) throw ConfigError("train: lr_every must be >= 1");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
}

void check_resume_compatible(const TrainConfig& saved, const TrainConfig& requested) {
  auto fail = [](const char* field) {
    throw ConfigError(std::string("resume: '") + field +
                      "' differs from the checkpoint; only max_epochs and patience may change");
  };
  const ModelConfig& a = saved.model;
  const ModelConfig& b = requested.model;
  if (b.num_items != 0 && a.num_items != b.num_items) fail("num_items");
  if (a.d != b.d) fail("d");
  if (a.K != b.K) fail("K");
  if (a.d_p != b.d_p) fail("d_p");
  if (a.L != b.L) fail("L");
  if (a.L_max != b.L_max) fail("L_max");
  if (a.epsilon != b.epsilon) fail("epsilon");
  if (a.max_neighbors != b.max_neighbors) fail("max_neighbors");
  if (a.beta != b.beta) fail("beta");
  if (a.lambda != b.lambda) fail("lambda");
  if (a.dropout != b.dropout) fail("dropout");
  if (a.leaky_slope != b.leaky_slope) fail("leaky_slope");
  if (a.log_weight != b.log_weight) fail("log_weight");
  if (a.ce_mode != b.ce_mode) fail("ce_mode");
  if (saved.batch_size != requested.batch_size) fail("batch_size");
  if (saved.weight_decay != requested.weight_decay) fail("weight_decay");
  if (saved.base_lr != requested.base_lr) fail("base_lr");
  if (saved.lr_decay != requested.lr_decay) fail("lr_decay");
  if (saved.lr_every != requested.lr_every) fail("lr_every");
  if (saved.seed != requested.seed) fail("seed");
}

std::string bundle_fingerprint(const Bundle& bundle) {
  std::uint64_t h = fnv1a64("bundle-v1");
  h = mix_seed(h, static_cast<std::uint64_t>(bundle.vocab.size()));
  for (const std::string& raw : bundle.vocab.reverse) h = mix_seed(h, fnv1a64(raw));
  h = mix_seed(h, hash_sessions(bundle.train_sessions));
  auto fold = [&h](const std::vector<LabeledInstance>& split) {
    h = mix_seed(h, static_cast<std::uint64_t>(split.size()));
    for (const LabeledInstance& ins : split) {
      std::uint64_t ih = fnv1a64("instance");
      for (int item : ins.prefix) ih = mix_seed(ih, static_cast<std::uint64_t>(item));
      ih = mix_seed(ih, static_cast<std::uint64_t>(ins.label));
      h = mix_seed(h, ih);
    }
  };
  fold(bundle.train);
  fold(bundle.valid);
  fold(bundle.test);
  return hex64(h);
}

std::string graph_fingerprint(const GlobalGraph& graph) {
  std::uint64_t h = fnv1a64("graph-v1");
  h = mix_seed(h, static_cast<std::uint64_t>(graph.epsilon));
  h = mix_seed(h, static_cast<std::uint64_t>(graph.num_items));
  h = mix_seed(h, static_cast<std::uint64_t>(graph.max_neighbors));
  h = mix_seed(h, graph.corpus_hash);
  return hex64(h);
}

namespace {

struct LoopState {
  TrainConfig cfg;
  ModelParams params;
  AdamState adam;
  TrainReport report;
  int start_epoch = 0;
};

std::string progress_line(const EpochStats& e) {
  std::ostringstream os;
  os << "epoch=" << e.epoch << std::fixed << std::setprecision(6) << " loss=" << e.train_loss
     << std::setprecision(4) << " p20=" << e.valid_p20 << " mrr20=" << e.valid_mrr20;
  os.unsetf(std::ios::floatfield);
  os << std::setprecision(6) << " lr=" << e.lr;
  return os.str();
}

std::string grad_summary(const std::vector<Parameter*>& plist) {
  double worst = -1.0;
  std::string worst_name = "none";
  std::string nonfinite;
  for (const Parameter* p : plist) {
    const double g = p->grad.norm();
    if (!std::isfinite(g)) {
      if (!nonfinite.empty()) nonfinite += ",";
      nonfinite += p->name;
    } else if (g > worst) {
      worst = g;
      worst_name = p->name;
    }
  }
  std::ostringstream os;
  os << "max grad norm " << worst << " (" << worst_name << ")";
  if (!nonfinite.empty()) os << "; non-finite grads in [" << nonfinite << "]";
  return os.str();
}

TrainOutputs run_loop(LoopState st, const Bundle& bundle, const GlobalGraph& graph,
                      const std::string& out_dir, std::ostream& progress,
                      const std::string& bundle_hash, const std::string& graph_hash) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string best_path = (fs::path(out_dir) / "checkpoint.best.bin").string();
  const std::string last_path = (fs::path(out_dir) / "checkpoint.last.bin").string();
  const std::string report_path = (fs::path(out_dir) / "report.json").string();

  const TrainConfig& cfg = st.cfg;
  const std::size_t n = bundle.train.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<Parameter*> plist = st.params.all();

  for (int epoch = st.start_epoch; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch, cfg.base_lr, cfg.lr_decay, cfg.lr_every);
    const std::uint64_t e64 = static_cast<std::uint64_t>(epoch);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(cfg.seed, fnv1a64("shuffle"), e64));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0, b = 0; start < n; start += bs, ++b) {
      const std::size_t stop = std::min(n, start + bs);
      std::vector<LabeledInstance> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(bundle.train[order[i]]);

      Tape tape;
      BatchContext ctx(tape, st.params, graph, mix_seed(cfg.seed, fnv1a64("neighbors"), e64, b));
      BatchLossParts parts =
          batch_training_loss(ctx, batch, true, mix_seed(cfg.seed, fnv1a64("step"), e64, b));
      const double batch_loss = parts.total.scalar();

      for (Parameter* p : plist) p->zero_grad();
      tape.backward(parts.total);

      if (!std::isfinite(batch_loss)) {
        std::ostringstream os;
        os << "non-finite training loss at epoch " << epoch << " batch " << b << " (lr=" << lr
           << "); batch instances:";
        for (std::size_t i = start; i < stop; ++i) os << ' ' << order[i];
        os << "; " << grad_summary(plist);
        throw DataError(os.str());
      }
      if (lr > 0.0) {
        AdamConfig acfg;
        acfg.weight_decay = cfg.weight_decay;
        adam_step(plist, st.adam, lr, acfg);
      }
      loss_sum += batch_loss * static_cast<double>(batch.size());
      seen += batch.size();
    }

    const MetricResult val = evaluate_instances(st.params, graph, bundle.valid, 20,
                                                mix_seed(cfg.seed, fnv1a64("eval-neighbors")));

    EpochStats es;
    es.epoch = epoch;
    es.train_loss = loss_sum / static_cast<double>(seen);
    es.valid_p20 = val.p_at_k;
    es.valid_mrr20 = val.mrr_at_k;
    es.lr = lr;
    es.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.report.epochs.push_back(es);

    if (es.valid_mrr20 > st.report.best_mrr20) {
      st.report.best_mrr20 = es.valid_mrr20;
      st.report.best_epoch = epoch;
      st.report.stale_epochs = 0;
      save_checkpoint(best_path, st.params, st.adam, cfg, st.report, bundle_hash, graph_hash);
    } else {
      st.report.stale_epochs += 1;
    }
    save_checkpoint(last_path, st.params, st.adam, cfg, st.report, bundle_hash, graph_hash);
    write_train_report(report_path, st.report);
    progress << progress_line(es) << "\n" << std::flush;

    if (st.report.stale_epochs >= cfg.patience) break;
  }

  if (st.start_epoch >= cfg.max_epochs) {
    // Nothing left to run; still materialize the state in out_dir.
    save_checkpoint(last_path, st.params, st.adam, cfg, st.report, bundle_hash, graph_hash);
    write_train_report(report_path, st.report);
  }

  return TrainOutputs{std::move(st.params), std::move(st.adam), std::move(st.report),
                      best_path, last_path};
}

}  // namespace

TrainOutputs train(const TrainConfig& cfg, const Bundle& bundle, const GlobalGraph& graph,
                   const std::string& out_dir, std::ostream& progress) {
  TrainConfig eff = cfg;
  if (eff.model.num_items == 0) eff.model.num_items = bundle.vocab.size();
  eff.validate();
  if (bundle.train.empty()) throw DataError("train: training split is empty");
  if (bundle.valid.empty()) throw DataError("train: validation split is empty");
  if (graph.num_items != eff.model.num_items) {
    throw DataError("train: vocabulary mismatch: graph has " + std::to_string(graph.num_items) +
                    " items, bundle has " + std::to_string(eff.model.num_items));
  }
  if (graph.corpus_hash != hash_sessions(bundle.train_sessions)) {
    throw DataError("train: graph was not built from this bundle (session hash differs)");
  }
  if (graph.epsilon != eff.model.epsilon) {
    throw ConfigError("train: epsilon mismatch: graph built with " +
                      std::to_string(graph.epsilon) + ", config says " +
                      std::to_string(eff.model.epsilon));
  }

  LoopState st;
  st.cfg = eff;
  st.params = ModelParams::init(eff.model, mix_seed(eff.seed, fnv1a64("init")));
  st.start_epoch = 0;
  return run_loop(std::move(st), bundle, graph, out_dir, progress, bundle_fingerprint(bundle),
                  graph_fingerprint(graph));
}

TrainOutputs resume(const std::string& checkpoint_path, const Bundle& bundle,
                    const GlobalGraph& graph, const std::string& out_dir,
                    std::ostream& progress, int max_epochs_override, int patience_override) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  TrainConfig eff = ck.config;
  if (max_epochs_override >= 0) eff.max_epochs = max_epochs_override;
  if (patience_override >= 0) eff.patience = patience_override;
  eff.validate();

  const std::string bh = bundle_fingerprint(bundle);
  const std::string gh = graph_fingerprint(graph);
  if (bh != ck.bundle_hash) {
    throw DataError("resume: bundle does not match the checkpoint (fingerprint differs)");
  }
  if (gh != ck.graph_hash) {
    throw DataError("resume: graph does not match the checkpoint (fingerprint differs)");
  }

  LoopState st;
  st.cfg = eff;
  st.params = std::move(ck.params);
  st.adam = std::move(ck.adam);
  st.report = std::move(ck.report);
  st.start_epoch = static_cast<int>(st.report.epochs.size());
  return run_loop(std::move(st), bundle, graph, out_dir, progress, bh, gh);
}

}  // namespace tiedgnn

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tiedgnn/dataset.hpp"
#include "tiedgnn/graphs.hpp"
#include "tiedgnn/model.hpp"
#include "tiedgnn/optim.hpp"

namespace tiedgnn {

struct TrainConfig {
  ModelConfig model;
  int batch_size = 100;
  double weight_decay = 1e-5;
  double base_lr = 1e-3;
  double lr_decay = 0.1;
  int lr_every = 3;
  int max_epochs = 10;
  int patience = 3;
  std::uint64_t seed = 42;

  void validate() const;
};

// Throws ConfigError when `requested` differs from `saved` anywhere except
// max_epochs / patience, the only settings a resumed run may change.
void check_resume_compatible(const TrainConfig& saved, const TrainConfig& requested);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_p20 = 0.0;
  double valid_mrr20 = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;  // contiguous from epoch 0
  int best_epoch = -1;
  double best_mrr20 = -1.0;
  int stale_epochs = 0;
};

struct TrainOutputs {
  ModelParams params;
  AdamState adam;
  TrainReport report;
  std::string best_checkpoint;
  std::string last_checkpoint;
};

// Content fingerprints tying checkpoints to the artifacts they trained on.
std::string bundle_fingerprint(const Bundle& bundle);
std::string graph_fingerprint(const GlobalGraph& graph);

// Full training run: seeded shuffled mini-batches, Adam with the step-decay
// schedule, per-epoch validation (P@20 / MRR@20), best-MRR checkpointing, and
// early stopping after `patience` epochs without improvement. Writes
// checkpoint.best.bin / checkpoint.last.bin / report.json under out_dir and
// one progress line per epoch to `progress`.
TrainOutputs train(const TrainConfig& cfg, const Bundle& bundle, const GlobalGraph& graph,
                   const std::string& out_dir, std::ostream& progress);

// Continues a run from checkpoint.last-style state; the checkpoint's config
// governs everything except max_epochs / patience, which the overrides may
// extend (negative keeps the stored value). Identical artifacts plus fixed
// seeds reproduce the uninterrupted run bit for bit.
TrainOutputs resume(const std::string& checkpoint_path, const Bundle& bundle,
                    const GlobalGraph& graph, const std::string& out_dir,
                    std::ostream& progress, int max_epochs_override = -1,
                    int patience_override = -1);

}  // namespace tiedgnn

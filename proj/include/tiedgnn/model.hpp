#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "tiedgnn/dataset.hpp"
#include "tiedgnn/graphs.hpp"
#include "tiedgnn/numerics.hpp"

namespace tiedgnn {

enum class CeMode { kPaperBinary, kMulticlass };

struct ModelConfig {
  int num_items = 0;       // vocabulary size
  int d = 64;              // item embedding width
  int K = 4;               // latent factors; d must divide evenly
  int d_p = 0;             // transition-position width; 0 means d/K
  int L = 2;               // propagation layers over the global graph
  int L_max = 50;          // reversed-position rows; >= longest session
  int epsilon = 3;         // neighborhood radius the graph was built with
  int max_neighbors = 12;  // sampled neighbors per item and kind
  double beta = 1.0;       // independence regularizer weight
  double lambda = 0.005;   // contrastive loss weight
  double dropout = 0.2;    // on session embeddings before scoring
  double leaky_slope = 0.2;
  bool log_weight = false;  // attend over log1p(count) instead of the raw count
  CeMode ce_mode = CeMode::kPaperBinary;

  int dk() const { return d / K; }
  int pos_dim() const { return d_p > 0 ? d_p : d / K; }
  void validate() const;
};

// Every learnable array, keyed by a stable name (the checkpoint key). Order
// of registration is fixed by init() so optimizer state and serialized blobs
// line up across runs.
class ModelParams {
 public:
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

  ModelConfig cfg;

  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool has(const std::string& name) const;
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t count() const { return order_.size(); }

  Parameter& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);

 private:
  std::vector<std::unique_ptr<Parameter>> order_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Per-tape leaf handles for one forward pass. `local_edge_table` stacks the
// four [1, d] local edge weights in EdgeKind order so rows can be gathered by
// static_cast<int>(kind).
struct ParamLeaves {
  Tensor item_table;
  std::vector<Tensor> chunk_W, chunk_b;
  std::array<Tensor, 3> glob_W, glob_q;  // indexed kIn / kOut / kInOut order
  std::vector<Tensor> update_W;
  Tensor res_Wp, res_Wq, res_Wf;
  Tensor local_edge_table;  // [4, d]
  Tensor P_in, P_out, p_io;
  Tensor P_g, P_l;
  std::vector<Tensor> inter_W2, inter_b1, inter_W3, inter_W4, inter_q, inter_b2;
  Tensor intra_W5, intra_b3, intra_W6, intra_W7, intra_q, intra_b4;
};

ParamLeaves make_leaves(Tape& tape, ModelParams& params);

// Chunked item embeddings: c_k = l2_normalize(sigmoid(W_k^T v) + b_k).
// The rows variant maps [n, d] stacked items to K matrices [n, d/K].
std::vector<Tensor> chunk_embed(const Tensor& v, const ParamLeaves& lv,
                                const ModelConfig& cfg);
std::vector<Tensor> chunk_embed_rows(const Tensor& rows, const ParamLeaves& lv,
                                     const ModelConfig& cfg);

// Per-factor session preference: mean over session positions of the k-th
// slice of the local embeddings (H is [len, d], one row per position).
std::vector<Tensor> session_factor_preference(const Tensor& H, int K);

// One typed group of sampled global neighbors feeding an item's update.
// `chunks` stacks the neighbors' full-width embeddings [m, d]; `mu` holds the
// most-frequent distances (ignored for InOut, which uses its own position).
struct NeighborBlock {
  EdgeKind kind = EdgeKind::kOut;
  Tensor chunks;
  std::vector<double> weights;
  std::vector<int> mu;
};

struct PropagateResult {
  Tensor h;                       // [d/K, 1]
  std::vector<Tensor> attention;  // per non-empty kind, sums to 1
};

// Attention over typed neighbors for factor k: logits from
// [s_k * c_jk || w_ij || position], softmax within each kind, kinds summed.
// Empty kinds contribute zero; no neighbors at all yields the zero vector.
PropagateResult propagate_neighbors(Tape& t, const Tensor& s_k, int k,
                                    const std::vector<NeighborBlock>& blocks,
                                    const ParamLeaves& lv, const ModelConfig& cfg);

// Per-factor node update relu(W_k1^T [c_k || hN_k]), factors concatenated.
Tensor update_node(const std::vector<Tensor>& chunks,
                   const std::vector<Tensor>& neighbor_chunks,
                   const ParamLeaves& lv);

// Gated residual: alpha = W_f sigmoid(W_p h + W_q h_prev), output
// alpha * h + (1 - alpha) * h_prev. The gate is a free scalar (not squashed).
Tensor residual_fuse(const Tensor& h, const Tensor& h_prev, const ParamLeaves& lv);

// Mean over items of the summed pairwise cosines between their K unit-norm
// chunks (each chunk_rows[k] is [n, d/K] with unit rows).
Tensor factor_independence_loss(Tape& t, const std::vector<Tensor>& chunk_rows);

struct LocalResult {
  Tensor H;                       // [n, d], one row per graph node
  std::vector<Tensor> attention;  // per node over its neighbors, sums to 1
};

// Session-graph attention: phi_ij = leaky_relu(W_kind (h_i * h_j)), softmax
// over each node's neighbors (self loop included), output the weighted sum.
LocalResult local_item_embed(const SessionGraph& g, const Tensor& base,
                             const ParamLeaves& lv, const ModelConfig& cfg);

enum class EmbedMode { kInter, kIntra };

// Position-aware soft attention over per-position embeddings H [len, d].
// Inter mode runs per factor slice with the factor parameters and
// concatenates; intra mode runs once at full width. Attention weights are
// used unnormalized.
Tensor session_embed(const Tensor& H, EmbedMode mode, const ParamLeaves& lv,
                     const ModelConfig& cfg);

// Row shuffle followed by an independent column shuffle; identity
// permutations are redrawn on any axis that has an alternative. B == 1 has
// no usable negative and errors.
Tensor corrupt_batch(const Tensor& S, std::uint64_t seed);

// Mean over rows of -log sigmoid(s_g . s_l) - log sigmoid(1 - s~_g . s_l).
Tensor contrastive_loss(const Tensor& sg, const Tensor& sl, const Tensor& sg_neg);

// Softmax over all items of (s_g + s_l) . v_i using raw item_table rows.
Tensor predict_scores(const Tensor& s_g, const Tensor& s_l, const Tensor& item_table);

// Cross-entropy on clamped probabilities: the binary form sums the full
// one-vs-rest objective over items; multiclass is plain -log yhat[target].
Tensor prediction_loss(const Tensor& yhat, int target, CeMode mode);

// Inverted dropout with a fixed Bernoulli mask derived from the seed.
Tensor apply_dropout(const Tensor& x, double rate, std::uint64_t seed);

struct ForwardOutput {
  Tensor yhat;  // [N, 1]; only when requested
  Tensor l_cor;
  Tensor s_g, s_l;
};

// One tape's worth of forward passes sharing neighbor samples. The neighbor
// seed arbitrates weight ties at the sampling cutoff and is typically fixed
// per batch.
class BatchContext {
 public:
  BatchContext(Tape& tape, ModelParams& params, const GlobalGraph& graph,
               std::uint64_t neighbor_seed);

  ForwardOutput forward(const std::vector<int>& prefix, bool with_scores = true);

  Tape& tape() { return *tape_; }
  const ParamLeaves& leaves() const { return leaves_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  const NeighborSample& sampled(int item);

  Tape* tape_;
  const GlobalGraph* graph_;
  ModelConfig cfg_;
  std::uint64_t nbr_seed_;
  ParamLeaves leaves_;
  std::unordered_map<int, NeighborSample> sample_memo_;
};

struct BatchLossParts {
  Tensor total;                            // scalar, on the context's tape
  double ce = 0.0, cor = 0.0, con = 0.0;  // detached components for logging
};

// Mean over the batch of (cross-entropy + beta * independence), plus
// lambda * contrastive over the stacked session embeddings. Dropout applies
// only when train is set; a single-instance batch skips the contrastive term.
BatchLossParts batch_training_loss(BatchContext& ctx,
                                   const std::vector<LabeledInstance>& batch,
                                   bool train, std::uint64_t step_seed);

}  // namespace tiedgnn

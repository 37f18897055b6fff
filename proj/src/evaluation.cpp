#include "tiedgnn/evaluation.hpp"

#include <cmath>

#include "tiedgnn/common.hpp"

namespace tiedgnn {

int rank_of_target(const Matrix& scores, int target) {
  if (scores.cols() != 1) throw DataError("rank_of_target: expected a score column");
  if (target < 0 || target >= scores.rows()) {
    throw DataError("rank_of_target: target out of range");
  }
  if (!scores.allFinite()) throw DataError("rank_of_target: non-finite scores");
  const double st = scores(target, 0);
  int rank = 1;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    if (i != target && scores(i, 0) >= st) ++rank;
  }
  return rank;
}

MetricResult metrics_at_k(const std::vector<int>& ranks, int k) {
  if (ranks.empty()) throw DataError("metrics_at_k: no ranks");
  if (k < 1) throw ConfigError("metrics_at_k: k must be >= 1");
  MetricResult res;
  res.k = k;
  res.num_instances = static_cast<int>(ranks.size());
  double hits = 0.0, rr = 0.0;
  for (int r : ranks) {
    if (r < 1) throw DataError("metrics_at_k: ranks are 1-based");
    if (r <= k) {
      hits += 1.0;
      rr += 1.0 / double(r);
    }
  }
  res.p_at_k = hits / double(ranks.size());
  res.mrr_at_k = rr / double(ranks.size());
  return res;
}

MetricResult evaluate_instances(ModelParams& params, const GlobalGraph& graph,
                                const std::vector<LabeledInstance>& instances, int k,
                                std::uint64_t neighbor_seed) {
  if (instances.empty()) throw DataError("evaluate: no instances");
  constexpr std::size_t kTapeBatch = 32;  // bound tape growth during inference
  std::vector<int> ranks;
  ranks.reserve(instances.size());
  std::size_t i = 0;
  while (i < instances.size()) {
    Tape tape;
    BatchContext ctx(tape, params, graph, neighbor_seed);
    for (std::size_t j = 0; j < kTapeBatch && i < instances.size(); ++j, ++i) {
      ForwardOutput out = ctx.forward(instances[i].prefix, true);
      ranks.push_back(rank_of_target(out.yhat.value(), instances[i].label));
    }
  }
  return metrics_at_k(ranks, k);
}

}  // namespace tiedgnn

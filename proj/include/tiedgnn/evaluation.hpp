#pragma once

#include <cstdint>
#include <vector>

#include "tiedgnn/dataset.hpp"
#include "tiedgnn/graphs.hpp"
#include "tiedgnn/model.hpp"

namespace tiedgnn {

struct MetricResult {
  double p_at_k = 0.0;
  double mrr_at_k = 0.0;
  int k = 0;
  int num_instances = 0;
};

// 1-based rank of the target under conservative tie handling: every other
// item scoring >= the target pushes it down one place.
int rank_of_target(const Matrix& scores, int target);

MetricResult metrics_at_k(const std::vector<int>& ranks, int k = 20);

// Rank every instance's label in inference mode (no dropout, fixed neighbor
// sampling) and fold the ranks into top-k metrics. Deterministic.
MetricResult evaluate_instances(ModelParams& params, const GlobalGraph& graph,
                                const std::vector<LabeledInstance>& instances, int k,
                                std::uint64_t neighbor_seed);

}  // namespace tiedgnn

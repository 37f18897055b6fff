#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tiedgnn/numerics.hpp"

namespace tiedgnn {

// Per-parameter Adam moments, keyed by parameter name.
struct AdamState {
  struct Moments {
    Matrix m;  // first moment
    Matrix v;  // second moment
  };
  std::map<std::string, Moments> moments;
  std::int64_t t = 0;  // completed steps
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

// One Adam update over `params` using their accumulated .grad fields.
// The L2 penalty is folded into the gradient (g += weight_decay * value)
// before the moment updates. Does not clear gradients.
void adam_step(std::vector<Parameter*>& params, AdamState& state, double lr,
               const AdamConfig& cfg = {});

// Step-decay schedule: base_lr * decay^floor(epoch / every).
double lr_at(int epoch, double base_lr = 1e-3, double decay = 0.1, int every = 3);

// Deterministic Gaussian fill; the same (shape, seed) always yields the same
// values regardless of call order elsewhere.
Matrix init_gaussian(Eigen::Index rows, Eigen::Index cols, double mean, double std,
                     std::uint64_t seed);

}  // namespace tiedgnn

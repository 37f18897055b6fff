#include "tiedgnn/optim.hpp"

#include <cmath>
#include <random>

namespace tiedgnn {

void adam_step(std::vector<Parameter*>& params, AdamState& state, double lr,
               const AdamConfig& cfg) {
  if (lr <= 0.0) throw ConfigError("adam_step: learning rate must be positive");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
  for (Parameter* p : params) {
    auto& mom = state.moments[p->name];
    if (mom.m.size() == 0) {
      mom.m = Matrix::Zero(p->value.rows(), p->value.cols());
      mom.v = Matrix::Zero(p->value.rows(), p->value.cols());
    }
    if (mom.m.rows() != p->value.rows() || mom.m.cols() != p->value.cols()) {
      throw ConfigError("adam_step: moment shape mismatch for parameter " + p->name);
    }
    Matrix g = p->grad + cfg.weight_decay * p->value;
    mom.m = cfg.beta1 * mom.m + (1.0 - cfg.beta1) * g;
    mom.v = cfg.beta2 * mom.v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    Matrix mhat = mom.m / bc1;
    Matrix vhat = mom.v / bc2;
    p->value -= lr * (mhat.array() / (vhat.array().sqrt() + cfg.eps)).matrix();
  }
}

double lr_at(int epoch, double base_lr, double decay, int every) {
  if (epoch < 0) throw ConfigError("lr_at: epoch must be non-negative");
  return base_lr * std::pow(decay, double(epoch / every));
}

Matrix init_gaussian(Eigen::Index rows, Eigen::Index cols, double mean, double std,
                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(mean, std == 0.0 ? 1.0 : std);
  Matrix out(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      out(r, c) = std == 0.0 ? mean : dist(rng);
    }
  }
  return out;
}

}  // namespace tiedgnn

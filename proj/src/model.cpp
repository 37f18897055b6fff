#include "tiedgnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "tiedgnn/common.hpp"
#include "tiedgnn/optim.hpp"

namespace tiedgnn {

void ModelConfig::validate() const {
  if (num_items < 1) throw ConfigError("model: num_items must be >= 1");
  if (d < 1 || K < 1) throw ConfigError("model: d and K must be >= 1");
  if (d % K != 0) throw ConfigError("model: d must be divisible by K");
  if (d_p < 0) throw ConfigError("model: d_p must be >= 0");
  if (L < 1) throw ConfigError("model: L must be >= 1");
  if (L_max < 1) throw ConfigError("model: L_max must be >= 1");
  if (epsilon < 1) throw ConfigError("model: epsilon must be >= 1");
  if (max_neighbors < 1) throw ConfigError("model: max_neighbors must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("model: dropout must lie in [0, 1)");
  }
  if (leaky_slope <= 0.0) throw ConfigError("model: leaky_slope must be positive");
  if (!std::isfinite(beta) || !std::isfinite(lambda)) {
    throw ConfigError("model: beta and lambda must be finite");
  }
}

Parameter& ModelParams::add(const std::string& name, Eigen::Index rows,
                            Eigen::Index cols) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  index_[name] = order_.size();
  order_.push_back(std::make_unique<Parameter>(name, Matrix::Zero(rows, cols)));
  return *order_.back();
}

Parameter& ModelParams::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *order_[it->second];
}

const Parameter& ModelParams::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *order_[it->second];
}

bool ModelParams::has(const std::string& name) const { return index_.count(name) > 0; }

std::vector<Parameter*> ModelParams::all() {
  std::vector<Parameter*> out;
  out.reserve(order_.size());
  for (auto& p : order_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ModelParams::all() const {
  std::vector<const Parameter*> out;
  out.reserve(order_.size());
  for (const auto& p : order_) out.push_back(p.get());
  return out;
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  auto gadd = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    p.add(name, r, c).value = init_gaussian(r, c, 0.0, 0.1, mix_seed(seed, fnv1a64(name)));
  };
  const int d = cfg.d, dk = cfg.dk(), dp = cfg.pos_dim();
  const int w = dk + dp + 1;
  gadd("item_table", cfg.num_items, d);
  for (int k = 0; k < cfg.K; ++k) {
    gadd("chunk.W." + std::to_string(k), d, dk);
    gadd("chunk.b." + std::to_string(k), dk, 1);
  }
  for (const char* kind : {"in", "out", "io"}) {
    gadd(std::string("global.W.") + kind, w, w);
    gadd(std::string("global.q.") + kind, w, 1);
  }
  for (int k = 0; k < cfg.K; ++k) gadd("update.W." + std::to_string(k), 2 * dk, dk);
  gadd("residual.W_p", d, d);
  gadd("residual.W_q", d, d);
  gadd("residual.W_f", 1, d);
  for (const char* kind : {"in", "out", "in_out", "self"}) {
    gadd(std::string("local.W.") + kind, 1, d);
  }
  gadd("pos.P_in", cfg.epsilon, dp);
  gadd("pos.P_out", cfg.epsilon, dp);
  gadd("pos.p_io", 1, dp);
  gadd("pos.P_g", cfg.L_max, dk);
  gadd("pos.P_l", cfg.L_max, d);
  for (int k = 0; k < cfg.K; ++k) {
    const std::string s = std::to_string(k);
    gadd("inter.W2." + s, 2 * dk, dk);
    gadd("inter.b1." + s, dk, 1);
    gadd("inter.W3." + s, dk, dk);
    gadd("inter.W4." + s, dk, dk);
    gadd("inter.q." + s, dk, 1);
    gadd("inter.b2." + s, dk, 1);
  }
  gadd("intra.W5", 2 * d, d);
  gadd("intra.b3", d, 1);
  gadd("intra.W6", d, d);
  gadd("intra.W7", d, d);
  gadd("intra.q", d, 1);
  gadd("intra.b4", d, 1);
  return p;
}

ParamLeaves make_leaves(Tape& tape, ModelParams& params) {
  const ModelConfig& cfg = params.cfg;
  ParamLeaves lv;
  auto leaf = [&](const std::string& name) { return tape.leaf(params.at(name)); };
  lv.item_table = leaf("item_table");
  for (int k = 0; k < cfg.K; ++k) {
    const std::string s = std::to_string(k);
    lv.chunk_W.push_back(leaf("chunk.W." + s));
    lv.chunk_b.push_back(leaf("chunk.b." + s));
  }
  const char* global_kinds[3] = {"in", "out", "io"};
  for (int r = 0; r < 3; ++r) {
    lv.glob_W[std::size_t(r)] = leaf(std::string("global.W.") + global_kinds[r]);
    lv.glob_q[std::size_t(r)] = leaf(std::string("global.q.") + global_kinds[r]);
  }
  for (int k = 0; k < cfg.K; ++k) {
    lv.update_W.push_back(leaf("update.W." + std::to_string(k)));
  }
  lv.res_Wp = leaf("residual.W_p");
  lv.res_Wq = leaf("residual.W_q");
  lv.res_Wf = leaf("residual.W_f");
  lv.local_edge_table = concat_rows({leaf("local.W.in"), leaf("local.W.out"),
                                     leaf("local.W.in_out"), leaf("local.W.self")});
  lv.P_in = leaf("pos.P_in");
  lv.P_out = leaf("pos.P_out");
  lv.p_io = leaf("pos.p_io");
  lv.P_g = leaf("pos.P_g");
  lv.P_l = leaf("pos.P_l");
  for (int k = 0; k < cfg.K; ++k) {
    const std::string s = std::to_string(k);
    lv.inter_W2.push_back(leaf("inter.W2." + s));
    lv.inter_b1.push_back(leaf("inter.b1." + s));
    lv.inter_W3.push_back(leaf("inter.W3." + s));
    lv.inter_W4.push_back(leaf("inter.W4." + s));
    lv.inter_q.push_back(leaf("inter.q." + s));
    lv.inter_b2.push_back(leaf("inter.b2." + s));
  }
  lv.intra_W5 = leaf("intra.W5");
  lv.intra_b3 = leaf("intra.b3");
  lv.intra_W6 = leaf("intra.W6");
  lv.intra_W7 = leaf("intra.W7");
  lv.intra_q = leaf("intra.q");
  lv.intra_b4 = leaf("intra.b4");
  return lv;
}

std::vector<Tensor> chunk_embed(const Tensor& v, const ParamLeaves& lv,
                                const ModelConfig& cfg) {
  std::vector<Tensor> chunks;
  chunks.reserve(std::size_t(cfg.K));
  for (int k = 0; k < cfg.K; ++k) {
    Tensor pre = add(sigmoid(matmul_tn(lv.chunk_W[std::size_t(k)], v)),
                     lv.chunk_b[std::size_t(k)]);
    chunks.push_back(l2_normalize(pre));
  }
  return chunks;
}

std::vector<Tensor> chunk_embed_rows(const Tensor& rows, const ParamLeaves& lv,
                                     const ModelConfig& cfg) {
  std::vector<Tensor> chunks;
  chunks.reserve(std::size_t(cfg.K));
  for (int k = 0; k < cfg.K; ++k) {
    Tensor pre = add_rowwise(sigmoid(matmul(rows, lv.chunk_W[std::size_t(k)])),
                             lv.chunk_b[std::size_t(k)]);
    chunks.push_back(l2_normalize_rows(pre));
  }
  return chunks;
}

std::vector<Tensor> session_factor_preference(const Tensor& H, int K) {
  if (H.rows() == 0) throw DataError("session_factor_preference: empty session");
  if (H.cols() % K != 0) {
    throw DataError("session_factor_preference: width not divisible by K");
  }
  const Eigen::Index dk = H.cols() / K;
  std::vector<Tensor> prefs;
  prefs.reserve(std::size_t(K));
  for (int k = 0; k < K; ++k) prefs.push_back(colwise_mean(col_block(H, k * dk, dk)));
  return prefs;
}

PropagateResult propagate_neighbors(Tape& t, const Tensor& s_k, int k,
                                    const std::vector<NeighborBlock>& blocks,
                                    const ParamLeaves& lv, const ModelConfig& cfg) {
  const int dk = cfg.dk();
  PropagateResult res;
  Tensor acc;
  for (const NeighborBlock& b : blocks) {
    const Eigen::Index m = b.chunks.rows();
    if (m == 0) continue;
    if (static_cast<Eigen::Index>(b.weights.size()) != m) {
      throw DataError("propagate_neighbors: weight count does not match neighbors");
    }
    int r = static_cast<int>(b.kind);
    if (r < 0 || r > 2) {
      throw DataError("propagate_neighbors: neighbor blocks must be typed in/out/in-out");
    }
    Tensor ck = col_block(b.chunks, Eigen::Index(k) * dk, dk);
    Matrix wcol(m, 1);
    for (Eigen::Index i = 0; i < m; ++i) {
      double w = b.weights[std::size_t(i)];
      wcol(i, 0) = cfg.log_weight ? std::log1p(w) : w;
    }
    Tensor pos;
    if (b.kind == EdgeKind::kInOut) {
      pos = gather_rows(lv.p_io, std::vector<int>(std::size_t(m), 0));
    } else {
      if (static_cast<Eigen::Index>(b.mu.size()) != m) {
        throw DataError("propagate_neighbors: mu count does not match neighbors");
      }
      std::vector<int> rows(static_cast<std::size_t>(m));
      for (Eigen::Index i = 0; i < m; ++i) {
        int mu = b.mu[std::size_t(i)];
        if (mu < 1 || mu > cfg.epsilon) {
          throw DataError("propagate_neighbors: distance " + std::to_string(mu) +
                          " outside [1, " + std::to_string(cfg.epsilon) + "]");
        }
        rows[std::size_t(i)] = mu - 1;
      }
      pos = gather_rows(b.kind == EdgeKind::kIn ? lv.P_in : lv.P_out, rows);
    }
    Tensor x = concat_cols({mul_rowwise(ck, s_k), t.constant(wcol), pos});
    Tensor z = leaky_relu(matmul_nt(x, lv.glob_W[std::size_t(r)]), cfg.leaky_slope);
    Tensor attn = softmax_vec(matmul(z, lv.glob_q[std::size_t(r)]));
    res.attention.push_back(attn);
    Tensor h = matmul_tn(ck, attn);
    acc = acc.defined() ? add(acc, h) : h;
  }
  res.h = acc.defined() ? acc : t.constant(Matrix::Zero(dk, 1));
  return res;
}

Tensor update_node(const std::vector<Tensor>& chunks,
                   const std::vector<Tensor>& neighbor_chunks,
                   const ParamLeaves& lv) {
  if (chunks.size() != neighbor_chunks.size() || chunks.size() != lv.update_W.size()) {
    throw DataError("update_node: factor counts do not match");
  }
  std::vector<Tensor> parts;
  parts.reserve(chunks.size());
  for (std::size_t k = 0; k < chunks.size(); ++k) {
    Tensor x = concat_rows({chunks[k], neighbor_chunks[k]});
    parts.push_back(relu(matmul_tn(lv.update_W[k], x)));
  }
  return concat_rows(parts);
}

Tensor residual_fuse(const Tensor& h, const Tensor& h_prev, const ParamLeaves& lv) {
  Tensor gate = sigmoid(add(matmul(lv.res_Wp, h), matmul(lv.res_Wq, h_prev)));
  Tensor alpha = matmul(lv.res_Wf, gate);  // 1x1, unsquashed
  Tensor one_minus = add_scalar(neg(alpha), 1.0);
  return add(mul_scalar_t(h, alpha), mul_scalar_t(h_prev, one_minus));
}

Tensor factor_independence_loss(Tape& t, const std::vector<Tensor>& chunk_rows) {
  if (chunk_rows.size() < 2 || chunk_rows[0].rows() == 0) return t.scalar(0.0);
  Tensor acc;
  for (std::size_t a = 0; a < chunk_rows.size(); ++a) {
    for (std::size_t b = a + 1; b < chunk_rows.size(); ++b) {
      Tensor cos_ab = rowwise_dot(chunk_rows[a], chunk_rows[b]);
      acc = acc.defined() ? add(acc, cos_ab) : cos_ab;
    }
  }
  return mean_all(acc);
}

LocalResult local_item_embed(const SessionGraph& g, const Tensor& base,
                             const ParamLeaves& lv, const ModelConfig& cfg) {
  const Eigen::Index n = base.rows();
  if (static_cast<std::size_t>(n) != g.nodes.size()) {
    throw DataError("local_item_embed: base rows do not match graph nodes");
  }
  LocalResult res;
  std::vector<Tensor> out_rows;
  out_rows.reserve(std::size_t(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& adj = g.adjacency[std::size_t(i)];
    if (adj.empty()) throw DataError("local_item_embed: node without a self loop");
    std::vector<int> nbr_rows, kind_rows;
    nbr_rows.reserve(adj.size());
    kind_rows.reserve(adj.size());
    for (const auto& [j, kind] : adj) {
      nbr_rows.push_back(j);
      kind_rows.push_back(static_cast<int>(kind));
    }
    Tensor h_i = row_as_col(base, i);
    Tensor h_nbr = gather_rows(base, nbr_rows);
    Tensor prod = mul_rowwise(h_nbr, h_i);
    Tensor w_rows = gather_rows(lv.local_edge_table, kind_rows);
    Tensor logits = leaky_relu(rowwise_dot(prod, w_rows), cfg.leaky_slope);
    Tensor attn = softmax_vec(logits);
    res.attention.push_back(attn);
    out_rows.push_back(matmul_tn(h_nbr, attn));
  }
  res.H = stack_rows(out_rows);
  return res;
}

Tensor session_embed(const Tensor& H, EmbedMode mode, const ParamLeaves& lv,
                     const ModelConfig& cfg) {
  const Eigen::Index len = H.rows();
  if (len == 0) throw DataError("session_embed: empty session");
  if (len > cfg.L_max) {
    throw DataError("session_embed: session length " + std::to_string(len) +
                    " exceeds the position table (" + std::to_string(cfg.L_max) + ")");
  }
  if (H.cols() != cfg.d) throw DataError("session_embed: unexpected embedding width");
  std::vector<int> rev(static_cast<std::size_t>(len));
  for (Eigen::Index i = 0; i < len; ++i) rev[std::size_t(i)] = int(len - 1 - i);

  auto one_group = [&](const Tensor& Hk, const Tensor& P, const Tensor& W2,
                       const Tensor& b1, const Tensor& W3, const Tensor& W4,
                       const Tensor& q, const Tensor& b2) {
    Tensor x = concat_cols({Hk, gather_rows(P, rev)});
    Tensor fused = tanh_t(add_rowwise(matmul(x, W2), b1));
    Tensor s_f = colwise_mean(Hk);
    Tensor ctx = add(matmul(W4, s_f), b2);
    Tensor gates = sigmoid(add_rowwise(matmul_nt(fused, W3), ctx));
    Tensor gamma = matmul(gates, q);  // [len, 1], unnormalized
    return matmul_tn(Hk, gamma);
  };

  if (mode == EmbedMode::kIntra) {
    return one_group(H, lv.P_l, lv.intra_W5, lv.intra_b3, lv.intra_W6, lv.intra_W7,
                     lv.intra_q, lv.intra_b4);
  }
  const Eigen::Index dk = cfg.dk();
  std::vector<Tensor> parts;
  parts.reserve(std::size_t(cfg.K));
  for (int k = 0; k < cfg.K; ++k) {
    std::size_t ks = std::size_t(k);
    parts.push_back(one_group(col_block(H, k * dk, dk), lv.P_g, lv.inter_W2[ks],
                              lv.inter_b1[ks], lv.inter_W3[ks], lv.inter_W4[ks],
                              lv.inter_q[ks], lv.inter_b2[ks]));
  }
  return concat_rows(parts);
}

namespace {

std::vector<int> random_permutation(Eigen::Index n, std::uint64_t seed) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  if (n < 2) return p;
  std::mt19937_64 rng(seed);
  auto is_identity = [&] {
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] != int(i)) return false;
    }
    return true;
  };
  do {
    std::shuffle(p.begin(), p.end(), rng);
  } while (is_identity());
  return p;
}

}  // namespace

Tensor corrupt_batch(const Tensor& S, std::uint64_t seed) {
  if (S.rows() < 2) {
    throw DataError("corrupt_batch: need at least two rows to form a negative");
  }
  std::vector<int> rows = random_permutation(S.rows(), mix_seed(seed, fnv1a64("rows")));
  std::vector<int> cols = random_permutation(S.cols(), mix_seed(seed, fnv1a64("cols")));
  return permute_rc(S, std::move(rows), std::move(cols));
}

Tensor contrastive_loss(const Tensor& sg, const Tensor& sl, const Tensor& sg_neg) {
  Tensor pos = rowwise_dot(sg, sl);
  Tensor negd = rowwise_dot(sg_neg, sl);
  // -log sigmoid(x) = softplus(-x); -log sigmoid(1 - x) = softplus(x - 1)
  Tensor losses = add(softplus(neg(pos)), softplus(add_scalar(negd, -1.0)));
  return mean_all(losses);
}

Tensor predict_scores(const Tensor& s_g, const Tensor& s_l, const Tensor& item_table) {
  return softmax_vec(matmul(item_table, add(s_g, s_l)));
}

Tensor prediction_loss(const Tensor& yhat, int target, CeMode mode) {
  if (target < 0 || target >= yhat.rows()) {
    throw DataError("prediction_loss: target out of range");
  }
  Tensor p = clamp(yhat, 1e-12, 1.0 - 1e-12);
  Tensor log_p = log_t(p);
  if (mode == CeMode::kMulticlass) return neg(pick(log_p, target));
  Tensor log_not = log_t(add_scalar(neg(p), 1.0));
  Tensor hit = pick(log_p, target);
  Tensor rest = sub(sum_all(log_not), pick(log_not, target));
  return neg(add(hit, rest));
}

Tensor apply_dropout(const Tensor& x, double rate, std::uint64_t seed) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("apply_dropout: rate must be < 1");
  const double keep = 1.0 - rate;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(keep);
  Matrix mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      mask(i, j) = coin(rng) ? 1.0 / keep : 0.0;
    }
  }
  return mul(x, x.tape()->constant(std::move(mask)));
}

BatchContext::BatchContext(Tape& tape, ModelParams& params, const GlobalGraph& graph,
                           std::uint64_t neighbor_seed)
    : tape_(&tape), graph_(&graph), cfg_(params.cfg), nbr_seed_(neighbor_seed),
      leaves_(make_leaves(tape, params)) {
  cfg_.validate();
  if (graph.num_items != cfg_.num_items) {
    throw DataError("model/graph vocabulary mismatch: graph has " +
                    std::to_string(graph.num_items) + " items, model " +
                    std::to_string(cfg_.num_items));
  }
}

const NeighborSample& BatchContext::sampled(int item) {
  auto it = sample_memo_.find(item);
  if (it != sample_memo_.end()) return it->second;
  NeighborSample s = sample_neighbors(*graph_, item, cfg_.max_neighbors, nbr_seed_);
  return sample_memo_.emplace(item, std::move(s)).first->second;
}

ForwardOutput BatchContext::forward(const std::vector<int>& prefix, bool with_scores) {
  const ModelConfig& cfg = cfg_;
  Tape& t = *tape_;
  if (prefix.empty()) throw DataError("forward: empty session prefix");
  for (int item : prefix) {
    if (item < 0 || item >= cfg.num_items) {
      throw DataError("forward: item id out of range: " + std::to_string(item));
    }
  }

  // Local channel over the session graph.
  Session sess;
  sess.items = prefix;
  SessionGraph g = build_session_graph(sess);
  Tensor base = gather_rows(leaves_.item_table, g.nodes);
  LocalResult local = local_item_embed(g, base, leaves_, cfg);
  Tensor H_local = gather_rows(local.H, g.alias);  // [len, d]
  std::vector<Tensor> s_pref = session_factor_preference(H_local, cfg.K);

  // Receptive fields: need[l] holds the items whose layer-l output is used.
  std::vector<std::set<int>> need(std::size_t(cfg.L) + 1);
  need[std::size_t(cfg.L)] = std::set<int>(g.nodes.begin(), g.nodes.end());
  for (int l = cfg.L; l >= 1; --l) {
    std::set<int>& below = need[std::size_t(l - 1)];
    below = need[std::size_t(l)];
    for (int item : need[std::size_t(l)]) {
      const NeighborSample& ns = sampled(item);
      for (const auto& nb : ns.in) below.insert(nb.item);
      for (const auto& nb : ns.out) below.insert(nb.item);
      for (const auto& nb : ns.io) below.insert(nb.item);
    }
  }

  // Layer 0: chunk embeddings for every reachable item, batched.
  std::vector<int> base_items(need[0].begin(), need[0].end());
  std::unordered_map<int, int> row_of;
  for (std::size_t i = 0; i < base_items.size(); ++i) row_of[base_items[i]] = int(i);
  Tensor U = gather_rows(leaves_.item_table, base_items);
  std::vector<Tensor> C = chunk_embed_rows(U, leaves_, cfg);
  Tensor H0 = concat_cols(C);  // [u, d]

  const int dk = cfg.dk();
  std::unordered_map<int, Tensor> prev;
  for (int l = 1; l <= cfg.L; ++l) {
    std::unordered_map<int, Tensor> next;
    for (int item : need[std::size_t(l)]) {
      Tensor h_prev = (l == 1) ? row_as_col(H0, row_of.at(item)) : prev.at(item);
      std::vector<Tensor> own(std::size_t(cfg.K));
      for (int k = 0; k < cfg.K; ++k) {
        own[std::size_t(k)] = slice_rows(h_prev, Eigen::Index(k) * dk, dk);
      }
      const NeighborSample& ns = sampled(item);
      std::vector<NeighborBlock> blocks;
      auto add_block = [&](const std::vector<GlobalNeighbor>& list, EdgeKind kind) {
        if (list.empty()) return;
        NeighborBlock b;
        b.kind = kind;
        if (l == 1) {
          std::vector<int> rows;
          rows.reserve(list.size());
          for (const auto& nb : list) rows.push_back(row_of.at(nb.item));
          b.chunks = gather_rows(H0, rows);
        } else {
          std::vector<Tensor> cols;
          cols.reserve(list.size());
          for (const auto& nb : list) cols.push_back(prev.at(nb.item));
          b.chunks = stack_rows(cols);
        }
        for (const auto& nb : list) {
          b.weights.push_back(double(nb.weight));
          b.mu.push_back(nb.mu);
        }
        blocks.push_back(std::move(b));
      };
      add_block(ns.in, EdgeKind::kIn);
      add_block(ns.out, EdgeKind::kOut);
      add_block(ns.io, EdgeKind::kInOut);

      std::vector<Tensor> hN(std::size_t(cfg.K));
      for (int k = 0; k < cfg.K; ++k) {
        hN[std::size_t(k)] =
            propagate_neighbors(t, s_pref[std::size_t(k)], k, blocks, leaves_, cfg).h;
      }
      Tensor updated = update_node(own, hN, leaves_);
      next[item] = residual_fuse(updated, h_prev, leaves_);
    }
    prev = std::move(next);
  }

  // Independence penalty over the session items' first-layer chunks.
  std::vector<int> sess_rows;
  sess_rows.reserve(g.nodes.size());
  for (int item : g.nodes) sess_rows.push_back(row_of.at(item));
  std::vector<Tensor> sess_chunks;
  sess_chunks.reserve(C.size());
  for (const Tensor& ck : C) sess_chunks.push_back(gather_rows(ck, sess_rows));

  ForwardOutput out;
  out.l_cor = factor_independence_loss(t, sess_chunks);

  std::vector<Tensor> glob_rows;
  glob_rows.reserve(prefix.size());
  for (int item : prefix) glob_rows.push_back(prev.at(item));
  Tensor H_glob = stack_rows(glob_rows);  // [len, d]

  out.s_g = session_embed(H_glob, EmbedMode::kInter, leaves_, cfg);
  out.s_l = session_embed(H_local, EmbedMode::kIntra, leaves_, cfg);
  if (with_scores) out.yhat = predict_scores(out.s_g, out.s_l, leaves_.item_table);
  return out;
}

BatchLossParts batch_training_loss(BatchContext& ctx,
                                   const std::vector<LabeledInstance>& batch,
                                   bool train, std::uint64_t step_seed) {
  if (batch.empty()) throw DataError("batch_training_loss: empty batch");
  const ModelConfig& cfg = ctx.config();
  std::vector<Tensor> per_instance, sg_rows, sl_rows;
  per_instance.reserve(batch.size());
  sg_rows.reserve(batch.size());
  sl_rows.reserve(batch.size());
  BatchLossParts parts;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ForwardOutput out = ctx.forward(batch[b].prefix, false);
    Tensor sg = out.s_g, sl = out.s_l;
    if (train && cfg.dropout > 0.0) {
      sg = apply_dropout(sg, cfg.dropout, mix_seed(step_seed, fnv1a64("dropout.g"), b));
      sl = apply_dropout(sl, cfg.dropout, mix_seed(step_seed, fnv1a64("dropout.l"), b));
    }
    Tensor yhat = predict_scores(sg, sl, ctx.leaves().item_table);
    Tensor ce = prediction_loss(yhat, batch[b].label, cfg.ce_mode);
    per_instance.push_back(cfg.beta != 0.0 ? add(ce, scale(out.l_cor, cfg.beta)) : ce);
    sg_rows.push_back(out.s_g);
    sl_rows.push_back(out.s_l);
    parts.ce += ce.scalar();
    parts.cor += out.l_cor.scalar();
  }
  const double inv_b = 1.0 / double(batch.size());
  parts.ce *= inv_b;
  parts.cor *= inv_b;
  parts.total = average(per_instance);
  if (batch.size() >= 2 && cfg.lambda != 0.0) {
    Tensor sg_mat = stack_rows(sg_rows);
    Tensor sl_mat = stack_rows(sl_rows);
    Tensor sg_neg = corrupt_batch(sg_mat, mix_seed(step_seed, fnv1a64("corrupt")));
    Tensor l_con = contrastive_loss(sg_mat, sl_mat, sg_neg);
    parts.con = l_con.scalar();
    parts.total = add(parts.total, scale(l_con, cfg.lambda));
  }
  return parts;
}

}  // namespace tiedgnn

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tiedgnn/dataset.hpp"

namespace tiedgnn {

enum class EdgeKind { kIn, kOut, kInOut, kSelfLoop };

const char* edge_kind_name(EdgeKind k);

// Sentinel position label for neighbors connected in both directions.
inline constexpr int kIoPos = 0;

struct GlobalNeighbor {
  int item = -1;
  EdgeKind kind = EdgeKind::kOut;
  std::int64_t weight = 0;  // co-occurrence count across sessions and distances
  int mu = kIoPos;          // most frequent distance (1..epsilon), kIoPos for InOut
};

struct GlobalGraph {
  struct ItemNeighbors {
    std::vector<GlobalNeighbor> in, out, io;
  };

  int epsilon = 0;
  int num_items = 0;
  int max_neighbors = 0;
  std::uint64_t corpus_hash = 0;
  std::vector<ItemNeighbors> items;
};

// Item-transition graph over the training sessions: every ordered pair of
// items co-occurring within distance <= epsilon becomes a directed
// observation; pairs seen in both directions collapse to a single InOut
// relation whose weight is the sum of both directional counts. Per item and
// kind, only the max_neighbors heaviest neighbors are retained (ties broken
// toward smaller item index).
GlobalGraph build_global_graph(const std::vector<Session>& sessions, int num_items,
                               int epsilon, int max_neighbors);
GlobalGraph build_global_graph(const SessionCorpus& corpus, int epsilon,
                               int max_neighbors);

// Stored neighbors of one item, per kind, truncated to the top max_n by
// weight. Deterministic; the seed only arbitrates among equal weights at the
// truncation boundary.
struct NeighborSample {
  std::vector<GlobalNeighbor> in, out, io;
};
NeighborSample sample_neighbors(const GlobalGraph& graph, int item, int max_n,
                                std::uint64_t seed);

// Exhaustive pair table for validating the builder on small corpora: one
// tuple per ordered co-occurrence within epsilon, in both directions, self
// pairs included.
struct PairObservation {
  int src = -1, dst = -1;
  bool forward = true;
  int distance = 0;
};
std::vector<PairObservation> brute_force_global_oracle(
    const std::vector<Session>& sessions, int epsilon);

struct SessionGraph {
  struct Edge {
    int src = -1, dst = -1;  // node indices
    EdgeKind kind = EdgeKind::kOut;
  };

  std::vector<int> nodes;  // distinct items in first-appearance order
  std::vector<int> alias;  // session position -> node index
  std::vector<Edge> edges;
  // Per node: (neighbor node, edge kind from this node's view), self included.
  std::vector<std::vector<std::pair<int, EdgeKind>>> adjacency;
};

// Session graph with typed edges: an adjacent ordered pair (a,b), a != b,
// yields one InOut edge when both directions appear as adjacencies anywhere
// in the session, otherwise a single Out edge from a (the In view is derived).
// Every node carries a SelfLoop; an adjacent repeat [a,a] folds into it.
SessionGraph build_session_graph(const Session& session);

// JSON Lines: a header line with epsilon / num_items / max_neighbors /
// corpus_hash followed by one record per item.
void save_global_graph(const std::string& path, const GlobalGraph& graph);
GlobalGraph load_global_graph(const std::string& path);

std::uint64_t hash_sessions(const std::vector<Session>& sessions);

}  // namespace tiedgnn

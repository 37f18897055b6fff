#include "tiedgnn/graphs.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <unordered_map>

#include <json.hpp>

namespace tiedgnn {

using nlohmann::json;

const char* edge_kind_name(EdgeKind k) {
  switch (k) {
    case EdgeKind::kIn: return "in";
    case EdgeKind::kOut: return "out";
    case EdgeKind::kInOut: return "in-out";
    case EdgeKind::kSelfLoop: return "self";
  }
  return "?";
}

std::uint64_t hash_sessions(const std::vector<Session>& sessions) {
  std::uint64_t h = fnv1a64("sessions");
  for (const Session& s : sessions) {
    std::uint64_t n = s.items.size();
    h = fnv1a64(&n, sizeof(n), h);
    for (int it : s.items) h = fnv1a64(&it, sizeof(it), h);
  }
  return h;
}

GlobalGraph build_global_graph(const std::vector<Session>& sessions, int num_items,
                               int epsilon, int max_neighbors) {
  if (epsilon < 1) throw ConfigError("build_global_graph: epsilon must be >= 1");
  if (max_neighbors < 1) {
    throw ConfigError("build_global_graph: max_neighbors must be >= 1");
  }
  if (num_items < 1) throw ConfigError("build_global_graph: empty vocabulary");

  // fwd[i][j] = per-distance counts of i preceding j (index d-1 holds distance d)
  std::vector<std::unordered_map<int, std::vector<std::int64_t>>> fwd(
      static_cast<std::size_t>(num_items));
  for (const Session& s : sessions) {
    const auto& it = s.items;
    for (std::size_t t = 0; t < it.size(); ++t) {
      for (int d = 1; d <= epsilon && t + static_cast<std::size_t>(d) < it.size(); ++d) {
        int i = it[t], j = it[t + static_cast<std::size_t>(d)];
        if (i == j) continue;  // self pairs carry no transition information
        if (i < 0 || i >= num_items || j < 0 || j >= num_items) {
          throw DataError("build_global_graph: item index out of range");
        }
        auto& counts = fwd[static_cast<std::size_t>(i)][j];
        if (counts.empty()) counts.assign(static_cast<std::size_t>(epsilon), 0);
        counts[static_cast<std::size_t>(d - 1)] += 1;
      }
    }
  }

  auto total = [](const std::vector<std::int64_t>& c) {
    std::int64_t t = 0;
    for (std::int64_t v : c) t += v;
    return t;
  };
  auto most_frequent_distance = [](const std::vector<std::int64_t>& c) {
    std::size_t best = 0;
    for (std::size_t d = 1; d < c.size(); ++d) {
      if (c[d] > c[best]) best = d;  // ties keep the smaller distance
    }
    return static_cast<int>(best + 1);
  };

  GlobalGraph g;
  g.epsilon = epsilon;
  g.num_items = num_items;
  g.max_neighbors = max_neighbors;
  g.corpus_hash = hash_sessions(sessions);
  g.items.resize(static_cast<std::size_t>(num_items));

  for (int i = 0; i < num_items; ++i) {
    for (const auto& [j, counts] : fwd[static_cast<std::size_t>(i)]) {
      std::int64_t wf = total(counts);
      const auto& back = fwd[static_cast<std::size_t>(j)];
      auto bit = back.find(i);
      if (bit != back.end()) {
        // Seen in both directions: one symmetric InOut relation. Added from
        // i's side only; j adds its mirror when its own loop reaches (j,i).
        g.items[static_cast<std::size_t>(i)].io.push_back(
            {j, EdgeKind::kInOut, wf + total(bit->second), kIoPos});
      } else {
        int mu = most_frequent_distance(counts);
        g.items[static_cast<std::size_t>(i)].out.push_back({j, EdgeKind::kOut, wf, mu});
        g.items[static_cast<std::size_t>(j)].in.push_back({i, EdgeKind::kIn, wf, mu});
      }
    }
  }

  auto truncate = [max_neighbors](std::vector<GlobalNeighbor>& v) {
    std::sort(v.begin(), v.end(), [](const GlobalNeighbor& a, const GlobalNeighbor& b) {
      if (a.weight != b.weight) return a.weight > b.weight;
      return a.item < b.item;
    });
    if (v.size() > static_cast<std::size_t>(max_neighbors)) {
      v.resize(static_cast<std::size_t>(max_neighbors));
    }
  };
  for (auto& item : g.items) {
    truncate(item.in);
    truncate(item.out);
    truncate(item.io);
  }
  return g;
}

GlobalGraph build_global_graph(const SessionCorpus& corpus, int epsilon,
                               int max_neighbors) {
  return build_global_graph(corpus.sessions, corpus.vocab.size(), epsilon,
                            max_neighbors);
}

namespace {

std::vector<GlobalNeighbor> truncate_sampled(const std::vector<GlobalNeighbor>& stored,
                                             int max_n, std::mt19937_64& rng) {
  if (stored.size() <= static_cast<std::size_t>(max_n)) return stored;
  std::vector<GlobalNeighbor> v = stored;
  std::sort(v.begin(), v.end(), [](const GlobalNeighbor& a, const GlobalNeighbor& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    return a.item < b.item;
  });
  std::int64_t boundary = v[static_cast<std::size_t>(max_n - 1)].weight;
  auto group_begin = std::find_if(v.begin(), v.end(), [&](const GlobalNeighbor& n) {
    return n.weight == boundary;
  });
  auto group_end = std::find_if(group_begin, v.end(), [&](const GlobalNeighbor& n) {
    return n.weight != boundary;
  });
  std::size_t keep_before = static_cast<std::size_t>(group_begin - v.begin());
  std::size_t need = static_cast<std::size_t>(max_n) - keep_before;
  if (group_end - group_begin > static_cast<std::ptrdiff_t>(need)) {
    // Equal weights straddle the cutoff: pick among them with the seed.
    std::vector<GlobalNeighbor> group(group_begin, group_end);
    std::shuffle(group.begin(), group.end(), rng);
    group.resize(need);
    std::sort(group.begin(), group.end(), [](const GlobalNeighbor& a,
                                             const GlobalNeighbor& b) {
      return a.item < b.item;
    });
    std::copy(group.begin(), group.end(), group_begin);
  }
  v.resize(static_cast<std::size_t>(max_n));
  return v;
}

}  // namespace

NeighborSample sample_neighbors(const GlobalGraph& graph, int item, int max_n,
                                std::uint64_t seed) {
  if (max_n < 1) throw ConfigError("sample_neighbors: max_n must be >= 1");
  NeighborSample out;
  if (item < 0 || item >= graph.num_items) return out;  // unknown item
  const auto& stored = graph.items[static_cast<std::size_t>(item)];
  std::mt19937_64 rng_in(mix_seed(seed, static_cast<std::uint64_t>(item), 1));
  std::mt19937_64 rng_out(mix_seed(seed, static_cast<std::uint64_t>(item), 2));
  std::mt19937_64 rng_io(mix_seed(seed, static_cast<std::uint64_t>(item), 3));
  out.in = truncate_sampled(stored.in, max_n, rng_in);
  out.out = truncate_sampled(stored.out, max_n, rng_out);
  out.io = truncate_sampled(stored.io, max_n, rng_io);
  return out;
}

std::vector<PairObservation> brute_force_global_oracle(
    const std::vector<Session>& sessions, int epsilon) {
  std::vector<PairObservation> table;
  for (const Session& s : sessions) {
    const auto& it = s.items;
    for (std::size_t t = 0; t < it.size(); ++t) {
      for (int d = 1; d <= epsilon && t + static_cast<std::size_t>(d) < it.size(); ++d) {
        int i = it[t], j = it[t + static_cast<std::size_t>(d)];
        table.push_back({i, j, true, d});
        table.push_back({j, i, false, d});
      }
    }
  }
  return table;
}

SessionGraph build_session_graph(const Session& session) {
  SessionGraph g;
  std::unordered_map<int, int> node_of;
  for (int item : session.items) {
    auto [it, inserted] = node_of.emplace(item, static_cast<int>(g.nodes.size()));
    if (inserted) g.nodes.push_back(item);
    g.alias.push_back(it->second);
  }

  std::set<std::pair<int, int>> pairs;
  for (std::size_t t = 0; t + 1 < g.alias.size(); ++t) {
    int a = g.alias[t], b = g.alias[t + 1];
    if (a != b) pairs.emplace(a, b);  // [a,a] folds into the self loop below
  }

  for (const auto& [a, b] : pairs) {
    if (pairs.count({b, a})) {
      if (a < b) g.edges.push_back({a, b, EdgeKind::kInOut});
    } else {
      g.edges.push_back({a, b, EdgeKind::kOut});
    }
  }
  for (int n = 0; n < static_cast<int>(g.nodes.size()); ++n) {
    g.edges.push_back({n, n, EdgeKind::kSelfLoop});
  }

  g.adjacency.resize(g.nodes.size());
  for (const auto& e : g.edges) {
    switch (e.kind) {
      case EdgeKind::kOut:
        g.adjacency[static_cast<std::size_t>(e.src)].emplace_back(e.dst, EdgeKind::kOut);
        g.adjacency[static_cast<std::size_t>(e.dst)].emplace_back(e.src, EdgeKind::kIn);
        break;
      case EdgeKind::kInOut:
        g.adjacency[static_cast<std::size_t>(e.src)].emplace_back(e.dst,
                                                                  EdgeKind::kInOut);
        g.adjacency[static_cast<std::size_t>(e.dst)].emplace_back(e.src,
                                                                  EdgeKind::kInOut);
        break;
      case EdgeKind::kSelfLoop:
        g.adjacency[static_cast<std::size_t>(e.src)].emplace_back(e.src,
                                                                  EdgeKind::kSelfLoop);
        break;
      case EdgeKind::kIn:
        throw DataError("build_session_graph: stored edges never carry the In kind");
    }
  }
  return g;
}

void save_global_graph(const std::string& path, const GlobalGraph& graph) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write graph file: " + path);
  json header;
  header["epsilon"] = graph.epsilon;
  header["num_items"] = graph.num_items;
  header["max_neighbors"] = graph.max_neighbors;
  header["corpus_hash"] = hex64(graph.corpus_hash);
  out << header.dump() << "\n";
  for (int i = 0; i < graph.num_items; ++i) {
    const auto& it = graph.items[static_cast<std::size_t>(i)];
    json rec;
    rec["item"] = i;
    json in = json::array(), outj = json::array(), io = json::array();
    for (const auto& n : it.in) in.push_back({n.item, n.weight, n.mu});
    for (const auto& n : it.out) outj.push_back({n.item, n.weight, n.mu});
    for (const auto& n : it.io) io.push_back({n.item, n.weight});
    rec["in"] = in;
    rec["out"] = outj;
    rec["io"] = io;
    out << rec.dump() << "\n";
  }
}

GlobalGraph load_global_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open graph file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("graph file is empty: " + path);
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.contains("epsilon") ||
      !header.contains("num_items") || !header.contains("max_neighbors")) {
    throw DataError("malformed graph header in " + path);
  }
  GlobalGraph g;
  g.epsilon = header["epsilon"].get<int>();
  g.num_items = header["num_items"].get<int>();
  g.max_neighbors = header["max_neighbors"].get<int>();
  if (header.contains("corpus_hash")) {
    g.corpus_hash =
        std::stoull(header["corpus_hash"].get<std::string>(), nullptr, 16);
  }
  g.items.resize(static_cast<std::size_t>(g.num_items));
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    lineno += 1;
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.contains("item")) {
      throw DataError("malformed graph record at " + path + ":" +
                      std::to_string(lineno));
    }
    int item = rec["item"].get<int>();
    if (item < 0 || item >= g.num_items) {
      throw DataError("graph record item out of range at " + path + ":" +
                      std::to_string(lineno));
    }
    auto& slot = g.items[static_cast<std::size_t>(item)];
    for (const auto& e : rec["in"]) {
      slot.in.push_back({e[0].get<int>(), EdgeKind::kIn, e[1].get<std::int64_t>(),
                         e[2].get<int>()});
    }
    for (const auto& e : rec["out"]) {
      slot.out.push_back({e[0].get<int>(), EdgeKind::kOut, e[1].get<std::int64_t>(),
                          e[2].get<int>()});
    }
    for (const auto& e : rec["io"]) {
      slot.io.push_back(
          {e[0].get<int>(), EdgeKind::kInOut, e[1].get<std::int64_t>(), kIoPos});
    }
  }
  return g;
}

}  // namespace tiedgnn

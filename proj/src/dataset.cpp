#include "tiedgnn/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace tiedgnn {

namespace fs = std::filesystem;
using nlohmann::json;

int ItemVocab::add(const std::string& raw) {
  auto it = forward.find(raw);
  if (it != forward.end()) return it->second;
  int idx = static_cast<int>(reverse.size());
  forward.emplace(raw, idx);
  reverse.push_back(raw);
  return idx;
}

int ItemVocab::index_of(const std::string& raw) const {
  auto it = forward.find(raw);
  return it == forward.end() ? -1 : it->second;
}

namespace {

bool parse_int64(const std::string& s, std::int64_t& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e && !s.empty();
}

bool parse_tsv_line(const std::string& line, RawEvent& ev) {
  std::size_t t1 = line.find('\t');
  if (t1 == std::string::npos) return false;
  std::size_t t2 = line.find('\t', t1 + 1);
  if (t2 == std::string::npos) return false;
  if (line.find('\t', t2 + 1) != std::string::npos) return false;
  ev.session_id = line.substr(0, t1);
  ev.item_id = line.substr(t1 + 1, t2 - t1 - 1);
  if (ev.session_id.empty() || ev.item_id.empty()) return false;
  return parse_int64(line.substr(t2 + 1), ev.order_key);
}

bool parse_jsonl_line(const std::string& line, RawEvent& ev) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return false;
  if (!j.contains("session_id") || !j.contains("item_id") || !j.contains("order_key")) {
    return false;
  }
  try {
    if (j["session_id"].is_string()) {
      ev.session_id = j["session_id"].get<std::string>();
    } else if (j["session_id"].is_number_integer()) {
      ev.session_id = std::to_string(j["session_id"].get<std::int64_t>());
    } else {
      return false;
    }
    if (j["item_id"].is_string()) {
      ev.item_id = j["item_id"].get<std::string>();
    } else if (j["item_id"].is_number_integer()) {
      ev.item_id = std::to_string(j["item_id"].get<std::int64_t>());
    } else {
      return false;
    }
    if (!j["order_key"].is_number_integer()) return false;
    ev.order_key = j["order_key"].get<std::int64_t>();
  } catch (const json::exception&) {
    return false;
  }
  return !ev.session_id.empty() && !ev.item_id.empty();
}

}  // namespace

LoadReport load_sessions(const std::string& path, RawFormat format, double tolerance) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open session log: " + path);
  LoadReport rep;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    rep.total_lines += 1;
    RawEvent ev;
    bool ok = format == RawFormat::kTsv ? parse_tsv_line(line, ev)
                                        : parse_jsonl_line(line, ev);
    if (ok) {
      rep.events.push_back(std::move(ev));
    } else {
      rep.malformed += 1;
    }
  }
  if (rep.total_lines == 0) {
    std::cerr << "warning: " << path << " contains no records\n";
    return rep;
  }
  double frac = double(rep.malformed) / double(rep.total_lines);
  if (frac > tolerance) {
    throw DataError("too many malformed lines in " + path + ": " +
                    std::to_string(rep.malformed) + " of " +
                    std::to_string(rep.total_lines) + " (tolerance " +
                    std::to_string(tolerance) + ")");
  }
  return rep;
}

SessionCorpus sessionize(const std::vector<RawEvent>& events, std::int64_t split_gap,
                         std::size_t max_len) {
  // Group by session_id, preserving the order in which ids first appear so the
  // result is independent of hash-map iteration order.
  std::unordered_map<std::string, std::size_t> first_seen;
  std::vector<std::vector<const RawEvent*>> groups;
  for (const RawEvent& ev : events) {
    auto [it, inserted] = first_seen.emplace(ev.session_id, groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(&ev);
  }

  SessionCorpus corpus;
  std::vector<std::vector<const RawEvent*>> runs;
  for (auto& g : groups) {
    std::stable_sort(g.begin(), g.end(), [](const RawEvent* a, const RawEvent* b) {
      return a->order_key < b->order_key;
    });
    runs.clear();
    runs.emplace_back();
    for (const RawEvent* ev : g) {
      if (split_gap > 0 && !runs.back().empty() &&
          ev->order_key - runs.back().back()->order_key > split_gap) {
        runs.emplace_back();
      }
      runs.back().push_back(ev);
    }
    for (auto& run : runs) {
      if (run.empty()) continue;
      std::size_t start = run.size() > max_len ? run.size() - max_len : 0;
      Session s;
      s.items.reserve(run.size() - start);
      for (std::size_t i = start; i < run.size(); ++i) {
        s.items.push_back(corpus.vocab.add(run[i]->item_id));
      }
      s.end_key = run.back()->order_key;
      corpus.sessions.push_back(std::move(s));
    }
  }
  return corpus;
}

SessionCorpus filter_corpus(const SessionCorpus& corpus, int min_len,
                            int min_item_count) {
  if (corpus.sessions.empty()) throw DataError("filter_corpus: empty corpus");

  std::vector<Session> sessions = corpus.sessions;
  std::size_t dropped_sessions = 0, dropped_occurrences = 0;
  int rounds = 0;
  for (bool changed = true; changed; ++rounds) {
    changed = false;
    std::vector<std::int64_t> count(corpus.vocab.reverse.size(), 0);
    for (const Session& s : sessions) {
      for (int it : s.items) count[static_cast<std::size_t>(it)] += 1;
    }
    std::vector<Session> next;
    next.reserve(sessions.size());
    for (Session& s : sessions) {
      std::vector<int> kept;
      kept.reserve(s.items.size());
      for (int it : s.items) {
        if (count[static_cast<std::size_t>(it)] >= min_item_count) {
          kept.push_back(it);
        } else {
          dropped_occurrences += 1;
          changed = true;
        }
      }
      if (static_cast<int>(kept.size()) >= min_len) {
        s.items = std::move(kept);
        next.push_back(std::move(s));
      } else {
        dropped_sessions += 1;
        changed = true;
      }
    }
    sessions = std::move(next);
  }

  if (sessions.empty()) {
    throw DataError("filter_corpus: no sessions survive (removed " +
                    std::to_string(dropped_sessions) + " sessions and " +
                    std::to_string(dropped_occurrences) + " item occurrences over " +
                    std::to_string(rounds) + " rounds)");
  }

  SessionCorpus out;
  for (Session& s : sessions) {
    for (int& it : s.items) {
      it = out.vocab.add(corpus.vocab.reverse[static_cast<std::size_t>(it)]);
    }
    out.sessions.push_back(std::move(s));
  }
  return out;
}

std::vector<LabeledInstance> augment_split(const Session& s) {
  std::vector<LabeledInstance> out;
  if (s.items.size() < 2) return out;
  out.reserve(s.items.size() - 1);
  for (std::size_t end = 1; end < s.items.size(); ++end) {
    LabeledInstance inst;
    inst.prefix.assign(s.items.begin(), s.items.begin() + static_cast<std::ptrdiff_t>(end));
    inst.label = s.items[end];
    out.push_back(std::move(inst));
  }
  return out;
}

Splits make_splits(const SessionCorpus& corpus, SplitPolicy policy, double param,
                   std::uint64_t seed, double valid_fraction) {
  if (corpus.sessions.empty()) throw DataError("make_splits: empty corpus");

  std::vector<std::size_t> order(corpus.sessions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return corpus.sessions[a].end_key < corpus.sessions[b].end_key;
  });

  std::size_t n = order.size();
  std::size_t n_test = 0;
  if (policy == SplitPolicy::kTailFraction) {
    if (param <= 0.0 || param >= 1.0) {
      throw ConfigError("make_splits: tail fraction must be in (0, 1)");
    }
    n_test = static_cast<std::size_t>(double(n) * param + 1e-9);
  } else {
    int k = static_cast<int>(param);
    if (k < 1) throw ConfigError("make_splits: period count must be >= 1");
    std::vector<std::int64_t> buckets;
    for (const Session& s : corpus.sessions) {
      std::int64_t b = s.end_key >= 0 ? s.end_key / kPeriodSeconds
                                      : (s.end_key - kPeriodSeconds + 1) / kPeriodSeconds;
      buckets.push_back(b);
    }
    std::vector<std::int64_t> distinct = buckets;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (static_cast<std::size_t>(k) >= distinct.size()) {
      throw DataError("make_splits: holding out " + std::to_string(k) +
                      " periods empties the training side (" +
                      std::to_string(distinct.size()) + " distinct periods)");
    }
    std::int64_t cutoff = distinct[distinct.size() - static_cast<std::size_t>(k)];
    for (std::size_t i : order) {
      if (buckets[i] >= cutoff) n_test += 1;
    }
  }
  if (n_test == 0 || n_test >= n) {
    throw DataError("make_splits: split leaves an empty side (" +
                    std::to_string(n - n_test) + " train / " + std::to_string(n_test) +
                    " test sessions)");
  }

  Splits out;
  out.n_train_source = n - n_test;
  out.n_test_source = n_test;
  for (std::size_t i = 0; i < n; ++i) {
    const Session& s = corpus.sessions[order[i]];
    auto instances = augment_split(s);
    if (i < n - n_test) {
      out.train_sessions.push_back(s);
      out.train.insert(out.train.end(), instances.begin(), instances.end());
    } else {
      out.test.insert(out.test.end(), instances.begin(), instances.end());
    }
  }

  std::size_t n_valid =
      static_cast<std::size_t>(double(out.train.size()) * valid_fraction + 1e-9);
  std::vector<std::size_t> idx(out.train.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, fnv1a64("validation-split")));
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<bool> to_valid(out.train.size(), false);
  for (std::size_t i = 0; i < n_valid; ++i) to_valid[idx[i]] = true;

  std::vector<LabeledInstance> train_kept;
  train_kept.reserve(out.train.size() - n_valid);
  for (std::size_t i = 0; i < out.train.size(); ++i) {
    if (to_valid[i]) {
      out.valid.push_back(std::move(out.train[i]));
    } else {
      train_kept.push_back(std::move(out.train[i]));
    }
  }
  out.train = std::move(train_kept);

  if (out.train.empty() || out.valid.empty() || out.test.empty()) {
    throw DataError("make_splits: empty split (train " +
                    std::to_string(out.train.size()) + ", valid " +
                    std::to_string(out.valid.size()) + ", test " +
                    std::to_string(out.test.size()) + ")");
  }
  return out;
}

CorpusStats compute_stats(const SessionCorpus& corpus, const Splits& splits) {
  CorpusStats st;
  st.train_sessions = splits.n_train_source;
  st.test_sessions = splits.n_test_source;
  st.items = static_cast<std::size_t>(corpus.vocab.size());
  std::size_t total = 0;
  for (const Session& s : corpus.sessions) total += s.items.size();
  st.avg_length = corpus.sessions.empty()
                      ? 0.0
                      : double(total) / double(corpus.sessions.size());
  st.train_instances = splits.train.size();
  st.valid_instances = splits.valid.size();
  st.test_instances = splits.test.size();
  return st;
}

namespace {

void write_instances(const fs::path& path, const std::vector<LabeledInstance>& insts) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const LabeledInstance& inst : insts) {
    json j;
    j["prefix"] = inst.prefix;
    j["label"] = inst.label;
    out << j.dump() << "\n";
  }
}

}  // namespace

void write_bundle(const std::string& dir, const ItemVocab& vocab, const Splits& splits,
                  const CorpusStats& stats) {
  fs::create_directories(dir);
  fs::path base(dir);

  {
    std::ofstream out(base / "vocab.tsv");
    if (!out) throw IoError("cannot write " + (base / "vocab.tsv").string());
    for (std::size_t i = 0; i < vocab.reverse.size(); ++i) {
      out << i << "\t" << vocab.reverse[i] << "\n";
    }
  }

  write_instances(base / "train.jsonl", splits.train);
  write_instances(base / "valid.jsonl", splits.valid);
  write_instances(base / "test.jsonl", splits.test);

  {
    std::ofstream out(base / "train_sessions.jsonl");
    if (!out) throw IoError("cannot write " + (base / "train_sessions.jsonl").string());
    for (const Session& s : splits.train_sessions) {
      json j;
      j["items"] = s.items;
      out << j.dump() << "\n";
    }
  }

  {
    json j;
    j["train_sessions"] = stats.train_sessions;
    j["test_sessions"] = stats.test_sessions;
    j["items"] = stats.items;
    j["avg_length"] = stats.avg_length;
    j["train_instances"] = stats.train_instances;
    j["valid_instances"] = stats.valid_instances;
    j["test_instances"] = stats.test_instances;
    std::ofstream out(base / "stats.json");
    if (!out) throw IoError("cannot write " + (base / "stats.json").string());
    out << j.dump(2) << "\n";
  }
}

std::vector<LabeledInstance> read_instances(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<LabeledInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    lineno += 1;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("prefix") || !j.contains("label")) {
      throw DataError("malformed instance at " + path + ":" + std::to_string(lineno));
    }
    LabeledInstance inst;
    inst.prefix = j["prefix"].get<std::vector<int>>();
    inst.label = j["label"].get<int>();
    if (inst.prefix.empty() || inst.label < 0) {
      throw DataError("invalid instance at " + path + ":" + std::to_string(lineno));
    }
    out.push_back(std::move(inst));
  }
  return out;
}

Bundle read_bundle(const std::string& dir) {
  fs::path base(dir);
  Bundle b;

  {
    std::ifstream in(base / "vocab.tsv");
    if (!in) throw IoError("cannot open " + (base / "vocab.tsv").string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      lineno += 1;
      if (line.empty()) continue;
      std::size_t tab = line.find('\t');
      if (tab == std::string::npos) {
        throw DataError("malformed vocab line " + std::to_string(lineno));
      }
      std::int64_t idx = 0;
      if (!parse_int64(line.substr(0, tab), idx) ||
          idx != static_cast<std::int64_t>(b.vocab.reverse.size())) {
        throw DataError("non-contiguous vocab index at line " + std::to_string(lineno));
      }
      b.vocab.add(line.substr(tab + 1));
    }
    if (b.vocab.size() == 0) throw DataError("empty vocabulary in " + dir);
  }

  b.train = read_instances((base / "train.jsonl").string());
  b.valid = read_instances((base / "valid.jsonl").string());
  b.test = read_instances((base / "test.jsonl").string());

  {
    std::ifstream in(base / "train_sessions.jsonl");
    if (!in) throw IoError("cannot open " + (base / "train_sessions.jsonl").string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("items")) {
        throw DataError("malformed session line in train_sessions.jsonl");
      }
      Session s;
      s.items = j["items"].get<std::vector<int>>();
      b.train_sessions.push_back(std::move(s));
    }
  }

  {
    std::ifstream in(base / "stats.json");
    if (!in) throw IoError("cannot open " + (base / "stats.json").string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("malformed stats.json in " + dir);
    b.stats.train_sessions = j.value("train_sessions", std::size_t{0});
    b.stats.test_sessions = j.value("test_sessions", std::size_t{0});
    b.stats.items = j.value("items", std::size_t{0});
    b.stats.avg_length = j.value("avg_length", 0.0);
    b.stats.train_instances = j.value("train_instances", std::size_t{0});
    b.stats.valid_instances = j.value("valid_instances", std::size_t{0});
    b.stats.test_instances = j.value("test_instances", std::size_t{0});
  }

  for (const auto* split : {&b.train, &b.valid, &b.test}) {
    for (const LabeledInstance& inst : *split) {
      if (inst.label >= b.vocab.size()) {
        throw DataError("instance label out of vocabulary range in " + dir);
      }
      for (int it : inst.prefix) {
        if (it < 0 || it >= b.vocab.size()) {
          throw DataError("instance item out of vocabulary range in " + dir);
        }
      }
    }
  }
  return b;
}

}  // namespace tiedgnn

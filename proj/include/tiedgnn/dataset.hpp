#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "tiedgnn/common.hpp"

namespace tiedgnn {

// One interaction record from a raw log.
struct RawEvent {
  std::string session_id;
  std::string item_id;
  std::int64_t order_key = 0;  // monotone within a session (timestamp-like)
};

enum class RawFormat { kTsv, kJsonl };

struct LoadReport {
  std::vector<RawEvent> events;
  std::size_t malformed = 0;
  std::size_t total_lines = 0;
};

// Parses raw events; malformed lines are counted and tolerated up to
// `tolerance` (fraction of non-empty lines), beyond which it is a hard error.
LoadReport load_sessions(const std::string& path, RawFormat format,
                         double tolerance = 0.05);

struct ItemVocab {
  std::unordered_map<std::string, int> forward;
  std::vector<std::string> reverse;

  int size() const { return static_cast<int>(reverse.size()); }
  int add(const std::string& raw);
  int index_of(const std::string& raw) const;  // -1 when absent
};

struct Session {
  std::vector<int> items;
  std::int64_t end_key = 0;  // max order_key among the source events

  std::size_t length() const { return items.size(); }
};

struct SessionCorpus {
  std::vector<Session> sessions;
  ItemVocab vocab;
};

// Groups events by session_id, orders each session by order_key, and maps raw
// item ids to dense indices in order of first appearance. When split_gap > 0,
// a jump in order_key larger than the gap starts a new session. Sessions
// longer than max_len keep only their most recent max_len items.
SessionCorpus sessionize(const std::vector<RawEvent>& events,
                         std::int64_t split_gap = 0, std::size_t max_len = 50);

// Iteratively removes items occurring fewer than min_item_count times and
// sessions shorter than min_len until a fixed point, then re-indexes the
// vocabulary densely in order of first appearance.
SessionCorpus filter_corpus(const SessionCorpus& corpus, int min_len = 2,
                            int min_item_count = 5);

struct LabeledInstance {
  std::vector<int> prefix;
  int label = -1;
};

// Sequence-splitting augmentation: [v1..vn] -> ([v1],v2), ..., ([v1..vn-1],vn).
std::vector<LabeledInstance> augment_split(const Session& s);

enum class SplitPolicy { kTailFraction, kLastKPeriods };

struct Splits {
  std::vector<LabeledInstance> train, valid, test;
  std::vector<Session> train_sessions;  // source sessions behind `train`
  std::size_t n_train_source = 0, n_test_source = 0;
};

// Holds out the most recent sessions as the test source, augments both sides,
// then moves a deterministic 10% per-instance sample of the training
// instances into the validation split.
//
// tail_fraction: `param` is the fraction of sessions (by end_key order) held
// out for testing. last_k_periods: sessions are bucketed by end_key /
// kPeriodSeconds and the `param` most recent distinct buckets are held out.
Splits make_splits(const SessionCorpus& corpus, SplitPolicy policy, double param,
                   std::uint64_t seed, double valid_fraction = 0.1);

inline constexpr std::int64_t kPeriodSeconds = 86400;

struct CorpusStats {
  std::size_t train_sessions = 0;
  std::size_t test_sessions = 0;
  std::size_t items = 0;
  double avg_length = 0.0;
  std::size_t train_instances = 0;
  std::size_t valid_instances = 0;
  std::size_t test_instances = 0;
};

CorpusStats compute_stats(const SessionCorpus& corpus, const Splits& splits);

// Preprocessed bundle directory layout:
//   vocab.tsv            index <TAB> raw_id
//   train.jsonl / valid.jsonl / test.jsonl
//                        {"prefix": [ints], "label": int} per line
//   train_sessions.jsonl {"items": [ints]} per line (graph-building source)
//   stats.json           counts per compute_stats
void write_bundle(const std::string& dir, const ItemVocab& vocab, const Splits& splits,
                  const CorpusStats& stats);

struct Bundle {
  ItemVocab vocab;
  std::vector<LabeledInstance> train, valid, test;
  std::vector<Session> train_sessions;
  CorpusStats stats;
};

Bundle read_bundle(const std::string& dir);

// Instances only (prefix/label jsonl); used by evaluate/predict paths.
std::vector<LabeledInstance> read_instances(const std::string& path);

}  // namespace tiedgnn

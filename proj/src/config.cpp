#include "tiedgnn/config.hpp"

#include <fstream>
#include <string>

#include "tiedgnn/common.hpp"

namespace tiedgnn {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Cuts an unquoted `#` comment off the line.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

int to_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    int v = std::stoi(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
  }
}

double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" +
                      value + "'");
  }
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
}

const char* ce_mode_name(CeMode m) {
  return m == CeMode::kPaperBinary ? "paper_binary" : "multiclass";
}

CeMode ce_mode_from(const std::string& key, const std::string& value) {
  if (value == "paper_binary") return CeMode::kPaperBinary;
  if (value == "multiclass") return CeMode::kMulticlass;
  throw ConfigError("config key '" + key + "': expected paper_binary or multiclass, got '" +
                    value + "'");
}

}  // namespace

void apply_config_kv(TrainConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "d") cfg.model.d = to_int(key, value);
  else if (key == "K") cfg.model.K = to_int(key, value);
  else if (key == "L") cfg.model.L = to_int(key, value);
  else if (key == "L_max") cfg.model.L_max = to_int(key, value);
  else if (key == "epsilon") cfg.model.epsilon = to_int(key, value);
  else if (key == "max_neighbors") cfg.model.max_neighbors = to_int(key, value);
  else if (key == "d_p") cfg.model.d_p = to_int(key, value);
  else if (key == "beta") cfg.model.beta = to_double(key, value);
  else if (key == "lambda") cfg.model.lambda = to_double(key, value);
  else if (key == "dropout") cfg.model.dropout = to_double(key, value);
  else if (key == "leaky_slope") cfg.model.leaky_slope = to_double(key, value);
  else if (key == "log_weight") cfg.model.log_weight = to_bool(key, value);
  else if (key == "ce_mode") cfg.model.ce_mode = ce_mode_from(key, value);
  else if (key == "batch_size") cfg.batch_size = to_int(key, value);
  else if (key == "weight_decay") cfg.weight_decay = to_double(key, value);
  else if (key == "base_lr") cfg.base_lr = to_double(key, value);
  else if (key == "lr_decay") cfg.lr_decay = to_double(key, value);
  else if (key == "lr_every") cfg.lr_every = to_int(key, value);
  else if (key == "max_epochs") cfg.max_epochs = to_int(key, value);
  else if (key == "patience") cfg.patience = to_int(key, value);
  else if (key == "seed") cfg.seed = to_u64(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig parse_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string body = trim(strip_comment(line));
    if (body.empty()) continue;
    std::size_t eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(body.substr(0, eq));
    std::string value = trim(body.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    }
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    apply_config_kv(cfg, key, value);
  }
  return cfg;
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return nlohmann::json{{"num_items", cfg.model.num_items},
                        {"d", cfg.model.d},
                        {"K", cfg.model.K},
                        {"d_p", cfg.model.d_p},
                        {"L", cfg.model.L},
                        {"L_max", cfg.model.L_max},
                        {"epsilon", cfg.model.epsilon},
                        {"max_neighbors", cfg.model.max_neighbors},
                        {"beta", cfg.model.beta},
                        {"lambda", cfg.model.lambda},
                        {"dropout", cfg.model.dropout},
                        {"leaky_slope", cfg.model.leaky_slope},
                        {"log_weight", cfg.model.log_weight},
                        {"ce_mode", ce_mode_name(cfg.model.ce_mode)},
                        {"batch_size", cfg.batch_size},
                        {"weight_decay", cfg.weight_decay},
                        {"base_lr", cfg.base_lr},
                        {"lr_decay", cfg.lr_decay},
                        {"lr_every", cfg.lr_every},
                        {"max_epochs", cfg.max_epochs},
                        {"patience", cfg.patience},
                        {"seed", cfg.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.model.num_items = j.at("num_items").get<int>();
  cfg.model.d = j.at("d").get<int>();
  cfg.model.K = j.at("K").get<int>();
  cfg.model.d_p = j.at("d_p").get<int>();
  cfg.model.L = j.at("L").get<int>();
  cfg.model.L_max = j.at("L_max").get<int>();
  cfg.model.epsilon = j.at("epsilon").get<int>();
  cfg.model.max_neighbors = j.at("max_neighbors").get<int>();
  cfg.model.beta = j.at("beta").get<double>();
  cfg.model.lambda = j.at("lambda").get<double>();
  cfg.model.dropout = j.at("dropout").get<double>();
  cfg.model.leaky_slope = j.at("leaky_slope").get<double>();
  cfg.model.log_weight = j.at("log_weight").get<bool>();
  cfg.model.ce_mode = ce_mode_from("ce_mode", j.at("ce_mode").get<std::string>());
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.weight_decay = j.at("weight_decay").get<double>();
  cfg.base_lr = j.at("base_lr").get<double>();
  cfg.lr_decay = j.at("lr_decay").get<double>();
  cfg.lr_every = j.at("lr_every").get<int>();
  cfg.max_epochs = j.at("max_epochs").get<int>();
  cfg.patience = j.at("patience").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

nlohmann::json train_report_to_json(const TrainReport& r, bool include_wall) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochStats& e : r.epochs) {
    nlohmann::json je{{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"valid_p20", e.valid_p20},
                      {"valid_mrr20", e.valid_mrr20},
                      {"lr", e.lr}};
    if (include_wall) je["wall_seconds"] = e.wall_seconds;
    epochs.push_back(std::move(je));
  }
  return nlohmann::json{{"epochs", std::move(epochs)},
                        {"best_epoch", r.best_epoch},
                        {"best_mrr20", r.best_mrr20},
                        {"stale_epochs", r.stale_epochs}};
}

TrainReport train_report_from_json(const nlohmann::json& j) {
  TrainReport r;
  for (const nlohmann::json& je : j.at("epochs")) {
    EpochStats e;
    e.epoch = je.at("epoch").get<int>();
    e.train_loss = je.at("train_loss").get<double>();
    e.valid_p20 = je.at("valid_p20").get<double>();
    e.valid_mrr20 = je.at("valid_mrr20").get<double>();
    e.lr = je.at("lr").get<double>();
    if (je.contains("wall_seconds")) e.wall_seconds = je.at("wall_seconds").get<double>();
    r.epochs.push_back(e);
  }
  r.best_epoch = j.at("best_epoch").get<int>();
  r.best_mrr20 = j.at("best_mrr20").get<double>();
  r.stale_epochs = j.at("stale_epochs").get<int>();
  return r;
}

void write_train_report(const std::string& path, const TrainReport& r) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report: " + path);
  out << train_report_to_json(r, true).dump(2) << "\n";
  if (!out) throw IoError("failed writing report: " + path);
}

}  // namespace tiedgnn

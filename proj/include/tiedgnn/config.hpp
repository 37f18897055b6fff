#pragma once

#include <string>

#include <json.hpp>

#include "tiedgnn/training.hpp"

namespace tiedgnn {

// Flat TOML-style config file: one `key = value` per line, `#` comments,
// optional double-quoted strings. Unknown keys are rejected.
TrainConfig parse_train_config(const std::string& path);

// Applies one key/value pair using the same keys as the file; command-line
// overrides funnel through here.
void apply_config_kv(TrainConfig& cfg, const std::string& key, const std::string& value);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::json train_report_to_json(const TrainReport& r, bool include_wall);
TrainReport train_report_from_json(const nlohmann::json& j);

void write_train_report(const std::string& path, const TrainReport& r);

}  // namespace tiedgnn

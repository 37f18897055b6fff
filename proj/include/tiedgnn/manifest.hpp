#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <json.hpp>

#include "tiedgnn/common.hpp"

namespace tiedgnn {

// Provenance record written next to every subcommand's outputs: the effective
// settings plus content hashes of everything read and produced.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::string> inputs;     // path -> content hash
  std::map<std::string, std::string> artifacts;  // path -> content hash
  std::string tool_version = kToolVersion;
  std::uint64_t seed = 0;
};

void write_manifest(const std::string& path, const RunManifest& m);

// hex64 content hash of a file; convenience over hash_file.
std::string file_hash_hex(const std::string& path);

}  // namespace tiedgnn

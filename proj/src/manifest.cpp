#include "tiedgnn/manifest.hpp"

#include <fstream>

namespace tiedgnn {

std::string file_hash_hex(const std::string& path) { return hex64(hash_file(path)); }

void write_manifest(const std::string& path, const RunManifest& m) {
  nlohmann::json j{{"command", m.command},
                   {"config", m.config},
                   {"inputs", m.inputs},
                   {"artifacts", m.artifacts},
                   {"tool_version", m.tool_version},
                   {"seed", m.seed}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing manifest: " + path);
}

}  // namespace tiedgnn

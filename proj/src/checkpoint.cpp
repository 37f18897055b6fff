#include "tiedgnn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tiedgnn/common.hpp"
#include "tiedgnn/config.hpp"

namespace tiedgnn {

namespace {

constexpr char kMagic[8] = {'T', 'I', 'E', 'D', 'G', 'N', 'N', '1'};

template <class T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void read_exact(std::istream& in, char* dst, std::size_t n, const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw IoError(std::string("checkpoint truncated while reading ") + what);
  }
}

template <class T>
T read_raw(std::istream& in, const char* what) {
  T v{};
  read_exact(in, reinterpret_cast<char*>(&v), sizeof(T), what);
  return v;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
}

void read_matrix(std::istream& in, Matrix& m, const char* what) {
  read_exact(in, reinterpret_cast<char*>(m.data()),
             sizeof(double) * static_cast<std::size_t>(m.size()), what);
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const AdamState& adam, const TrainConfig& config,
                     const TrainReport& report, const std::string& bundle_hash,
                     const std::string& graph_hash) {
  std::vector<const Parameter*> ptrs = params.all();

  nlohmann::json ptable = nlohmann::json::array();
  for (const Parameter* p : ptrs) {
    ptable.push_back({{"name", p->name},
                      {"rows", static_cast<std::int64_t>(p->value.rows())},
                      {"cols", static_cast<std::int64_t>(p->value.cols())}});
  }
  nlohmann::json meta{{"tool_version", kToolVersion},
                      {"config", train_config_to_json(config)},
                      {"bundle_hash", bundle_hash},
                      {"graph_hash", graph_hash},
                      {"report", train_report_to_json(report, false)},
                      {"adam_t", adam.t},
                      {"params", std::move(ptable)}};
  std::string header = meta.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_raw(out, kCheckpointVersion);
  write_raw(out, static_cast<std::uint64_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));

  for (const Parameter* p : ptrs) {
    write_matrix(out, p->value);
    auto it = adam.moments.find(p->name);
    if (it != adam.moments.end()) {
      if (it->second.m.rows() != p->value.rows() || it->second.m.cols() != p->value.cols() ||
          it->second.v.rows() != p->value.rows() || it->second.v.cols() != p->value.cols()) {
        throw IoError("optimizer state shape mismatch for " + p->name);
      }
      write_matrix(out, it->second.m);
      write_matrix(out, it->second.v);
    } else {
      Matrix zeros = Matrix::Zero(p->value.rows(), p->value.cols());
      write_matrix(out, zeros);
      write_matrix(out, zeros);
    }
  }
  out.flush();
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);

  char magic[8];
  read_exact(in, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a checkpoint file: " + path);
  }
  auto version = read_raw<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) +
                  " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  auto header_len = read_raw<std::uint64_t>(in, "header length");
  if (header_len == 0 || header_len > (1ULL << 30)) {
    throw IoError("corrupt checkpoint header length");
  }
  std::string header(header_len, '\0');
  read_exact(in, header.data(), header_len, "header");

  Checkpoint ck;
  nlohmann::json ptable;
  try {
    nlohmann::json meta = nlohmann::json::parse(header);
    ck.config = train_config_from_json(meta.at("config"));
    ck.report = train_report_from_json(meta.at("report"));
    ck.bundle_hash = meta.at("bundle_hash").get<std::string>();
    ck.graph_hash = meta.at("graph_hash").get<std::string>();
    ck.adam.t = meta.at("adam_t").get<std::int64_t>();
    ptable = meta.at("params");
    if (!ptable.is_array()) throw IoError("corrupt checkpoint parameter table");
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint metadata: " + std::string(e.what()));
  }

  try {
    ck.params = ModelParams::init(ck.config.model, 0);
  } catch (const std::exception& e) {
    throw IoError("corrupt checkpoint config: " + std::string(e.what()));
  }
  std::vector<Parameter*> ptrs = ck.params.all();
  if (ptable.size() != ptrs.size()) {
    throw IoError("checkpoint parameter table mismatch: " + std::to_string(ptable.size()) +
                  " entries, expected " + std::to_string(ptrs.size()));
  }
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    std::string name;
    std::int64_t rows = 0, cols = 0;
    try {
      name = ptable[i].at("name").get<std::string>();
      rows = ptable[i].at("rows").get<std::int64_t>();
      cols = ptable[i].at("cols").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError("corrupt checkpoint parameter entry: " + std::string(e.what()));
    }
    Parameter& p = *ptrs[i];
    if (name != p.name || rows != p.value.rows() || cols != p.value.cols()) {
      throw IoError("checkpoint parameter mismatch at index " + std::to_string(i) + ": got " +
                    name + " [" + std::to_string(rows) + "," + std::to_string(cols) +
                    "], expected " + p.name + " [" + std::to_string(p.value.rows()) + "," +
                    std::to_string(p.value.cols()) + "]");
    }
    read_matrix(in, p.value, p.name.c_str());
    p.zero_grad();
    AdamState::Moments mom;
    mom.m.resize(rows, cols);
    mom.v.resize(rows, cols);
    read_matrix(in, mom.m, p.name.c_str());
    read_matrix(in, mom.v, p.name.c_str());
    ck.adam.moments[p.name] = std::move(mom);
  }
  if (in.peek() != std::ifstream::traits_type::eof()) {
    throw IoError("trailing bytes in checkpoint: " + path);
  }
  return ck;
}

}  // namespace tiedgnn

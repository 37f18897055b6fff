#include "tiedgnn/common.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

namespace tiedgnn {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file for hashing: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    std::streamsize got = in.gcount();
    if (got > 0) h = fnv1a64(buf.data(), static_cast<std::size_t>(got), h);
  }
  return h;
}

}  // namespace tiedgnn

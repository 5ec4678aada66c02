#include "gecfuse/checkpoint.hpp"
#include "gecfuse/tensor.hpp"

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gecfuse {

namespace detail {

bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "hash: cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
    if (!in) break;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace gecfuse

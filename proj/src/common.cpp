#include "neuronalloc/common.hpp"

#include <charconv>
#include <cstdio>
#include <fmt/format.h>

namespace nalloc {

std::uint64_t content_fingerprint(std::string_view bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

std::string fingerprint_hex(std::uint64_t fp) {
  return fmt::format("{:016x}", fp);
}

std::uint64_t parse_fingerprint(std::string_view hex) {
  std::uint64_t fp = 0;
  const auto [ptr, ec] = std::from_chars(hex.data(), hex.data() + hex.size(), fp, 16);
  if (ec != std::errc{} || ptr != hex.data() + hex.size() || hex.empty()) {
    throw data_error("malformed fingerprint: " + std::string(hex));
  }
  return fp;
}

LogFn stderr_logger() {
  return [](std::string_view msg) {
    std::fwrite(msg.data(), 1, msg.size(), stderr);
    std::fputc('\n', stderr);
  };
}

}  // namespace nalloc

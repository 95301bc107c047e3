#include "katrec/rng.hpp"

#include <sstream>

#include "katrec/error.hpp"

namespace katrec {

const char* stream_name(Stream s) {
  switch (s) {
    case Stream::triplet_negatives: return "triplet_negatives";
    case Stream::eval_negatives: return "eval_negatives";
    case Stream::masking: return "masking";
    case Stream::init: return "init";
    case Stream::dropout: return "dropout";
  }
  return "unknown";
}

std::mt19937_64 derive_rng(std::uint64_t seed, Stream stream, std::uint64_t index) {
  auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
  auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  const auto s = static_cast<std::uint64_t>(stream);
  std::seed_seq seq{lo(seed), hi(seed), lo(s), lo(index), hi(index)};
  return std::mt19937_64(seq);
}

RngStreams::RngStreams(std::uint64_t seed, std::optional<std::uint64_t> dropout_seed) : seed_(seed) {
  for (Stream s : kAllStreams) {
    const std::uint64_t base = (s == Stream::dropout && dropout_seed) ? *dropout_seed : seed;
    engines_[slot(s)] = derive_rng(base, s);
  }
}

std::string RngStreams::serialize() const {
  std::ostringstream os;
  for (Stream s : kAllStreams) os << stream_name(s) << ' ' << engines_[slot(s)] << '\n';
  return os.str();
}

void RngStreams::deserialize(const std::string& text) {
  std::istringstream is(text);
  for (Stream s : kAllStreams) {
    std::string name;
    is >> name;
    if (name != stream_name(s)) fail("RngStreams::deserialize", "expected stream '", stream_name(s), "', got '", name, "'");
    is >> engines_[slot(s)];
    if (!is) fail("RngStreams::deserialize", "corrupt state for stream '", name, "'");
  }
}

}  // namespace katrec

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>

namespace katrec {

enum class Stream : std::uint64_t { triplet_negatives = 1, eval_negatives, masking, init, dropout };

inline constexpr std::array<Stream, 5> kAllStreams{Stream::triplet_negatives, Stream::eval_negatives,
                                                   Stream::masking, Stream::init, Stream::dropout};

const char* stream_name(Stream s);

/// Engine seeded from (seed, stream, index) via seed_seq; used where a draw
/// must not depend on how many draws other consumers made.
std::mt19937_64 derive_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0);

/// Independent seeded engines, one per sampling concern.
class RngStreams {
 public:
  explicit RngStreams(std::uint64_t seed, std::optional<std::uint64_t> dropout_seed = std::nullopt);

  std::mt19937_64& get(Stream s) { return engines_[slot(s)]; }
  std::uint64_t seed() const { return seed_; }

  /// Text form of all engine states, one line per stream.
  std::string serialize() const;
  void deserialize(const std::string& text);

 private:
  static std::size_t slot(Stream s) { return static_cast<std::size_t>(s) - 1; }

  std::uint64_t seed_;
  std::array<std::mt19937_64, kAllStreams.size()> engines_;
};

}  // namespace katrec

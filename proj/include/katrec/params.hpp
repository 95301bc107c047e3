#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "katrec/autodiff.hpp"

namespace katrec::ad {

/// Named, insertion-ordered collection of trainable leaves.
class ParameterStore {
 public:
  Var add(std::string name, Tensor init);
  const Var& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  const std::vector<Var>& all() const { return params_; }
  std::vector<Var> with_prefix(std::string_view prefix) const;
  std::size_t size() const { return params_.size(); }

  /// FNV-1a over names and raw value bytes of the selected parameters.
  std::uint64_t digest(std::string_view prefix = {}) const;

  /// Rounds every value to the nearest 32-bit float.
  void round_to_float();

 private:
  std::vector<Var> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

std::uint64_t digest(const std::vector<Var>& params);

/// Samples from N(0, std) truncated to [low, high] by inverse-CDF sampling.
Tensor trunc_normal_init(const Shape& shape, double low, double high, double std, std::mt19937_64& rng);

}  // namespace katrec::ad

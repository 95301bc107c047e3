#include "katrec/params.hpp"

#include <algorithm>
#include <boost/math/special_functions/erf.hpp>
#include <cmath>
#include <cstring>

#include "katrec/error.hpp"

namespace katrec::ad {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= kFnvPrime;
  }
}

void fnv_param(std::uint64_t& h, const Var& p) {
  fnv(h, p.name().data(), p.name().size());
  const auto values = p.value().data();
  fnv(h, values.data(), values.size() * sizeof(double));
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

Var ParameterStore::add(std::string name, Tensor init) {
  if (index_.count(name)) fail("ParameterStore::add", "duplicate parameter '", name, "'");
  index_.emplace(name, params_.size());
  params_.push_back(Var::parameter(std::move(init), std::move(name)));
  return params_.back();
}

const Var& ParameterStore::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) fail("ParameterStore::get", "unknown parameter '", name, "'");
  return params_[it->second];
}

bool ParameterStore::contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

std::vector<Var> ParameterStore::with_prefix(std::string_view prefix) const {
  std::vector<Var> out;
  for (const auto& p : params_) {
    if (std::string_view(p.name()).substr(0, prefix.size()) == prefix) out.push_back(p);
  }
  return out;
}

std::uint64_t ParameterStore::digest(std::string_view prefix) const { return ad::digest(with_prefix(prefix)); }

void ParameterStore::round_to_float() {
  for (auto& p : params_) {
    for (auto& v : p.mutable_value().data()) v = static_cast<double>(static_cast<float>(v));
  }
}

std::uint64_t digest(const std::vector<Var>& params) {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : params) fnv_param(h, p);
  return h;
}

Tensor trunc_normal_init(const Shape& shape, double low, double high, double std, std::mt19937_64& rng) {
  if (!(low < high)) fail("trunc_normal_init", "empty interval [", low, ", ", high, "]");
  if (!(std > 0.0)) fail("trunc_normal_init", "std must be positive, got ", std);
  const double cdf_lo = normal_cdf(low / std);
  const double cdf_hi = normal_cdf(high / std);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Tensor out(shape);
  for (auto& v : out.data()) {
    const double u = cdf_lo + (cdf_hi - cdf_lo) * unif(rng);
    double x = low;
    if (u > 0.0 && u < 1.0) x = std * std::sqrt(2.0) * boost::math::erf_inv(2.0 * u - 1.0);
    v = std::clamp(x, low, high);
  }
  return out;
}

}  // namespace katrec::ad

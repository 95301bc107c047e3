#pragma once

// Small fixture builders shared by the model-level suites.

#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "katrec/autodiff.hpp"
#include "katrec/data.hpp"

namespace katrec::testing {

inline data::FilterConfig loose_filter(std::size_t min_user = 3) {
  return {.min_user_interactions = min_user,
          .min_item_interactions = 1,
          .min_entity_occurrences = 1,
          .min_relation_occurrences = 1};
}

inline std::string line_of(const std::string& user, const std::vector<std::string>& items) {
  std::string s = user;
  for (const auto& i : items) s += " " + i;
  return s + "\n";
}

inline data::InteractionLog parse_log(const std::string& text, const data::FilterConfig& f = loose_filter()) {
  std::istringstream in(text);
  return data::parse_interactions(in, f);
}

inline data::KnowledgeGraph parse_kg(const std::string& text, const data::InteractionLog& log,
                                     const data::FilterConfig& f = loose_filter()) {
  std::istringstream in(text);
  return data::parse_triplets(in, log, f);
}

/// Overwrites every value with a uniform draw, so tiny instances are not
/// dominated by the near-zero production initialization.
inline void randomize(const std::vector<ad::Var>& params, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> unif(lo, hi);
  for (ad::Var p : params)
    for (auto& v : p.mutable_value().data()) v = unif(rng);
}

/// A small collaborative graph: 6 users over 6 items, 2 relations linking
/// items to 3 attribute entities.
inline std::pair<data::InteractionLog, data::KnowledgeGraph> small_collaborative_graph() {
  std::string log_text;
  const std::vector<std::string> items{"a", "b", "c", "d", "e", "f"};
  for (int u = 0; u < 6; ++u) {
    std::vector<std::string> seq;
    for (int k = 0; k < 4; ++k) seq.push_back(items[(u + k * (u % 2 + 1)) % 6]);
    log_text += line_of("u" + std::to_string(u), seq);
  }
  auto log = parse_log(log_text);
  const std::string kg_text =
      "a\tgenre\tx\nb\tgenre\tx\nc\tgenre\ty\nd\tgenre\ty\ne\tgenre\tz\nf\tgenre\tz\n"
      "a\tsimilar\tb\nc\tsimilar\td\ne\tsimilar\tf\n";
  auto kg = parse_kg(kg_text, log);
  auto cg = data::build_collaborative_graph(log, kg);
  return {std::move(log), std::move(cg)};
}

}  // namespace katrec::testing

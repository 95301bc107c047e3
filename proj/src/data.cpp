#include "katrec/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "katrec/error.hpp"

namespace katrec::data {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::ifstream open_input(const std::filesystem::path& path, const char* where) {
  std::ifstream in(path);
  if (!in) fail(where, "cannot open '", path.string(), "'");
  return in;
}

}  // namespace

// ---- InteractionLog ---------------------------------------------------------

std::size_t InteractionLog::num_interactions() const {
  std::size_t n = 0;
  for (const auto& s : sequences_) n += s.size();
  return n;
}

double InteractionLog::density() const {
  if (num_users() == 0 || num_items() == 0) return 0.0;
  return static_cast<double>(num_interactions()) /
         (static_cast<double>(num_users()) * static_cast<double>(num_items()));
}

namespace {
void require_split(std::span<const ItemId> s, UserId u) {
  if (s.size() < 3) fail("InteractionLog", "user ", u, " has ", s.size(), " interactions; a split needs at least 3");
}
}  // namespace

std::span<const ItemId> InteractionLog::train(UserId u) const {
  const auto& s = sequences_.at(u);
  require_split(s, u);
  return std::span(s).first(s.size() - 2);
}

ItemId InteractionLog::val(UserId u) const {
  const auto& s = sequences_.at(u);
  require_split(s, u);
  return s[s.size() - 2];
}

ItemId InteractionLog::test(UserId u) const {
  require_split(sequences_.at(u), u);
  return sequences_.at(u).back();
}

std::span<const ItemId> InteractionLog::history(UserId u, Split split) const {
  const auto& s = sequences_.at(u);
  require_split(s, u);
  return std::span(s).first(s.size() - (split == Split::val ? 2 : 1));
}

InteractionLog InteractionLog::from_sequences(std::vector<std::string> user_raw, std::vector<std::string> item_raw,
                                              std::vector<std::vector<ItemId>> sequences) {
  if (user_raw.size() != sequences.size()) fail("InteractionLog", "user/sequence count mismatch");
  InteractionLog log;
  log.user_raw_ = std::move(user_raw);
  log.item_raw_ = std::move(item_raw);
  for (std::size_t i = 0; i < log.item_raw_.size(); ++i) log.item_index_.emplace(log.item_raw_[i], static_cast<ItemId>(i));
  for (const auto& s : sequences) {
    if (s.empty()) fail("InteractionLog", "empty user sequence");
    for (ItemId i : s) {
      if (i >= log.item_raw_.size()) fail("InteractionLog", "item id ", i, " out of range");
    }
  }
  log.sequences_ = std::move(sequences);
  return log;
}

InteractionLog parse_interactions(std::istream& in, const FilterConfig& filter, const std::string& source) {
  const char* where = "load_interactions";
  std::vector<std::string> users;
  std::vector<std::vector<std::string>> raw;
  std::unordered_set<std::string> seen_users;
  std::unordered_set<std::string> all_items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.find('\t') != std::string::npos) {
      fail(where, source, ":", lineno, ": expected space-separated ids, found a tab");
    }
    std::istringstream fields(t);
    std::string user;
    fields >> user;
    if (!seen_users.insert(user).second) fail(where, source, ":", lineno, ": duplicate user '", user, "'");
    std::vector<std::string> items;
    std::unordered_set<std::string> dedup;
    for (std::string item; fields >> item;) {
      all_items.insert(item);
      // Implicit feedback: repeated consumption collapses to the first interaction.
      if (dedup.insert(item).second) items.push_back(item);
    }
    users.push_back(user);
    raw.push_back(std::move(items));
  }

  // Iterate the user/item k-core until nothing changes.
  const std::size_t min_user = std::max<std::size_t>(filter.min_user_interactions, 3);
  std::vector<bool> keep_user(users.size(), true);
  std::unordered_set<std::string> dropped;
  for (bool changed = true; changed;) {
    changed = false;
    std::unordered_map<std::string, std::size_t> item_count;
    for (std::size_t u = 0; u < users.size(); ++u) {
      if (!keep_user[u]) continue;
      for (const auto& i : raw[u]) ++item_count[i];
    }
    for (auto& [item, count] : item_count) {
      if (count < filter.min_item_interactions) dropped.insert(item);
    }
    for (std::size_t u = 0; u < users.size(); ++u) {
      if (!keep_user[u]) continue;
      auto& seq = raw[u];
      const auto before = seq.size();
      std::erase_if(seq, [&](const std::string& i) { return dropped.count(i) > 0; });
      if (seq.size() != before) changed = true;
      if (seq.size() < min_user) {
        keep_user[u] = false;
        changed = true;
      }
    }
  }

  InteractionLog log;
  for (std::size_t u = 0; u < users.size(); ++u) {
    if (!keep_user[u]) continue;
    std::vector<ItemId> seq;
    for (const auto& item : raw[u]) {
      auto [it, inserted] = log.item_index_.try_emplace(item, static_cast<ItemId>(log.item_raw_.size()));
      if (inserted) log.item_raw_.push_back(item);
      seq.push_back(it->second);
    }
    log.user_raw_.push_back(users[u]);
    log.sequences_.push_back(std::move(seq));
  }
  if (log.sequences_.empty()) fail(where, source, ": no users remain after filtering");
  for (const auto& item : all_items) {
    if (!log.item_index_.count(item)) log.dropped_items_.insert(item);
  }
  return log;
}

InteractionLog load_interactions(const std::filesystem::path& path, const FilterConfig& filter) {
  auto in = open_input(path, "load_interactions");
  return parse_interactions(in, filter, path.string());
}

// ---- KnowledgeGraph ---------------------------------------------------------

RelationId KnowledgeGraph::inverse(RelationId r) const {
  const auto kg = static_cast<RelationId>(num_kg_relations());
  if (r < kg) return r + kg;
  if (r < 2 * kg) return r - kg;
  if (collaborative_ && r == interact()) return interact_inverse();
  if (collaborative_ && r == interact_inverse()) return interact();
  fail("KnowledgeGraph::inverse", "relation ", r, " out of range ", num_relations());
}

std::vector<Triplet> KnowledgeGraph::edges() const {
  std::vector<Triplet> out;
  out.reserve(num_edges());
  for (NodeId h = 0; h < num_nodes(); ++h) {
    for (std::size_t e = offsets_[h]; e < offsets_[h + 1]; ++e) out.push_back({h, relations_[e], tails_[e]});
  }
  return out;
}

namespace {
std::uint64_t edge_key(const Triplet& t, std::size_t num_relations, std::size_t num_nodes) {
  return (static_cast<std::uint64_t>(t.head) * num_relations + t.relation) * num_nodes + t.tail;
}
}  // namespace

bool KnowledgeGraph::contains(const Triplet& t) const {
  if (t.head >= num_nodes() || t.tail >= num_nodes() || t.relation >= num_relations()) return false;
  return edge_keys_.count(edge_key(t, num_relations(), num_nodes())) > 0;
}

std::pair<NodeId, NodeId> KnowledgeGraph::tail_domain(RelationId r) const {
  if (r < 2 * num_kg_relations()) return {0, static_cast<NodeId>(num_entities_)};
  if (collaborative_ && r == interact()) return {0, static_cast<NodeId>(num_items_)};
  if (collaborative_ && r == interact_inverse()) {
    return {static_cast<NodeId>(num_entities_), static_cast<NodeId>(num_nodes())};
  }
  fail("KnowledgeGraph::tail_domain", "relation ", r, " out of range ", num_relations());
}

void KnowledgeGraph::build_adjacency(std::vector<Triplet> edges) {
  for (const auto& e : edges) {
    if (e.head >= num_nodes() || e.tail >= num_nodes() || e.relation >= num_relations()) {
      fail("KnowledgeGraph", "edge (", e.head, ", ", e.relation, ", ", e.tail, ") out of range");
    }
  }
  std::sort(edges.begin(), edges.end(), [](const Triplet& a, const Triplet& b) {
    return std::tie(a.head, a.relation, a.tail) < std::tie(b.head, b.relation, b.tail);
  });
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  offsets_.assign(num_nodes() + 1, 0);
  relations_.clear();
  tails_.clear();
  edge_keys_.clear();
  for (const auto& e : edges) {
    ++offsets_[e.head + 1];
    relations_.push_back(e.relation);
    tails_.push_back(e.tail);
    edge_keys_.insert(edge_key(e, num_relations(), num_nodes()));
  }
  std::partial_sum(offsets_.begin(), offsets_.end(), offsets_.begin());
}

KnowledgeGraph parse_triplets(std::istream& in, const InteractionLog& log, const FilterConfig& filter,
                              TripletLoadStats* stats, const std::string& source) {
  const char* where = "load_triplets";
  TripletLoadStats local;
  TripletLoadStats& st = stats ? *stats : local;
  st = {};

  struct RawTriplet {
    std::string head, relation, tail;
    bool operator<(const RawTriplet& o) const {
      return std::tie(head, relation, tail) < std::tie(o.head, o.relation, o.tail);
    }
  };
  std::vector<RawTriplet> raw;
  std::set<RawTriplet> seen;
  auto is_dropped_item = [&](const std::string& id) { return log.dropped_items().count(id) > 0; };

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    ++st.lines;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(trim(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start)));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty()) {
      fail(where, source, ":", lineno, ": expected head<TAB>relation<TAB>tail");
    }
    if (is_dropped_item(fields[0]) || is_dropped_item(fields[2])) {
      ++st.skipped_unmapped_items;
      continue;
    }
    RawTriplet t{fields[0], fields[1], fields[2]};
    if (!seen.insert(t).second) {
      ++st.duplicates;
      continue;
    }
    raw.push_back(std::move(t));
  }

  auto is_item = [&](const std::string& id) { return log.item_index().count(id) > 0; };
  const std::size_t before = raw.size();
  for (bool changed = true; changed;) {
    changed = false;
    std::unordered_map<std::string, std::size_t> rel_count, ent_count;
    for (const auto& t : raw) {
      ++rel_count[t.relation];
      if (!is_item(t.head)) ++ent_count[t.head];
      if (!is_item(t.tail)) ++ent_count[t.tail];
    }
    const auto n = raw.size();
    std::erase_if(raw, [&](const RawTriplet& t) {
      if (rel_count[t.relation] < filter.min_relation_occurrences) return true;
      if (!is_item(t.head) && ent_count[t.head] < filter.min_entity_occurrences) return true;
      if (!is_item(t.tail) && ent_count[t.tail] < filter.min_entity_occurrences) return true;
      return false;
    });
    changed = raw.size() != n;
  }
  st.removed_by_filter = before - raw.size();

  KnowledgeGraph kg;
  kg.num_items_ = log.num_items();
  kg.entity_raw_ = log.item_raw();
  std::unordered_map<std::string, NodeId> entity_index(log.item_index().begin(), log.item_index().end());
  std::unordered_map<std::string, RelationId> relation_index;
  auto entity_id = [&](const std::string& id) {
    auto [it, inserted] = entity_index.try_emplace(id, static_cast<NodeId>(kg.entity_raw_.size()));
    if (inserted) kg.entity_raw_.push_back(id);
    return it->second;
  };
  for (const auto& t : raw) {
    auto [rit, inserted] = relation_index.try_emplace(t.relation, static_cast<RelationId>(kg.relation_raw_.size()));
    if (inserted) kg.relation_raw_.push_back(t.relation);
    const NodeId h = entity_id(t.head);
    const NodeId tl = entity_id(t.tail);
    kg.kg_triplets_.push_back({h, rit->second, tl});
  }
  kg.num_entities_ = kg.entity_raw_.size();

  const auto R = static_cast<RelationId>(kg.num_kg_relations());
  std::vector<Triplet> edges;
  for (const auto& t : kg.kg_triplets_) {
    edges.push_back(t);
    edges.push_back({t.tail, t.relation + R, t.head});
  }
  kg.build_adjacency(std::move(edges));
  return kg;
}

KnowledgeGraph load_triplets(const std::filesystem::path& path, const InteractionLog& log,
                             const FilterConfig& filter, TripletLoadStats* stats) {
  auto in = open_input(path, "load_triplets");
  return parse_triplets(in, log, filter, stats, path.string());
}

KnowledgeGraph build_collaborative_graph(const InteractionLog& log, const KnowledgeGraph& kg) {
  if (kg.collaborative()) fail("build_collaborative_graph", "graph already contains user nodes");
  if (kg.num_items() != log.num_items()) {
    fail("build_collaborative_graph", "graph has ", kg.num_items(), " items, log has ", log.num_items());
  }
  KnowledgeGraph out = kg;
  out.collaborative_ = true;
  out.num_users_ = log.num_users();
  std::vector<Triplet> edges = kg.edges();
  for (UserId u = 0; u < log.num_users(); ++u) {
    const NodeId un = out.user_node(u);
    for (ItemId i : log.train(u)) {
      edges.push_back({un, out.interact(), i});
      edges.push_back({i, out.interact_inverse(), un});
    }
  }
  out.build_adjacency(std::move(edges));
  return out;
}

void write_id_map(std::ostream& out, const InteractionLog& log, const KnowledgeGraph& kg) {
  out << "kind\traw_id\tid\n";
  for (std::size_t u = 0; u < log.num_users(); ++u) out << "user\t" << log.user_raw()[u] << '\t' << u << '\n';
  for (std::size_t i = 0; i < log.num_items(); ++i) out << "item\t" << log.item_raw()[i] << '\t' << i << '\n';
  for (std::size_t e = kg.num_items(); e < kg.num_entities(); ++e) {
    out << "entity\t" << kg.entity_raw()[e] << '\t' << e << '\n';
  }
  for (std::size_t r = 0; r < kg.num_kg_relations(); ++r) {
    out << "relation\t" << kg.relation_raw()[r] << '\t' << r << '\n';
  }
}

// ---- samplers ---------------------------------------------------------------

NodeId sample_negative_tail(const KnowledgeGraph& kg, const Triplet& positive, std::mt19937_64& rng) {
  const auto [lo, hi] = kg.tail_domain(positive.relation);
  std::size_t observed = 0;
  const auto off = kg.offsets();
  for (std::size_t e = off[positive.head]; e < off[positive.head + 1]; ++e) {
    if (kg.edge_relations()[e] == positive.relation) ++observed;
  }
  if (observed >= hi - lo) {
    fail("sample_negative_tail", "head ", positive.head, " is linked to every valid tail of relation ",
         positive.relation);
  }
  std::uniform_int_distribution<NodeId> pick(lo, hi - 1);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const NodeId t = pick(rng);
    if (!kg.contains({positive.head, positive.relation, t})) return t;
  }
  // Dense neighbourhood: enumerate the remaining tails.
  std::vector<NodeId> valid;
  for (NodeId t = lo; t < hi; ++t) {
    if (!kg.contains({positive.head, positive.relation, t})) valid.push_back(t);
  }
  std::uniform_int_distribution<std::size_t> idx(0, valid.size() - 1);
  return valid[idx(rng)];
}

std::vector<TripletBatch> make_triplet_batches(const KnowledgeGraph& kg, std::size_t batch_size,
                                               std::mt19937_64& rng) {
  if (batch_size == 0) fail("make_triplet_batches", "batch size must be positive");
  std::vector<Triplet> edges = kg.edges();
  std::shuffle(edges.begin(), edges.end(), rng);
  auto corruptible = [&kg](const Triplet& e) {
    const auto [lo, hi] = kg.tail_domain(e.relation);
    std::size_t observed = 0;
    for (std::size_t k = kg.offsets()[e.head]; k < kg.offsets()[e.head + 1]; ++k) {
      if (kg.edge_relations()[k] == e.relation) ++observed;
    }
    return observed < hi - lo;
  };
  std::vector<TripletBatch> batches;
  for (std::size_t start = 0; start < edges.size(); start += batch_size) {
    TripletBatch b;
    for (std::size_t i = start; i < std::min(edges.size(), start + batch_size); ++i) {
      const auto& e = edges[i];
      if (!corruptible(e)) {
        ++b.skipped;
        continue;
      }
      b.heads.push_back(e.head);
      b.relations.push_back(e.relation);
      b.tails.push_back(e.tail);
      b.negative_tails.push_back(sample_negative_tail(kg, e, rng));
    }
    if (b.size() > 0 || b.skipped > 0) batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<ItemId> sample_eval_negatives(const InteractionLog& log, UserId user, std::size_t n,
                                          std::mt19937_64& rng, NegativeSampling mode) {
  const auto history = log.sequence(user);
  std::vector<bool> seen(log.num_items(), false);
  for (ItemId i : history) seen[i] = true;
  std::vector<ItemId> eligible;
  for (ItemId i = 0; i < log.num_items(); ++i) {
    if (!seen[i]) eligible.push_back(i);
  }
  if (eligible.size() < n) {
    fail("sample_eval_negatives", "user ", user, " has only ", eligible.size(), " eligible items, need ", n);
  }
  if (mode == NegativeSampling::uniform) {
    for (std::size_t k = 0; k < n; ++k) {
      std::uniform_int_distribution<std::size_t> idx(k, eligible.size() - 1);
      std::swap(eligible[k], eligible[idx(rng)]);
    }
    eligible.resize(n);
    return eligible;
  }
  // Weighted sampling without replacement (Efraimidis-Spirakis keys).
  std::vector<double> freq(log.num_items(), 0.0);
  for (UserId u = 0; u < log.num_users(); ++u) {
    for (ItemId i : log.sequence(u)) freq[i] += 1.0;
  }
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::pair<double, ItemId>> keyed;
  for (ItemId i : eligible) {
    const double u = std::max(unif(rng), 1e-300);
    keyed.emplace_back(std::log(u) / std::max(freq[i], 1.0), i);
  }
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(n), keyed.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<ItemId> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(keyed[k].second);
  return out;
}

MaskedBatch build_masked_batch(std::span<const std::span<const ItemId>> sequences, std::span<const UserId> users,
                               double mask_prob, std::size_t max_len, const Vocabulary& vocab,
                               std::mt19937_64& rng) {
  if (!(mask_prob > 0.0 && mask_prob <= 1.0)) fail("build_masked_batch", "mask probability ", mask_prob, " not in (0, 1]");
  if (max_len == 0) fail("build_masked_batch", "max_len must be positive");
  if (users.size() != sequences.size()) fail("build_masked_batch", "user/sequence count mismatch");
  MaskedBatch batch;
  batch.max_len = max_len;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    auto seq = sequences[s];
    if (seq.empty()) {
      ++batch.skipped_empty;
      continue;
    }
    if (seq.size() > max_len) seq = seq.last(max_len);
    const std::size_t row = batch.users.size();
    const std::size_t pad = max_len - seq.size();
    batch.users.push_back(users[s]);
    batch.tokens.resize((row + 1) * max_len, Vocabulary::pad());
    batch.masked.resize((row + 1) * max_len, 0);
    batch.padding.resize((row + 1) * max_len, 0);
    std::fill_n(batch.padding.begin() + static_cast<std::ptrdiff_t>(row * max_len), pad, 1);
    std::vector<std::size_t> chosen;
    for (std::size_t k = 0; k < seq.size(); ++k) {
      batch.tokens[row * max_len + pad + k] = vocab.token(seq[k]);
      if (unif(rng) < mask_prob) chosen.push_back(pad + k);
    }
    if (chosen.empty()) {
      std::uniform_int_distribution<std::size_t> idx(0, seq.size() - 1);
      chosen.push_back(pad + idx(rng));
    }
    for (std::size_t pos : chosen) {
      batch.targets.push_back({row, pos, seq[pos - pad]});
      batch.tokens[row * max_len + pos] = vocab.mask();
      batch.masked[row * max_len + pos] = 1;
    }
  }
  return batch;
}

std::vector<std::size_t> build_inference_input(std::span<const ItemId> sequence, std::size_t max_len,
                                               const Vocabulary& vocab) {
  if (max_len == 0) fail("build_inference_input", "max_len must be positive");
  if (sequence.size() > max_len - 1) sequence = sequence.last(max_len - 1);
  std::vector<std::size_t> out(max_len, Vocabulary::pad());
  const std::size_t pad = max_len - 1 - sequence.size();
  for (std::size_t k = 0; k < sequence.size(); ++k) out[pad + k] = vocab.token(sequence[k]);
  out.back() = vocab.mask();
  return out;
}

}  // namespace katrec::data

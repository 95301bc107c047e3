#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace katrec::data {

// Dense zero-based ids. Items are a prefix of entities; user nodes follow the
// entities in the collaborative graph's node space.
using UserId = std::uint32_t;
using ItemId = std::uint32_t;
using NodeId = std::uint32_t;
using RelationId = std::uint32_t;

struct FilterConfig {
  std::size_t min_user_interactions = 10;
  std::size_t min_item_interactions = 10;
  std::size_t min_entity_occurrences = 10;
  std::size_t min_relation_occurrences = 50;
};

enum class Split { val, test };

/// Chronological per-user item sequences after k-core filtering and id
/// remapping. The last item is the test target, the one before it the
/// validation target, and everything earlier is training history.
class InteractionLog {
 public:
  std::size_t num_users() const { return sequences_.size(); }
  std::size_t num_items() const { return item_raw_.size(); }
  std::size_t num_interactions() const;
  double density() const;

  std::span<const ItemId> sequence(UserId u) const { return sequences_.at(u); }
  std::span<const ItemId> train(UserId u) const;
  ItemId val(UserId u) const;
  ItemId test(UserId u) const;
  /// Input history for predicting the given split's target.
  std::span<const ItemId> history(UserId u, Split split) const;
  ItemId target(UserId u, Split split) const { return split == Split::val ? val(u) : test(u); }

  const std::vector<std::string>& user_raw() const { return user_raw_; }
  const std::vector<std::string>& item_raw() const { return item_raw_; }
  const std::unordered_map<std::string, ItemId>& item_index() const { return item_index_; }
  /// Raw item ids that appeared in the input but were removed by filtering.
  const std::unordered_set<std::string>& dropped_items() const { return dropped_items_; }

  static InteractionLog from_sequences(std::vector<std::string> user_raw, std::vector<std::string> item_raw,
                                       std::vector<std::vector<ItemId>> sequences);

 private:
  friend InteractionLog parse_interactions(std::istream&, const FilterConfig&, const std::string&);

  std::vector<std::string> user_raw_;
  std::vector<std::string> item_raw_;
  std::unordered_map<std::string, ItemId> item_index_;
  std::unordered_set<std::string> dropped_items_;
  std::vector<std::vector<ItemId>> sequences_;
};

InteractionLog parse_interactions(std::istream& in, const FilterConfig& filter, const std::string& source = "<stream>");
InteractionLog load_interactions(const std::filesystem::path& path, const FilterConfig& filter);

struct Triplet {
  NodeId head;
  RelationId relation;
  NodeId tail;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

struct TripletLoadStats {
  std::size_t lines = 0;
  std::size_t skipped_unmapped_items = 0;
  std::size_t removed_by_filter = 0;
  std::size_t duplicates = 0;
};

/// Directed multi-relational graph stored as CSR adjacency. Relation ids:
/// [0, R) knowledge-graph relations, [R, 2R) their inverses, then (in a
/// collaborative graph) the interaction relation and its inverse.
class KnowledgeGraph {
 public:
  std::size_t num_items() const { return num_items_; }
  std::size_t num_entities() const { return num_entities_; }
  std::size_t num_users() const { return num_users_; }
  std::size_t num_nodes() const { return num_entities_ + num_users_; }
  std::size_t num_kg_relations() const { return relation_raw_.size(); }
  std::size_t num_relations() const { return 2 * num_kg_relations() + (collaborative_ ? 2 : 0); }
  bool collaborative() const { return collaborative_; }

  RelationId inverse(RelationId r) const;
  RelationId interact() const { return static_cast<RelationId>(2 * num_kg_relations()); }
  RelationId interact_inverse() const { return interact() + 1; }
  NodeId user_node(std::size_t user) const { return static_cast<NodeId>(num_entities_ + user); }

  /// Forward knowledge-graph triplets (no inverses, no interaction edges).
  const std::vector<Triplet>& kg_triplets() const { return kg_triplets_; }

  std::size_t num_edges() const { return tails_.size(); }
  std::span<const std::size_t> offsets() const { return offsets_; }
  std::span<const RelationId> edge_relations() const { return relations_; }
  std::span<const NodeId> edge_tails() const { return tails_; }
  std::size_t degree(NodeId h) const { return offsets_[h + 1] - offsets_[h]; }
  /// Every directed edge, in adjacency order.
  std::vector<Triplet> edges() const;

  bool contains(const Triplet& t) const;

  /// Nodes that are valid tails for a relation: entities for knowledge-graph
  /// relations, items for the interaction relation, users for its inverse.
  std::pair<NodeId, NodeId> tail_domain(RelationId r) const;

  const std::vector<std::string>& entity_raw() const { return entity_raw_; }
  const std::vector<std::string>& relation_raw() const { return relation_raw_; }

 private:
  friend KnowledgeGraph parse_triplets(std::istream&, const InteractionLog&, const FilterConfig&,
                                       TripletLoadStats*, const std::string&);
  friend KnowledgeGraph build_collaborative_graph(const InteractionLog&, const KnowledgeGraph&);

  void build_adjacency(std::vector<Triplet> edges);

  std::size_t num_items_ = 0;
  std::size_t num_entities_ = 0;
  std::size_t num_users_ = 0;
  bool collaborative_ = false;
  std::vector<std::string> entity_raw_;  // raw ids for every entity, items first
  std::vector<std::string> relation_raw_;
  std::vector<Triplet> kg_triplets_;
  std::vector<std::size_t> offsets_;
  std::vector<RelationId> relations_;
  std::vector<NodeId> tails_;
  std::unordered_set<std::uint64_t> edge_keys_;
};

KnowledgeGraph parse_triplets(std::istream& in, const InteractionLog& log, const FilterConfig& filter,
                              TripletLoadStats* stats = nullptr, const std::string& source = "<stream>");
KnowledgeGraph load_triplets(const std::filesystem::path& path, const InteractionLog& log,
                             const FilterConfig& filter, TripletLoadStats* stats = nullptr);
/// Adds user nodes and (user, interact, item) edges for training items only.
KnowledgeGraph build_collaborative_graph(const InteractionLog& log, const KnowledgeGraph& kg);

/// Writes `kind<TAB>raw_id<TAB>dense_id` rows for users, items, entities and
/// relations.
void write_id_map(std::ostream& out, const InteractionLog& log, const KnowledgeGraph& kg);

// ---- samplers ---------------------------------------------------------------

NodeId sample_negative_tail(const KnowledgeGraph& kg, const Triplet& positive, std::mt19937_64& rng);

struct TripletBatch {
  std::vector<std::size_t> heads;
  std::vector<std::size_t> relations;
  std::vector<std::size_t> tails;
  std::vector<std::size_t> negative_tails;
  std::size_t skipped = 0;  // edges whose head is linked to every valid tail
  std::size_t size() const { return heads.size(); }
};

/// Shuffles every edge of the graph and cuts it into corrupted-tail batches.
/// Edges that admit no corruption are counted in `skipped` and left out.
std::vector<TripletBatch> make_triplet_batches(const KnowledgeGraph& kg, std::size_t batch_size,
                                               std::mt19937_64& rng);

enum class NegativeSampling { uniform, popularity };

std::vector<ItemId> sample_eval_negatives(const InteractionLog& log, UserId user, std::size_t n,
                                          std::mt19937_64& rng,
                                          NegativeSampling mode = NegativeSampling::uniform);

/// Token layout of the sequential model: 0 is padding, item i is i + 1, and
/// the mask token takes the last slot.
struct Vocabulary {
  std::size_t num_items = 0;
  static constexpr std::size_t pad() { return 0; }
  std::size_t token(ItemId item) const { return static_cast<std::size_t>(item) + 1; }
  std::size_t mask() const { return num_items + 1; }
  std::size_t size() const { return num_items + 2; }
  bool is_item(std::size_t token) const { return token >= 1 && token <= num_items; }
  ItemId item(std::size_t token) const { return static_cast<ItemId>(token - 1); }
};

struct MaskedTarget {
  std::size_t row;
  std::size_t position;
  ItemId item;
};

struct MaskedBatch {
  std::size_t max_len = 0;
  std::vector<UserId> users;
  std::vector<std::size_t> tokens;     // rows * max_len, left-padded
  std::vector<std::uint8_t> masked;    // rows * max_len
  std::vector<std::uint8_t> padding;   // rows * max_len
  std::vector<MaskedTarget> targets;
  std::size_t skipped_empty = 0;

  std::size_t rows() const { return users.size(); }
  std::span<const std::size_t> row_tokens(std::size_t r) const {
    return std::span(tokens).subspan(r * max_len, max_len);
  }
};

MaskedBatch build_masked_batch(std::span<const std::span<const ItemId>> sequences, std::span<const UserId> users,
                               double mask_prob, std::size_t max_len, const Vocabulary& vocab,
                               std::mt19937_64& rng);

/// Most recent max_len - 1 items, left-padded, followed by the mask token.
std::vector<std::size_t> build_inference_input(std::span<const ItemId> sequence, std::size_t max_len,
                                               const Vocabulary& vocab);

}  // namespace katrec::data

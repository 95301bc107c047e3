#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "katrec/autodiff.hpp"
#include "katrec/data.hpp"
#include "katrec/optim.hpp"

namespace katrec::kg {

struct KgDims {
  std::size_t d = 64;                         // entity and relation width
  std::vector<std::size_t> layers{32, 16, 16};  // propagation output widths
  /// Width of the concatenated representation after `depth` layers.
  std::size_t width(std::size_t depth) const;
  std::size_t width() const { return width(layers.size()); }
};

enum class AttentionMode { attentive, uniform };

/// Trainable tensors of the knowledge-graph module. Vars alias their storage,
/// so copies of a KgParams share values; use clone() for an independent copy.
struct KgParams {
  KgDims dims;
  ad::Var entity;      // (nodes, d), users after entities
  ad::Var relation;    // (relations, d)
  ad::Var projection;  // (relations, d, d)
  std::vector<ad::Var> w1;  // layer l: (width_{l-1}, width_l), applied as x * W
  std::vector<ad::Var> w2;

  static KgParams init(const KgDims& dims, std::size_t num_nodes, std::size_t num_relations, std::mt19937_64& rng);
  KgParams clone() const;
  std::size_t num_nodes() const { return entity.shape()[0]; }
  std::size_t num_relations() const { return relation.shape()[0]; }
  /// Every tensor, named with a "kg." prefix.
  std::vector<ad::Var> all() const;
  /// The tensors the triplet loss reaches.
  std::vector<ad::Var> transr() const { return {entity, relation, projection}; }
};

/// Flattened propagation structure: CSR over head nodes, optionally capped
/// to the first `max_neighbors` edges of each head.
struct Adjacency {
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> heads;
  std::vector<std::size_t> relations;
  std::vector<std::size_t> tails;
  std::size_t num_nodes() const { return offsets.size() - 1; }
  std::size_t num_edges() const { return tails.size(); }
};

Adjacency make_adjacency(const data::KnowledgeGraph& graph, std::size_t max_neighbors = 0);

/// ||W^r e_h + e_r - W^r e_t||^2 for a single triplet.
double transr_score(const KgParams& params, std::size_t h, std::size_t r, std::size_t t);
/// Batched differentiable scores, one per row.
ad::Var transr_scores(const KgParams& params, std::span<const std::size_t> heads, std::span<const std::size_t> rels,
                      std::span<const std::size_t> tails);

/// Raw attention logits (W^r e_t)^T tanh(W^r e_h + e_r) for every edge.
ad::Var attention_logits(const KgParams& params, const Adjacency& adj);
/// Normalized weights for every edge, softmax within each head's neighbors.
ad::Var edge_attention(const KgParams& params, const Adjacency& adj, AttentionMode mode);
/// Normalized weights over N_h in adjacency order; empty for isolated nodes.
std::vector<double> attention_coeffs(const KgParams& params, const Adjacency& adj, std::size_t h,
                                     AttentionMode mode = AttentionMode::attentive);

/// One aggregation step from width_{l-1} to width_l (layer is 1-based).
ad::Var propagate_layer(std::size_t layer, const ad::Var& prev, const Adjacency& adj, const KgParams& params,
                        const ad::Var& edge_weights);

/// [e^(0) | e^(1) | ... | e^(L)] for every node.
ad::Var entity_representation(const KgParams& params, const Adjacency& adj, std::size_t depth, AttentionMode mode);

/// Mean pairwise ranking loss of a corrupted-tail batch plus an L2 penalty on
/// the distinct entity and relation rows the batch touches.
ad::Var kg_loss(const KgParams& params, const data::TripletBatch& batch, double lambda);

struct KgTrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 1024;
  double lambda = 1e-5;
  ad::AdamConfig adam{};
};

/// One pass over freshly shuffled triplet batches. Returns per-step losses;
/// a non-finite loss raises an error naming the global step index.
std::vector<double> kg_train_epoch(const KgParams& params, const data::KnowledgeGraph& graph, ad::Adam& optimizer,
                                   std::size_t batch_size, double lambda, std::mt19937_64& rng,
                                   std::size_t first_step = 0);

/// Trains the TransR tables of `params` in place and returns them.
KgParams pretrain_kg(const KgTrainConfig& config, const data::KnowledgeGraph& graph, KgParams params,
                     std::mt19937_64& rng, std::vector<double>* step_losses = nullptr);

/// Number of optimizer steps one epoch of `graph` takes.
std::size_t steps_per_epoch(const data::KnowledgeGraph& graph, std::size_t batch_size);

}  // namespace katrec::kg

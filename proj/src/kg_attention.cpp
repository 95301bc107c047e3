#include "katrec/kg_attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "katrec/error.hpp"
#include "katrec/params.hpp"

namespace katrec::kg {

namespace {

constexpr double kInitBound = 0.02;
constexpr double kLeakySlope = 0.2;

ad::Var fresh(const ad::Tensor& value, const std::string& name) { return ad::Var::parameter(value, name); }

void check_ids(const KgParams& p, std::size_t h, std::size_t r, std::size_t t, const char* where) {
  if (h >= p.num_nodes() || t >= p.num_nodes()) fail(where, "node id out of range ", p.num_nodes());
  if (r >= p.num_relations()) fail(where, "relation ", r, " out of range ", p.num_relations());
}

}  // namespace

std::size_t KgDims::width(std::size_t depth) const {
  if (depth > layers.size()) fail("KgDims::width", "depth ", depth, " exceeds configured ", layers.size());
  return std::accumulate(layers.begin(), layers.begin() + static_cast<std::ptrdiff_t>(depth), d);
}

KgParams KgParams::init(const KgDims& dims, std::size_t num_nodes, std::size_t num_relations, std::mt19937_64& rng) {
  if (num_nodes == 0 || num_relations == 0) fail("KgParams::init", "graph has no nodes or no relations");
  auto draw = [&](const ad::Shape& shape) {
    return ad::trunc_normal_init(shape, -kInitBound, kInitBound, kInitBound, rng);
  };
  KgParams p;
  p.dims = dims;
  p.entity = fresh(draw({num_nodes, dims.d}), "kg.entity");
  p.relation = fresh(draw({num_relations, dims.d}), "kg.relation");
  p.projection = fresh(draw({num_relations, dims.d, dims.d}), "kg.projection");
  std::size_t in = dims.d;
  for (std::size_t l = 0; l < dims.layers.size(); ++l) {
    const std::size_t out = dims.layers[l];
    p.w1.push_back(fresh(draw({in, out}), "kg.agg" + std::to_string(l + 1) + ".w1"));
    p.w2.push_back(fresh(draw({in, out}), "kg.agg" + std::to_string(l + 1) + ".w2"));
    in = out;
  }
  return p;
}

KgParams KgParams::clone() const {
  KgParams p;
  p.dims = dims;
  p.entity = fresh(entity.value(), entity.name());
  p.relation = fresh(relation.value(), relation.name());
  p.projection = fresh(projection.value(), projection.name());
  for (const auto& w : w1) p.w1.push_back(fresh(w.value(), w.name()));
  for (const auto& w : w2) p.w2.push_back(fresh(w.value(), w.name()));
  return p;
}

std::vector<ad::Var> KgParams::all() const {
  std::vector<ad::Var> out{entity, relation, projection};
  for (std::size_t l = 0; l < w1.size(); ++l) {
    out.push_back(w1[l]);
    out.push_back(w2[l]);
  }
  return out;
}

Adjacency make_adjacency(const data::KnowledgeGraph& graph, std::size_t max_neighbors) {
  Adjacency adj;
  adj.offsets.reserve(graph.num_nodes() + 1);
  adj.offsets.push_back(0);
  const auto offsets = graph.offsets();
  for (std::size_t h = 0; h < graph.num_nodes(); ++h) {
    std::size_t end = offsets[h + 1];
    if (max_neighbors > 0) end = std::min(end, offsets[h] + max_neighbors);
    for (std::size_t e = offsets[h]; e < end; ++e) {
      adj.heads.push_back(h);
      adj.relations.push_back(graph.edge_relations()[e]);
      adj.tails.push_back(graph.edge_tails()[e]);
    }
    adj.offsets.push_back(adj.tails.size());
  }
  return adj;
}

double transr_score(const KgParams& params, std::size_t h, std::size_t r, std::size_t t) {
  check_ids(params, h, r, t, "transr_score");
  const std::size_t d = params.dims.d;
  const auto w = params.projection.value().data().subspan(r * d * d, d * d);
  const auto eh = params.entity.value().row(h);
  const auto et = params.entity.value().row(t);
  const auto er = params.relation.value().row(r);
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double v = er[i];
    for (std::size_t j = 0; j < d; ++j) v += w[i * d + j] * (eh[j] - et[j]);
    s += v * v;
  }
  return s;
}

ad::Var transr_scores(const KgParams& params, std::span<const std::size_t> heads, std::span<const std::size_t> rels,
                      std::span<const std::size_t> tails) {
  if (heads.size() != rels.size() || heads.size() != tails.size()) {
    fail("transr_scores", "id lists differ in length: ", heads.size(), ", ", rels.size(), ", ", tails.size());
  }
  const auto ph = ad::relation_project(params.projection, rels, ad::gather_rows(params.entity, heads));
  const auto pt = ad::relation_project(params.projection, rels, ad::gather_rows(params.entity, tails));
  const auto diff = ad::sub(ad::add(ph, ad::gather_rows(params.relation, rels)), pt);
  return ad::row_sum(ad::mul(diff, diff));
}

ad::Var attention_logits(const KgParams& params, const Adjacency& adj) {
  const auto ph = ad::relation_project(params.projection, adj.relations, ad::gather_rows(params.entity, adj.heads));
  const auto pt = ad::relation_project(params.projection, adj.relations, ad::gather_rows(params.entity, adj.tails));
  const auto gate = ad::tanh(ad::add(ph, ad::gather_rows(params.relation, adj.relations)));
  return ad::row_sum(ad::mul(pt, gate));
}

ad::Var edge_attention(const KgParams& params, const Adjacency& adj, AttentionMode mode) {
  if (mode == AttentionMode::attentive) return ad::segment_softmax(attention_logits(params, adj), adj.offsets);
  ad::Tensor w({adj.num_edges()});
  for (std::size_t h = 0; h < adj.num_nodes(); ++h) {
    const std::size_t n = adj.offsets[h + 1] - adj.offsets[h];
    for (std::size_t e = adj.offsets[h]; e < adj.offsets[h + 1]; ++e) w[e] = 1.0 / static_cast<double>(n);
  }
  return ad::Var::constant(std::move(w));
}

std::vector<double> attention_coeffs(const KgParams& params, const Adjacency& adj, std::size_t h,
                                     AttentionMode mode) {
  if (h >= adj.num_nodes()) fail("attention_coeffs", "node ", h, " out of range ", adj.num_nodes());
  // Restrict the computation to the ego network of h.
  Adjacency ego;
  ego.offsets = {0, adj.offsets[h + 1] - adj.offsets[h]};
  for (std::size_t e = adj.offsets[h]; e < adj.offsets[h + 1]; ++e) {
    ego.heads.push_back(h);
    ego.relations.push_back(adj.relations[e]);
    ego.tails.push_back(adj.tails[e]);
  }
  if (ego.num_edges() == 0) return {};
  const auto w = edge_attention(params, ego, mode);
  return {w.value().data().begin(), w.value().data().end()};
}

ad::Var propagate_layer(std::size_t layer, const ad::Var& prev, const Adjacency& adj, const KgParams& params,
                        const ad::Var& edge_weights) {
  if (layer == 0 || layer > params.w1.size()) {
    fail("propagate_layer", "layer ", layer, " outside 1..", params.w1.size());
  }
  const auto& w1 = params.w1[layer - 1];
  const std::size_t in = w1.shape()[0];
  if (prev.value().rank() != 2 || prev.shape()[0] != adj.num_nodes() || prev.shape()[1] != in) {
    fail("propagate_layer", "expected embeddings of shape (", adj.num_nodes(), ", ", in, "), got ",
         ad::shape_string(prev.shape()));
  }
  const auto neighborhood = ad::segment_weighted_sum(edge_weights, prev, adj.offsets, adj.tails);
  const auto sum_term = ad::leaky_relu(ad::matmul(ad::add(prev, neighborhood), w1), kLeakySlope);
  const auto prod_term = ad::leaky_relu(ad::matmul(ad::mul(prev, neighborhood), params.w2[layer - 1]), kLeakySlope);
  return ad::add(sum_term, prod_term);
}

ad::Var entity_representation(const KgParams& params, const Adjacency& adj, std::size_t depth, AttentionMode mode) {
  if (depth > params.w1.size()) fail("entity_representation", "depth ", depth, " exceeds ", params.w1.size());
  if (adj.num_nodes() != params.num_nodes()) {
    fail("entity_representation", "graph has ", adj.num_nodes(), " nodes but the table has ", params.num_nodes());
  }
  if (depth == 0) return params.entity;
  // Weights come from layer-0 embeddings and are shared by every layer.
  const auto weights = edge_attention(params, adj, mode);
  std::vector<ad::Var> parts{params.entity};
  for (std::size_t l = 1; l <= depth; ++l) parts.push_back(propagate_layer(l, parts.back(), adj, params, weights));
  return ad::concat(parts);
}

ad::Var kg_loss(const KgParams& params, const data::TripletBatch& batch, double lambda) {
  if (batch.size() == 0) fail("kg_loss", "empty batch");
  const auto pos = transr_scores(params, batch.heads, batch.relations, batch.tails);
  const auto neg = transr_scores(params, batch.heads, batch.relations, batch.negative_tails);
  auto loss = ad::scale(ad::mean(ad::log_sigmoid(ad::sub(neg, pos))), -1.0);
  if (lambda == 0.0) return loss;

  std::vector<std::size_t> nodes(batch.heads);
  nodes.insert(nodes.end(), batch.tails.begin(), batch.tails.end());
  nodes.insert(nodes.end(), batch.negative_tails.begin(), batch.negative_tails.end());
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  std::vector<std::size_t> rels(batch.relations);
  std::sort(rels.begin(), rels.end());
  rels.erase(std::unique(rels.begin(), rels.end()), rels.end());
  const auto reg = ad::add(ad::squared_norm(ad::gather_rows(params.entity, nodes)),
                           ad::squared_norm(ad::gather_rows(params.relation, rels)));
  return ad::add(loss, ad::scale(reg, lambda));
}

std::vector<double> kg_train_epoch(const KgParams& params, const data::KnowledgeGraph& graph, ad::Adam& optimizer,
                                   std::size_t batch_size, double lambda, std::mt19937_64& rng,
                                   std::size_t first_step) {
  std::vector<double> losses;
  for (const auto& batch : data::make_triplet_batches(graph, batch_size, rng)) {
    if (batch.size() == 0) continue;
    const auto loss = kg_loss(params, batch, lambda);
    const double value = loss.value().item();
    if (!std::isfinite(value)) {
      fail("kg_train", "loss became ", value, " at step ", first_step + losses.size());
    }
    optimizer.step(ad::backward(loss));
    losses.push_back(value);
  }
  return losses;
}

std::size_t steps_per_epoch(const data::KnowledgeGraph& graph, std::size_t batch_size) {
  if (batch_size == 0) fail("steps_per_epoch", "batch size must be positive");
  return (graph.num_edges() + batch_size - 1) / batch_size;
}

KgParams pretrain_kg(const KgTrainConfig& config, const data::KnowledgeGraph& graph, KgParams params,
                     std::mt19937_64& rng, std::vector<double>* step_losses) {
  if (params.num_nodes() != graph.num_nodes() || params.num_relations() != graph.num_relations()) {
    fail("pretrain_kg", "parameters sized for ", params.num_nodes(), " nodes and ", params.num_relations(),
         " relations, graph has ", graph.num_nodes(), " and ", graph.num_relations());
  }
  ad::AdamConfig adam = config.adam;
  if (adam.horizon == 0) adam.horizon = config.epochs * steps_per_epoch(graph, config.batch_size);
  ad::Adam optimizer(adam, params.transr());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto losses = kg_train_epoch(params, graph, optimizer, config.batch_size, config.lambda, rng, step);
    step += losses.size();
    if (step_losses) step_losses->insert(step_losses->end(), losses.begin(), losses.end());
  }
  return params;
}

}  // namespace katrec::kg

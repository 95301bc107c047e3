#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "katrec/data.hpp"
#include "katrec/seq_encoder.hpp"
#include "katrec/tensor.hpp"

namespace katrec::eval {

using data::ItemId;
using data::UserId;

struct RankResult {
  UserId user = 0;
  std::size_t rank = 0;        // 1-based position of the ground truth
  std::size_t candidates = 0;  // ground truth plus sampled negatives
  std::size_t history = 0;     // length of the input history
};

/// Rank of scores[truth] among all scores. Every tied candidate is placed
/// ahead of the ground truth.
RankResult rank_ground_truth(std::span<const double> scores, std::size_t truth);

inline const std::vector<std::size_t> kDefaultCutoffs{1, 5, 10};

struct Metrics {
  std::vector<std::size_t> cutoffs;
  std::vector<double> hit;   // one per cutoff
  std::vector<double> ndcg;  // one per cutoff
  double map = 0.0;
  std::size_t users = 0;

  double hit_at(std::size_t k) const;
  double ndcg_at(std::size_t k) const;
};

/// Averages Hit@K, NDCG@K and 1/rank over users. Empty input gives zeros.
Metrics compute_metrics(std::span<const RankResult> ranks,
                        const std::vector<std::size_t>& cutoffs = kDefaultCutoffs);

struct Bucket {
  std::size_t lo = 0;  // history lengths in [lo, hi)
  std::size_t hi = 0;  // SIZE_MAX for the open last bucket
  Metrics metrics;
  std::string label() const;
};

struct MetricReport {
  Metrics overall;
  std::vector<Bucket> buckets;
  std::size_t skipped_empty = 0;  // users without history
  std::size_t short_lists = 0;    // users with fewer eligible negatives than requested
};

/// Scores `candidates` given a user's history; one score per candidate.
using Scorer = std::function<std::vector<double>(UserId user, std::span<const ItemId> history,
                                                 std::span<const ItemId> candidates)>;

struct EvalOptions {
  data::Split split = data::Split::test;
  std::size_t negatives = 100;
  data::NegativeSampling sampling = data::NegativeSampling::uniform;
  std::uint64_t seed = 0;
  std::vector<std::size_t> bucket_edges;  // empty: quartiles of training lengths
  std::vector<std::size_t> cutoffs = kDefaultCutoffs;
  std::size_t threads = 0;                // 0: KATREC_THREADS, else hardware concurrency
};

/// Negatives of one user. They depend only on (seed, user), so repeated
/// evaluations and both splits see the same lists.
std::vector<ItemId> eval_negatives(const data::InteractionLog& log, UserId user, const EvalOptions& options);

/// Quartile edges of the per-user training lengths, deduplicated.
std::vector<std::size_t> quartile_edges(const data::InteractionLog& log);

MetricReport evaluate(const data::InteractionLog& log, const Scorer& scorer, const EvalOptions& options,
                      std::vector<RankResult>* ranks = nullptr);

/// Scorer backed by a trained sequential model. `fused` is the output of
/// fuse_item_embeddings and `kg_users` the user rows of E* (used only by the
/// explicit user head). The model tensors must not change while it is used.
Scorer model_scorer(const seq::SeqParams& params, ad::Var fused, ad::Var kg_users = {});

/// Worker count from KATREC_THREADS, falling back to the hardware count.
std::size_t default_threads();

/// Attention weights of one (layer, head), both 1-based, averaged over
/// `sequences` (left-padded token rows of length max_len) and restricted to
/// the last `window` positions. Cell (i, j) averages over the sequences
/// whose query position i is not padding; padded keys contribute zero, so
/// every row sums to at most 1.
ad::Tensor export_attention(const seq::SeqParams& params, std::span<const std::vector<std::size_t>> sequences,
                            std::size_t layer, std::size_t head, std::size_t window);

/// Share of users whose sequence holds both items; the diagonal is the
/// share holding the item at all.
ad::Tensor cooccurrence_matrix(const data::InteractionLog& log, std::span<const ItemId> items);

std::string metrics_tsv(const MetricReport& report);
std::string metrics_json(const MetricReport& report);
/// Tab-separated matrix. With `header`, a first row of column labels.
std::string matrix_tsv(const ad::Tensor& m, const std::vector<std::string>& header = {});

}  // namespace katrec::eval

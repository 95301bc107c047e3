#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "katrec/autodiff.hpp"
#include "katrec/data.hpp"

namespace katrec::seq {

enum class PositionalMode { learned, sinusoid };

struct SeqConfig {
  std::size_t q = 128;  // hidden width, equal to the knowledge-graph representation width
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t max_len = 50;
  double dropout = 0.1;
  PositionalMode positional = PositionalMode::learned;
  bool explicit_user = false;  // prepend the user's graph representation to the head input
  bool fuse = true;            // false bypasses the fusion layer and scores against V* alone
};

struct LayerParams {
  std::vector<ad::Var> wq, wk, wv;  // one (q, q / heads) block per head
  ad::Var wo;                       // (q, q)
  ad::Var ln1_gamma, ln1_beta;
  ad::Var ff_w1, ff_b1;  // (q, 4q), (4q)
  ad::Var ff_w2, ff_b2;  // (4q, q), (q)
  ad::Var ln2_gamma, ln2_beta;
};

struct SeqParams {
  SeqConfig config;
  std::size_t num_items = 0;
  ad::Var item_table;  // V*: (items, q)
  ad::Var mask_token;  // (1, q); the pad embedding is fixed at zero
  ad::Var position;    // (max_len, q); a constant in sinusoid mode
  std::vector<LayerParams> layers;
  ad::Var fusion_w, fusion_b;  // (2q, q), (q)
  ad::Var head_w, head_b;      // (q or 2q, q), (q)
  ad::Var out_bias;            // (items)

  static SeqParams init(const SeqConfig& config, std::size_t num_items, std::mt19937_64& rng);
  SeqParams clone() const;
  data::Vocabulary vocab() const { return {num_items}; }
  /// Every trainable tensor, named with a "seq." prefix.
  std::vector<ad::Var> all() const;
};

/// Sinusoidal position table of the original transformer.
ad::Tensor sinusoid_table(std::size_t max_len, std::size_t width);

/// Token embeddings plus position vectors; tokens[i] sits at position
/// `offset + i`, so a trimmed suffix keeps its absolute positions.
ad::Var embed_sequence(const SeqParams& params, std::span<const std::size_t> tokens, std::size_t offset = 0);

struct LayerOutput {
  ad::Var hidden;
  std::vector<ad::Tensor> attention;  // per head, (len, len)
};

/// One post-norm transformer block. Keys whose `key_mask` entry is zero get
/// no attention; an empty mask attends everywhere.
LayerOutput transformer_layer(const ad::Var& x, std::span<const std::uint8_t> key_mask, const LayerParams& layer,
                              const SeqConfig& config, std::mt19937_64& rng, bool train);

struct Encoding {
  ad::Var hidden;           // (len - first, q), rows for the non-pad suffix
  std::size_t first = 0;    // index of the first non-pad token
  std::vector<std::vector<ad::Tensor>> attention;  // [layer][head], (len - first, len - first)
};

/// Runs every block over one left-padded token row. Leading pads are trimmed
/// before the blocks run; they are masked keys, so the non-pad outputs are
/// unchanged by the trimming.
Encoding encode(const SeqParams& params, std::span<const std::size_t> tokens, std::mt19937_64& rng, bool train);

/// sigmoid([V* | E*] W + b), or V* itself when fusion is disabled.
ad::Var fuse_item_embeddings(const SeqParams& params, const ad::Var& kg_items);

/// Unnormalized next-item scores for each row of `hidden`. When the explicit
/// user head is on, `user_rows` supplies one graph representation per row.
ad::Var next_item_logits(const SeqParams& params, const ad::Var& hidden, const ad::Var& fused,
                         const ad::Var& user_rows = {});

struct ClozeStats {
  std::size_t clamped = 0;  // targets whose probability fell below the floor
};

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean negative log-probability of `targets` (item ids) under row-wise
/// softmax of `logits`.
ad::Var cloze_loss(const ad::Var& logits, std::span<const std::size_t> targets, ClozeStats* stats = nullptr);

/// Cloze loss of a masked batch. `kg_items` holds E* item rows and `kg_users`
/// the user rows (needed only by the explicit user head).
ad::Var sequence_loss(const SeqParams& params, const data::MaskedBatch& batch, const ad::Var& kg_items,
                      const ad::Var& kg_users, std::mt19937_64& rng, bool train, ClozeStats* stats = nullptr);

/// Scores every item as the continuation of `tokens` (an inference input
/// ending in the mask token). `fused` comes from fuse_item_embeddings.
std::vector<double> score_next(const SeqParams& params, std::span<const std::size_t> tokens, const ad::Var& fused,
                               const ad::Var& user_row = {});

}  // namespace katrec::seq

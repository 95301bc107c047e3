#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "katrec/data.hpp"
#include "katrec/kg_attention.hpp"
#include "katrec/seq_encoder.hpp"

namespace katrec {

enum class Ablation { none, no_attention, level1, connection, no_pretrain, concat };

inline constexpr Ablation kAblationVariants[] = {Ablation::no_attention, Ablation::level1, Ablation::connection,
                                                 Ablation::no_pretrain, Ablation::concat};

Ablation parse_ablation(std::string_view name);
const char* ablation_name(Ablation a);
/// Row label of the ablation comparison table.
const char* ablation_label(Ablation a);

/// Every tunable of a run. Field defaults are the published full-scale settings.
struct RunConfig {
  // [data]
  std::string interactions;  // paths; relative ones resolve against the config file's directory
  std::string triplets;
  data::FilterConfig filter;

  // [kg]
  kg::KgDims kg_dims;
  double lambda = 1e-5;
  kg::AttentionMode attention = kg::AttentionMode::attentive;
  std::size_t max_neighbors = 0;

  // [seq]  (seq.q is always derived from the graph width)
  seq::SeqConfig seq;
  double mask_prob = 0.2;

  // [train]
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t pretrain_epochs = 50;
  std::size_t joint_epochs = 200;
  std::size_t patience = 10;
  bool early_stopping = true;
  std::size_t seq_batch_size = 256;
  std::size_t triplet_batch_size = 1024;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> dropout_seed;
  bool float32 = false;

  // [eval]
  std::size_t eval_negatives = 100;
  data::NegativeSampling negative_sampling = data::NegativeSampling::uniform;
  std::vector<std::size_t> bucket_edges;  // empty: quartiles of training lengths
  std::size_t attention_window = 15;

  Ablation ablation = Ablation::none;

  /// Width shared by E* and the transformer.
  std::size_t q() const { return kg_dims.width(); }
  /// Checks cross-field invariants and syncs derived fields (seq.q, seq.fuse).
  void finalize();
};

/// Loads `key = value` lines grouped under `[section]` headers (a flat TOML
/// subset: numbers, booleans, quoted strings and flat arrays).
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
/// Applies one `section.key=value` override.
void apply_override(RunConfig& config, std::string_view assignment);
/// Canonical text form; parse_config(to_toml(c)) reproduces c.
std::string to_toml(const RunConfig& config);

/// Returns the configuration that realizes an ablation variant.
RunConfig apply_ablation(RunConfig config, Ablation variant);

}  // namespace katrec

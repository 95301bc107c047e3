#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "katrec/config.hpp"
#include "katrec/data.hpp"
#include "katrec/eval.hpp"
#include "katrec/kg_attention.hpp"
#include "katrec/optim.hpp"
#include "katrec/rng.hpp"
#include "katrec/seq_encoder.hpp"

namespace katrec::train {

/// Filtered interactions, the item-entity graph and the collaborative graph
/// built from training interactions only.
struct Dataset {
  data::InteractionLog log;
  data::KnowledgeGraph kg;
  data::KnowledgeGraph graph;
  data::TripletLoadStats triplet_stats;
};

Dataset load_dataset(const RunConfig& config);
Dataset make_dataset(data::InteractionLog log, data::KnowledgeGraph kg);

struct EpochRecord {
  std::size_t epoch = 0;     // 1-based
  double kg_loss = 0.0;      // mean triplet loss of phase A
  double seq_loss = 0.0;     // mean Cloze loss of phase B
  double probe_loss = 0.0;   // Cloze loss of a fixed masked batch, dropout off
  double val_ndcg = 0.0;     // validation NDCG@10 after the E* refresh
};

/// Owns both parameter sets, their optimizers and every random stream of a
/// run. Checkpoints are taken at epoch boundaries.
class Trainer {
 public:
  Trainer(RunConfig config, const Dataset& data);

  const RunConfig& config() const { return config_; }
  const Dataset& data() const { return *data_; }

  /// Runs KG pretraining once (a no-op when pretrain_epochs is 0), then
  /// seeds the sequential item table from E* in connected mode.
  void pretrain();
  bool pretrained() const { return pretrained_; }

  /// Phase A, phase B, E* refresh and validation.
  EpochRecord run_epoch();
  bool finished() const;
  /// Pretrains if needed, runs epochs until finished() and restores the
  /// best validation snapshot when early stopping is on.
  void train(const std::function<void(const EpochRecord&)>& on_epoch = {});
  /// Restores the best validation snapshot, if any.
  void restore_best();

  const kg::KgParams& kg_params() const { return kg_; }
  const seq::SeqParams& seq_params() const { return seq_; }
  /// Current E* view (nodes, q), a constant.
  const ad::Var& representation() const { return repr_; }
  const ad::Var& kg_items() const { return items_; }
  const ad::Var& kg_users() const { return users_; }

  eval::MetricReport evaluate(data::Split split) const;
  /// Hit@1 of predicting each training position from the rest of the
  /// training sequence with that position masked.
  double masked_hit_rate() const;
  /// Cloze loss of the fixed probe batch in inference mode.
  double probe_loss() const;

  std::size_t epoch() const { return epoch_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_ndcg() const { return best_ndcg_; }
  const std::vector<double>& pretrain_losses() const { return pretrain_losses_; }
  const std::vector<double>& kg_step_losses() const { return kg_losses_; }
  const std::vector<double>& seq_step_losses() const { return seq_losses_; }
  const std::vector<EpochRecord>& history() const { return history_; }

  /// Digests of the tensor groups each phase may touch.
  std::uint64_t kg_digest() const;
  std::uint64_t seq_digest() const;

  /// Called with every masked batch phase B trains on.
  std::function<void(const data::MaskedBatch&)> on_batch;

  std::string checkpoint_bytes() const;
  void save(const std::filesystem::path& path) const;
  /// Rebuilds a trainer from a checkpoint. When `expected` is given, every
  /// tensor is validated against the shapes it implies and the run uses it.
  static Trainer load(const std::filesystem::path& path, const Dataset& data, const RunConfig* expected = nullptr);
  static Trainer from_bytes(const std::string& bytes, const Dataset& data, const RunConfig* expected = nullptr);
  /// The configuration a checkpoint was written with.
  static RunConfig stored_config(const std::string& bytes);

 private:
  std::vector<ad::Var> parameters() const;
  void refresh_representation();
  void snapshot_best();
  std::size_t seq_steps_per_epoch() const;

  RunConfig config_;
  const Dataset* data_;
  RngStreams streams_;
  kg::Adjacency adj_;
  kg::KgParams kg_;
  seq::SeqParams seq_;
  std::unique_ptr<ad::Adam> kg_opt_;
  std::unique_ptr<ad::Adam> seq_opt_;
  ad::Var repr_;
  ad::Var items_;
  ad::Var users_;
  data::MaskedBatch probe_;

  bool pretrained_ = false;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  double best_ndcg_ = -1.0;
  std::size_t bad_epochs_ = 0;
  bool stopped_ = false;
  std::vector<ad::Tensor> best_;
  std::vector<double> pretrain_losses_;
  std::vector<double> kg_losses_;
  std::vector<double> seq_losses_;
  std::vector<EpochRecord> history_;
};

}  // namespace katrec::train

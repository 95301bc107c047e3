#include "katrec/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>

#include "json.hpp"
#include "katrec/error.hpp"
#include "katrec/io.hpp"
#include "katrec/params.hpp"

namespace katrec::train {

namespace {

constexpr const char* kMagic = "KATREC-CHECKPOINT 1\n";

void round_to_float(const std::vector<ad::Var>& vars) {
  for (ad::Var v : vars)
    for (double& x : v.mutable_value().data()) x = static_cast<double>(static_cast<float>(x));
}

ad::AdamConfig adam_config(const RunConfig& c, std::size_t horizon) {
  ad::AdamConfig a;
  a.lr = c.lr;
  a.beta1 = c.beta1;
  a.beta2 = c.beta2;
  a.eps = c.adam_eps;
  a.weight_decay = c.weight_decay;
  a.horizon = horizon;
  a.float32 = c.float32;
  return a;
}

ad::Var row_block(const ad::Tensor& t, std::size_t begin, std::size_t end) {
  std::vector<double> values(t.data().begin() + static_cast<std::ptrdiff_t>(begin * t.cols()),
                             t.data().begin() + static_cast<std::ptrdiff_t>(end * t.cols()));
  return ad::Var::constant(ad::Tensor({end - begin, t.cols()}, std::move(values)));
}

// One named array of a checkpoint. Shapes may hold zeros (empty histories),
// so records carry raw values instead of tensors.
struct Record {
  std::string name;
  bool f32 = false;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

Record record(std::string name, const ad::Tensor& t, bool f32) {
  return {std::move(name), f32, t.shape(), t.values()};
}

std::string shape_text(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

RunConfig realized(RunConfig c) {
  const auto variant = c.ablation;
  return apply_ablation(std::move(c), variant);
}

}  // namespace

Dataset load_dataset(const RunConfig& config) {
  if (config.interactions.empty()) fail("dataset", "data.interactions is not set");
  if (config.triplets.empty()) fail("dataset", "data.triplets is not set");
  auto log = data::load_interactions(config.interactions, config.filter);
  data::TripletLoadStats stats;
  auto kg = data::load_triplets(config.triplets, log, config.filter, &stats);
  auto ds = make_dataset(std::move(log), std::move(kg));
  ds.triplet_stats = stats;
  return ds;
}

Dataset make_dataset(data::InteractionLog log, data::KnowledgeGraph kg) {
  auto graph = data::build_collaborative_graph(log, kg);
  return {std::move(log), std::move(kg), std::move(graph), {}};
}

Trainer::Trainer(RunConfig config, const Dataset& data)
    : config_(realized(std::move(config))),
      data_(&data),
      streams_(config_.seed, config_.dropout_seed),
      adj_(kg::make_adjacency(data.graph, config_.max_neighbors)) {
  auto& init = streams_.get(Stream::init);
  kg_ = kg::KgParams::init(config_.kg_dims, data.graph.num_nodes(), data.graph.num_relations(), init);
  seq_ = seq::SeqParams::init(config_.seq, data.log.num_items(), init);
  if (config_.float32) round_to_float(parameters());

  const std::size_t kg_steps = kg::steps_per_epoch(data.graph, config_.triplet_batch_size);
  kg_opt_ = std::make_unique<ad::Adam>(adam_config(config_, config_.joint_epochs * kg_steps), kg_.transr());
  // With fusion bypassed its weights never see a gradient, so they stay out
  // of the optimizer (and keep their initial values).
  std::vector<ad::Var> seq_trainable;
  for (const auto& v : seq_.all()) {
    if (config_.seq.fuse || (v.node() != seq_.fusion_w.node() && v.node() != seq_.fusion_b.node())) {
      seq_trainable.push_back(v);
    }
  }
  seq_opt_ = std::make_unique<ad::Adam>(adam_config(config_, config_.joint_epochs * seq_steps_per_epoch()),
                                        std::move(seq_trainable));

  // Fixed masks over (at most) the first 256 users' training sequences.
  std::vector<std::span<const data::ItemId>> seqs;
  std::vector<data::UserId> users;
  for (data::UserId u = 0; u < std::min<std::size_t>(data.log.num_users(), 256); ++u) {
    seqs.push_back(data.log.train(u));
    users.push_back(u);
  }
  auto probe_rng = derive_rng(config_.seed, Stream::masking, 1);
  probe_ = data::build_masked_batch(seqs, users, config_.mask_prob, config_.seq.max_len, seq_.vocab(), probe_rng);

  refresh_representation();
}

std::vector<ad::Var> Trainer::parameters() const {
  auto all = kg_.all();
  for (const auto& v : seq_.all()) all.push_back(v);
  return all;
}

std::size_t Trainer::seq_steps_per_epoch() const {
  const std::size_t users = data_->log.num_users();
  return (users + config_.seq_batch_size - 1) / config_.seq_batch_size;
}

std::uint64_t Trainer::kg_digest() const { return ad::digest(kg_.all()); }
std::uint64_t Trainer::seq_digest() const { return ad::digest(seq_.all()); }

void Trainer::refresh_representation() {
  const auto e = kg::entity_representation(kg_, adj_, config_.kg_dims.layers.size(), config_.attention);
  if (e.shape()[1] != seq_.config.q) {
    fail("joint_train", "graph representation width ", e.shape()[1], " differs from hidden width ", seq_.config.q);
  }
  repr_ = ad::Var::constant(e.value());
  const auto& g = data_->graph;
  items_ = row_block(repr_.value(), 0, g.num_items());
  users_ = row_block(repr_.value(), g.num_entities(), g.num_nodes());
}

void Trainer::pretrain() {
  if (pretrained_) return;
  if (config_.pretrain_epochs > 0) {
    kg::KgTrainConfig pc;
    pc.epochs = config_.pretrain_epochs;
    pc.batch_size = config_.triplet_batch_size;
    pc.lambda = config_.lambda;
    pc.adam = adam_config(config_, 0);
    kg_ = kg::pretrain_kg(pc, data_->graph, kg_, streams_.get(Stream::triplet_negatives), &pretrain_losses_);
    refresh_representation();
  }
  if (config_.ablation != Ablation::connection) {
    // Connected mode: the sequential item table starts from E*.
    auto& table = seq_.item_table.mutable_value();
    const auto& src = items_.value();
    std::copy(src.data().begin(), src.data().end(), table.data().begin());
    if (config_.float32) round_to_float({seq_.item_table});
  }
  pretrained_ = true;
}

bool Trainer::finished() const { return stopped_ || epoch_ >= config_.joint_epochs; }

EpochRecord Trainer::run_epoch() {
  pretrain();
  if (finished()) fail("joint_train", "training already finished at epoch ", epoch_);
  ++epoch_;
  EpochRecord rec;
  rec.epoch = epoch_;

  // Phase A: triplet loss over every collaborative-graph edge.
  const auto seq_before = seq_digest();
  const auto kg_losses = kg::kg_train_epoch(kg_, data_->graph, *kg_opt_, config_.triplet_batch_size, config_.lambda,
                                            streams_.get(Stream::triplet_negatives), kg_losses_.size());
  kg_losses_.insert(kg_losses_.end(), kg_losses.begin(), kg_losses.end());
  if (seq_digest() != seq_before) fail("joint_train", "phase A changed sequential parameters");
  if (!kg_losses.empty()) rec.kg_loss = std::accumulate(kg_losses.begin(), kg_losses.end(), 0.0) / kg_losses.size();

  // Phase B: Cloze loss over shuffled users with E* held fixed.
  const auto kg_before = kg_digest();
  const auto& log = data_->log;
  std::vector<data::UserId> order(log.num_users());
  std::iota(order.begin(), order.end(), 0);
  auto& masking = streams_.get(Stream::masking);
  std::shuffle(order.begin(), order.end(), masking);
  double seq_sum = 0.0;
  std::size_t seq_count = 0;
  for (std::size_t begin = 0; begin < order.size(); begin += config_.seq_batch_size) {
    const std::size_t end = std::min(order.size(), begin + config_.seq_batch_size);
    std::vector<std::span<const data::ItemId>> seqs;
    std::vector<data::UserId> users(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                    order.begin() + static_cast<std::ptrdiff_t>(end));
    for (auto u : users) seqs.push_back(log.train(u));
    const auto batch =
        data::build_masked_batch(seqs, users, config_.mask_prob, config_.seq.max_len, seq_.vocab(), masking);
    if (on_batch) on_batch(batch);
    if (batch.targets.empty()) continue;
    ad::Var loss;
    try {
      loss = seq::sequence_loss(seq_, batch, items_, users_, streams_.get(Stream::dropout), true);
    } catch (const Error& e) {
      // Non-finite activations trip the softmax guard before a loss exists.
      fail("joint_train", "Cloze loss became non-finite at step ", seq_losses_.size(), " (", e.what(), ")");
    }
    const double value = loss.value().item();
    if (!std::isfinite(value)) fail("joint_train", "Cloze loss became ", value, " at step ", seq_losses_.size());
    seq_opt_->step(ad::backward(loss));
    seq_losses_.push_back(value);
    seq_sum += value;
    ++seq_count;
  }
  if (kg_digest() != kg_before) fail("joint_train", "phase B changed graph parameters");
  if (seq_count) rec.seq_loss = seq_sum / static_cast<double>(seq_count);

  refresh_representation();
  rec.probe_loss = probe_loss();
  rec.val_ndcg = evaluate(data::Split::val).overall.ndcg_at(10);

  if (rec.val_ndcg > best_ndcg_) {
    best_ndcg_ = rec.val_ndcg;
    best_epoch_ = epoch_;
    bad_epochs_ = 0;
    snapshot_best();
  } else if (config_.early_stopping && ++bad_epochs_ >= config_.patience) {
    stopped_ = true;
  }
  history_.push_back(rec);
  return rec;
}

void Trainer::snapshot_best() {
  best_.clear();
  for (const auto& v : parameters()) best_.push_back(v.value());
}

void Trainer::restore_best() {
  if (best_.empty()) return;
  auto params = parameters();
  for (std::size_t k = 0; k < params.size(); ++k) params[k].mutable_value() = best_[k];
  refresh_representation();
}

void Trainer::train(const std::function<void(const EpochRecord&)>& on_epoch) {
  pretrain();
  while (!finished()) {
    const auto rec = run_epoch();
    if (on_epoch) on_epoch(rec);
  }
  if (config_.early_stopping) restore_best();
}

eval::MetricReport Trainer::evaluate(data::Split split) const {
  eval::EvalOptions opt;
  opt.split = split;
  opt.negatives = config_.eval_negatives;
  opt.sampling = config_.negative_sampling;
  opt.seed = config_.seed;
  opt.bucket_edges = config_.bucket_edges;
  const auto fused = seq::fuse_item_embeddings(seq_, items_);
  return eval::evaluate(data_->log, eval::model_scorer(seq_, fused, users_), opt);
}

double Trainer::probe_loss() const {
  std::mt19937_64 unused(0);
  return seq::sequence_loss(seq_, probe_, items_, users_, unused, false).value().item();
}

double Trainer::masked_hit_rate() const {
  const auto& log = data_->log;
  const auto vocab = seq_.vocab();
  const std::size_t max_len = seq_.config.max_len;
  const auto fused = seq::fuse_item_embeddings(seq_, items_);
  std::mt19937_64 unused(0);
  std::size_t hits = 0, total = 0;
  for (data::UserId u = 0; u < log.num_users(); ++u) {
    auto train = log.train(u);
    if (train.size() > max_len) train = train.last(max_len);
    const std::size_t pad = max_len - train.size();
    for (std::size_t k = 0; k < train.size(); ++k) {
      std::vector<std::size_t> tokens(max_len, data::Vocabulary::pad());
      for (std::size_t i = 0; i < train.size(); ++i) tokens[pad + i] = vocab.token(train[i]);
      tokens[pad + k] = vocab.mask();
      const auto enc = seq::encode(seq_, tokens, unused, false);
      const std::size_t row[] = {pad + k - enc.first};
      ad::Var user_row;
      if (seq_.config.explicit_user) {
        const std::size_t ur[] = {u};
        user_row = ad::gather_rows(users_, ur);
      }
      const auto logits = seq::next_item_logits(seq_, ad::gather_rows(enc.hidden, row), fused, user_row).value();
      const auto r = eval::rank_ground_truth(logits.data(), train[k]);
      hits += r.rank == 1;
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

// ---- checkpoints --------------------------------------------------------------

std::string Trainer::checkpoint_bytes() const {
  std::vector<Record> records;
  const bool f32 = config_.float32;
  const auto params = parameters();
  for (const auto& v : params) records.push_back(record(v.name(), v.value(), f32));
  auto add_optimizer = [&](const std::string& prefix, const ad::Adam& opt) {
    for (std::size_t k = 0; k < opt.params().size(); ++k) {
      records.push_back(record(prefix + ".m." + opt.params()[k].name(), opt.first_moments()[k], false));
      records.push_back(record(prefix + ".v." + opt.params()[k].name(), opt.second_moments()[k], false));
    }
  };
  add_optimizer("opt.kg", *kg_opt_);
  add_optimizer("opt.seq", *seq_opt_);
  for (std::size_t k = 0; k < best_.size(); ++k) records.push_back(record("best." + params[k].name(), best_[k], f32));
  records.push_back({"history.pretrain", false, {pretrain_losses_.size()}, pretrain_losses_});
  records.push_back({"history.kg", false, {kg_losses_.size()}, kg_losses_});
  records.push_back({"history.seq", false, {seq_losses_.size()}, seq_losses_});
  Record epochs{"history.epochs", false, {history_.size(), 5}, {}};
  for (const auto& h : history_) {
    epochs.values.insert(epochs.values.end(),
                         {static_cast<double>(h.epoch), h.kg_loss, h.seq_loss, h.probe_loss, h.val_ndcg});
  }
  records.push_back(std::move(epochs));
  records.push_back({"state.best_ndcg", false, {1}, {best_ndcg_}});

  nlohmann::ordered_json header;
  header["config"] = to_toml(config_);
  header["rng"] = streams_.serialize();
  header["pretrained"] = pretrained_;
  header["epoch"] = epoch_;
  header["best_epoch"] = best_epoch_;
  header["bad_epochs"] = bad_epochs_;
  header["stopped"] = stopped_;
  header["kg_opt_steps"] = kg_opt_->steps();
  header["seq_opt_steps"] = seq_opt_->steps();
  auto manifest = nlohmann::ordered_json::array();
  std::string payload;
  for (const auto& r : records) {
    manifest.push_back({{"name", r.name}, {"dtype", r.f32 ? "f32" : "f64"}, {"shape", r.shape}});
    for (double x : r.values) {
      if (r.f32) {
        const float f = static_cast<float>(x);
        payload.append(reinterpret_cast<const char*>(&f), sizeof f);
      } else {
        payload.append(reinterpret_cast<const char*>(&x), sizeof x);
      }
    }
  }
  header["tensors"] = std::move(manifest);
  const auto head = header.dump();
  return std::string(kMagic) + std::to_string(head.size()) + "\n" + head + payload;
}

void Trainer::save(const std::filesystem::path& path) const { io::write_atomic(path, checkpoint_bytes()); }

Trainer Trainer::load(const std::filesystem::path& path, const Dataset& data, const RunConfig* expected) {
  return from_bytes(io::read_file(path), data, expected);
}

namespace {

// Splits a checkpoint into its JSON header and the payload offset.
std::pair<nlohmann::json, std::size_t> read_header(const std::string& bytes) {
  const char* where = "checkpoint";
  const std::string magic = kMagic;
  if (bytes.compare(0, magic.size(), magic) != 0) fail(where, "not a checkpoint file");
  const auto nl = bytes.find('\n', magic.size());
  if (nl == std::string::npos) fail(where, "truncated header");
  const std::size_t head_len = std::stoul(bytes.substr(magic.size(), nl - magic.size()));
  if (nl + 1 + head_len > bytes.size()) fail(where, "truncated header");
  return {nlohmann::json::parse(bytes.substr(nl + 1, head_len)), nl + 1 + head_len};
}

}  // namespace

RunConfig Trainer::stored_config(const std::string& bytes) {
  return parse_config(read_header(bytes).first.at("config").get<std::string>());
}

Trainer Trainer::from_bytes(const std::string& bytes, const Dataset& data, const RunConfig* expected) {
  const char* where = "checkpoint";
  const auto [header, payload_start] = read_header(bytes);

  RunConfig config = expected ? *expected : parse_config(header.at("config").get<std::string>());
  Trainer t(config, data);

  std::map<std::string, Record> stored;
  std::size_t offset = payload_start;
  for (const auto& entry : header.at("tensors")) {
    Record r;
    r.name = entry.at("name").get<std::string>();
    r.f32 = entry.at("dtype").get<std::string>() == "f32";
    r.shape = entry.at("shape").get<std::vector<std::size_t>>();
    std::size_t count = 1;
    for (auto d : r.shape) count *= d;
    const std::size_t width = r.f32 ? sizeof(float) : sizeof(double);
    if (offset + count * width > bytes.size()) fail(where, r.name, ": payload is truncated");
    r.values.resize(count);
    for (std::size_t i = 0; i < count; ++i, offset += width) {
      if (r.f32) {
        float f;
        std::memcpy(&f, bytes.data() + offset, sizeof f);
        r.values[i] = f;
      } else {
        std::memcpy(&r.values[i], bytes.data() + offset, sizeof(double));
      }
    }
    stored.emplace(r.name, std::move(r));
  }
  if (offset != bytes.size()) fail(where, "trailing bytes after the last tensor");

  auto take = [&](const std::string& name, const ad::Shape& shape) -> ad::Tensor {
    const auto it = stored.find(name);
    if (it == stored.end()) fail(where, name, ": missing from checkpoint");
    if (it->second.shape != shape) {
      fail(where, name, ": checkpoint shape ", shape_text(it->second.shape), " but the configuration expects ",
           shape_text(shape));
    }
    ad::Tensor out(shape, std::move(it->second.values));
    stored.erase(it);
    return out;
  };
  auto take_vector = [&](const std::string& name) {
    const auto it = stored.find(name);
    if (it == stored.end()) fail(where, name, ": missing from checkpoint");
    auto v = std::move(it->second.values);
    stored.erase(it);
    return v;
  };

  const auto params = t.parameters();
  for (ad::Var v : params) v.mutable_value() = take(v.name(), v.shape());
  auto restore_optimizer = [&](const std::string& prefix, ad::Adam& opt, std::size_t steps) {
    std::vector<ad::Tensor> m, v;
    for (const auto& p : opt.params()) {
      m.push_back(take(prefix + ".m." + p.name(), p.shape()));
      v.push_back(take(prefix + ".v." + p.name(), p.shape()));
    }
    opt.restore(steps, std::move(m), std::move(v));
  };
  restore_optimizer("opt.kg", *t.kg_opt_, header.at("kg_opt_steps").get<std::size_t>());
  restore_optimizer("opt.seq", *t.seq_opt_, header.at("seq_opt_steps").get<std::size_t>());
  if (stored.count("best." + params.front().name())) {
    for (const auto& v : params) t.best_.push_back(take("best." + v.name(), v.shape()));
  }
  t.pretrain_losses_ = take_vector("history.pretrain");
  t.kg_losses_ = take_vector("history.kg");
  t.seq_losses_ = take_vector("history.seq");
  const auto epochs = take_vector("history.epochs");
  for (std::size_t i = 0; i + 5 <= epochs.size(); i += 5) {
    t.history_.push_back({static_cast<std::size_t>(epochs[i]), epochs[i + 1], epochs[i + 2], epochs[i + 3],
                          epochs[i + 4]});
  }
  t.best_ndcg_ = take_vector("state.best_ndcg").at(0);
  if (!stored.empty()) fail(where, stored.begin()->first, ": not part of this model");

  t.streams_.deserialize(header.at("rng").get<std::string>());
  t.pretrained_ = header.at("pretrained").get<bool>();
  t.epoch_ = header.at("epoch").get<std::size_t>();
  t.best_epoch_ = header.at("best_epoch").get<std::size_t>();
  t.bad_epochs_ = header.at("bad_epochs").get<std::size_t>();
  t.stopped_ = header.at("stopped").get<bool>();
  t.refresh_representation();
  return t;
}

}  // namespace katrec::train

#include "katrec/seq_encoder.hpp"

#include <cmath>
#include <string>

#include "katrec/error.hpp"
#include "katrec/params.hpp"

namespace katrec::seq {

namespace {

constexpr double kInitBound = 0.02;

ad::Var param(const ad::Tensor& value, const std::string& name) { return ad::Var::parameter(value, name); }

ad::Var copy_of(const ad::Var& v) {
  return v.requires_grad() ? ad::Var::parameter(v.value(), v.name()) : ad::Var::constant(v.value());
}

void check_config(const SeqConfig& c) {
  if (c.q == 0 || c.heads == 0 || c.q % c.heads != 0) {
    fail("SeqParams", "hidden width ", c.q, " is not divisible by ", c.heads, " heads");
  }
  if (c.max_len < 2) fail("SeqParams", "max_len must be at least 2, got ", c.max_len);
  if (c.dropout < 0.0 || c.dropout >= 1.0) fail("SeqParams", "dropout must be in [0, 1), got ", c.dropout);
}

}  // namespace

ad::Tensor sinusoid_table(std::size_t max_len, std::size_t width) {
  ad::Tensor t({max_len, width});
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < width; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(width));
      t.at(pos, i) = i % 2 == 0 ? std::sin(static_cast<double>(pos) * freq) : std::cos(static_cast<double>(pos) * freq);
    }
  }
  return t;
}

SeqParams SeqParams::init(const SeqConfig& config, std::size_t num_items, std::mt19937_64& rng) {
  check_config(config);
  if (num_items == 0) fail("SeqParams::init", "no items");
  const std::size_t q = config.q, dk = q / config.heads, ff = 4 * q;
  auto draw = [&](const ad::Shape& shape) {
    return ad::trunc_normal_init(shape, -kInitBound, kInitBound, kInitBound, rng);
  };
  SeqParams p;
  p.config = config;
  p.num_items = num_items;
  p.item_table = param(draw({num_items, q}), "seq.item");
  p.mask_token = param(draw({1, q}), "seq.mask");
  p.position = config.positional == PositionalMode::learned ? param(draw({config.max_len, q}), "seq.position")
                                                            : ad::Var::constant(sinusoid_table(config.max_len, q));
  for (std::size_t m = 0; m < config.layers; ++m) {
    const std::string pre = "seq.layer" + std::to_string(m) + ".";
    LayerParams l;
    for (std::size_t h = 0; h < config.heads; ++h) {
      const std::string hs = std::to_string(h);
      l.wq.push_back(param(draw({q, dk}), pre + "wq" + hs));
      l.wk.push_back(param(draw({q, dk}), pre + "wk" + hs));
      l.wv.push_back(param(draw({q, dk}), pre + "wv" + hs));
    }
    l.wo = param(draw({q, q}), pre + "wo");
    l.ln1_gamma = param(ad::Tensor({q}, 1.0), pre + "ln1.gamma");
    l.ln1_beta = param(ad::Tensor({q}, 0.0), pre + "ln1.beta");
    l.ff_w1 = param(draw({q, ff}), pre + "ff.w1");
    l.ff_b1 = param(ad::Tensor({ff}, 0.0), pre + "ff.b1");
    l.ff_w2 = param(draw({ff, q}), pre + "ff.w2");
    l.ff_b2 = param(ad::Tensor({q}, 0.0), pre + "ff.b2");
    l.ln2_gamma = param(ad::Tensor({q}, 1.0), pre + "ln2.gamma");
    l.ln2_beta = param(ad::Tensor({q}, 0.0), pre + "ln2.beta");
    p.layers.push_back(std::move(l));
  }
  p.fusion_w = param(draw({2 * q, q}), "seq.fusion.w");
  p.fusion_b = param(ad::Tensor({q}, 0.0), "seq.fusion.b");
  p.head_w = param(draw({config.explicit_user ? 2 * q : q, q}), "seq.head.w");
  p.head_b = param(ad::Tensor({q}, 0.0), "seq.head.b");
  p.out_bias = param(ad::Tensor({num_items}, 0.0), "seq.out_bias");
  return p;
}

SeqParams SeqParams::clone() const {
  SeqParams p = *this;
  p.item_table = copy_of(item_table);
  p.mask_token = copy_of(mask_token);
  p.position = copy_of(position);
  for (auto& l : p.layers) {
    for (auto* group : {&l.wq, &l.wk, &l.wv})
      for (auto& w : *group) w = copy_of(w);
    for (auto* v : {&l.wo, &l.ln1_gamma, &l.ln1_beta, &l.ff_w1, &l.ff_b1, &l.ff_w2, &l.ff_b2, &l.ln2_gamma,
                    &l.ln2_beta}) {
      *v = copy_of(*v);
    }
  }
  for (auto* v : {&p.fusion_w, &p.fusion_b, &p.head_w, &p.head_b, &p.out_bias}) *v = copy_of(*v);
  return p;
}

std::vector<ad::Var> SeqParams::all() const {
  std::vector<ad::Var> out{item_table, mask_token};
  if (position.requires_grad()) out.push_back(position);
  for (const auto& l : layers) {
    for (std::size_t h = 0; h < l.wq.size(); ++h) {
      out.push_back(l.wq[h]);
      out.push_back(l.wk[h]);
      out.push_back(l.wv[h]);
    }
    out.insert(out.end(), {l.wo, l.ln1_gamma, l.ln1_beta, l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2, l.ln2_gamma,
                           l.ln2_beta});
  }
  out.insert(out.end(), {fusion_w, fusion_b, head_w, head_b, out_bias});
  return out;
}

ad::Var embed_sequence(const SeqParams& params, std::span<const std::size_t> tokens, std::size_t offset) {
  const auto vocab = params.vocab();
  const std::size_t q = params.config.q;
  if (offset + tokens.size() > params.config.max_len) {
    fail("embed_sequence", "positions ", offset, "..", offset + tokens.size(), " exceed max_len ",
         params.config.max_len);
  }
  // Table rows follow the token layout: pad, items, mask.
  const auto table = ad::concat_rows(
      {ad::Var::constant(ad::Tensor({1, q}, 0.0)), params.item_table, params.mask_token});
  std::vector<std::size_t> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= vocab.size()) fail("embed_sequence", "token ", tokens[i], " outside vocabulary ", vocab.size());
    positions[i] = offset + i;
  }
  return ad::add(ad::gather_rows(table, tokens), ad::gather_rows(params.position, positions));
}

LayerOutput transformer_layer(const ad::Var& x, std::span<const std::uint8_t> key_mask, const LayerParams& layer,
                              const SeqConfig& config, std::mt19937_64& rng, bool train) {
  if (x.value().rank() != 2 || x.shape()[1] != config.q) {
    fail("transformer_layer", "expected (len, ", config.q, ") input, got ", ad::shape_string(x.shape()));
  }
  if (!key_mask.empty() && key_mask.size() != x.shape()[0]) {
    fail("transformer_layer", "key mask covers ", key_mask.size(), " positions, input has ", x.shape()[0]);
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(config.q / config.heads));
  LayerOutput out;
  std::vector<ad::Var> heads;
  for (std::size_t h = 0; h < layer.wq.size(); ++h) {
    const auto queries = ad::matmul(x, layer.wq[h]);
    const auto keys = ad::matmul(x, layer.wk[h]);
    const auto values = ad::matmul(x, layer.wv[h]);
    const auto weights = ad::softmax(ad::scale(ad::matmul(queries, ad::transpose(keys)), inv_sqrt), key_mask);
    out.attention.push_back(weights.value());
    heads.push_back(ad::matmul(weights, values));
  }
  const auto attended = ad::matmul(ad::concat(heads), layer.wo);
  const auto mid = ad::layer_norm(ad::add(x, ad::dropout(attended, config.dropout, rng, train)), layer.ln1_gamma,
                                  layer.ln1_beta);
  const auto inner = ad::gelu(ad::add(ad::matmul(mid, layer.ff_w1), layer.ff_b1));
  const auto ff = ad::add(ad::matmul(inner, layer.ff_w2), layer.ff_b2);
  out.hidden = ad::layer_norm(ad::add(mid, ad::dropout(ff, config.dropout, rng, train)), layer.ln2_gamma,
                              layer.ln2_beta);
  return out;
}

Encoding encode(const SeqParams& params, std::span<const std::size_t> tokens, std::mt19937_64& rng, bool train) {
  if (tokens.size() != params.config.max_len) {
    fail("encode", "expected ", params.config.max_len, " tokens, got ", tokens.size());
  }
  Encoding enc;
  while (enc.first < tokens.size() && tokens[enc.first] == data::Vocabulary::pad()) ++enc.first;
  if (enc.first == tokens.size()) fail("encode", "sequence is all padding");
  for (std::size_t i = enc.first; i < tokens.size(); ++i) {
    if (tokens[i] == data::Vocabulary::pad()) fail("encode", "padding after position ", enc.first, " at ", i);
  }
  auto h = embed_sequence(params, tokens.subspan(enc.first), enc.first);
  for (const auto& layer : params.layers) {
    auto out = transformer_layer(h, {}, layer, params.config, rng, train);
    enc.attention.push_back(std::move(out.attention));
    h = out.hidden;
  }
  enc.hidden = h;
  return enc;
}

ad::Var fuse_item_embeddings(const SeqParams& params, const ad::Var& kg_items) {
  if (!params.config.fuse) return params.item_table;
  if (kg_items.shape() != params.item_table.shape()) {
    fail("fuse_item_embeddings", "sequential table ", ad::shape_string(params.item_table.shape()),
         " and graph table ", ad::shape_string(kg_items.shape()), " differ");
  }
  return ad::sigmoid(ad::add(ad::matmul(ad::concat({params.item_table, kg_items}), params.fusion_w), params.fusion_b));
}

ad::Var next_item_logits(const SeqParams& params, const ad::Var& hidden, const ad::Var& fused,
                         const ad::Var& user_rows) {
  ad::Var input = hidden;
  if (params.config.explicit_user) {
    if (!user_rows) fail("next_item_logits", "explicit user head needs user representations");
    input = ad::concat({user_rows, hidden});
  }
  const auto projected = ad::gelu(ad::add(ad::matmul(input, params.head_w), params.head_b));
  return ad::add(ad::matmul(projected, ad::transpose(fused)), params.out_bias);
}

ad::Var cloze_loss(const ad::Var& logits, std::span<const std::size_t> targets, ClozeStats* stats) {
  if (targets.empty()) fail("cloze_loss", "no masked positions");
  if (logits.value().rows() != targets.size()) {
    fail("cloze_loss", targets.size(), " targets for ", logits.value().rows(), " rows of logits");
  }
  const auto picked = ad::pick(ad::softmax(logits), targets);
  if (stats) {
    for (double p : picked.value().data()) stats->clamped += p < kProbabilityFloor;
  }
  return ad::scale(ad::mean(ad::log(picked, kProbabilityFloor)), -1.0);
}

ad::Var sequence_loss(const SeqParams& params, const data::MaskedBatch& batch, const ad::Var& kg_items,
                      const ad::Var& kg_users, std::mt19937_64& rng, bool train, ClozeStats* stats) {
  if (batch.max_len != params.config.max_len) {
    fail("sequence_loss", "batch max_len ", batch.max_len, " differs from model max_len ", params.config.max_len);
  }
  std::vector<ad::Var> rows_hidden;
  std::vector<std::size_t> targets, target_users;
  std::size_t next_target = 0;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const auto enc = encode(params, batch.row_tokens(r), rng, train);
    std::vector<std::size_t> picks;
    for (; next_target < batch.targets.size() && batch.targets[next_target].row == r; ++next_target) {
      const auto& t = batch.targets[next_target];
      picks.push_back(t.position - enc.first);
      targets.push_back(t.item);
      target_users.push_back(batch.users[r]);
    }
    if (!picks.empty()) rows_hidden.push_back(ad::gather_rows(enc.hidden, picks));
  }
  if (next_target != batch.targets.size()) fail("sequence_loss", "batch targets are not grouped by row");
  const auto hidden = ad::concat_rows(rows_hidden);
  const auto fused = fuse_item_embeddings(params, kg_items);
  ad::Var users;
  if (params.config.explicit_user) users = ad::gather_rows(kg_users, target_users);
  return cloze_loss(next_item_logits(params, hidden, fused, users), targets, stats);
}

std::vector<double> score_next(const SeqParams& params, std::span<const std::size_t> tokens, const ad::Var& fused,
                               const ad::Var& user_row) {
  std::mt19937_64 unused(0);
  const auto enc = encode(params, tokens, unused, false);
  const std::size_t last = enc.hidden.shape()[0] - 1;
  const std::size_t rows[] = {last};
  const auto logits = next_item_logits(params, ad::gather_rows(enc.hidden, rows), fused, user_row);
  return {logits.value().data().begin(), logits.value().data().end()};
}

}  // namespace katrec::seq

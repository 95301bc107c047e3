#include "katrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "katrec/error.hpp"
#include "katrec/rng.hpp"

namespace katrec::eval {

namespace {

std::size_t cutoff_index(const std::vector<std::size_t>& cutoffs, std::size_t k) {
  const auto it = std::find(cutoffs.begin(), cutoffs.end(), k);
  if (it == cutoffs.end()) fail("metrics", "cutoff ", k, " was not computed");
  return static_cast<std::size_t>(it - cutoffs.begin());
}

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

RankResult rank_ground_truth(std::span<const double> scores, std::size_t truth) {
  if (truth >= scores.size()) fail("rank_ground_truth", "truth index ", truth, " out of ", scores.size());
  const double t = scores[truth];
  std::size_t ahead = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) fail("rank_ground_truth", "score ", i, " is NaN");
    if (i != truth && scores[i] >= t) ++ahead;
  }
  RankResult r;
  r.rank = ahead + 1;
  r.candidates = scores.size();
  return r;
}

double Metrics::hit_at(std::size_t k) const { return hit[cutoff_index(cutoffs, k)]; }
double Metrics::ndcg_at(std::size_t k) const { return ndcg[cutoff_index(cutoffs, k)]; }

Metrics compute_metrics(std::span<const RankResult> ranks, const std::vector<std::size_t>& cutoffs) {
  Metrics m;
  m.cutoffs = cutoffs;
  m.hit.assign(cutoffs.size(), 0.0);
  m.ndcg.assign(cutoffs.size(), 0.0);
  m.users = ranks.size();
  if (ranks.empty()) return m;
  for (const auto& r : ranks) {
    if (r.rank == 0) fail("compute_metrics", "rank must be 1-based");
    const double gain = 1.0 / std::log2(static_cast<double>(r.rank) + 1.0);
    for (std::size_t k = 0; k < cutoffs.size(); ++k) {
      if (r.rank <= cutoffs[k]) {
        m.hit[k] += 1.0;
        m.ndcg[k] += gain;
      }
    }
    m.map += 1.0 / static_cast<double>(r.rank);
  }
  const double n = static_cast<double>(ranks.size());
  for (std::size_t k = 0; k < cutoffs.size(); ++k) {
    m.hit[k] /= n;
    m.ndcg[k] /= n;
  }
  m.map /= n;
  return m;
}

std::string Bucket::label() const {
  if (hi == std::numeric_limits<std::size_t>::max()) return std::to_string(lo) + "+";
  return std::to_string(lo) + "-" + std::to_string(hi - 1);
}

std::vector<ItemId> eval_negatives(const data::InteractionLog& log, UserId user, const EvalOptions& options) {
  const std::size_t eligible = log.num_items() - log.sequence(user).size();
  auto rng = derive_rng(options.seed, Stream::eval_negatives, user);
  return data::sample_eval_negatives(log, user, std::min(options.negatives, eligible), rng, options.sampling);
}

std::vector<std::size_t> quartile_edges(const data::InteractionLog& log) {
  std::vector<std::size_t> lengths;
  for (UserId u = 0; u < log.num_users(); ++u) lengths.push_back(log.train(u).size());
  if (lengths.empty()) return {};
  std::sort(lengths.begin(), lengths.end());
  std::vector<std::size_t> edges;
  for (std::size_t q = 1; q <= 3; ++q) {
    const std::size_t e = lengths[q * (lengths.size() - 1) / 4];
    if (e > 0 && (edges.empty() || e > edges.back())) edges.push_back(e);
  }
  return edges;
}

std::size_t default_threads() {
  if (const char* env = std::getenv("KATREC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    fail("KATREC_THREADS", "expected a positive integer, got '", env, "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

MetricReport evaluate(const data::InteractionLog& log, const Scorer& scorer, const EvalOptions& options,
                      std::vector<RankResult>* ranks_out) {
  const std::size_t users = log.num_users();
  std::vector<RankResult> slots(users);
  std::vector<std::uint8_t> kept(users, 0);
  std::vector<std::uint8_t> short_list(users, 0);

  // Each user's result lands in its own slot; reduction below runs in user
  // order, so the thread count never changes the report.
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t u = begin; u < end; ++u) {
      const auto user = static_cast<UserId>(u);
      const auto history = log.history(user, options.split);
      if (history.empty()) continue;
      auto candidates = eval_negatives(log, user, options);
      short_list[u] = candidates.size() < options.negatives;
      candidates.insert(candidates.begin(), log.target(user, options.split));
      const auto scores = scorer(user, history, candidates);
      if (scores.size() != candidates.size()) {
        fail("evaluate", "scorer returned ", scores.size(), " scores for ", candidates.size(), " candidates");
      }
      auto r = rank_ground_truth(scores, 0);
      r.user = user;
      r.history = history.size();
      slots[u] = r;
      kept[u] = 1;
    }
  };

  const std::size_t threads = std::clamp<std::size_t>(options.threads ? options.threads : default_threads(), 1,
                                                      std::max<std::size_t>(users, 1));
  if (threads == 1) {
    work(0, users);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const std::size_t chunk = (users + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(std::min(users, t * chunk), std::min(users, (t + 1) * chunk));
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  MetricReport report;
  std::vector<RankResult> ranks;
  for (std::size_t u = 0; u < users; ++u) {
    if (!kept[u]) {
      ++report.skipped_empty;
      continue;
    }
    report.short_lists += short_list[u];
    ranks.push_back(slots[u]);
  }
  report.overall = compute_metrics(ranks, options.cutoffs);

  const auto edges = options.bucket_edges.empty() ? quartile_edges(log) : options.bucket_edges;
  std::size_t lo = 0;
  for (std::size_t b = 0; b <= edges.size(); ++b) {
    Bucket bucket;
    bucket.lo = lo;
    bucket.hi = b < edges.size() ? edges[b] : std::numeric_limits<std::size_t>::max();
    std::vector<RankResult> members;
    for (const auto& r : ranks) {
      if (r.history >= bucket.lo && r.history < bucket.hi) members.push_back(r);
    }
    bucket.metrics = compute_metrics(members, options.cutoffs);
    report.buckets.push_back(std::move(bucket));
    lo = b < edges.size() ? edges[b] : lo;
  }
  if (ranks_out) *ranks_out = std::move(ranks);
  return report;
}

Scorer model_scorer(const seq::SeqParams& params, ad::Var fused, ad::Var kg_users) {
  return [&params, fused, kg_users](UserId user, std::span<const ItemId> history,
                                    std::span<const ItemId> candidates) {
    const auto tokens = data::build_inference_input(history, params.config.max_len, params.vocab());
    ad::Var user_row;
    if (params.config.explicit_user) {
      const std::size_t row[] = {user};
      user_row = ad::gather_rows(kg_users, row);
    }
    const auto all = seq::score_next(params, tokens, fused, user_row);
    std::vector<double> out;
    out.reserve(candidates.size());
    for (ItemId i : candidates) out.push_back(all.at(i));
    return out;
  };
}

ad::Tensor export_attention(const seq::SeqParams& params, std::span<const std::vector<std::size_t>> sequences,
                            std::size_t layer, std::size_t head, std::size_t window) {
  const auto& cfg = params.config;
  if (layer < 1 || layer > cfg.layers) fail("export_attention", "layer ", layer, " not in 1..", cfg.layers);
  if (head < 1 || head > cfg.heads) fail("export_attention", "head ", head, " not in 1..", cfg.heads);
  if (window < 1 || window > cfg.max_len) fail("export_attention", "window ", window, " not in 1..", cfg.max_len);

  ad::Tensor sum({window, window});
  std::vector<double> count(window, 0.0);
  std::mt19937_64 unused(0);
  const std::size_t start = cfg.max_len - window;
  for (const auto& tokens : sequences) {
    if (tokens.size() != cfg.max_len) fail("export_attention", "sequence length ", tokens.size(), " != ", cfg.max_len);
    const auto enc = seq::encode(params, tokens, unused, false);
    const auto& a = enc.attention[layer - 1][head - 1];
    for (std::size_t i = 0; i < window; ++i) {
      const std::size_t qpos = start + i;
      if (qpos < enc.first) continue;
      count[i] += 1.0;
      for (std::size_t j = 0; j < window; ++j) {
        const std::size_t kpos = start + j;
        if (kpos >= enc.first) sum.at(i, j) += a.at(qpos - enc.first, kpos - enc.first);
      }
    }
  }
  for (std::size_t i = 0; i < window; ++i) {
    if (count[i] == 0.0) continue;
    for (std::size_t j = 0; j < window; ++j) sum.at(i, j) /= count[i];
  }
  return sum;
}

ad::Tensor cooccurrence_matrix(const data::InteractionLog& log, std::span<const ItemId> items) {
  if (items.empty()) fail("cooccurrence_matrix", "item subset is empty");
  for (ItemId i : items) {
    if (i >= log.num_items()) fail("cooccurrence_matrix", "item ", i, " out of range");
  }
  const std::size_t k = items.size();
  ad::Tensor m({k, k});
  std::vector<std::uint8_t> present(log.num_items());
  for (UserId u = 0; u < log.num_users(); ++u) {
    std::fill(present.begin(), present.end(), 0);
    for (ItemId i : log.sequence(u)) present[i] = 1;
    for (std::size_t a = 0; a < k; ++a) {
      if (!present[items[a]]) continue;
      for (std::size_t b = 0; b < k; ++b) m.at(a, b) += present[items[b]];
    }
  }
  const double users = static_cast<double>(std::max<std::size_t>(log.num_users(), 1));
  for (double& v : m.data()) v /= users;
  return m;
}

std::string metrics_tsv(const MetricReport& report) {
  std::ostringstream out;
  const auto& m = report.overall;
  out << "metric\tvalue\n";
  for (std::size_t k = 0; k < m.cutoffs.size(); ++k) out << "Hit@" << m.cutoffs[k] << '\t' << number(m.hit[k]) << '\n';
  for (std::size_t k = 0; k < m.cutoffs.size(); ++k) out << "NDCG@" << m.cutoffs[k] << '\t' << number(m.ndcg[k]) << '\n';
  out << "MAP\t" << number(m.map) << '\n';
  out << "users\t" << m.users << '\n';
  out << "skipped_empty\t" << report.skipped_empty << '\n';
  out << "short_lists\t" << report.short_lists << '\n';
  for (const auto& b : report.buckets) {
    const auto& bm = b.metrics;
    out << "bucket[" << b.label() << "].users\t" << bm.users << '\n';
    for (std::size_t k = 0; k < bm.cutoffs.size(); ++k) {
      out << "bucket[" << b.label() << "].Hit@" << bm.cutoffs[k] << '\t' << number(bm.hit[k]) << '\n';
      out << "bucket[" << b.label() << "].NDCG@" << bm.cutoffs[k] << '\t' << number(bm.ndcg[k]) << '\n';
    }
    out << "bucket[" << b.label() << "].MAP\t" << number(bm.map) << '\n';
  }
  return out.str();
}

namespace {

nlohmann::ordered_json metrics_object(const Metrics& m) {
  nlohmann::ordered_json j;
  for (std::size_t k = 0; k < m.cutoffs.size(); ++k) j["Hit@" + std::to_string(m.cutoffs[k])] = m.hit[k];
  for (std::size_t k = 0; k < m.cutoffs.size(); ++k) j["NDCG@" + std::to_string(m.cutoffs[k])] = m.ndcg[k];
  j["MAP"] = m.map;
  j["users"] = m.users;
  return j;
}

}  // namespace

std::string metrics_json(const MetricReport& report) {
  nlohmann::ordered_json j = metrics_object(report.overall);
  j["skipped_empty"] = report.skipped_empty;
  j["short_lists"] = report.short_lists;
  auto buckets = nlohmann::ordered_json::array();
  for (const auto& b : report.buckets) {
    auto entry = metrics_object(b.metrics);
    entry["range"] = b.label();
    buckets.push_back(std::move(entry));
  }
  j["buckets"] = std::move(buckets);
  return j.dump(2) + "\n";
}

std::string matrix_tsv(const ad::Tensor& m, const std::vector<std::string>& header) {
  std::ostringstream out;
  const bool labeled = !header.empty();
  if (labeled) {
    if (header.size() != m.cols() || header.size() != m.rows()) fail("matrix_tsv", "header does not match matrix");
    out << "item";
    for (const auto& h : header) out << '\t' << h;
    out << '\n';
  }
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (labeled) out << header[r] << '\t';
    for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? "\t" : "") << number(m.at(r, c));
    out << '\n';
  }
  return out.str();
}

}  // namespace katrec::eval

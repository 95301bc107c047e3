#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "json.hpp"
#include "katrec/error.hpp"
#include "katrec/eval.hpp"
#include "katrec/params.hpp"
#include "katrec/rng.hpp"

using namespace katrec;
using namespace katrec::eval;

namespace {

// Synthetic log of `users` sequences of distinct random items.
data::InteractionLog random_log(std::size_t users, std::size_t items, std::size_t min_len, std::size_t max_len,
                                std::mt19937_64& rng) {
  std::vector<std::string> user_raw, item_raw;
  for (std::size_t i = 0; i < items; ++i) item_raw.push_back("i" + std::to_string(i));
  std::vector<std::vector<ItemId>> seqs;
  std::vector<ItemId> pool(items);
  std::iota(pool.begin(), pool.end(), 0);
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  for (std::size_t u = 0; u < users; ++u) {
    user_raw.push_back("u" + std::to_string(u));
    std::shuffle(pool.begin(), pool.end(), rng);
    seqs.emplace_back(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(len(rng)));
  }
  return data::InteractionLog::from_sequences(user_raw, item_raw, seqs);
}

// Position of the truth in a stable descending sort that places it after
// every equal score.
std::size_t sorted_rank(const std::vector<double>& scores, std::size_t truth) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a != truth && b == truth;
  });
  return static_cast<std::size_t>(std::find(order.begin(), order.end(), truth) - order.begin()) + 1;
}

RankResult at(std::size_t rank) {
  RankResult r;
  r.rank = rank;
  r.candidates = 101;
  return r;
}

seq::SeqParams tiny_model(std::size_t items, std::size_t max_len, std::uint64_t seed) {
  seq::SeqConfig c;
  c.q = 8;
  c.heads = 2;
  c.layers = 2;
  c.max_len = max_len;
  c.dropout = 0.0;
  std::mt19937_64 rng(seed);
  auto p = seq::SeqParams::init(c, items, rng);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  for (ad::Var v : p.all())
    for (auto& x : v.mutable_value().data()) x = unif(rng);
  return p;
}

EvalOptions seeded(std::uint64_t seed) {
  EvalOptions o;
  o.seed = seed;
  return o;
}

EvalOptions threaded(std::size_t threads) {
  EvalOptions o;
  o.threads = threads;
  return o;
}

}  // namespace

TEST_CASE("rank of a unique maximum is 1") {
  std::vector<double> s(101, 0.0);
  s[7] = 1.0;
  const auto r = rank_ground_truth(s, 7);
  CHECK(r.rank == 1);
  CHECK(r.candidates == 101);
}

TEST_CASE("ties rank the truth last") {
  std::vector<double> s(101, 0.25);
  CHECK(rank_ground_truth(s, 0).rank == 101);
  CHECK(rank_ground_truth(s, 50).rank == 101);
}

TEST_CASE("rank matches a sort oracle") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<int> coarse(0, 20);  // coarse values force ties
    std::vector<double> s(101);
    for (auto& v : s) v = trial % 2 ? coarse(rng) / 4.0 : std::normal_distribution<double>()(rng);
    const std::size_t truth = rng() % s.size();
    CHECK(rank_ground_truth(s, truth).rank == sorted_rank(s, truth));
  }
}

TEST_CASE("NaN scores are rejected") {
  std::vector<double> s(101, 0.0);
  s[3] = std::nan("");
  CHECK_THROWS_AS(rank_ground_truth(s, 0), Error);
}

TEST_CASE("closed-form metrics") {
  const RankResult one[] = {at(1)};
  auto m = compute_metrics(one);
  CHECK(m.hit_at(10) == 1.0);
  CHECK(m.ndcg_at(10) == 1.0);
  CHECK(m.map == 1.0);

  const RankResult three[] = {at(3)};
  m = compute_metrics(three);
  CHECK(m.ndcg_at(10) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(m.map == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(m.hit_at(1) == 0.0);
  CHECK(m.hit_at(5) == 1.0);
  CHECK_THROWS_AS(m.hit_at(20), Error);
}

TEST_CASE("metrics match the summation formulas over the ranked list") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> pick(1, 101);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<RankResult> ranks;
    for (int u = 0; u < 200; ++u) ranks.push_back(at(pick(rng)));
    const auto m = compute_metrics(ranks);

    // Literal per-user sums: rel_i over list positions i, IDCG = 1 with one
    // relevant item, AP = sum_i Prec@i * rel_i.
    std::vector<double> hit(3, 0.0), ndcg(3, 0.0);
    double map = 0.0;
    const std::size_t ks[] = {1, 5, 10};
    for (const auto& r : ranks) {
      std::vector<int> rel(r.candidates, 0);
      rel[r.rank - 1] = 1;
      for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t i = 1; i <= ks[k]; ++i) {
          hit[k] += rel[i - 1];
          ndcg[k] += rel[i - 1] / std::log2(static_cast<double>(i) + 1.0);
        }
      }
      int relevant_so_far = 0;
      for (std::size_t i = 1; i <= rel.size(); ++i) {
        relevant_so_far += rel[i - 1];
        map += static_cast<double>(relevant_so_far) / static_cast<double>(i) * rel[i - 1];
      }
    }
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(std::abs(m.hit[k] - hit[k] / 200.0) < 1e-10);
      CHECK(std::abs(m.ndcg[k] - ndcg[k] / 200.0) < 1e-10);
    }
    CHECK(std::abs(m.map - map / 200.0) < 1e-10);

    CHECK(m.hit_at(1) == m.ndcg_at(1));
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(m.ndcg[k] <= m.hit[k]);
      CHECK(m.hit[k] >= 0.0);
      CHECK(m.hit[k] <= 1.0);
      if (k > 0) {
        CHECK(m.hit[k] >= m.hit[k - 1]);
        CHECK(m.ndcg[k] >= m.ndcg[k - 1]);
      }
    }
  }
}

TEST_CASE("an oracle scorer scores 1 everywhere") {
  std::mt19937_64 rng(11);
  const auto log = random_log(300, 150, 4, 12, rng);
  EvalOptions opt;
  opt.seed = 1;
  const Scorer oracle = [&](UserId u, std::span<const ItemId>, std::span<const ItemId> cands) {
    std::vector<double> s(cands.size(), 0.0);
    for (std::size_t i = 0; i < cands.size(); ++i) s[i] = cands[i] == log.test(u) ? 1.0 : 0.0;
    return s;
  };
  const auto r = evaluate(log, oracle, opt);
  CHECK(r.overall.users == 300);
  for (double h : r.overall.hit) CHECK(h == 1.0);
  for (double n : r.overall.ndcg) CHECK(n == 1.0);
  CHECK(r.overall.map == 1.0);
  CHECK(r.short_lists == 0);
}

TEST_CASE("a uniform random scorer gives Hit@10 near 10/101") {
  std::mt19937_64 rng(12);
  const auto log = random_log(2500, 200, 4, 20, rng);
  EvalOptions opt;
  opt.seed = 99;
  const Scorer random = [](UserId u, std::span<const ItemId>, std::span<const ItemId> cands) {
    auto g = derive_rng(1234, Stream::init, u);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> s(cands.size());
    for (auto& v : s) v = unif(g);
    return s;
  };
  const auto r = evaluate(log, random, opt);
  const double p = 10.0 / 101.0;
  const double n = static_cast<double>(r.overall.users);
  CHECK(n >= 2000);
  const double se = std::sqrt(p * (1 - p) / n);
  CHECK(std::abs(r.overall.hit_at(10) - p) < 3 * se);
}

TEST_CASE("candidate lists are reproducible and exclude the user's items") {
  std::mt19937_64 rng(13);
  const auto log = random_log(50, 150, 4, 12, rng);
  EvalOptions opt;
  opt.seed = 5;
  for (UserId u = 0; u < 50; ++u) {
    const auto a = eval_negatives(log, u, opt);
    CHECK(a == eval_negatives(log, u, opt));
    CHECK(a.size() == 100);
    for (ItemId i : a) CHECK(std::find(log.sequence(u).begin(), log.sequence(u).end(), i) == log.sequence(u).end());
  }
  opt.seed = 6;
  CHECK(eval_negatives(log, 0, opt) != eval_negatives(log, 0, seeded(5)));
}

TEST_CASE("small catalogs clip the negative list") {
  std::mt19937_64 rng(14);
  const auto log = random_log(10, 15, 4, 8, rng);
  EvalOptions opt;
  std::vector<RankResult> ranks;
  const Scorer zero = [](UserId, std::span<const ItemId>, std::span<const ItemId> c) {
    return std::vector<double>(c.size(), 0.0);
  };
  const auto r = evaluate(log, zero, opt, &ranks);
  CHECK(r.short_lists == 10);
  for (const auto& rr : ranks) {
    CHECK(rr.candidates == 15 - log.sequence(rr.user).size() + 1);
    CHECK(rr.rank == rr.candidates);
  }
}

TEST_CASE("threading and bucketing do not change results") {
  std::mt19937_64 rng(15);
  const auto log = random_log(400, 150, 4, 30, rng);
  const Scorer noisy = [](UserId u, std::span<const ItemId> h, std::span<const ItemId> c) {
    std::vector<double> s(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) s[i] = std::sin(1.0 + u * 0.37 + c[i] * 1.3 + h.size());
    return s;
  };
  EvalOptions one;
  one.threads = 1;
  one.bucket_edges = {5, 10, 20};
  EvalOptions four = one;
  four.threads = 4;
  const auto a = evaluate(log, noisy, one);
  const auto b = evaluate(log, noisy, four);
  CHECK(metrics_tsv(a) == metrics_tsv(b));
  REQUIRE(a.buckets.size() == 4);
  CHECK(a.buckets[0].label() == "0-4");
  CHECK(a.buckets[3].label() == "20+");
  std::size_t total = 0;
  for (const auto& bk : a.buckets) total += bk.metrics.users;
  CHECK(total == a.overall.users);

  const auto quart = evaluate(log, noisy, EvalOptions{});
  CHECK(quart.buckets.size() == quartile_edges(log).size() + 1);
}

TEST_CASE("model evaluation leaves parameters untouched") {
  std::mt19937_64 rng(16);
  const auto log = random_log(40, 120, 4, 10, rng);
  auto params = tiny_model(120, 12, 3);
  std::mt19937_64 krng(4);
  const auto kg_items = ad::Var::constant(ad::trunc_normal_init({120, 8}, -1, 1, 1, krng));
  const auto fused = seq::fuse_item_embeddings(params, kg_items);
  const auto before = ad::digest(params.all());
  const auto r1 = evaluate(log, model_scorer(params, fused), threaded(2));
  const auto r2 = evaluate(log, model_scorer(params, fused), threaded(1));
  CHECK(ad::digest(params.all()) == before);
  CHECK(metrics_json(r1) == metrics_json(r2));
}

TEST_CASE("attention export of single-item sequences") {
  const auto params = tiny_model(5, 6, 21);
  std::vector<std::vector<std::size_t>> seqs;
  for (std::size_t t = 1; t <= 5; ++t) {
    std::vector<std::size_t> row(6, 0);
    row.back() = t;
    seqs.push_back(row);
  }
  for (std::size_t layer = 1; layer <= 2; ++layer) {
    for (std::size_t head = 1; head <= 2; ++head) {
      const auto m = export_attention(params, seqs, layer, head, 1);
      REQUIRE(m.shape() == ad::Shape{1, 1});
      CHECK(m.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(export_attention(params, seqs, 3, 1, 1), Error);
  CHECK_THROWS_AS(export_attention(params, seqs, 1, 0, 1), Error);
  CHECK_THROWS_AS(export_attention(params, seqs, 1, 1, 7), Error);
}

TEST_CASE("attention export averages over non-pad queries") {
  const std::size_t max_len = 50, window = 15, items = 30;
  const auto params = tiny_model(items, max_len, 22);
  std::mt19937_64 rng(23);
  std::vector<std::vector<std::size_t>> seqs;
  std::uniform_int_distribution<std::size_t> len(1, max_len), tok(1, items);
  for (int s = 0; s < 12; ++s) {
    std::vector<std::size_t> row(max_len, 0);
    const std::size_t n = s < 4 ? 1 + s : len(rng);  // include sequences shorter than the window
    for (std::size_t i = max_len - n; i < max_len; ++i) row[i] = tok(rng);
    seqs.push_back(row);
  }
  const auto m = export_attention(params, seqs, 2, 1, window);
  REQUIRE(m.shape() == ad::Shape{window, window});

  // Brute force: pad each sequence's attention back to full length first.
  std::vector<std::vector<double>> sum(window, std::vector<double>(window, 0.0));
  std::vector<double> cnt(window, 0.0);
  for (const auto& row : seqs) {
    std::mt19937_64 unused(0);
    const auto enc = seq::encode(params, row, unused, false);
    const auto& a = enc.attention[1][0];
    std::vector<std::vector<double>> full(max_len, std::vector<double>(max_len, 0.0));
    std::vector<bool> real(max_len, false);
    for (std::size_t i = enc.first; i < max_len; ++i) {
      real[i] = true;
      for (std::size_t j = enc.first; j < max_len; ++j) full[i][j] = a.at(i - enc.first, j - enc.first);
    }
    for (std::size_t i = 0; i < window; ++i) {
      if (!real[max_len - window + i]) continue;
      cnt[i] += 1;
      for (std::size_t j = 0; j < window; ++j) sum[i][j] += full[max_len - window + i][max_len - window + j];
    }
  }
  for (std::size_t i = 0; i < window; ++i) {
    double row_sum = 0.0;
    for (std::size_t j = 0; j < window; ++j) {
      const double expect = cnt[i] > 0 ? sum[i][j] / cnt[i] : 0.0;
      CHECK(std::abs(m.at(i, j) - expect) < 1e-12);
      row_sum += m.at(i, j);
    }
    CHECK(row_sum <= 1.0 + 1e-12);
  }
  // The final query position is never padding, and its row covers the
  // whole window only for sequences at least as long as the window.
  CHECK(cnt[window - 1] == 12);
}

TEST_CASE("co-occurrence closed forms") {
  const auto log = data::InteractionLog::from_sequences({"a", "b", "c"}, {"x", "y", "z", "w"},
                                                        {{0, 1, 3}, {0, 2, 3}, {0, 1, 3}});
  const ItemId items[] = {0, 1, 2};
  const auto m = cooccurrence_matrix(log, items);
  CHECK(m.at(0, 0) == 1.0);        // x is in every sequence
  CHECK(m.at(1, 2) == 0.0);        // y and z never meet
  CHECK(m.at(2, 1) == 0.0);
  CHECK(m.at(0, 1) == doctest::Approx(2.0 / 3.0));
  CHECK(m.at(1, 1) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(cooccurrence_matrix(log, std::span<const ItemId>{}), Error);
}

TEST_CASE("co-occurrence matches a nested counting loop") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const auto log = random_log(20 + trial % 7, 12, 2, 8, rng);
    std::vector<ItemId> items;
    for (ItemId i = 0; i < 12; ++i)
      if (rng() % 2) items.push_back(i);
    if (items.empty()) items.push_back(0);
    const auto m = cooccurrence_matrix(log, items);
    for (std::size_t a = 0; a < items.size(); ++a) {
      for (std::size_t b = 0; b < items.size(); ++b) {
        double both = 0;
        for (UserId u = 0; u < log.num_users(); ++u) {
          bool has_a = false, has_b = false;
          for (ItemId i : log.sequence(u)) {
            has_a = has_a || i == items[a];
            has_b = has_b || i == items[b];
          }
          both += has_a && has_b;
        }
        CHECK(std::abs(m.at(a, b) - both / static_cast<double>(log.num_users())) < 1e-10);
        CHECK(m.at(a, b) == m.at(b, a));
      }
    }
  }
}

TEST_CASE("report files") {
  const RankResult ranks[] = {at(1), at(3), at(40)};
  MetricReport r;
  r.overall = compute_metrics(ranks);
  const auto j = nlohmann::json::parse(metrics_json(r));
  CHECK(j["Hit@10"].get<double>() == doctest::Approx(2.0 / 3.0));
  CHECK(j["users"].get<int>() == 3);
  const auto tsv = metrics_tsv(r);
  CHECK(tsv.rfind("metric\tvalue\nHit@1\t", 0) == 0);
  CHECK(tsv.find("MAP\t") != std::string::npos);

  ad::Tensor m({2, 2}, {1.0, 0.5, 0.5, 0.25});
  CHECK(matrix_tsv(m, {"x", "y"}) == "item\tx\ty\nx\t1\t0.5\ny\t0.5\t0.25\n");
  CHECK(matrix_tsv(m) == "1\t0.5\n0.5\t0.25\n");
}

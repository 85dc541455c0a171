#include <doctest.h>

#include <numeric>
#include <random>

#include "cotforge/errors.hpp"
#include "cotforge/grpo.hpp"
#include "oracles.hpp"

using namespace cotforge;
using doctest::Approx;

namespace {

constexpr int kC = 2;
constexpr int kV = 6;

// Group over `p` as π_old, with π_ref = `ref` and the given advantages.
RolloutGroup make_group(const PolicyParams& p, const PolicyParams& ref, int cond,
                        const std::vector<std::vector<int>>& seqs, std::vector<double> adv) {
  RolloutGroup g;
  g.context = {cond, 0};
  for (const auto& s : seqs) {
    g.tokens.push_back(s);
    g.outputs.emplace_back();
    g.old_logprobs.push_back(token_logprobs(p, g.context, s));
    g.ref_logprobs.push_back(token_logprobs(ref, g.context, s));
  }
  g.advantages = std::move(adv);
  return g;
}

std::vector<int> random_seq(std::mt19937_64& rng, int max_len) {
  std::vector<int> s(1 + rng() % max_len);
  for (auto& t : s) t = static_cast<int>(rng() % kV);
  return s;
}

const GrammarSpec& grammar() {
  static const GrammarSpec g = default_grammar();
  return g;
}

struct RftFixture {
  std::vector<RftRecord> data = generate_synthetic_dataset(grammar(), 2, 12, Split::kRft).rft;
  DfStats df;
  RftFixture() {
    std::vector<TokenSequence> refs;
    for (const auto& r : data) refs.push_back(r.reference);
    df = DfStats(refs);
  }
};

}  // namespace

TEST_CASE("group advantages") {
  const std::vector<double> r{1, 2, 3};
  const auto a = group_advantages(r, 1e-8);
  CHECK(a[0] == Approx(-1.224744).epsilon(1e-6));
  CHECK(a[1] == Approx(0.0));
  CHECK(a[2] == Approx(1.224744).epsilon(1e-6));
  const double sd = std::sqrt(2.0 / 3.0);
  for (int i = 0; i < 3; ++i) CHECK(a[i] == Approx((r[i] - 2.0) / (sd + 1e-8)).epsilon(1e-14));

  for (double x : group_advantages(std::vector<double>{0.7, 0.7, 0.7}, 1e-8)) CHECK(x == 0.0);
  CHECK_THROWS_AS(group_advantages(std::vector<double>{1.0}, 1e-8), InvalidArgument);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 2);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> rs(2 + rng() % 10);
    for (auto& x : rs) x = u(rng);
    const auto adv = group_advantages(rs, 1e-8);
    CHECK(std::abs(std::accumulate(adv.begin(), adv.end(), 0.0)) < 1e-9);
  }
}

TEST_CASE("clip arithmetic") {
  CHECK(clipped_term(1.5, 2.0, 0.2) == Approx(1.2 * 2.0));
  // A < 0, ρ = 0.5: the branches are 0.5·A = −1.0 and 0.8·A = −1.6; min takes the clip.
  CHECK(clipped_term(0.5, -2.0, 0.2) == Approx(std::min(0.5 * -2.0, 0.8 * -2.0)));
  CHECK(clipped_term(0.5, -2.0, 0.2) == Approx(-1.6));
  CHECK(clipped_term(1.5, -2.0, 0.2) == Approx(1.5 * -2.0));
  CHECK(clipped_term(0.5, 2.0, 0.2) == Approx(0.5 * 2.0));
  CHECK(clipped_term(1.0, 3.0, 0.2) == 3.0);
}

TEST_CASE("identity policies give the token-weighted mean advantage") {
  std::mt19937_64 rng(5);
  const auto p = oracle::random_params(rng, kC, kV, 1.0);
  const std::vector<std::vector<int>> s1{{1, 2, 3}, {4}}, s2{{0, 5}, {2, 2}, {3}};
  const std::vector<RolloutGroup> groups{make_group(p, p, 0, s1, {0.5, -0.5}),
                                         make_group(p, p, 1, s2, {1.0, -2.0, 1.0})};
  GrpoConfig cfg;
  const auto res = grpo_objective(p, groups, cfg);
  const double g1 = (3 * 0.5 + 1 * -0.5) / 4.0;
  const double g2 = (2 * 1.0 + 2 * -2.0 + 1 * 1.0) / 5.0;
  CHECK(res.value == Approx((g1 + g2) / 2).epsilon(1e-14));
  CHECK(res.mean_kl == 0.0);
  CHECK(res.clip_fraction == 0.0);
  CHECK(res.tokens == 9);
}

TEST_CASE("clip fraction counts tokens outside the trust region") {
  PolicyParams old(kC, kV), now(kC, kV);
  // Raising logit 1 by ln 2 moves ρ for token 1 above 1.2 and for token 0 below 0.8.
  now.adapter(0, 1) = std::log(2.0);
  const auto g = make_group(old, old, 0, {{1}, {0}, {1, 0}}, {1.0, -1.0, 0.0});
  GrpoConfig cfg;
  const auto res = grpo_objective(now, std::vector<RolloutGroup>{g}, cfg);
  int outside = 0, total = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto lp = token_logprobs(now, g.context, g.tokens[i]);
    for (std::size_t t = 0; t < lp.size(); ++t, ++total) {
      const double rho = std::exp(lp[t] - g.old_logprobs[i][t]);
      if (rho < 0.8 || rho > 1.2) ++outside;
    }
  }
  REQUIRE(outside > 0);
  CHECK(res.clip_fraction == Approx(double(outside) / total).epsilon(1e-15));
  CHECK(res.clip_fraction >= 0.0);
  CHECK(res.clip_fraction <= 1.0);
}

TEST_CASE("objective gradient matches central differences") {
  std::mt19937_64 rng(29);
  GrpoConfig cfg;
  cfg.epsilon = 0.9;  // keeps every ratio inside the clip range
  cfg.beta = 0.3;
  for (int trial = 0; trial < 20; ++trial) {
    const auto old = oracle::random_params(rng, kC, kV, 0.5);
    const auto ref = oracle::random_params(rng, kC, kV, 0.5);
    auto now = old;
    std::normal_distribution<double> n(0, 0.05);
    for (auto& x : now.adapter.data()) x += n(rng);
    for (auto& x : now.decoder.data()) x += n(rng);
    const int cond = static_cast<int>(rng() % kC);
    const std::vector<RolloutGroup> groups{
        make_group(old, ref, cond, {random_seq(rng, 3), random_seq(rng, 3)}, {0.8, -0.8})};
    const auto res = grpo_objective(now, groups, cfg);
    REQUIRE(res.clip_fraction == 0.0);
    const auto f = [&](const PolicyParams& q) { return grpo_objective(q, groups, cfg).value; };
    for (int k = 0; k < 10; ++k) {
      const bool adapter = k % 2 == 0;
      const int r = adapter ? cond : groups[0].tokens[k % 2][0];
      const int c = static_cast<int>(rng() % kV);
      const double an = adapter ? res.grad.adapter(r, c) : res.grad.decoder(r, c);
      const double fd = oracle::central_difference(now, adapter, r, c, f);
      CHECK(oracle::relative_error(an, fd) < 1e-5);
    }
  }
}

TEST_CASE("without clip and KL the gradient is REINFORCE with a baseline") {
  std::mt19937_64 rng(41);
  GrpoConfig cfg;
  cfg.beta = 0.0;
  cfg.epsilon = 1e9;
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = oracle::random_params(rng, kC, kV, 1.0);
    const auto ref = oracle::random_params(rng, kC, kV, 1.0);
    std::vector<RolloutGroup> groups;
    std::vector<std::vector<double>> rewards;
    for (int gi = 0; gi < 2; ++gi) {
      std::vector<std::vector<int>> seqs;
      std::vector<double> rs;
      for (int i = 0; i < 4; ++i) {
        seqs.push_back(random_seq(rng, 4));
        rs.push_back(std::uniform_real_distribution<double>(0, 2)(rng));
      }
      groups.push_back(make_group(p, ref, gi, seqs, group_advantages(rs, cfg.adv_eps)));
      rewards.push_back(rs);
    }
    const auto res = grpo_objective(p, groups, cfg);

    PolicyParams want(kC, kV);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const auto& rs = rewards[gi];
      const double mean = std::accumulate(rs.begin(), rs.end(), 0.0) / rs.size();
      double var = 0;
      for (double r : rs) var += (r - mean) * (r - mean);
      const double sd = std::sqrt(var / rs.size());
      double n_tok = 0;
      for (const auto& s : groups[gi].tokens) n_tok += s.size();
      for (std::size_t i = 0; i < rs.size(); ++i) {
        const double w = (rs[i] - mean) / (sd + cfg.adv_eps) / n_tok / groups.size();
        const auto g = oracle::seq_grad(p, static_cast<int>(gi), groups[gi].tokens[i]);
        for (std::size_t k = 0; k < want.adapter.data().size(); ++k)
          want.adapter.data()[k] += w * g.adapter.data()[k];
        for (std::size_t k = 0; k < want.decoder.data().size(); ++k)
          want.decoder.data()[k] += w * g.decoder.data()[k];
      }
    }
    for (std::size_t k = 0; k < want.adapter.data().size(); ++k)
      CHECK(std::abs(res.grad.adapter.data()[k] - want.adapter.data()[k]) < 1e-9);
    for (std::size_t k = 0; k < want.decoder.data().size(); ++k)
      CHECK(std::abs(res.grad.decoder.data()[k] - want.decoder.data()[k]) < 1e-9);
  }
}

TEST_CASE("frozen blocks get no objective gradient") {
  std::mt19937_64 rng(3);
  const auto p = oracle::random_params(rng, kC, kV, 1.0);
  GrpoConfig cfg;
  cfg.mask = FreezeMask::stage1();
  const std::vector<RolloutGroup> groups{make_group(p, p, 0, {{1, 2}, {3}}, {1, -1})};
  const auto res = grpo_objective(p, groups, cfg);
  for (double x : res.grad.decoder.data()) CHECK(x == 0.0);
}

TEST_CASE("sampled groups are fully populated and deterministic") {
  RftFixture fx;
  std::mt19937_64 rng(8);
  const auto p = oracle::random_params(rng, grammar().condition_count(),
                                       grammar().vocabulary.size(), 0.5);
  const auto ref = snapshot_reference(p);
  GrpoConfig cfg;
  cfg.max_len = 10;
  const auto a = sample_group(p, ref, fx.data[0], grammar().vocabulary, fx.df, {}, cfg, 17);
  const auto b = sample_group(p, ref, fx.data[0], grammar().vocabulary, fx.df, {}, cfg, 17);
  CHECK(a.size() == static_cast<std::size_t>(cfg.G));
  CHECK(a.outputs == b.outputs);
  CHECK(a.rewards == b.rewards);
  CHECK(a.advantages.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.tokens[i].size() <= 10);
    CHECK(a.old_logprobs[i] == a.ref_logprobs[i]);
    CHECK(a.rewards[i] == a.scores[i].r_all);
    CHECK(a.outputs[i] == render_output(grammar().vocabulary, a.tokens[i]));
  }
}

TEST_CASE("a degenerate group leaves the parameters unchanged") {
  RftFixture fx;
  PolicyParams p(grammar().condition_count(), grammar().vocabulary.size());
  for (int c = 0; c < p.contexts(); ++c) p.adapter(c, Vocabulary::kEosId) = 30.0;
  const auto ref = snapshot_reference(p);
  GrpoConfig cfg;
  const auto before = p;
  const auto stats = grpo_step(p, ref, std::span(fx.data).first(2), grammar().vocabulary, fx.df,
                               {}, cfg, 0);
  CHECK(p == before);
  CHECK(stats.mean_kl == 0.0);
  CHECK(stats.format_rate == 0.0);
}

TEST_CASE("training loop bookkeeping") {
  RftFixture fx;
  const PolicyParams start(grammar().condition_count(), grammar().vocabulary.size());
  GrpoConfig cfg;
  cfg.steps = 0;
  CHECK(train_rft(start, fx.data, grammar().vocabulary, fx.df, {}, cfg).params == start);

  cfg.steps = 5;
  cfg.G = 4;
  cfg.max_len = 12;
  cfg.batch_size = 3;
  cfg.seed = 11;
  int calls = 0;
  const auto a = train_rft(start, fx.data, grammar().vocabulary, fx.df, {}, cfg,
                           [&](int, const StepStats&) { ++calls; });
  CHECK(a.curve.size() == 5);
  CHECK(calls == 5);
  for (const auto& s : a.curve) {
    CHECK(s.mean_r_all == Approx(s.mean_r_format + s.mean_r_acc));
    CHECK(s.clip_fraction >= 0.0);
    CHECK(s.clip_fraction <= 1.0);
  }
  const auto b = train_rft(start, fx.data, grammar().vocabulary, fx.df, {}, cfg);
  CHECK(reward_curve_csv(a.curve) == reward_curve_csv(b.curve));
  CHECK(a.params == b.params);
  CHECK(reward_curve_csv(a.curve).rfind(std::string(kRewardCurveHeader) + "\n1,", 0) == 0);

  // One record per step: the first update sees π_new == π_ref.
  cfg.batch_size = 1;
  cfg.steps = 2;
  CHECK(train_rft(start, fx.data, grammar().vocabulary, fx.df, {}, cfg).curve[0].mean_kl == 0.0);

  CHECK_THROWS_AS(train_rft(start, {}, grammar().vocabulary, fx.df, {}, cfg), InvalidArgument);
  cfg.G = 1;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}

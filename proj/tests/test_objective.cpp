#include <gtest/gtest.h>

#include <cmath>

#include "dapo/instances.hpp"
#include "dapo/kkt.hpp"
#include "dapo/objective.hpp"
#include "oracles.hpp"

using namespace dapo;

namespace {

AdvantageDataset make_dataset(std::vector<AdvantageRecord> records, double beta) {
    AdvantageDataset ds;
    ds.config.beta = beta;
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.state < b.state; });
    for (const auto& r : records) {
        ds.states[r.state].retained = true;
        ds.states[r.state].sampled.push_back(r.action);
    }
    ds.records = std::move(records);
    return ds;
}

/// Random records with random weights over a subset of states.
AdvantageDataset random_dataset(const StepMdp& mdp, std::uint64_t seed, double beta) {
    rng::CounterRng g(seed);
    std::vector<AdvantageRecord> recs;
    for (StateId s : mdp.nonterminal_states()) {
        if (g.bernoulli(0.3)) continue;
        for (ActionIndex a = 0; a < mdp.num_actions(s); ++a)
            if (g.bernoulli(0.7)) recs.push_back({s, a, g.uniform(-1.0, 1.0), AdvantageSource::critic, g.uniform(0.1, 1.0)});
    }
    if (recs.empty()) recs.push_back({mdp.start_states()[0], 0, 0.3, AdvantageSource::critic, 1.0});
    return make_dataset(std::move(recs), beta);
}

/// Every action of every state, advantages centered under ref: the fit is
/// well posed (a normalized minimizer exists at each state).
AdvantageDataset centered_dataset(const StepMdp& mdp, const TabularPolicy& ref, std::uint64_t seed, double beta) {
    rng::CounterRng g(seed);
    std::vector<AdvantageRecord> recs;
    for (StateId s : mdp.nonterminal_states()) {
        std::vector<double> x(mdp.num_actions(s));
        double mean = 0.0;
        for (ActionIndex a = 0; a < x.size(); ++a) mean += ref.prob(s, a) * (x[a] = g.uniform(-1.0, 1.0));
        for (ActionIndex a = 0; a < x.size(); ++a)
            recs.push_back({s, a, x[a] - mean, AdvantageSource::exact, 1.0 / static_cast<double>(x.size())});
    }
    return make_dataset(std::move(recs), beta);
}

StepMdp layered(std::uint64_t seed) {
    RandomMdpParams p;
    p.depth = 3 + static_cast<int>(seed % 3);
    p.branching_min = 2;
    p.branching_max = 4;
    p.width = 5;
    return random_mdp(p, seed);
}

std::vector<double> flatten(const LogitGradient& g) {
    std::vector<double> out;
    for (const auto& row : g) out.insert(out.end(), row.begin(), row.end());
    return out;
}

TabularPolicy unflatten(const StepMdp& mdp, const std::vector<double>& x) {
    std::vector<std::vector<double>> logits(mdp.num_states());
    std::size_t k = 0;
    for (StateId s = 0; s < mdp.num_states(); ++s)
        for (ActionIndex a = 0; a < mdp.num_actions(s); ++a) logits[s].push_back(x[k++]);
    return TabularPolicy(mdp, std::move(logits));
}

}  // namespace

TEST(DapoLoss, ReferenceWithZeroAdvantages) {
    const auto mdp = make_t2();
    const TabularPolicy ref(mdp);
    const auto s1 = mdp.state("s1");
    const auto ds = make_dataset({{s1, 0, 0.0, AdvantageSource::exact, 0.5}, {s1, 1, 0.0, AdvantageSource::exact, 0.5}}, 1.0);
    EXPECT_EQ(dapo_loss(ds, ref, ref), 0.0);
}

TEST(DapoLoss, SingleRecord) {
    const auto mdp = make_t2();
    const TabularPolicy ref(mdp);
    const auto ds = make_dataset({{mdp.state("s1"), 0, 0.5, AdvantageSource::exact, 1.0}}, 1.0);
    EXPECT_DOUBLE_EQ(dapo_loss(ds, ref, ref), 0.125);
}

TEST(DapoLoss, WeightedMeanAndBetaScaling) {
    const auto mdp = make_t2();
    const TabularPolicy ref(mdp);
    const auto s1 = mdp.state("s1");
    // ½·(0.25·(0.5/2)² + 0.75·(−1/2)²)
    const auto ds = make_dataset({{s1, 0, 0.5, AdvantageSource::exact, 1.0}, {s1, 1, -1.0, AdvantageSource::exact, 3.0}}, 2.0);
    EXPECT_NEAR(dapo_loss(ds, ref, ref), 0.5 * (0.25 * 0.0625 + 0.75 * 0.25), 1e-16);
}

TEST(DapoLoss, NonnegativeAndShiftInvariant) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto mdp = layered(seed);
        const auto ds = random_dataset(mdp, seed, 0.7);
        auto theta = random_policy(mdp, 1.0, seed + 1), ref = random_policy(mdp, 1.0, seed + 2);
        const double before = dapo_loss(ds, theta, ref);
        EXPECT_GE(before, 0.0);
        rng::CounterRng g(seed);
        for (StateId s : mdp.nonterminal_states()) {
            const double c = g.uniform(-5.0, 5.0);
            for (ActionIndex a = 0; a < mdp.num_actions(s); ++a) {
                theta.set_logit(s, a, theta.logit(s, a) + c);
                ref.set_logit(s, a, ref.logit(s, a) - 2 * c);
            }
        }
        EXPECT_NEAR(dapo_loss(ds, theta, ref), before, 1e-12);
    }
}

TEST(DapoGradient, ZeroAtExactFit) {
    const auto mdp = layered(1);
    const auto theta = random_policy(mdp, 1.0, 1), ref = random_policy(mdp, 1.0, 2);
    const double beta = 0.5;
    std::vector<AdvantageRecord> recs;
    for (StateId s : mdp.nonterminal_states())
        for (ActionIndex a = 0; a < mdp.num_actions(s); ++a)
            recs.push_back({s, a, beta * log_ratio(theta, ref, s, a), AdvantageSource::exact, 1.0});
    const auto ds = make_dataset(recs, beta);
    EXPECT_LT(dapo_loss(ds, theta, ref), 1e-28);
    EXPECT_LT(objective_detail::inf_norm(dapo_gradient(ds, theta, ref)), 1e-14);
}

TEST(DapoGradient, SymmetricPushOnT2) {
    const auto mdp = make_t2();
    const TabularPolicy ref(mdp);
    const auto s1 = mdp.state("s1");
    const auto ds = make_dataset({{s1, 0, 0.5, AdvantageSource::exact, 0.5}, {s1, 1, -0.5, AdvantageSource::exact, 0.5}}, 1.0);
    const auto g = dapo_gradient(ds, ref, ref);
    EXPECT_LT(g[s1][0], 0.0);  // descent raises the +0.5 action's logit
    EXPECT_GT(g[s1][1], 0.0);
    EXPECT_NEAR(g[s1][0], -g[s1][1], 1e-16);
    EXPECT_NEAR(g[s1][0], -0.25, 1e-16);
    const auto fd = oracle::central_gradient([&](const std::vector<double>& x) { return dapo_loss(ds, unflatten(mdp, x), ref); },
                                             flatten(ref.all_logits()));
    EXPECT_NEAR(fd[2], g[s1][0], 1e-10);
}

TEST(DapoGradient, RowsSumToZero) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto mdp = layered(seed);
        const auto ds = random_dataset(mdp, seed, 1.0);
        const auto g = dapo_gradient(ds, random_policy(mdp, 2.0, seed), random_policy(mdp, 1.0, seed + 5));
        for (const auto& row : g) {
            double sum = 0.0;
            for (double x : row) sum += x;
            EXPECT_NEAR(sum, 0.0, 1e-15);
        }
    }
}

TEST(DapoGradient, MatchesFiniteDifferences) {
    int instances = 0;
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        const auto mdp = layered(seed);
        const double beta = seed % 3 == 0 ? 0.1 : seed % 3 == 1 ? 1.0 : 10.0;
        const auto ds = random_dataset(mdp, seed, beta);
        const auto theta = random_policy(mdp, 1.0, seed + 100), ref = random_policy(mdp, 1.0, seed + 200);
        const auto analytic = flatten(dapo_gradient(ds, theta, ref));
        const auto numeric = oracle::central_gradient(
            [&](const std::vector<double>& x) { return dapo_loss(ds, unflatten(mdp, x), ref); }, flatten(theta.all_logits()));
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            num = std::max(num, std::abs(analytic[i] - numeric[i]));
            den = std::max(den, std::abs(numeric[i]));
        }
        EXPECT_LT(num / std::max(den, 1e-3), 1e-5) << "seed " << seed;
        ++instances;
    }
    EXPECT_GE(instances, 50);
}

TEST(TrainPolicy, EmptyDatasetReturnsInit) {
    const auto mdp = make_t2();
    const auto init = random_policy(mdp, 1.0, 3);
    AdvantageDataset ds;
    const auto res = train_policy(ds, TabularPolicy(mdp), init);
    EXPECT_EQ(res.policy.all_logits(), init.all_logits());
    EXPECT_EQ(res.steps, 0);
}

TEST(TrainPolicy, MatchesExactSolutionOnT2) {
    const auto mdp = make_t2();
    const TabularPolicy ref(mdp);
    const auto values = evaluate(mdp, ref, ref, 1.0);
    DatasetConfig cfg;
    cfg.m = 16;
    const auto ds = build_advantage_dataset(mdp, all_nonterminal_states(mdp), ref, ValueSource::from_exact(values), cfg, 7);
    const auto res = train_policy(ds, ref, ref);
    EXPECT_TRUE(res.converged);
    EXPECT_LT(res.grad_norm, 1e-7);
    for (StateId s : ds.retained_states()) {
        std::vector<double> adv(mdp.num_actions(s)), nu(mdp.num_actions(s), 1.0 / static_cast<double>(mdp.num_actions(s)));
        for (const auto& r : ds.records)
            if (r.state == s) adv[r.action] = r.a_hat;
        const auto sol = solve_exact_dapo(adv, ref.probabilities(s), nu, 1.0);
        double tv = 0.0;
        for (ActionIndex a = 0; a < adv.size(); ++a) tv += 0.5 * std::abs(res.policy.prob(s, a) - sol.probs[a]);
        EXPECT_LT(tv, 1e-4) << mdp.state_name(s);
    }
    // states filtered out keep the reference
    EXPECT_EQ(res.policy.prob(mdp.state("s2"), 0), 0.5);
}

TEST(TrainPolicy, StatesAreSeparable) {
    const auto mdp = layered(7);
    const auto ref = random_policy(mdp, 1.0, 7);
    const auto ds = random_dataset(mdp, 7, 1.0);
    const auto joint = train_policy(ds, ref, ref).policy;
    for (StateId s : ds.retained_states()) {
        std::vector<AdvantageRecord> own;
        for (const auto& r : ds.records)
            if (r.state == s) own.push_back(r);
        const auto alone = train_policy(make_dataset(own, 1.0), ref, ref).policy;
        for (ActionIndex a = 0; a < mdp.num_actions(s); ++a) EXPECT_EQ(alone.logit(s, a), joint.logit(s, a));
    }
}

TEST(TrainPolicy, FullBatchAgreesWithStateWise) {
    const auto mdp = layered(8);
    const auto ref = random_policy(mdp, 1.0, 8);
    const auto ds = centered_dataset(mdp, ref, 8, 1.0);
    TrainConfig full;
    full.batching = Batching::full;
    const auto a = train_policy(ds, ref, ref);
    const auto b = train_policy(ds, ref, ref, full);
    EXPECT_TRUE(b.converged);
    for (StateId s : ds.retained_states())
        for (ActionIndex a_ = 0; a_ < mdp.num_actions(s); ++a_) EXPECT_NEAR(a.policy.prob(s, a_), b.policy.prob(s, a_), 1e-6);
}

TEST(TrainPolicy, ShuffledSgdReducesLossDeterministically) {
    const auto mdp = layered(9);
    const auto ref = random_policy(mdp, 1.0, 9);
    const auto ds = centered_dataset(mdp, ref, 9, 1.0);
    TrainConfig cfg;
    cfg.batching = Batching::shuffled;
    cfg.batch_size = 4;
    cfg.lr = 0.5;
    cfg.max_steps = 3000;
    cfg.seed = 5;
    const auto a = train_policy(ds, ref, ref, cfg), b = train_policy(ds, ref, ref, cfg);
    EXPECT_EQ(a.policy.all_logits(), b.policy.all_logits());
    EXPECT_LT(a.loss, 0.1 * dapo_loss(ds, ref, ref));
}

TEST(TrainPolicy, DivergenceIsReported) {
    const auto mdp = make_t2();
    const TabularPolicy ref(mdp);
    const auto s1 = mdp.state("s1");
    const auto ds = make_dataset({{s1, 0, 0.5, AdvantageSource::exact, 0.5}, {s1, 1, -0.5, AdvantageSource::exact, 0.5}}, 1.0);
    TrainConfig cfg;
    cfg.batching = Batching::shuffled;
    cfg.lr = 1e6;
    cfg.max_steps = 10000;
    EXPECT_THROW(train_policy(ds, ref, ref, cfg), TrainingDiverged);
}

TEST(TrainPolicy, InvalidConfigRejected) {
    const auto mdp = make_t2();
    const TabularPolicy ref(mdp);
    const auto ds = make_dataset({{mdp.state("s1"), 0, 0.5, AdvantageSource::exact, 1.0}}, 1.0);
    TrainConfig cfg;
    cfg.lr = 0.0;
    EXPECT_THROW(train_policy(ds, ref, ref, cfg), std::invalid_argument);
    EXPECT_THROW(parse_batching("minibatch"), InvalidInput);
}

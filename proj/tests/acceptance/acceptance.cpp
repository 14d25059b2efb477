// Acceptance suite: one PASS/FAIL line per criterion, tolerances and
// runtime budgets pinned below. Exit code 0 iff every criterion passes.

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dapo/dapo.hpp"
#include "oracles.hpp"

using namespace dapo;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kMasterSeed = 20240917;

struct Outcome {
    bool passed = true;
    std::string summary;
    std::vector<std::string> details;  // printed under a failing line
};

void absorb(Outcome& out, const std::vector<CheckReport>& reports) {
    for (const auto& r : reports) {
        if (r.passed) continue;
        out.passed = false;
        char line[256];
        std::snprintf(line, sizeof line, "%s max_residual %.3e > tol %.1e (%zu failing instances)", r.name.c_str(),
                      r.max_residual, r.tolerance, r.failures.size());
        out.details.emplace_back(line);
    }
}

double worst(const std::vector<CheckReport>& reports, const std::string& name) {
    for (const auto& r : reports)
        if (r.name == name) return r.max_residual;
    return std::numeric_limits<double>::infinity();
}

std::string fmt(const char* f, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

InstanceConfig instances(int n, const char* stage) {
    InstanceConfig cfg;
    cfg.instances = n;
    cfg.seed = rng::stage_seed(kMasterSeed, stage);
    return cfg;
}

// ---------------------------------------------------------------------------

Outcome criterion_performance_difference() {
    const auto reports = check_pdl(instances(100, "pdl"));
    Outcome out;
    absorb(out, reports);
    out.summary = "100 instances, max |lhs - rhs| " + fmt("%.2e", worst(reports, "pdl_random")) + " <= 1e-9";
    return out;
}

Outcome criterion_soft_bellman() {
    const auto reports = check_bellman_optimality(instances(100, "bellman"));
    Outcome out;
    absorb(out, reports);
    out.summary = "lse vs numeric max " + fmt("%.2e", worst(reports, "bellman_logsumexp_vs_numeric_max")) +
                  " <= 1e-9, fixed point " + fmt("%.2e", worst(reports, "bellman_fixed_point")) +
                  " <= 1e-10, policy form " + fmt("%.2e", worst(reports, "bellman_optimal_policy_form")) +
                  " <= 1e-10, T2 V*(s1) - log((e+1)/2) " + fmt("%.2e", worst(reports, "bellman_t2_closed_form")) +
                  " <= 1e-9";
    return out;
}

Outcome criterion_surrogate_gradient() {
    const auto reports = check_surrogate_gradient(instances(50, "gradient"));
    Outcome out;
    absorb(out, reports);
    out.summary = "50 instances, relative error " + fmt("%.2e", worst(reports, "surrogate_gradient_random")) + " <= 1e-4";
    return out;
}

Outcome criterion_monotonic_improvement() {
    const auto reports = check_monotonic_improvement(instances(200, "monotone"));
    Outcome out;
    absorb(out, reports);
    out.summary = "200 instances, worst drop " + fmt("%.2e", worst(reports, "monotone_value_improvement")) +
                  " <= 1e-8, lambda chain " + fmt("%.2e", worst(reports, "monotone_state_improvement_above_lambda")) +
                  ", stationarity " + fmt("%.2e", worst(reports, "kkt_stationarity")) + " <= 1e-9, equality case " +
                  fmt("%.2e", worst(reports, "monotone_equality_case_optimal_reference")) + " <= 1e-8, KL identity " +
                  fmt("%.2e", worst(reports, "kkt_lambda_equals_kl_for_reference_nu")) + " <= 1e-8";
    return out;
}

Outcome criterion_critic_fidelity() {
    Outcome out;
    const auto mdp = make_t2();
    const TabularPolicy ref(mdp, "ref");
    const auto exact = evaluate(mdp, ref, ref, 0.0);
    const int n = 4096, reps = 100;
    int good = 0;
    double worst_err = 0.0;
    for (int r = 0; r < reps; ++r) {
        const auto seed = rng::derive_seed(rng::stage_seed(kMasterSeed, "critic_fidelity"), static_cast<std::uint64_t>(r));
        const auto critic = train_critic(mc_targets(mdp, ref, all_nonterminal_states(mdp), n, seed));
        const auto acc = critic_accuracy(mdp, critic, exact);
        worst_err = std::max(worst_err, acc.max_abs_error);
        good += acc.uncovered.empty() && acc.max_abs_error < 0.05;
    }
    if (good < 99) {
        out.passed = false;
        out.details.push_back(std::to_string(reps - good) + " repetitions with error >= 0.05");
    }

    // BCE optimum vs closed-form duplicate-weighted mean
    rng::CounterRng g(rng::stage_seed(kMasterSeed, "bce_closed_form"));
    std::vector<McTarget> targets;
    std::map<StateId, std::pair<double, int>> sums;
    for (int i = 0; i < 200; ++i) {
        const auto s = static_cast<StateId>(g.uniform_int(0, 19));
        const int m = static_cast<int>(g.uniform_int(2, 64));
        const int k = static_cast<int>(g.uniform_int(1, m - 1));
        targets.push_back({s, m, k});
        sums[s].first += static_cast<double>(k) / m;
        sums[s].second += 1;
    }
    double bce_err = 0.0;
    for (auto optimizer : {CriticOptimizer::newton, CriticOptimizer::gradient_descent}) {
        CriticConfig cfg;
        cfg.optimizer = optimizer;
        const auto critic = train_critic(targets, cfg);
        for (const auto& [s, acc] : sums) bce_err = std::max(bce_err, std::abs(*critic.prediction(s) - acc.first / acc.second));
    }
    if (bce_err > 1e-6) {
        out.passed = false;
        out.details.push_back("BCE optimum off closed form by " + fmt("%.2e", bce_err));
    }
    out.summary = std::to_string(good) + "/100 repetitions < 0.05 (worst " + fmt("%.4f", worst_err) +
                  ", Hoeffding half-width at delta=1e-3 " + fmt("%.4f", oracle::hoeffding(n, 1e-3)) +
                  "), BCE closed form " + fmt("%.2e", bce_err) + " <= 1e-6";
    return out;
}

Outcome criterion_end_to_end() {
    Outcome out;
    const auto mdp = make_t2();
    const TabularPolicy ref(mdp, "ref");

    // exact advantages: trained policy vs the KKT solution on every retained state
    DatasetConfig dcfg;  // β = 1, gap threshold 0.1
    const auto values = evaluate(mdp, ref, ref, dcfg.beta);
    const auto ds = build_advantage_dataset(mdp, all_nonterminal_states(mdp), ref, ValueSource::from_exact(values), dcfg,
                                            rng::stage_seed(kMasterSeed, "end_to_end_dataset"));
    const auto trained = train_policy(ds, ref, ref, TrainConfig{}).policy;
    double tv = 0.0;
    std::size_t retained = 0;
    for (StateId s : ds.retained_states()) {
        const std::size_t na = mdp.num_actions(s);
        std::vector<double> adv(na, 0.0), nu(na, 0.0);
        for (const auto& r : ds.records)
            if (r.state == s) adv[r.action] = r.a_hat, nu[r.action] += r.weight;
        const bool full = std::all_of(nu.begin(), nu.end(), [](double w) { return w > 0.0; });
        if (!full) {
            out.passed = false;
            out.details.push_back("state " + mdp.state_name(s) + " lacks full action coverage");
            continue;
        }
        double total = 0.0;
        for (double w : nu) total += w;
        for (double& w : nu) w /= total;
        const auto kkt = solve_exact_dapo(adv, ref.probabilities(s), nu, dcfg.beta);
        const auto p = trained.probabilities(s);
        double d = 0.0;
        for (std::size_t a = 0; a < na; ++a) d += 0.5 * std::abs(p[a] - kkt.probs[a]);
        tv = std::max(tv, d);
        ++retained;
    }
    if (retained == 0 || tv > 1e-4) {
        out.passed = false;
        out.details.push_back("TV to KKT solution " + fmt("%.2e", tv) + " over " + std::to_string(retained) + " states");
    }

    // critic advantages: one round per seed
    int positive = 0;
    for (int r = 0; r < 100; ++r) {
        IterateConfig cfg;
        cfg.source = AdvantageSource::critic;
        cfg.coverage = StateCoverage::generated;
        cfg.critic.completions = 4096;
        cfg.seed = rng::derive_seed(rng::stage_seed(kMasterSeed, "end_to_end_critic"), static_cast<std::uint64_t>(r));
        cfg.train.seed = rng::stage_seed(cfg.seed, "train_policy");
        positive += iterate_dapo(mdp, ref, cfg).front().improvement() > 0.0;
    }
    if (positive < 95) {
        out.passed = false;
        out.details.push_back(std::to_string(positive) + "/100 critic seeds improved");
    }
    out.summary = "exact: TV to KKT " + fmt("%.2e", tv) + " <= 1e-4 on " + std::to_string(retained) +
                  " retained states; critic: " + std::to_string(positive) + "/100 seeds improved (>= 95)";
    return out;
}

Outcome criterion_iterative() {
    Outcome out;
    const auto base = instances(20, "iterative");
    double worst_drop = 0.0, worst_gap = 0.0;
    for (int i = 0; i < base.instances; ++i) {
        const auto inst = make_instance(base, i);
        const auto& mdp = inst.mdp;
        const auto ref0 = inst.policy(0, "ref");
        IterateConfig cfg;
        cfg.iterations = 5;
        cfg.anchor = AnchorMode::fixed;
        cfg.coverage = StateCoverage::all;
        cfg.dataset.beta = inst.beta;
        cfg.dataset.full_action_set = true;
        cfg.dataset.gap_filter = false;
        cfg.seed = inst.seed;
        const auto recs = iterate_dapo(mdp, ref0, cfg);
        const double v_star =
            evaluate(mdp, solve_optimal(mdp, ref0, inst.beta).pi_star, ref0, inst.beta).expected(mdp.initial_distribution());
        for (const auto& r : recs) worst_drop = std::max(worst_drop, -r.improvement());
        const double gap = std::abs(v_star - recs.back().value_after);
        worst_gap = std::max(worst_gap, gap);
        if (gap > 1e-4) out.details.push_back("instance " + std::to_string(i) + " ends " + fmt("%.2e", gap) + " from V*");
    }
    if (worst_drop > 1e-9) out.details.push_back("value dropped by " + fmt("%.2e", worst_drop));
    out.passed = out.details.empty();
    out.summary = "20 MDPs x 5 iterations, worst drop " + fmt("%.2e", worst_drop) + " <= 1e-9, worst |V* - V_5| " +
                  fmt("%.2e", worst_gap) + " <= 1e-4";
    return out;
}

Outcome criterion_reproducibility() {
    Outcome out;
    std::vector<std::pair<std::string, ExperimentConfig>> configs;
    {
        ExperimentConfig c;
        c.mdp.builtin = "t2";
        c.iterate.iterations = 2;
        configs.emplace_back("t2_exact", c);
        c.iterate.source = AdvantageSource::critic;
        c.iterate.coverage = StateCoverage::generated;
        c.iterate.critic.completions = 1024;
        configs.emplace_back("t2_critic", c);
    }
    {
        ExperimentConfig c;
        RandomMdpParams p;
        p.depth = 4;
        p.width = 5;
        c.mdp.random = p;
        c.mdp.random_seed = 3;
        c.iterate.iterations = 3;
        c.iterate.coverage = StateCoverage::generated;
        c.iterate.train.batching = Batching::shuffled;
        c.iterate.train.lr = 0.5;
        c.iterate.train.max_steps = 2000;
        configs.emplace_back("random_shuffled", c);
    }
    const auto root = fs::temp_directory_path() / ("dapo_acceptance_" + std::to_string(::getpid()));
    std::size_t compared = 0;
    for (auto& [name, c] : configs) {
        c.iterate.seed = rng::stage_seed(kMasterSeed, name);
        c.iterate.train.seed = rng::stage_seed(c.iterate.seed, "train_policy");
        std::vector<std::vector<Artifact>> runs;
        for (int k = 0; k < 2; ++k) {
            c.output_dir = (root / (name + "_" + std::to_string(k))).string();
            runs.push_back(run_pipeline(c).artifacts);
        }
        bool same = runs[0].size() == runs[1].size();
        for (std::size_t i = 0; same && i < runs[0].size(); ++i)
            same = runs[0][i].name == runs[1][i].name && runs[0][i].sha256 == runs[1][i].sha256;
        if (!same) out.details.push_back(name + ": artifact hashes differ");
        compared += runs[0].size();
    }
    fs::remove_all(root);
    out.passed = out.details.empty();
    out.summary = std::to_string(configs.size()) + " configs run twice, " + std::to_string(compared) +
                  " artifact hashes identical";
    return out;
}

struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> run;
};

}  // namespace

int main() {
    const std::vector<Criterion> criteria{
        {1, "performance-difference identity", 10.0, criterion_performance_difference},
        {2, "soft Bellman optimality", 10.0, criterion_soft_bellman},
        {3, "surrogate gradient", 30.0, criterion_surrogate_gradient},
        {4, "monotonic improvement", 60.0, criterion_monotonic_improvement},
        {5, "critic fidelity", 60.0, criterion_critic_fidelity},
        {6, "end-to-end step", 120.0, criterion_end_to_end},
        {7, "iterative improvement", 120.0, criterion_iterative},
        {8, "reproducibility", 120.0, criterion_reproducibility},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = c.run();
        } catch (const std::exception& e) {
            out.passed = false;
            out.summary = "threw";
            out.details.emplace_back(e.what());
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_budget = seconds < c.budget_seconds;
        if (!in_budget) out.details.push_back("runtime over budget");
        const bool passed = out.passed && in_budget;
        failed += !passed;
        std::printf("%s %d %s: %s; %.2f s < %.0f s\n", passed ? "PASS" : "FAIL", c.id, c.name, out.summary.c_str(), seconds,
                    c.budget_seconds);
        for (const auto& d : out.details) std::printf("    %s\n", d.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dapo/csv.hpp"
#include "dapo/dataset.hpp"
#include "dapo/exact_values.hpp"
#include "dapo/instances.hpp"
#include "dapo/kkt.hpp"
#include "dapo/mdp.hpp"
#include "dapo/objective.hpp"
#include "dapo/policy.hpp"
#include "dapo/rng.hpp"

namespace dapo {

/// Verdict of one numerical certificate. passed ⇔ max_residual ≤ tolerance.
struct CheckReport {
    std::string name;
    int instances = 0;
    double max_residual = 0.0;
    double tolerance = 0.0;
    bool passed = true;
    std::vector<std::pair<std::uint64_t, double>> failures;  // (instance seed, residual)
    std::string detail;

    void observe(std::uint64_t seed, double residual) {
        if (std::isnan(residual)) residual = std::numeric_limits<double>::infinity();
        max_residual = std::max(max_residual, residual);
        if (residual > tolerance) {
            passed = false;
            if (failures.empty() || failures.back().first != seed) failures.emplace_back(seed, residual);
            else failures.back().second = std::max(failures.back().second, residual);
        }
    }
};

inline CheckReport make_report(std::string name, double tolerance) {
    CheckReport r;
    r.name = std::move(name);
    r.tolerance = tolerance;
    return r;
}

/// Random (mdp, policies, β) instances shared by every certificate.
struct InstanceConfig {
    int instances = 100;
    std::uint64_t seed = 0;
    int depth_min = 2, depth_max = 6;
    int branching_min = 2, branching_max = 4;
    int width_min = 3, width_max = 8;  // states per layer cap (DAG sharing)
    double reward_prob_min = 0.1, reward_prob_max = 0.9;
    std::vector<double> sigmas{0.5, 2.0};
    std::vector<double> betas{0.1, 1.0, 10.0};
};

struct RandomInstance {
    std::uint64_t seed = 0;
    StepMdp mdp;
    double beta = 1.0;
    double sigma = 1.0;
    /// Extra seed for policies drawn by the individual checks.
    std::uint64_t policy_seed = 0;

    TabularPolicy policy(std::uint64_t k, const std::string& tag) const {
        return random_policy(mdp, sigma, rng::derive_seed(policy_seed, k), tag);
    }
};

inline RandomInstance make_instance(const InstanceConfig& cfg, int index) {
    const auto seed = rng::derive_seed(cfg.seed, static_cast<std::uint64_t>(index));
    rng::CounterRng g(seed);
    RandomMdpParams p;
    p.depth = static_cast<int>(g.uniform_int(cfg.depth_min, cfg.depth_max));
    p.branching_min = cfg.branching_min;
    p.branching_max = static_cast<int>(g.uniform_int(cfg.branching_min, cfg.branching_max));
    p.width = static_cast<int>(g.uniform_int(cfg.width_min, cfg.width_max));
    p.reward_prob = g.uniform(cfg.reward_prob_min, cfg.reward_prob_max);
    const double sigma = cfg.sigmas[static_cast<std::size_t>(g.uniform_int(0, static_cast<std::int64_t>(cfg.sigmas.size()) - 1))];
    const double beta = cfg.betas[static_cast<std::size_t>(g.uniform_int(0, static_cast<std::int64_t>(cfg.betas.size()) - 1))];
    auto mdp = random_mdp(p, g.next_u64());
    return RandomInstance{seed, std::move(mdp), beta, sigma, g.next_u64()};
}

// ---------------------------------------------------------------------------
// performance difference
// ---------------------------------------------------------------------------

inline std::vector<CheckReport> check_pdl(const InstanceConfig& cfg) {
    auto random = make_report("pdl_random", 1e-9);
    auto identical = make_report("pdl_identical_policies", 0.0);
    auto stress = make_report("pdl_near_deterministic", 1e-8);
    for (int i = 0; i < cfg.instances; ++i) {
        const auto inst = make_instance(cfg, i);
        const auto mu = inst.mdp.initial_distribution();
        const auto pi = inst.policy(0, "pi"), pi_tilde = inst.policy(1, "pi_tilde"), ref = inst.policy(2, "ref");
        random.observe(inst.seed, performance_difference(inst.mdp, pi, pi_tilde, ref, inst.beta, mu).residual());
        identical.observe(inst.seed, performance_difference(inst.mdp, pi, pi, ref, inst.beta, mu).residual());

        auto extreme = [&](std::uint64_t k) {
            rng::CounterRng g(rng::derive_seed(inst.policy_seed, 1000 + k));
            auto logits = pi.all_logits();
            for (auto& row : logits)
                for (double& z : row) z = g.bernoulli(0.5) ? 20.0 : -20.0;
            return TabularPolicy(inst.mdp, std::move(logits), "extreme");
        };
        stress.observe(inst.seed,
                       performance_difference(inst.mdp, extreme(0), extreme(1), extreme(2), inst.beta, mu).residual());
        ++random.instances, ++identical.instances, ++stress.instances;
    }
    return {random, identical, stress};
}

// ---------------------------------------------------------------------------
// soft Bellman optimality
// ---------------------------------------------------------------------------

/// max_p Σ p·g − β·KL(p‖ref) by multiplicative ascent p ← p^{1/2}·(ref·e^{g/β})^{1/2};
/// the log-distance to the maximizer halves every step.
inline double numeric_soft_max(std::span<const double> g, std::span<const double> ref, double beta) {
    const std::size_t n = g.size();
    std::vector<double> logp(n, -std::log(static_cast<double>(n))), next(n);
    for (int it = 0; it < 200; ++it) {
        for (std::size_t a = 0; a < n; ++a) next[a] = 0.5 * logp[a] + 0.5 * (std::log(ref[a]) + g[a] / beta);
        const double lse = log_sum_exp(next);
        for (std::size_t a = 0; a < n; ++a) logp[a] = next[a] - lse;
    }
    double value = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
        const double p = std::exp(logp[a]);
        value += p * (g[a] - beta * (logp[a] - std::log(ref[a])));
    }
    return value;
}

inline std::vector<CheckReport> check_bellman_optimality(const InstanceConfig& cfg) {
    auto lse = make_report("bellman_logsumexp_vs_numeric_max", 1e-9);
    auto shift = make_report("bellman_constant_shift", 1e-10);
    auto fixed_point = make_report("bellman_fixed_point", 1e-10);
    auto analytic = make_report("bellman_optimal_policy_form", 1e-10);
    auto attains = make_report("bellman_optimal_policy_value", 1e-9);
    auto t2 = make_report("bellman_t2_closed_form", 1e-9);

    for (int i = 0; i < cfg.instances; ++i) {
        const auto inst = make_instance(cfg, i);
        const auto& mdp = inst.mdp;
        const auto ref = inst.policy(0, "ref");
        const auto v = evaluate(mdp, inst.policy(1, "pi"), ref, inst.beta).v;

        const auto backup = bellman_optimal_apply(mdp, ref, inst.beta, v);
        std::vector<double> shifted(v);
        for (double& x : shifted) x += 1.5;
        const auto backup_shifted = bellman_optimal_apply(mdp, ref, inst.beta, shifted);
        for (StateId s : mdp.nonterminal_states()) {
            const auto acts = mdp.actions(s);
            std::vector<double> g(acts.size());
            for (ActionIndex a = 0; a < acts.size(); ++a) g[a] = mdp.reward(s, a) + v[acts[a].next];
            lse.observe(inst.seed, std::abs(backup[s] - numeric_soft_max(g, ref.probabilities(s), inst.beta)));
            shift.observe(inst.seed, std::abs(backup_shifted[s] - backup[s] - 1.5));
        }

        const auto opt = solve_optimal(mdp, ref, inst.beta);
        const auto again = bellman_optimal_apply(mdp, ref, inst.beta, opt.v_star);
        const auto attained = evaluate(mdp, opt.pi_star, ref, inst.beta);
        for (StateId s = 0; s < mdp.num_states(); ++s) {
            fixed_point.observe(inst.seed, std::abs(again[s] - opt.v_star[s]));
            attains.observe(inst.seed, std::abs(attained.v[s] - opt.v_star[s]));
            if (mdp.is_terminal(s)) continue;
            const auto logp = opt.pi_star.log_probabilities(s), logr = ref.log_probabilities(s);
            for (ActionIndex a = 0; a < logp.size(); ++a)
                analytic.observe(inst.seed,
                                 std::abs((logp[a] - logr[a]) - (opt.q_star[s][a] - opt.v_star[s]) / inst.beta));
        }
        ++lse.instances, ++shift.instances, ++fixed_point.instances, ++analytic.instances, ++attains.instances;
    }

    const auto mdp = make_t2();
    const auto opt = solve_optimal(mdp, TabularPolicy(mdp), 1.0);
    const double expected = std::log((std::exp(1.0) + 1.0) / 2.0);
    t2.observe(0, std::abs(opt.v_star[mdp.state("s1")] - expected));
    t2.instances = 1;
    t2.detail = "V*(s1) = " + csv::num(opt.v_star[mdp.state("s1")]);
    return {lse, shift, fixed_point, analytic, attains, t2};
}

// ---------------------------------------------------------------------------
// surrogate gradient
// ---------------------------------------------------------------------------

/// Per-state surrogate dataset: every action once, weighted by π_k(·|s), with
/// targets A^{ref}(s,·). Its dapo_loss is H_s^k.
inline AdvantageDataset surrogate_dataset(const StepMdp& mdp, StateId s, const TabularPolicy& current,
                                          const ValueTable& ref_values, double beta) {
    AdvantageDataset ds;
    ds.config.beta = beta;
    const auto p = current.probabilities(s);
    for (ActionIndex a = 0; a < p.size(); ++a) ds.records.push_back({s, a, ref_values.adv[s][a], AdvantageSource::exact, p[a]});
    ds.states[s].retained = true;
    (void)mdp;
    return ds;
}

/// ‖analytic − numeric‖∞ / max(‖numeric‖∞, floor).
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor = 1e-4) {
    double diff = 0.0, scale = floor;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max(scale, std::abs(numeric[i]));
    }
    return diff / scale;
}

/// Central differences of I_s(π_θ, ref) over the logits of state s.
inline std::vector<double> improvement_fd_gradient(const StepMdp& mdp, const TabularPolicy& theta, const ValueTable& ref_values,
                                                   const TabularPolicy& ref, StateId s, double h = 1e-5) {
    std::vector<double> out(theta.num_actions(s));
    TabularPolicy probe(theta);
    for (ActionIndex a = 0; a < out.size(); ++a) {
        const double z = theta.logit(s, a);
        probe.set_logit(s, a, z + h);
        const double up = one_step_improvement(mdp, probe, ref_values, ref, s);
        probe.set_logit(s, a, z - h);
        const double down = one_step_improvement(mdp, probe, ref_values, ref, s);
        probe.set_logit(s, a, z);
        out[a] = (up - down) / (2 * h);
    }
    return out;
}

inline std::vector<CheckReport> check_surrogate_gradient(const InstanceConfig& cfg) {
    auto identity = make_report("surrogate_gradient_random", 1e-4);
    auto at_ref = make_report("surrogate_gradient_zero_advantage", 1e-12);
    auto scaling = make_report("gradient_beta_scaling", 1e-12);

    for (int i = 0; i < cfg.instances; ++i) {
        const auto inst = make_instance(cfg, i);
        const auto& mdp = inst.mdp;
        const auto ref = inst.policy(0, "ref"), theta_k = inst.policy(1, "theta_k");
        auto ref_values = evaluate(mdp, ref, ref, 0.0);
        ref_values.beta = inst.beta;
        auto doubled = ref_values;
        doubled.beta = 2 * inst.beta;
        for (StateId s : mdp.nonterminal_states()) {
            const auto grad_h = dapo_gradient(surrogate_dataset(mdp, s, theta_k, ref_values, inst.beta), theta_k, ref)[s];
            std::vector<double> analytic(grad_h.size());
            for (std::size_t a = 0; a < analytic.size(); ++a) analytic[a] = -inst.beta * grad_h[a];
            identity.observe(inst.seed, relative_error(analytic, improvement_fd_gradient(mdp, theta_k, ref_values, ref, s)));

            // at θ_k = ref the log-ratio term vanishes and ∇H ∝ 1/β
            const auto g1 = dapo_gradient(surrogate_dataset(mdp, s, ref, ref_values, inst.beta), ref, ref)[s];
            const auto g2 = dapo_gradient(surrogate_dataset(mdp, s, ref, doubled, 2 * inst.beta), ref, ref)[s];
            double scale = 1e-300, diff = 0.0;
            for (std::size_t a = 0; a < g1.size(); ++a) {
                diff = std::max(diff, std::abs(g1[a] - 2 * g2[a]));
                scale = std::max(scale, std::abs(g1[a]));
            }
            scaling.observe(inst.seed, diff / std::max(scale, 1e-12));
        }
        ++identity.instances, ++scaling.instances;

        // zero advantages: a state whose successors share one value, θ_k = ref
        const auto t2 = make_t2();
        const TabularPolicy uniform(t2);
        auto zero = evaluate(t2, uniform, uniform, 0.0);
        zero.beta = inst.beta;
        const StateId s2 = t2.state("s2");
        const auto g = dapo_gradient(surrogate_dataset(t2, s2, uniform, zero, inst.beta), uniform, uniform)[s2];
        const auto fd = improvement_fd_gradient(t2, uniform, zero, uniform, s2);
        double worst = 0.0;
        for (std::size_t a = 0; a < g.size(); ++a) worst = std::max({worst, std::abs(g[a]), std::abs(fd[a])});
        at_ref.observe(inst.seed, worst);
        ++at_ref.instances;
    }
    return {identity, at_ref, scaling};
}

// ---------------------------------------------------------------------------
// monotonic improvement
// ---------------------------------------------------------------------------

inline double kl_to(std::span<const double> p, std::span<const double> q) {
    double total = 0.0;
    for (std::size_t a = 0; a < p.size(); ++a) total += p[a] * (std::log(p[a]) - std::log(q[a]));
    return total;
}

/// Instances alternate ν_A = π_ref (even index) and a random exploratory ν_A.
inline std::vector<CheckReport> check_monotonic_improvement(const InstanceConfig& cfg) {
    auto improve = make_report("monotone_value_improvement", 1e-8);
    auto chain = make_report("monotone_improvement_equals_occupancy_sum", 1e-9);
    auto lower = make_report("monotone_improvement_above_lambda_sum", 1e-8);
    auto per_state = make_report("monotone_state_improvement_above_lambda", 1e-8);
    auto dual = make_report("monotone_lambda_nonnegative", 1e-8);
    auto normalization = make_report("kkt_normalization", 1e-10);
    auto stationarity = make_report("kkt_stationarity", 1e-9);
    auto kl_identity = make_report("kkt_lambda_equals_kl_for_reference_nu", 1e-8);
    auto second_moment = make_report("kkt_second_moment_at_least_one", 1e-12);
    auto equality = make_report("monotone_equality_case_optimal_reference", 1e-8);
    auto strict = make_report("monotone_strict_when_not_optimal", 0.0);
    auto unregularized = make_report("monotone_unregularized_value", 1e-9);

    for (int i = 0; i < cfg.instances; ++i) {
        const auto inst = make_instance(cfg, i);
        const auto& mdp = inst.mdp;
        const double beta = inst.beta;
        const auto mu = mdp.initial_distribution();
        const auto ref = inst.policy(0, "ref");
        const bool nu_is_ref = i % 2 == 0;
        const auto nu = nu_is_ref ? ref : inst.policy(1, "nu");

        auto values = evaluate(mdp, ref, ref, beta);
        const auto sol = exact_dapo_policy(mdp, ref, values, nu);
        const auto after = evaluate(mdp, sol.pi_plus, ref, beta);
        const double gain = after.expected(mu) - values.expected(mu);
        improve.observe(inst.seed, std::max(0.0, -gain));

        const auto visits = occupancy(mdp, sol.pi_plus, mu);
        std::vector<double> i_s(mdp.num_states(), 0.0), lam(mdp.num_states(), 0.0);
        for (StateId s : mdp.nonterminal_states()) {
            const auto& k = sol.states[s];
            i_s[s] = one_step_improvement(mdp, sol.pi_plus, values, ref, s);
            lam[s] = sol.lambda(s);
            per_state.observe(inst.seed, std::max(0.0, lam[s] - i_s[s]));
            dual.observe(inst.seed, std::max(0.0, -lam[s]));
            normalization.observe(inst.seed, k.normalization_residual);
            stationarity.observe(inst.seed, k.stationarity_residual);
            const auto p_ref = ref.probabilities(s), p_nu = nu.probabilities(s), p_plus = sol.pi_plus.probabilities(s);
            if (nu_is_ref) kl_identity.observe(inst.seed, std::abs(lam[s] - beta * kl_to(p_ref, p_plus)));
            double moment = 0.0;
            for (ActionIndex a = 0; a < p_nu.size(); ++a) moment += p_plus[a] * p_plus[a] / p_nu[a];
            second_moment.observe(inst.seed, std::max(0.0, 1.0 - moment));
        }
        const double occupancy_gain = occupancy_expectation(mdp, visits, i_s);
        chain.observe(inst.seed, std::abs(gain - occupancy_gain));
        lower.observe(inst.seed, std::max(0.0, occupancy_expectation(mdp, visits, lam) - gain));

        // a reference that is not a fixed point of the optimality operator must strictly improve
        const auto backup = bellman_optimal_apply(mdp, ref, beta, values.v);
        double certificate = 0.0;
        for (StateId s = 0; s < mdp.num_states(); ++s) certificate = std::max(certificate, std::abs(backup[s] - values.v[s]));
        if (certificate > 1e-6) strict.observe(inst.seed, gain > 0.0 ? 0.0 : certificate);

        const auto base = evaluate(mdp, ref, ref, 0.0), plus = evaluate(mdp, sol.pi_plus, sol.pi_plus, 0.0);
        unregularized.observe(inst.seed, std::max(0.0, base.expected(mu) - plus.expected(mu)));

        // equality case: regress from π_β^* toward the anchor's regularized advantages (all zero)
        const auto opt = solve_optimal(mdp, ref, beta);
        const auto opt_values = evaluate(mdp, opt.pi_star, ref, beta);
        const auto fixed = exact_dapo_policy(mdp, opt.pi_star, opt_values, nu);
        double worst = std::abs(evaluate(mdp, fixed.pi_plus, ref, beta).expected(mu) - opt_values.expected(mu));
        for (StateId s : mdp.nonterminal_states()) worst = std::max(worst, std::abs(fixed.lambda(s)));
        equality.observe(inst.seed, worst);

        for (auto* r : {&improve, &chain, &lower, &per_state, &dual, &normalization, &stationarity, &second_moment,
                        &equality, &strict, &unregularized})
            ++r->instances;
        if (nu_is_ref) ++kl_identity.instances;
    }

    // uniform reference on T2 is not optimal: strict improvement
    const auto t2 = make_t2();
    const TabularPolicy uniform(t2);
    const auto vals = evaluate(t2, uniform, uniform, 1.0);
    const auto sol = exact_dapo_policy(t2, uniform, vals, uniform);
    const auto mu = t2.initial_distribution();
    const double gain = evaluate(t2, sol.pi_plus, uniform, 1.0).expected(mu) - vals.expected(mu);
    strict.observe(0, gain > 0.0 ? 0.0 : 1.0);
    ++strict.instances;
    strict.detail = "T2 uniform-reference gain " + csv::num(gain);

    return {improve, chain, lower, per_state, dual, normalization, stationarity, kl_identity, second_moment, equality, strict,
            unregularized};
}

// ---------------------------------------------------------------------------
// reweighted reference is not normalized
// ---------------------------------------------------------------------------

/// Σ_a ref(a|s)·exp(A(s,a)/β).
inline double exponentiated_mass(std::span<const double> ref, std::span<const double> adv, double beta) {
    double total = 0.0;
    for (std::size_t a = 0; a < ref.size(); ++a) total += ref[a] * std::exp(adv[a] / beta);
    return total;
}

inline std::vector<CheckReport> check_invalid_policy_note(const InstanceConfig& cfg) {
    auto jensen = make_report("jensen_mass_at_least_one", 1e-12);
    auto strict = make_report("jensen_strict_for_nonconstant_advantage", 0.0);
    auto constant = make_report("jensen_constant_advantage_exact", 0.0);
    auto t2_value = make_report("jensen_t2_s1_value", 1e-12);
    auto sweep = make_report("jensen_margin_grows_as_beta_shrinks", 0.0);

    double min_margin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < cfg.instances; ++i) {
        const auto inst = make_instance(cfg, i);
        const auto ref = inst.policy(0, "ref");
        const auto values = evaluate(inst.mdp, ref, ref, 0.0);
        for (StateId s : inst.mdp.nonterminal_states()) {
            const auto p = ref.probabilities(s);
            const double mass = exponentiated_mass(p, values.adv[s], inst.beta);
            jensen.observe(inst.seed, std::max(0.0, 1.0 - mass));
            const auto [lo, hi] = std::minmax_element(values.adv[s].begin(), values.adv[s].end());
            if (*hi - *lo > 1e-6) {
                strict.observe(inst.seed, mass > 1.0 ? 0.0 : 1.0 - mass + std::numeric_limits<double>::min());
                min_margin = std::min(min_margin, mass - 1.0);
            }
        }
        ++jensen.instances, ++strict.instances;
    }
    strict.detail = "smallest strict margin " + csv::num(min_margin);

    const auto t2 = make_t2();
    const TabularPolicy uniform(t2);
    const auto values = evaluate(t2, uniform, uniform, 0.0);
    const StateId s1 = t2.state("s1"), s2 = t2.state("s2");
    const auto p = uniform.probabilities(s1);
    const double mass = exponentiated_mass(p, values.adv[s1], 1.0);
    t2_value.observe(0, std::abs(mass - 0.5 * (std::exp(0.5) + std::exp(-0.5))));
    t2_value.instances = 1;
    t2_value.detail = "mass " + csv::num(mass);
    constant.observe(0, std::abs(exponentiated_mass(uniform.probabilities(s2), values.adv[s2], 1.0) - 1.0));
    constant.instances = 1;

    double previous = 0.0;
    for (double beta : {10.0, 1.0, 0.1, 0.01}) {
        const double margin = exponentiated_mass(p, values.adv[s1], beta) - 1.0;
        sweep.observe(0, margin > previous ? 0.0 : previous - margin + std::numeric_limits<double>::min());
        previous = margin;
    }
    sweep.instances = 1;
    return {jensen, strict, constant, t2_value, sweep};
}

// ---------------------------------------------------------------------------
// suite
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names{"pdl", "bellman", "gradient", "monotone", "jensen"};
    return names;
}

inline std::vector<CheckReport> run_suite(const std::string& suite, const InstanceConfig& cfg) {
    if (suite == "all") {
        std::vector<CheckReport> out;
        for (const auto& name : suite_names()) {
            auto part = run_suite(name, cfg);
            out.insert(out.end(), part.begin(), part.end());
        }
        return out;
    }
    if (suite == "pdl") return check_pdl(cfg);
    if (suite == "bellman") return check_bellman_optimality(cfg);
    if (suite == "gradient") return check_surrogate_gradient(cfg);
    if (suite == "monotone") return check_monotonic_improvement(cfg);
    if (suite == "jensen") return check_invalid_policy_note(cfg);
    throw InvalidInput("unknown suite '" + suite + "'");
}

inline bool all_passed(const std::vector<CheckReport>& reports) {
    return std::all_of(reports.begin(), reports.end(), [](const CheckReport& r) { return r.passed; });
}

/// CSV (check, instances, max_residual, tolerance, passed, failures, detail);
/// failures as "seed:residual" joined by ';'.
inline std::string reports_csv(const std::vector<CheckReport>& reports) {
    csv::Writer w({"check", "instances", "max_residual", "tolerance", "passed", "failures", "detail"});
    for (const auto& r : reports) {
        std::string failures;
        for (const auto& [seed, residual] : r.failures) {
            if (!failures.empty()) failures += ';';
            failures += std::to_string(seed) + ":" + csv::num(residual);
        }
        w.row({r.name, std::to_string(r.instances), csv::num(r.max_residual), csv::num(r.tolerance),
               r.passed ? "true" : "false", failures, r.detail});
    }
    return w.str();
}

}  // namespace dapo

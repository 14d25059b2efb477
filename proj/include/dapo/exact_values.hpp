#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dapo/mdp.hpp"
#include "dapo/policy.hpp"

namespace dapo {

/**
 * Exact KL-regularized values of one policy against one reference.
 *
 * v[s] = V_β^π(s), q[s][a] = r(s,a) + v[f(s,a)], adv[s][a] = q − v − β·log(π/π_ref).
 * Terminal states have v = 0 and empty q/adv rows.
 */
struct ValueTable {
    double beta = 0.0;
    std::vector<double> v;
    std::vector<std::vector<double>> q;
    std::vector<std::vector<double>> adv;
    std::string policy_tag;

    /// P(r(s_T) = 1 | s_0 = s) when beta == 0: the terminal reward at terminal
    /// states, v otherwise.
    double success_probability(const StepMdp& mdp, StateId s) const {
        return mdp.is_terminal(s) ? mdp.terminal_reward(s) : v.at(s);
    }

    /// Σ_s ρ(s)·v(s).
    double expected(std::span<const double> rho) const {
        double total = 0.0;
        for (std::size_t s = 0; s < rho.size(); ++s) total += rho[s] * v[s];
        return total;
    }
};

struct OptimalSolution {
    std::vector<double> v_star;
    std::vector<std::vector<double>> q_star;
    TabularPolicy pi_star;
};

namespace detail {

inline void require_beta(double beta, bool strictly_positive) {
    if (!std::isfinite(beta) || beta < 0.0 || (strictly_positive && beta == 0.0))
        throw std::domain_error(strictly_positive ? "beta must be > 0" : "beta must be >= 0");
}

}  // namespace detail

/// Backward induction over the reverse topological order.
inline ValueTable evaluate(const StepMdp& mdp, const TabularPolicy& policy, const TabularPolicy& ref, double beta) {
    detail::require_beta(beta, false);
    ValueTable t;
    t.beta = beta;
    t.policy_tag = policy.tag();
    t.v.assign(mdp.num_states(), 0.0);
    t.q.resize(mdp.num_states());
    t.adv.resize(mdp.num_states());
    const auto order = mdp.topological_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const StateId s = *it;
        if (mdp.is_terminal(s)) continue;
        const std::size_t n = mdp.num_actions(s);
        const auto logp = policy.log_probabilities(s);
        const auto logr = ref.log_probabilities(s);
        auto& q = t.q[s];
        q.resize(n);
        double v = 0.0;
        for (ActionIndex a = 0; a < n; ++a) {
            q[a] = mdp.reward(s, a) + t.v[mdp.next(s, a)];
            v += std::exp(logp[a]) * (q[a] - beta * (logp[a] - logr[a]));
        }
        t.v[s] = v;
        auto& adv = t.adv[s];
        adv.resize(n);
        for (ActionIndex a = 0; a < n; ++a) adv[a] = q[a] - v - beta * (logp[a] - logr[a]);
    }
    return t;
}

/// [T_β^π v](s) = E_{a~π}[r + v(f(s,a)) − β log(π/π_ref)]; 0 at terminal states.
inline std::vector<double> bellman_apply(const StepMdp& mdp, const TabularPolicy& policy, const TabularPolicy& ref,
                                         double beta, std::span<const double> v) {
    detail::require_beta(beta, false);
    if (v.size() != mdp.num_states()) throw std::invalid_argument("value vector has wrong length");
    std::vector<double> out(mdp.num_states(), 0.0);
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) continue;
        const auto logp = policy.log_probabilities(s);
        const auto logr = ref.log_probabilities(s);
        double total = 0.0;
        for (ActionIndex a = 0; a < logp.size(); ++a)
            total += std::exp(logp[a]) * (mdp.reward(s, a) + v[mdp.next(s, a)] - beta * (logp[a] - logr[a]));
        out[s] = total;
    }
    return out;
}

/// β·log E_{a~π_ref}[exp((r + v(f(s,a)))/β)] at one nonterminal state.
inline double soft_max_backup(const StepMdp& mdp, const TabularPolicy& ref, double beta, std::span<const double> v,
                              StateId s) {
    const auto logr = ref.log_probabilities(s);
    std::vector<double> x(logr.size());
    for (ActionIndex a = 0; a < x.size(); ++a) x[a] = logr[a] + (mdp.reward(s, a) + v[mdp.next(s, a)]) / beta;
    return beta * log_sum_exp(x);
}

/// Soft Bellman optimality operator in its log-sum-exp closed form.
inline std::vector<double> bellman_optimal_apply(const StepMdp& mdp, const TabularPolicy& ref, double beta,
                                                 std::span<const double> v) {
    detail::require_beta(beta, true);
    if (v.size() != mdp.num_states()) throw std::invalid_argument("value vector has wrong length");
    std::vector<double> out(mdp.num_states(), 0.0);
    for (StateId s = 0; s < mdp.num_states(); ++s)
        if (!mdp.is_terminal(s)) out[s] = soft_max_backup(mdp, ref, beta, v, s);
    return out;
}

/**
 * V_β^*, Q_β^* and π_β^* in one reverse-topological sweep. π_β^* is stored
 * with logits log π_ref + (Q^* − V^*)/β.
 */
inline OptimalSolution solve_optimal(const StepMdp& mdp, const TabularPolicy& ref, double beta) {
    detail::require_beta(beta, true);
    OptimalSolution sol;
    sol.v_star.assign(mdp.num_states(), 0.0);
    sol.q_star.resize(mdp.num_states());
    std::vector<std::vector<double>> logits(mdp.num_states());
    const auto order = mdp.topological_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const StateId s = *it;
        if (mdp.is_terminal(s)) continue;
        sol.v_star[s] = soft_max_backup(mdp, ref, beta, sol.v_star, s);
        const auto logr = ref.log_probabilities(s);
        auto& q = sol.q_star[s];
        q.resize(logr.size());
        logits[s].resize(logr.size());
        for (ActionIndex a = 0; a < q.size(); ++a) {
            q[a] = mdp.reward(s, a) + sol.v_star[mdp.next(s, a)];
            logits[s][a] = logr[a] + (q[a] - sol.v_star[s]) / beta;
        }
    }
    sol.pi_star = TabularPolicy(mdp, std::move(logits), "pi_star");
    return sol;
}

/**
 * Expected visit counts d_ρ^π(s) = E[Σ_t 1{s_t = s}] from s_0 ~ ρ, propagated
 * forward through the DAG. Terminal states receive their hitting probability.
 */
inline std::vector<double> occupancy(const StepMdp& mdp, const TabularPolicy& policy, std::span<const double> rho) {
    if (rho.size() != mdp.num_states()) throw std::invalid_argument("distribution has wrong length");
    std::vector<double> d(rho.begin(), rho.end());
    for (StateId s : mdp.topological_order()) {
        if (mdp.is_terminal(s) || d[s] == 0.0) continue;
        const auto p = policy.probabilities(s);
        for (ActionIndex a = 0; a < p.size(); ++a) d[mdp.next(s, a)] += d[s] * p[a];
    }
    return d;
}

/// E_ρ^π[g(s)] = Σ over nonterminal s of d_ρ^π(s)·g(s).
inline double occupancy_expectation(const StepMdp& mdp, std::span<const double> visits, std::span<const double> g) {
    double total = 0.0;
    for (StateId s = 0; s < mdp.num_states(); ++s)
        if (!mdp.is_terminal(s)) total += visits[s] * g[s];
    return total;
}

/**
 * One-step improvement of `policy` over `current` at state s, given the
 * values of `current`: E_{a~π}[adv_current(s,a) − β·log(π/current)], which
 * equals [T_β^π V^current](s) − V^current(s) under the anchor of `values`.
 */
inline double one_step_improvement(const StepMdp& mdp, const TabularPolicy& policy, const ValueTable& values,
                                   const TabularPolicy& current, StateId s) {
    if (mdp.is_terminal(s)) throw std::domain_error("one_step_improvement at terminal state");
    const auto logp = policy.log_probabilities(s);
    const auto logc = current.log_probabilities(s);
    double total = 0.0;
    for (ActionIndex a = 0; a < logp.size(); ++a)
        total += std::exp(logp[a]) * (values.adv[s][a] - values.beta * (logp[a] - logc[a]));
    return total;
}

/// I_s(π, π_ref) = E_{a~π}[A^{π_ref}(s,a) − β log(π/π_ref)] with the
/// unregularized advantage of π_ref.
inline double one_step_improvement(const StepMdp& mdp, const TabularPolicy& policy, const TabularPolicy& ref,
                                   double beta, StateId s) {
    detail::require_beta(beta, false);
    auto values = evaluate(mdp, ref, ref, 0.0);
    values.beta = beta;  // adv is unchanged: π_ref has zero log-ratio to itself
    return one_step_improvement(mdp, policy, values, ref, s);
}

struct PerformanceDifference {
    double lhs = 0.0;
    double rhs = 0.0;
    double residual() const { return std::abs(lhs - rhs); }
};

/// Both sides of V_β^π(ρ) − V_β^π̃(ρ) = E_ρ^π[T_β^π V_β^π̃ − V_β^π̃].
inline PerformanceDifference performance_difference(const StepMdp& mdp, const TabularPolicy& pi,
                                                    const TabularPolicy& pi_tilde, const TabularPolicy& ref,
                                                    double beta, std::span<const double> rho) {
    const auto v_pi = evaluate(mdp, pi, ref, beta);
    const auto v_tilde = evaluate(mdp, pi_tilde, ref, beta);
    PerformanceDifference out;
    out.lhs = v_pi.expected(rho) - v_tilde.expected(rho);
    const auto backup = bellman_apply(mdp, pi, ref, beta, v_tilde.v);
    std::vector<double> integrand(mdp.num_states(), 0.0);
    for (StateId s = 0; s < mdp.num_states(); ++s) integrand[s] = backup[s] - v_tilde.v[s];
    out.rhs = occupancy_expectation(mdp, occupancy(mdp, pi, rho), integrand);
    return out;
}

}  // namespace dapo

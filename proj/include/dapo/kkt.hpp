#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dapo/csv.hpp"
#include "dapo/exact_values.hpp"
#include "dapo/mdp.hpp"
#include "dapo/policy.hpp"

namespace dapo {

/// Solution of the per-state exact DAPO problem.
///
/// u_plus[a] = log(π⁺(a)/ref(a)); stationarity reads
/// target[a] − u_plus[a] = lambda_star·(ref(a)/ν(a))·exp(u_plus[a]).
struct KktSolution {
    std::vector<double> u_plus;
    double lambda_star = 0.0;
    std::vector<double> probs;  // π⁺ = ref·exp(u_plus)
    double normalization_residual = 0.0;
    double stationarity_residual = 0.0;
};

namespace kkt_detail {

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// Root of u + c·e^u = t for c ≥ 0 (strictly increasing in u).
inline double root_positive(double t, double c) {
    if (c == 0.0) return t;
    double hi = t;
    double lo = t - softplus(std::log(c) + t);
    double u = hi;
    for (int it = 0; it < 200; ++it) {
        const double ec = c * std::exp(u);
        const double f = u + ec - t;
        if (f > 0) hi = u; else lo = u;
        if (f == 0.0 || hi - lo <= 2 * std::numeric_limits<double>::epsilon() * std::max(std::abs(lo), std::abs(hi))) break;
        double next = u - f / (1.0 + ec);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (next == u) break;
        u = next;
    }
    return u;
}

/// Smaller root of u − k·e^u = t for k > 0, assuming one exists
/// (k ≤ e^{−t−1}). Increasing in k.
inline double root_negative(double t, double k) {
    double lo = t;                      // g(t) = −k e^t < 0
    double hi = -std::log(k);           // peak of g, g(peak) ≥ 0
    if (hi < lo) hi = lo;
    double u = lo;
    for (int it = 0; it < 300; ++it) {
        const double ek = k * std::exp(u);
        const double f = u - ek - t;
        if (f < 0) lo = u; else hi = u;
        if (f == 0.0 || hi - lo <= 2 * std::numeric_limits<double>::epsilon() * std::max(std::abs(lo), std::abs(hi))) break;
        const double d = 1.0 - ek;
        double next = d > 0 ? u - f / d : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (next == u) break;
        u = next;
    }
    return u;
}

}  // namespace kkt_detail

/**
 * Exact per-state DAPO step: minimize E_ν[(target − u)²] subject to
 * E_ref[exp u] = 1, with target = adv/β.
 *
 * λ ≥ 0 branch (E_ref[exp target] ≥ 1, always the case for advantages
 * centered under ref): λ bracketed in [0, λ_hi] with λ_hi doubled until the
 * normalization drops below 1, bisected, then Newton-polished. Otherwise the
 * multiplier is negative and the smaller root of u − |λ|·w·e^u = target is
 * followed; throws domain_error when no normalized solution exists there.
 */
inline KktSolution solve_exact_dapo(std::span<const double> adv, std::span<const double> ref,
                                    std::span<const double> nu, double beta) {
    detail::require_beta(beta, true);
    const std::size_t n = adv.size();
    if (n == 0 || ref.size() != n || nu.size() != n) throw std::invalid_argument("solve_exact_dapo: size mismatch");
    std::vector<double> target(n), w(n);
    for (std::size_t a = 0; a < n; ++a) {
        if (!(ref[a] > 0.0) || !(nu[a] > 0.0)) throw std::domain_error("solve_exact_dapo: probabilities must be > 0");
        if (!std::isfinite(adv[a])) throw std::domain_error("solve_exact_dapo: non-finite advantage");
        target[a] = adv[a] / beta;
        w[a] = ref[a] / nu[a];
    }

    std::vector<double> u(n);
    auto solve_u = [&](double lambda) {
        for (std::size_t a = 0; a < n; ++a)
            u[a] = lambda >= 0 ? kkt_detail::root_positive(target[a], lambda * w[a])
                               : kkt_detail::root_negative(target[a], -lambda * w[a]);
    };
    auto normalization = [&](double lambda) {
        solve_u(lambda);
        double total = 0.0;
        for (std::size_t a = 0; a < n; ++a) total += ref[a] * std::exp(u[a]);
        return total;
    };
    // dN/dλ from du/dλ = −w e^u / (1 + λ w e^u)
    auto slope = [&](double lambda) {
        double total = 0.0;
        for (std::size_t a = 0; a < n; ++a) {
            const double we = w[a] * std::exp(u[a]);
            total -= ref[a] * std::exp(u[a]) * we / (1.0 + lambda * we);
        }
        return total;
    };

    double lambda = 0.0;
    const double n0 = normalization(0.0);
    if (n0 >= 1.0) {
        double lo = 0.0, hi = 1.0;
        while (normalization(hi) >= 1.0) {
            lo = hi;
            hi *= 2.0;
            if (hi > 1e300) throw std::domain_error("solve_exact_dapo: multiplier bracket overflow");
        }
        for (int it = 0; it < 2000 && hi - lo > 1e-15 * std::max(1.0, hi); ++it) {
            const double mid = 0.5 * (lo + hi);
            if (normalization(mid) >= 1.0) lo = mid; else hi = mid;
        }
        lambda = std::abs(normalization(lo) - 1.0) <= std::abs(normalization(hi) - 1.0) ? lo : hi;
    } else {
        double kmax = std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < n; ++a) kmax = std::min(kmax, std::exp(-target[a] - 1.0) / w[a]);
        if (normalization(-kmax) < 1.0)
            throw std::domain_error("solve_exact_dapo: no normalized stationary point (targets too negative)");
        double lo = -kmax, hi = 0.0;  // normalization increases as λ decreases
        for (int it = 0; it < 2000 && hi - lo > 1e-15 * std::max(1.0, -lo); ++it) {
            const double mid = 0.5 * (lo + hi);
            if (normalization(mid) >= 1.0) lo = mid; else hi = mid;
        }
        lambda = std::abs(normalization(lo) - 1.0) <= std::abs(normalization(hi) - 1.0) ? lo : hi;
    }
    for (int polish = 0; polish < 3; ++polish) {
        const double f = normalization(lambda) - 1.0;
        const double d = slope(lambda);
        if (f == 0.0 || d == 0.0) break;
        const double next = lambda - f / d;
        if (!std::isfinite(next) || (n0 >= 1.0 && next < 0.0)) break;
        const double f_next = normalization(next) - 1.0;
        if (std::abs(f_next) >= std::abs(f)) break;
        lambda = next;
    }
    const double total = normalization(lambda);

    KktSolution sol;
    sol.lambda_star = lambda;
    sol.u_plus = u;
    sol.probs.resize(n);
    sol.normalization_residual = std::abs(total - 1.0);
    for (std::size_t a = 0; a < n; ++a) {
        sol.probs[a] = ref[a] * std::exp(u[a]);
        const double r = std::abs(target[a] - u[a] - lambda * w[a] * std::exp(u[a]));
        sol.stationarity_residual = std::max(sol.stationarity_residual, r);
    }
    return sol;
}

/// Whole-MDP exact DAPO step; entries for terminal states are empty.
struct DapoSolution {
    std::vector<KktSolution> states;
    TabularPolicy pi_plus;
    double beta = 1.0;

    /// λ_s(ν) = β·λ*_s.
    double lambda(StateId s) const { return beta * states.at(s).lambda_star; }
};

/**
 * Assembles π⁺ from per-state KKT solves on full action sets.
 *
 * `current` is the regression reference (log-ratios are taken against it) and
 * `values` must be its evaluation: targets are values.adv/β. With `values`
 * computed against current itself this is the plain exact step; with a fixed
 * KL anchor it is the anchored step (the advantages remain centered under
 * current, so every identity of the plain step carries over).
 */
inline DapoSolution exact_dapo_policy(const StepMdp& mdp, const TabularPolicy& current, const ValueTable& values,
                                      const TabularPolicy& nu) {
    DapoSolution out{{}, current, values.beta};
    out.states.resize(mdp.num_states());
    std::vector<std::vector<double>> logits(mdp.num_states());
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) continue;
        const auto ref = current.probabilities(s);
        const auto nu_s = nu.probabilities(s);
        auto& sol = out.states[s] = solve_exact_dapo(values.adv[s], ref, nu_s, values.beta);
        const auto logr = current.log_probabilities(s);
        logits[s].resize(ref.size());
        for (ActionIndex a = 0; a < ref.size(); ++a) logits[s][a] = logr[a] + sol.u_plus[a];
    }
    out.pi_plus = TabularPolicy(mdp, std::move(logits), "pi_plus");
    return out;
}

/// CSV (state, action, u_plus, lambda_star).
inline std::string dapo_solution_csv(const StepMdp& mdp, const DapoSolution& sol) {
    csv::Writer w({"state", "action", "u_plus", "lambda_star"});
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) continue;
        const auto actions = mdp.actions(s);
        for (ActionIndex a = 0; a < actions.size(); ++a)
            w.row({mdp.state_name(s), actions[a].id, csv::num(sol.states[s].u_plus[a]), csv::num(sol.states[s].lambda_star)});
    }
    return w.str();
}

}  // namespace dapo

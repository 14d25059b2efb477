#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dapo/csv.hpp"
#include "dapo/exact_values.hpp"
#include "dapo/mdp.hpp"
#include "dapo/policy.hpp"
#include "dapo/rng.hpp"
#include "dapo/sampling.hpp"

namespace dapo {

/// Nonterminal state -> number of generator visits (ordered by state id).
using StateVisits = std::map<StateId, std::size_t>;

/// MC_N(s): successes out of n completions from s.
struct McTarget {
    StateId state = 0;
    int n = 1;
    int successes = 0;

    double mc_value() const { return static_cast<double>(successes) / static_cast<double>(n); }
    friend bool operator==(const McTarget&, const McTarget&) = default;
};

/**
 * Runs `rollouts_per_start` generator rollouts from each start state and
 * counts every nonterminal state on the way. Rollout r of start i uses seed
 * derive_seed(seed, i * rollouts_per_start + r).
 */
inline StateVisits generate_states(const StepMdp& mdp, const TabularPolicy& generator, std::span<const StateId> starts,
                                   std::size_t rollouts_per_start, std::uint64_t seed) {
    if (rollouts_per_start < 1) throw std::invalid_argument("rollouts_per_start must be >= 1");
    StateVisits visits;
    for (std::size_t i = 0; i < starts.size(); ++i) {
        for (std::size_t r = 0; r < rollouts_per_start; ++r) {
            const auto traj = sample_trajectory(mdp, generator, starts[i], rng::derive_seed(seed, i * rollouts_per_start + r));
            for (const auto& [s, a] : traj.steps) ++visits[s];
        }
    }
    return visits;
}

/// Completion i from s uses seed derive_seed(seed, i).
inline McTarget mc_estimate(const StepMdp& mdp, const TabularPolicy& completer, StateId s, int n, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("number of completions must be >= 1");
    McTarget t{s, n, 0};
    for (int i = 0; i < n; ++i)
        t.successes += sample_trajectory(mdp, completer, s, rng::derive_seed(seed, static_cast<std::uint64_t>(i))).reward;
    return t;
}

/// One target per visited state (duplicates collapsed); state s uses
/// derive_seed(seed, s) so each estimate is independent of the visit set.
inline std::vector<McTarget> mc_targets(const StepMdp& mdp, const TabularPolicy& completer, const StateVisits& states,
                                        int n, std::uint64_t seed) {
    std::vector<McTarget> out;
    out.reserve(states.size());
    for (const auto& [s, count] : states) out.push_back(mc_estimate(mdp, completer, s, n, rng::derive_seed(seed, s)));
    return out;
}

enum class CriticOptimizer { newton, gradient_descent };

struct CriticConfig {
    double learning_rate = 1.0;  // gradient_descent only
    int epochs = 100000;
    double clamp_epsilon = 1e-6;
    double grad_tol = 1e-8;
    CriticOptimizer optimizer = CriticOptimizer::newton;
};

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Tabular critic V_φ(s) = sigmoid(raw[s]).
struct CriticTable {
    std::map<StateId, double> raw;
    CriticConfig config;
    int epochs_run = 0;
    double final_grad_norm = 0.0;

    std::optional<double> prediction(StateId s) const {
        if (auto it = raw.find(s); it != raw.end()) return sigmoid(it->second);
        return std::nullopt;
    }
};

/// Mean BCE of predictions against targets, predictions clamped to [ε, 1 − ε].
inline double critic_loss(const CriticTable& critic, const std::vector<McTarget>& targets) {
    const double eps = critic.config.clamp_epsilon;
    double total = 0.0;
    for (const auto& t : targets) {
        const double p = std::clamp(critic.prediction(t.state).value_or(0.5), eps, 1.0 - eps);
        const double y = t.mc_value();
        total += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    }
    return targets.empty() ? 0.0 : total / static_cast<double>(targets.size());
}

/**
 * Fits raw scores to minimize mean BCE over the target list. Duplicate
 * entries for a state are weight-merged: the state's optimum is the mean of
 * its mc_values. Targets are clamped to [ε, 1 − ε] so saturated MC values
 * have a finite optimum at the clamp boundary.
 *
 * newton: per-state Newton steps (the Hessian is diagonal), steps capped at 4.
 * gradient_descent: raw -= lr · ∂L/∂raw on the full-batch mean loss.
 * Stops when the gradient ∞-norm of the mean loss drops below grad_tol
 * (Newton takes two further steps first).
 */
inline CriticTable train_critic(const std::vector<McTarget>& targets, const CriticConfig& config = {}) {
    if (config.clamp_epsilon <= 0.0 || config.clamp_epsilon >= 0.5) throw std::invalid_argument("clamp_epsilon must be in (0, 0.5)");
    struct Group {
        double weight = 0.0;
        double target_sum = 0.0;
    };
    std::map<StateId, Group> groups;
    for (const auto& t : targets) {
        if (t.n < 1 || t.successes < 0 || t.successes > t.n) throw std::invalid_argument("malformed MC target");
        auto& g = groups[t.state];
        g.weight += 1.0;
        g.target_sum += t.mc_value();
    }
    const double total = static_cast<double>(targets.size());
    const double eps = config.clamp_epsilon;

    CriticTable critic;
    critic.config = config;
    for (const auto& [s, g] : groups) critic.raw[s] = 0.0;

    auto target_of = [&](const Group& g) { return std::clamp(g.target_sum / g.weight, eps, 1.0 - eps); };
    int polish = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        double grad_norm = 0.0;
        for (auto& [s, g] : groups) {
            const double p = sigmoid(critic.raw[s]);
            grad_norm = std::max(grad_norm, std::abs(g.weight / total * (p - target_of(g))));
        }
        critic.final_grad_norm = grad_norm;
        // Newton converges quadratically: two extra steps reach round-off
        if (grad_norm < config.grad_tol && (config.optimizer != CriticOptimizer::newton || polish++ == 2)) break;
        for (auto& [s, g] : groups) {
            double& r = critic.raw[s];
            const double p = sigmoid(r);
            const double y = target_of(g);
            if (config.optimizer == CriticOptimizer::newton) {
                const double step = (p - y) / std::max(p * (1.0 - p), 1e-300);
                r -= std::clamp(step, -4.0, 4.0);
            } else {
                r -= config.learning_rate * g.weight / total * (p - y);
            }
        }
        critic.epochs_run = epoch + 1;
    }
    return critic;
}

struct CriticAccuracy {
    double max_abs_error = 0.0;
    double mean_abs_error = 0.0;
    std::map<StateId, double> per_state;
    std::vector<StateId> uncovered;
};

/// |V_φ(s) − P(success | s)| over `states` (default: every nonterminal state).
/// `exact` must be a β = 0 evaluation of the completer.
inline CriticAccuracy critic_accuracy(const StepMdp& mdp, const CriticTable& critic, const ValueTable& exact,
                                      std::optional<std::vector<StateId>> states = std::nullopt) {
    if (exact.beta != 0.0) throw std::invalid_argument("critic accuracy needs beta = 0 values");
    const auto list = states ? *states : mdp.nonterminal_states();
    CriticAccuracy out;
    double sum = 0.0;
    for (StateId s : list) {
        const auto p = critic.prediction(s);
        if (!p) {
            out.uncovered.push_back(s);
            continue;
        }
        const double err = std::abs(*p - exact.success_probability(mdp, s));
        out.per_state[s] = err;
        out.max_abs_error = std::max(out.max_abs_error, err);
        sum += err;
    }
    if (!out.per_state.empty()) out.mean_abs_error = sum / static_cast<double>(out.per_state.size());
    return out;
}

// Targets CSV (state, n, successes); critic CSV (state, raw_score).

inline std::string targets_csv(const StepMdp& mdp, const std::vector<McTarget>& targets) {
    csv::Writer w({"state", "n", "successes"});
    for (const auto& t : targets) w.row({mdp.state_name(t.state), std::to_string(t.n), std::to_string(t.successes)});
    return w.str();
}

inline std::vector<McTarget> parse_targets(const StepMdp& mdp, const csv::Table& t) {
    const auto cs = t.column("state"), cn = t.column("n"), ck = t.column("successes");
    std::vector<McTarget> out;
    for (const auto& row : t.rows) {
        const auto s = mdp.find_state(row[cs]);
        if (!s) throw InvalidInput("targets reference unknown state '" + row[cs] + "'");
        const auto n = csv::to_int(row[cn]);
        const auto k = csv::to_int(row[ck]);
        if (n < 1 || k < 0 || k > n) throw InvalidInput("invalid MC target for state '" + row[cs] + "'");
        out.push_back({*s, static_cast<int>(n), static_cast<int>(k)});
    }
    return out;
}

inline std::string critic_csv(const StepMdp& mdp, const CriticTable& critic) {
    csv::Writer w({"state", "raw_score"});
    for (const auto& [s, r] : critic.raw) w.row({mdp.state_name(s), csv::num(r)});
    return w.str();
}

inline CriticTable parse_critic(const StepMdp& mdp, const csv::Table& t) {
    const auto cs = t.column("state"), cr = t.column("raw_score");
    CriticTable critic;
    for (const auto& row : t.rows) {
        const auto s = mdp.find_state(row[cs]);
        if (!s) throw InvalidInput("critic references unknown state '" + row[cs] + "'");
        critic.raw[*s] = csv::to_double(row[cr]);
    }
    return critic;
}

}  // namespace dapo

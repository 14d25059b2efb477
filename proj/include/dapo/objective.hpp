#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dapo/dataset.hpp"
#include "dapo/mdp.hpp"
#include "dapo/policy.hpp"
#include "dapo/rng.hpp"

namespace dapo {

using LogitGradient = std::vector<std::vector<double>>;

namespace objective_detail {

inline double total_weight(std::span<const AdvantageRecord> records) {
    double w = 0.0;
    for (const auto& r : records) w += r.weight;
    return w;
}

/// Weighted loss and (optionally) logit gradient over a record range; every
/// record's state logits are read from `logits`.
inline double loss_and_gradient(std::span<const AdvantageRecord> records, const std::vector<std::vector<double>>& logits,
                                const TabularPolicy& ref, double beta, LogitGradient* grad) {
    const double wsum = total_weight(records);
    if (wsum <= 0.0) return 0.0;
    double loss = 0.0;
    StateId cached = std::numeric_limits<StateId>::max();
    std::vector<double> logp, logr;
    for (const auto& r : records) {
        if (r.state != cached) {
            cached = r.state;
            logp = log_softmax(logits[r.state]);
            logr = ref.log_probabilities(r.state);
        }
        const double residual = r.a_hat / beta - (logp[r.action] - logr[r.action]);
        const double w = r.weight / wsum;
        loss += w * 0.5 * residual * residual;
        if (grad) {
            auto& g = (*grad)[r.state];
            const double c = -residual * w;
            for (std::size_t b = 0; b < g.size(); ++b) g[b] -= c * std::exp(logp[b]);
            g[r.action] += c;
        }
    }
    return loss;
}

inline LogitGradient zero_gradient(const TabularPolicy& theta) {
    LogitGradient g(theta.num_states());
    for (StateId s = 0; s < theta.num_states(); ++s) g[s].assign(theta.num_actions(s), 0.0);
    return g;
}

inline double inf_norm(const LogitGradient& g) {
    double m = 0.0;
    for (const auto& row : g)
        for (double x : row) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace objective_detail

/// ½·E_ω[(Â/β − log(π_θ/π_ref))²], the ω-weighted mean over records.
inline double dapo_loss(const AdvantageDataset& ds, const TabularPolicy& theta, const TabularPolicy& ref) {
    detail::require_beta(ds.config.beta, true);
    return objective_detail::loss_and_gradient(ds.records, theta.all_logits(), ref, ds.config.beta, nullptr);
}

/// Analytic logit gradient of dapo_loss: each record contributes
/// −ω·(Â/β − log ratio)·(onehot(a) − π_θ(·|s)).
inline LogitGradient dapo_gradient(const AdvantageDataset& ds, const TabularPolicy& theta, const TabularPolicy& ref) {
    detail::require_beta(ds.config.beta, true);
    auto g = objective_detail::zero_gradient(theta);
    objective_detail::loss_and_gradient(ds.records, theta.all_logits(), ref, ds.config.beta, &g);
    return g;
}

enum class Batching { state_wise, full, shuffled };

inline std::string to_string(Batching b) {
    switch (b) {
        case Batching::state_wise: return "state_wise";
        case Batching::full: return "full";
        case Batching::shuffled: return "shuffled";
    }
    return "?";
}

inline Batching parse_batching(const std::string& s) {
    if (s == "state_wise") return Batching::state_wise;
    if (s == "full") return Batching::full;
    if (s == "shuffled") return Batching::shuffled;
    throw InvalidInput("unknown batching mode '" + s + "'");
}

struct TrainConfig {
    double lr = 1.0;
    int max_steps = 100000;   // per state for state_wise
    double tol = 0.0;         // stop when the loss improves by less (0 disables)
    double grad_tol = 1e-7;
    Batching batching = Batching::state_wise;
    std::size_t batch_size = 32;  // shuffled only
    std::uint64_t seed = 0;       // shuffled only
};

struct TrainResult {
    TabularPolicy policy;
    int steps = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    bool converged = false;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace objective_detail {

struct DescentOutcome {
    int steps = 0;
    double grad_norm = 0.0;
    bool converged = false;
};

/// Gradient descent with Armijo backtracking on the logits of `states`,
/// fitting the given record range.
inline DescentOutcome descend(std::span<const AdvantageRecord> records, const std::vector<StateId>& states,
                              std::vector<std::vector<double>>& logits, const TabularPolicy& ref, double beta,
                              const TrainConfig& cfg) {
    DescentOutcome out;
    LogitGradient grad(logits.size());
    auto evaluate = [&](const std::vector<std::vector<double>>& z) {
        for (StateId s : states) grad[s].assign(z[s].size(), 0.0);
        return loss_and_gradient(records, z, ref, beta, &grad);
    };
    double loss = evaluate(logits);
    double step = cfg.lr;
    auto trial = logits;
    for (; out.steps < cfg.max_steps; ++out.steps) {
        double gnorm = 0.0, gsq = 0.0;
        for (StateId s : states)
            for (double g : grad[s]) {
                gnorm = std::max(gnorm, std::abs(g));
                gsq += g * g;
            }
        out.grad_norm = gnorm;
        if (gnorm < cfg.grad_tol) {
            out.converged = true;
            return out;
        }
        const auto g_now = grad;
        double next_loss = loss;
        bool accepted = false;
        for (int halvings = 0; halvings < 60; ++halvings) {
            for (StateId s : states)
                for (std::size_t a = 0; a < trial[s].size(); ++a) trial[s][a] = logits[s][a] - step * g_now[s][a];
            next_loss = loss_and_gradient(records, trial, ref, beta, nullptr);
            if (next_loss <= loss - 1e-4 * step * gsq) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) return out;  // no representable descent left
        for (StateId s : states) logits[s] = trial[s];
        const double improvement = loss - next_loss;
        loss = evaluate(logits);
        step = std::min(step * 2.0, cfg.lr * 64.0);
        if (cfg.tol > 0.0 && improvement < cfg.tol) {
            ++out.steps;
            return out;
        }
    }
    double gnorm = 0.0;
    for (StateId s : states)
        for (double g : grad[s]) gnorm = std::max(gnorm, std::abs(g));
    out.grad_norm = gnorm;
    out.converged = gnorm < cfg.grad_tol;
    return out;
}

}  // namespace objective_detail

/**
 * Minimizes dapo_loss over the logits of the dataset's states, starting at
 * `init`; states without records keep their init logits.
 *
 * state_wise: each state's records form their own batch and are descended to
 *   convergence independently (states do not interact in a tabular policy).
 * full: one full-batch descent on the weighted mean loss.
 * shuffled: fixed-step SGD over record minibatches in a seeded order;
 *   throws TrainingDiverged after 100 consecutive full-loss increases.
 */
inline TrainResult train_policy(const AdvantageDataset& ds, const TabularPolicy& ref, const TabularPolicy& init,
                                const TrainConfig& cfg = {}) {
    detail::require_beta(ds.config.beta, true);
    if (!(cfg.lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
    if (cfg.max_steps < 0) throw std::invalid_argument("max_steps must be >= 0");
    const double beta = ds.config.beta;
    auto logits = init.all_logits();
    TrainResult res;
    res.converged = true;

    std::vector<std::size_t> group_start;
    for (std::size_t i = 0; i < ds.records.size(); ++i)
        if (i == 0 || ds.records[i].state != ds.records[i - 1].state) group_start.push_back(i);
    group_start.push_back(ds.records.size());
    std::vector<StateId> states;
    for (std::size_t k = 0; k + 1 < group_start.size(); ++k) states.push_back(ds.records[group_start[k]].state);

    if (ds.records.empty()) {
        res.policy = init;
        return res;
    }

    switch (cfg.batching) {
        case Batching::state_wise: {
            for (std::size_t k = 0; k + 1 < group_start.size(); ++k) {
                std::span<const AdvantageRecord> group(ds.records.data() + group_start[k], group_start[k + 1] - group_start[k]);
                const auto o = objective_detail::descend(group, {states[k]}, logits, ref, beta, cfg);
                res.steps = std::max(res.steps, o.steps);
                res.converged = res.converged && o.converged;
            }
            break;
        }
        case Batching::full: {
            const auto o = objective_detail::descend(ds.records, states, logits, ref, beta, cfg);
            res.steps = o.steps;
            res.converged = o.converged;
            break;
        }
        case Batching::shuffled: {
            if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
            rng::CounterRng g(cfg.seed);
            std::vector<std::size_t> order(ds.records.size());
            std::iota(order.begin(), order.end(), 0);
            double prev = objective_detail::loss_and_gradient(ds.records, logits, ref, beta, nullptr);
            int increases = 0;
            std::size_t cursor = order.size();
            std::vector<AdvantageRecord> batch;
            LogitGradient grad = objective_detail::zero_gradient(init);
            for (res.steps = 0; res.steps < cfg.max_steps; ++res.steps) {
                if (cursor >= order.size()) {
                    for (std::size_t i = order.size(); i > 1; --i)
                        std::swap(order[i - 1], order[static_cast<std::size_t>(g.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
                    cursor = 0;
                }
                batch.clear();
                for (; cursor < order.size() && batch.size() < cfg.batch_size; ++cursor) batch.push_back(ds.records[order[cursor]]);
                std::stable_sort(batch.begin(), batch.end(), [](const auto& a, const auto& b) { return a.state < b.state; });
                for (auto& row : grad) std::fill(row.begin(), row.end(), 0.0);
                objective_detail::loss_and_gradient(batch, logits, ref, beta, &grad);
                for (StateId s : states)
                    for (std::size_t a = 0; a < logits[s].size(); ++a) logits[s][a] -= cfg.lr * grad[s][a];
                const double now = objective_detail::loss_and_gradient(ds.records, logits, ref, beta, nullptr);
                if (!std::isfinite(now)) throw TrainingDiverged("training diverged: non-finite loss at step " + std::to_string(res.steps));
                increases = now > prev ? increases + 1 : 0;
                if (increases >= 100)
                    throw TrainingDiverged("training diverged: loss increased for 100 consecutive steps (step " +
                                           std::to_string(res.steps) + ", loss " + csv::num(now) + ", lr " +
                                           csv::num(cfg.lr) + ")");
                if (cfg.tol > 0.0 && std::abs(prev - now) < cfg.tol) {
                    prev = now;
                    ++res.steps;
                    break;
                }
                prev = now;
            }
            break;
        }
    }

    res.policy = TabularPolicy(init);
    for (StateId s : states) res.policy.set_logits(s, logits[s]);
    res.policy.set_tag("trained");
    res.loss = dapo_loss(ds, res.policy, ref);
    res.grad_norm = objective_detail::inf_norm(dapo_gradient(ds, res.policy, ref));
    if (cfg.batching != Batching::state_wise) res.converged = res.grad_norm < cfg.grad_tol;
    return res;
}

}  // namespace dapo

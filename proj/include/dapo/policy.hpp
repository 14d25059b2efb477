#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dapo/mdp.hpp"

namespace dapo {

/// log Σ exp(x) without overflow.
inline double log_sum_exp(std::span<const double> x) {
    if (x.empty()) return -std::numeric_limits<double>::infinity();
    const double m = *std::max_element(x.begin(), x.end());
    double sum = 0.0;
    for (double v : x) sum += std::exp(v - m);
    return m + std::log(sum);
}

/// Log-softmax; shifts by the max before subtracting so large common offsets cancel exactly.
inline std::vector<double> log_softmax(std::span<const double> z) {
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - m);
    const double log_sum = std::log(sum);
    std::vector<double> out(z.size());
    for (std::size_t a = 0; a < z.size(); ++a) out[a] = (z[a] - m) - log_sum;
    return out;
}

/**
 * Softmax policy over an MDP's per-state action lists.
 *
 * Logits are stored per (state, action); terminal states have none. Finite
 * logits give strictly positive probabilities at every nonterminal state.
 */
class TabularPolicy {
public:
    TabularPolicy() = default;

    /// Uniform policy (all-zero logits).
    explicit TabularPolicy(const StepMdp& mdp, std::string tag = "uniform") : tag_(std::move(tag)) {
        logits_.resize(mdp.num_states());
        for (StateId s = 0; s < mdp.num_states(); ++s) logits_[s].assign(mdp.num_actions(s), 0.0);
    }

    TabularPolicy(const StepMdp& mdp, std::vector<std::vector<double>> logits, std::string tag = "policy")
        : logits_(std::move(logits)), tag_(std::move(tag)) {
        if (logits_.size() != mdp.num_states()) throw std::invalid_argument("policy shape does not match MDP");
        for (StateId s = 0; s < mdp.num_states(); ++s) {
            if (logits_[s].size() != mdp.num_actions(s))
                throw std::invalid_argument("policy shape does not match MDP at state '" + mdp.state_name(s) + "'");
            for (double z : logits_[s])
                if (!std::isfinite(z)) throw std::invalid_argument("non-finite logit at state '" + mdp.state_name(s) + "'");
        }
    }

    std::size_t num_states() const noexcept { return logits_.size(); }
    std::size_t num_actions(StateId s) const { return checked(s).size(); }

    std::span<const double> logits(StateId s) const { return checked(s); }
    double logit(StateId s, ActionIndex a) const { return checked_action(s, a), logits_[s][a]; }
    void set_logit(StateId s, ActionIndex a, double z) {
        checked_action(s, a);
        if (!std::isfinite(z)) throw std::invalid_argument("non-finite logit");
        logits_[s][a] = z;
    }
    void set_logits(StateId s, std::span<const double> z) {
        if (z.size() != checked(s).size()) throw std::invalid_argument("logit vector has wrong length");
        for (std::size_t a = 0; a < z.size(); ++a) set_logit(s, a, z[a]);
    }
    const std::vector<std::vector<double>>& all_logits() const noexcept { return logits_; }

    /// log π(·|s).
    std::vector<double> log_probabilities(StateId s) const {
        const auto& z = checked(s);
        if (z.empty()) throw std::domain_error("state " + std::to_string(s) + " is terminal");
        return log_softmax(z);
    }

    std::vector<double> probabilities(StateId s) const {
        auto p = log_probabilities(s);
        for (double& v : p) v = std::exp(v);
        return p;
    }

    double log_prob(StateId s, ActionIndex a) const {
        checked_action(s, a);
        return log_probabilities(s)[a];
    }
    double prob(StateId s, ActionIndex a) const { return std::exp(log_prob(s, a)); }

    const std::string& tag() const noexcept { return tag_; }
    void set_tag(std::string tag) { tag_ = std::move(tag); }

    friend bool operator==(const TabularPolicy& a, const TabularPolicy& b) { return a.logits_ == b.logits_; }

private:
    const std::vector<double>& checked(StateId s) const {
        if (s >= logits_.size()) throw std::domain_error("unknown state " + std::to_string(s));
        return logits_[s];
    }
    void checked_action(StateId s, ActionIndex a) const {
        const auto& z = checked(s);
        if (z.empty()) throw std::domain_error("state " + std::to_string(s) + " is terminal");
        if (a >= z.size()) throw std::domain_error("unknown action " + std::to_string(a) + " at state " + std::to_string(s));
    }

    std::vector<std::vector<double>> logits_;
    std::string tag_;
};

/// π(a|s) for a nonterminal s.
inline double policy_prob(const TabularPolicy& policy, StateId s, ActionIndex a) { return policy.prob(s, a); }

/// log π(a|s) − log π_ref(a|s).
inline double log_ratio(const TabularPolicy& policy, const TabularPolicy& ref, StateId s, ActionIndex a) {
    return policy.log_prob(s, a) - ref.log_prob(s, a);
}

/// KL(p || q) at state s.
inline double kl_divergence(const TabularPolicy& p, const TabularPolicy& q, StateId s) {
    const auto lp = p.log_probabilities(s);
    const auto lq = q.log_probabilities(s);
    double kl = 0.0;
    for (std::size_t a = 0; a < lp.size(); ++a) kl += std::exp(lp[a]) * (lp[a] - lq[a]);
    return kl;
}

/// Total variation between two policies at state s.
inline double total_variation(const TabularPolicy& p, const TabularPolicy& q, StateId s) {
    const auto pa = p.probabilities(s);
    const auto qa = q.probabilities(s);
    double tv = 0.0;
    for (std::size_t a = 0; a < pa.size(); ++a) tv += std::abs(pa[a] - qa[a]);
    return 0.5 * tv;
}

}  // namespace dapo

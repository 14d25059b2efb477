#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dapo/critic.hpp"
#include "dapo/csv.hpp"
#include "dapo/exact_values.hpp"
#include "dapo/mdp.hpp"
#include "dapo/policy.hpp"
#include "dapo/rng.hpp"

namespace dapo {

enum class AdvantageSource { critic, exact };

inline std::string to_string(AdvantageSource s) { return s == AdvantageSource::critic ? "critic" : "exact"; }

inline AdvantageSource parse_source(const std::string& s) {
    if (s == "critic") return AdvantageSource::critic;
    if (s == "exact") return AdvantageSource::exact;
    throw InvalidInput("unknown advantage source '" + s + "'");
}

struct AdvantageRecord {
    StateId state = 0;
    ActionIndex action = 0;
    double a_hat = 0.0;
    AdvantageSource source = AdvantageSource::exact;
    double weight = 1.0;  // ν_S(s)·ν_A(a|s), normalized over the dataset

    friend bool operator==(const AdvantageRecord&, const AdvantageRecord&) = default;
};

enum class StateWeighting { visits, uniform };

struct DatasetConfig {
    int m = 8;                    // actions sampled per state
    double beta = 1.0;
    double gap_threshold = 0.1;
    bool gap_filter = true;
    bool dedup = true;
    bool full_action_set = false;  // every action once instead of m samples
    StateWeighting state_weighting = StateWeighting::visits;
};

/// Per-state bookkeeping, kept for retained and dropped states alike.
struct StateSummary {
    std::vector<ActionIndex> sampled;  // pre-dedup multiset, in draw order
    double presum = 0.0;               // Σ Â over the multiset
    double gap = 0.0;                  // Δ_s over unique actions
    bool retained = false;
    std::string drop_reason;
};

/**
 * Advantage records grouped contiguously by state (ascending state id).
 * With dedup on, ν_A(·|s) is uniform over the retained unique actions.
 */
struct AdvantageDataset {
    std::vector<AdvantageRecord> records;
    std::map<StateId, StateSummary> states;
    DatasetConfig config;

    std::vector<StateId> retained_states() const {
        std::vector<StateId> out;
        for (const auto& [s, info] : states)
            if (info.retained) out.push_back(s);
        return out;
    }
    double gap(StateId s) const { return states.at(s).gap; }
    bool empty() const noexcept { return records.empty(); }
};

/// Where successor values come from.
struct ValueSource {
    AdvantageSource kind = AdvantageSource::exact;
    const ValueTable* exact = nullptr;    // adv of the sampling reference
    const CriticTable* critic = nullptr;  // V_φ at nonterminal successors

    static ValueSource from_exact(const ValueTable& t) { return {AdvantageSource::exact, &t, nullptr}; }
    static ValueSource from_critic(const CriticTable& c) { return {AdvantageSource::critic, nullptr, &c}; }
};

/**
 * For each input state (with visit count): draw m actions from `ref` (or take
 * every action once), score them, deduplicate, and apply the gap filter.
 *
 * exact: Â(s,a) = adv(s,a) of the supplied table, already centered under ref.
 * critic: Â(s,a_i) = V(f(s,a_i)) − mean_j V(f(s,a_j)) over the sampled
 *   multiset, where V is the terminal reward at terminal successors and the
 *   critic prediction elsewhere; states with an uncovered successor are dropped.
 *
 * State s draws with key derive_seed(seed, s), draw i at counter i.
 */
inline AdvantageDataset build_advantage_dataset(const StepMdp& mdp, const StateVisits& states, const TabularPolicy& ref,
                                                const ValueSource& values, const DatasetConfig& config,
                                                std::uint64_t seed) {
    if (!config.full_action_set && config.m < 2) throw std::invalid_argument("m must be >= 2");
    if (!(config.beta > 0.0)) throw std::domain_error("beta must be > 0");
    if (values.kind == AdvantageSource::exact && !values.exact) throw std::invalid_argument("exact source needs a value table");
    if (values.kind == AdvantageSource::critic && !values.critic) throw std::invalid_argument("critic source needs a critic");

    AdvantageDataset ds;
    ds.config = config;
    struct Pending {
        StateId s;
        std::vector<std::pair<ActionIndex, double>> rows;  // (action, Â), one per unique action or per draw
        double state_weight;
    };
    std::vector<Pending> kept;

    for (const auto& [s, count] : states) {
        if (s >= mdp.num_states()) throw std::invalid_argument("unknown state id " + std::to_string(s));
        if (mdp.is_terminal(s)) throw std::invalid_argument("terminal state '" + mdp.state_name(s) + "' in dataset input");
        auto& info = ds.states[s];

        if (config.full_action_set) {
            for (ActionIndex a = 0; a < mdp.num_actions(s); ++a) info.sampled.push_back(a);
        } else {
            const auto probs = ref.probabilities(s);
            const auto key = rng::derive_seed(seed, s);
            for (int i = 0; i < config.m; ++i)
                info.sampled.push_back(rng::sample_index(probs, rng::counter_uniform(key, static_cast<std::uint64_t>(i))));
        }

        std::vector<double> scores(info.sampled.size());
        if (values.kind == AdvantageSource::exact) {
            for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = values.exact->adv.at(s).at(info.sampled[i]);
        } else {
            bool covered = true;
            std::vector<double> succ(info.sampled.size());
            for (std::size_t i = 0; i < succ.size(); ++i) {
                const StateId next = mdp.next(s, info.sampled[i]);
                if (mdp.is_terminal(next)) {
                    succ[i] = mdp.terminal_reward(next);
                } else if (const auto p = values.critic->prediction(next)) {
                    succ[i] = *p;
                } else {
                    covered = false;
                    break;
                }
            }
            if (!covered) {
                info.drop_reason = "uncovered successor";
                continue;
            }
            double mean = 0.0;
            for (double v : succ) mean += v;
            mean /= static_cast<double>(succ.size());
            for (std::size_t i = 0; i < succ.size(); ++i) scores[i] = succ[i] - mean;
        }
        for (double x : scores) info.presum += x;

        Pending p{s, {}, config.state_weighting == StateWeighting::visits ? static_cast<double>(count) : 1.0};
        if (config.dedup) {
            std::map<ActionIndex, double> unique;
            for (std::size_t i = 0; i < scores.size(); ++i) unique.emplace(info.sampled[i], scores[i]);
            for (const auto& [a, x] : unique) p.rows.emplace_back(a, x);
        } else {
            for (std::size_t i = 0; i < scores.size(); ++i) p.rows.emplace_back(info.sampled[i], scores[i]);
        }
        double lo = p.rows.front().second, hi = lo;
        for (const auto& [a, x] : p.rows) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        info.gap = hi - lo;
        if (config.gap_filter && info.gap < config.gap_threshold) {
            info.drop_reason = "advantage gap below threshold";
            continue;
        }
        info.retained = true;
        kept.push_back(std::move(p));
    }

    double total_state_weight = 0.0;
    for (const auto& p : kept) total_state_weight += p.state_weight;
    for (const auto& p : kept) {
        const double per_row = p.state_weight / total_state_weight / static_cast<double>(p.rows.size());
        for (const auto& [a, x] : p.rows) ds.records.push_back({p.s, a, x, values.kind, per_row});
    }
    return ds;
}

/// Every nonterminal state once (uniform ν_S).
inline StateVisits all_nonterminal_states(const StepMdp& mdp) {
    StateVisits out;
    for (StateId s : mdp.nonterminal_states()) out[s] = 1;
    return out;
}

/// CSV (state, action, a_hat, source, weight).
inline std::string dataset_csv(const StepMdp& mdp, const AdvantageDataset& ds) {
    csv::Writer w({"state", "action", "a_hat", "source", "weight"});
    for (const auto& r : ds.records)
        w.row({mdp.state_name(r.state), mdp.actions(r.state)[r.action].id, csv::num(r.a_hat), to_string(r.source),
               csv::num(r.weight)});
    return w.str();
}

/// Reads a dataset CSV. Without a weight column every state gets equal mass,
/// split uniformly over its records.
inline AdvantageDataset parse_dataset(const StepMdp& mdp, const csv::Table& t, double beta) {
    AdvantageDataset ds;
    ds.config.beta = beta;
    const auto cs = t.column("state"), ca = t.column("action"), cx = t.column("a_hat"), csrc = t.column("source");
    const bool weighted = t.has_column("weight");
    const std::size_t cw = weighted ? t.column("weight") : 0;
    std::map<StateId, std::vector<AdvantageRecord>> groups;
    for (const auto& row : t.rows) {
        const auto s = mdp.find_state(row[cs]);
        if (!s) throw InvalidInput("dataset references unknown state '" + row[cs] + "'");
        if (mdp.is_terminal(*s)) throw InvalidInput("dataset references terminal state '" + row[cs] + "'");
        const auto a = mdp.find_action(*s, row[ca]);
        if (!a) throw InvalidInput("dataset references unknown action '" + row[ca] + "' at '" + row[cs] + "'");
        const double weight = weighted ? csv::to_double(row[cw]) : 1.0;
        if (!(weight > 0.0)) throw InvalidInput("dataset weights must be > 0");
        groups[*s].push_back({*s, *a, csv::to_double(row[cx]), parse_source(row[csrc]), weight});
    }
    for (auto& [s, recs] : groups) {
        auto& info = ds.states[s];
        info.retained = true;
        double lo = recs.front().a_hat, hi = lo;
        for (auto& r : recs) {
            lo = std::min(lo, r.a_hat);
            hi = std::max(hi, r.a_hat);
            info.sampled.push_back(r.action);
            info.presum += r.a_hat;
            if (!weighted) r.weight = 1.0 / static_cast<double>(groups.size() * recs.size());
            ds.records.push_back(r);
        }
        info.gap = hi - lo;
    }
    return ds;
}

}  // namespace dapo

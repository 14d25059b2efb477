#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dapo/critic.hpp"
#include "dapo/dataset.hpp"
#include "dapo/exact_values.hpp"
#include "dapo/kkt.hpp"
#include "dapo/mdp.hpp"
#include "dapo/objective.hpp"
#include "dapo/policy.hpp"
#include "dapo/rng.hpp"

namespace dapo {

/// fixed: every round is KL-regularized toward the initial reference, and
///   regresses onto the regularized advantages of the current iterate.
/// moving: the previous round's output becomes the next reference outright.
enum class AnchorMode { fixed, moving };

/// train: fit the dataset with train_policy. kkt: jump straight to the exact
/// per-state solution on the dataset's states (full action sets required).
enum class PolicyUpdate { train, kkt };

enum class StateCoverage { all, generated };

inline std::string to_string(AnchorMode m) { return m == AnchorMode::fixed ? "fixed" : "moving"; }
inline AnchorMode parse_anchor(const std::string& s) {
    if (s == "fixed") return AnchorMode::fixed;
    if (s == "moving") return AnchorMode::moving;
    throw InvalidInput("unknown anchor mode '" + s + "'");
}
inline std::string to_string(StateCoverage c) { return c == StateCoverage::all ? "all" : "generated"; }
inline StateCoverage parse_coverage(const std::string& s) {
    if (s == "all") return StateCoverage::all;
    if (s == "generated") return StateCoverage::generated;
    throw InvalidInput("unknown state coverage '" + s + "'");
}

struct CriticPipelineConfig {
    std::size_t rollouts_per_start = 64;
    int completions = 4096;
    CriticConfig train;
};

struct IterateConfig {
    int iterations = 1;
    AdvantageSource source = AdvantageSource::exact;
    std::optional<AnchorMode> anchor;  // default: fixed for exact, moving for critic
    PolicyUpdate update = PolicyUpdate::train;
    StateCoverage coverage = StateCoverage::all;
    DatasetConfig dataset;  // dataset.beta is the KL coefficient
    TrainConfig train;
    CriticPipelineConfig critic;
    std::uint64_t seed = 0;

    AnchorMode anchor_mode() const {
        return anchor.value_or(source == AdvantageSource::exact ? AnchorMode::fixed : AnchorMode::moving);
    }
};

/// Artifacts and scores of one round k (π_k → π_{k+1}).
struct IterationRecord {
    int index = 0;
    TabularPolicy policy;           // π_{k+1}
    double value_before = 0.0;      // V_β^{π_k}(μ) against this round's anchor
    double value_after = 0.0;       // V_β^{π_{k+1}}(μ) against this round's anchor
    double unregularized_before = 0.0;
    double unregularized_after = 0.0;
    double lambda_mean = 0.0;       // β·λ* over fully covered dataset states
    double lambda_max = 0.0;
    std::size_t lambda_states = 0;
    std::size_t dataset_states = 0;
    AdvantageDataset dataset;
    std::optional<CriticTable> critic;
    std::vector<McTarget> targets;
    TrainResult training;

    double improvement() const { return value_after - value_before; }
};

class PipelineError : public std::runtime_error {
public:
    PipelineError(int iteration, std::string stage, const std::string& what)
        : std::runtime_error("iteration " + std::to_string(iteration) + ", stage '" + stage + "': " + what),
          iteration_(iteration), stage_(std::move(stage)) {}
    int iteration() const noexcept { return iteration_; }
    const std::string& stage() const noexcept { return stage_; }

private:
    int iteration_;
    std::string stage_;
};

inline void validate(const IterateConfig& cfg) {
    if (cfg.iterations < 1) throw InvalidInput("iterations must be >= 1");
    if (!(cfg.dataset.beta > 0.0)) throw InvalidInput("beta must be > 0");
    if (cfg.source == AdvantageSource::critic && cfg.anchor_mode() == AnchorMode::fixed)
        throw InvalidInput("critic advantages estimate unregularized values; use the moving anchor");
    if (cfg.update == PolicyUpdate::kkt && !cfg.dataset.full_action_set)
        throw InvalidInput("the kkt update needs full action sets");
    if (cfg.source == AdvantageSource::critic && cfg.critic.completions < 1) throw InvalidInput("completions must be >= 1");
}

/**
 * Runs `iterations` rounds of states → values → advantage dataset → update.
 * Round k uses stage seeds derive_seed(stage_seed(seed, stage), k).
 */
inline std::vector<IterationRecord> iterate_dapo(const StepMdp& mdp, const TabularPolicy& ref0, const IterateConfig& cfg,
                                                 std::optional<TabularPolicy> init = std::nullopt) {
    validate(cfg);
    const double beta = cfg.dataset.beta;
    const auto mu = mdp.initial_distribution();
    const auto mode = cfg.anchor_mode();
    TabularPolicy current = init.value_or(ref0);
    std::vector<IterationRecord> out;

    for (int k = 0; k < cfg.iterations; ++k) {
        auto seed_for = [&](const char* stage) { return rng::derive_seed(rng::stage_seed(cfg.seed, stage), static_cast<std::uint64_t>(k)); };
        const TabularPolicy anchor = mode == AnchorMode::fixed ? ref0 : current;
        IterationRecord rec;
        rec.index = k + 1;
        std::string stage;
        try {
            stage = "evaluate";
            const auto before = evaluate(mdp, current, anchor, beta);
            rec.value_before = before.expected(mu);
            rec.unregularized_before = evaluate(mdp, current, current, 0.0).expected(mu);

            stage = "generate";
            StateVisits states = cfg.coverage == StateCoverage::all
                                     ? all_nonterminal_states(mdp)
                                     : generate_states(mdp, current, mdp.start_states(), cfg.critic.rollouts_per_start,
                                                       seed_for("generate"));

            ValueSource values;
            if (cfg.source == AdvantageSource::exact) {
                values = ValueSource::from_exact(before);
            } else {
                stage = "mc_estimate";
                // the tabular critic only knows what it was fit on: cover the
                // generated states and every nonterminal successor
                StateVisits successors = states;
                for (const auto& [s, count] : states)
                    for (const auto& act : mdp.actions(s))
                        if (!mdp.is_terminal(act.next)) successors[act.next] += count;
                rec.targets = mc_targets(mdp, current, successors, cfg.critic.completions, seed_for("mc_estimate"));
                stage = "train_critic";
                rec.critic = train_critic(rec.targets, cfg.critic.train);
                values = ValueSource::from_critic(*rec.critic);
            }

            stage = "build_advantage_dataset";
            rec.dataset = build_advantage_dataset(mdp, states, current, values, cfg.dataset, seed_for("dataset"));
            rec.dataset_states = rec.dataset.retained_states().size();

            // exact per-state solutions wherever the dataset covers every action
            stage = "solve_exact_dapo";
            std::map<StateId, KktSolution> kkt;
            {
                std::map<StateId, std::vector<std::pair<ActionIndex, double>>> by_state;
                for (const auto& r : rec.dataset.records) by_state[r.state].emplace_back(r.action, r.a_hat);
                double total = 0.0;
                for (const auto& [s, rows] : by_state) {
                    const std::size_t n = mdp.num_actions(s);
                    std::vector<double> adv(n, 0.0);
                    std::vector<bool> seen(n, false);
                    for (const auto& [a, x] : rows) adv[a] = x, seen[a] = true;
                    if (rows.size() != n || std::find(seen.begin(), seen.end(), false) != seen.end()) continue;
                    try {
                        const std::vector<double> nu(n, 1.0 / static_cast<double>(n));
                        kkt.emplace(s, solve_exact_dapo(adv, current.probabilities(s), nu, beta));
                    } catch (const std::domain_error&) {
                        if (cfg.update == PolicyUpdate::kkt) throw;
                        continue;
                    }
                    const double lambda = beta * kkt.at(s).lambda_star;
                    total += lambda;
                    rec.lambda_max = kkt.size() == 1 ? lambda : std::max(rec.lambda_max, lambda);
                }
                if (!kkt.empty()) rec.lambda_mean = total / static_cast<double>(kkt.size());
                rec.lambda_states = kkt.size();
            }

            if (cfg.update == PolicyUpdate::train) {
                stage = "train_policy";
                rec.training = train_policy(rec.dataset, current, current, cfg.train);
                rec.policy = rec.training.policy;
            } else {
                rec.policy = current;
                for (const auto& [s, sol] : kkt) {
                    const auto logr = current.log_probabilities(s);
                    std::vector<double> z(logr.size());
                    for (ActionIndex a = 0; a < z.size(); ++a) z[a] = logr[a] + sol.u_plus[a];
                    rec.policy.set_logits(s, z);
                }
            }
            rec.policy.set_tag("iterate_" + std::to_string(k + 1));

            stage = "evaluate";
            rec.value_after = evaluate(mdp, rec.policy, anchor, beta).expected(mu);
            rec.unregularized_after = evaluate(mdp, rec.policy, rec.policy, 0.0).expected(mu);
        } catch (const PipelineError&) {
            throw;
        } catch (const std::exception& e) {
            throw PipelineError(k + 1, stage, e.what());
        }
        current = rec.policy;
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace dapo

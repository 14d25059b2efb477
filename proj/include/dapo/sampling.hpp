#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dapo/mdp.hpp"
#include "dapo/policy.hpp"
#include "dapo/rng.hpp"

namespace dapo {

struct TrajectorySample {
    StateId start = 0;
    std::vector<std::pair<StateId, ActionIndex>> steps;
    StateId terminal = 0;
    int reward = 0;
    std::uint64_t rollout_seed = 0;

    friend bool operator==(const TrajectorySample&, const TrajectorySample&) = default;
};

/// Roll out `policy` from `start`; the action at step t uses counter t under `seed`.
inline TrajectorySample sample_trajectory(const StepMdp& mdp, const TabularPolicy& policy, StateId start,
                                          std::uint64_t seed) {
    if (start >= mdp.num_states()) throw std::domain_error("unknown start state " + std::to_string(start));
    TrajectorySample out;
    out.start = start;
    out.rollout_seed = seed;
    StateId s = start;
    std::uint64_t t = 0;
    while (!mdp.is_terminal(s)) {
        if (t >= static_cast<std::uint64_t>(mdp.horizon_bound()))
            throw std::logic_error("trajectory exceeded horizon_bound");
        const auto probs = policy.probabilities(s);
        const ActionIndex a = rng::sample_index(probs, rng::counter_uniform(seed, t));
        out.steps.emplace_back(s, a);
        s = mdp.next(s, a);
        ++t;
    }
    out.terminal = s;
    out.reward = mdp.terminal_reward(s) == 1.0 ? 1 : 0;
    return out;
}

}  // namespace dapo

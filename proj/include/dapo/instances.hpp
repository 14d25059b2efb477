#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dapo/mdp.hpp"
#include "dapo/policy.hpp"
#include "dapo/rng.hpp"

namespace dapo {

/**
 * Depth-2 binary tree used throughout the tests:
 *
 *   root --left--> s1 --win--> t_win (1)
 *                     --lose-> t_lose (0)
 *        --right-> s2 --a--> t_a (0)
 *                     --b--> t_b (0)
 *
 * μ = {root: 1}. Under the uniform policy V(s1) = 0.5, V(s2) = 0, V(root) = 0.25.
 */
inline MdpDescription t2_description() {
    MdpDescription d;
    d.states = {{"root", false, std::nullopt}, {"s1", false, std::nullopt}, {"s2", false, std::nullopt},
                {"t_win", true, 1.0},          {"t_lose", true, 0.0},         {"t_a", true, 0.0},
                {"t_b", true, 0.0}};
    d.transitions = {{"root", "left", "s1"}, {"root", "right", "s2"}, {"s1", "win", "t_win"},
                     {"s1", "lose", "t_lose"}, {"s2", "a", "t_a"},     {"s2", "b", "t_b"}};
    d.mu = {{"root", 1.0}};
    d.horizon_bound = 2;
    return d;
}

inline StepMdp make_t2() { return StepMdp::from_description(t2_description()); }

/// Random layered-DAG parameters. width == 0 builds a tree (no state sharing).
struct RandomMdpParams {
    int depth = 3;
    int branching_min = 2;
    int branching_max = 2;
    int width = 0;
    double reward_prob = 0.5;
    double early_terminal_prob = 0.0;  // chance a non-final-layer state is terminal
    std::size_t state_cap = 100000;
};

/**
 * Layer d holds the states reachable in d steps. Every nonterminal state in
 * layer d gets uniform_int(branching_min, branching_max) actions whose
 * successors are drawn from layer d+1; the last layer is all terminal.
 * Terminal rewards are Bernoulli(reward_prob). Action ids are "a0", "a1", ...
 */
inline MdpDescription random_mdp_description(const RandomMdpParams& p, std::uint64_t seed) {
    if (p.depth < 1) throw std::invalid_argument("depth must be >= 1");
    if (p.branching_min < 1 || p.branching_max < p.branching_min) throw std::invalid_argument("invalid branching range");
    if (p.width < 0) throw std::invalid_argument("width must be >= 0");
    if (!(p.reward_prob >= 0.0 && p.reward_prob <= 1.0)) throw std::invalid_argument("reward_prob outside [0, 1]");

    double estimate = 1.0, layer = 1.0;
    for (int d = 1; d <= p.depth; ++d) {
        layer *= p.branching_max;
        if (p.width > 0) layer = std::min(layer, static_cast<double>(p.width) * p.branching_max);
        estimate += layer;
        if (estimate > static_cast<double>(p.state_cap))
            throw std::invalid_argument("parameters imply more than " + std::to_string(p.state_cap) + " states");
    }

    rng::CounterRng g(seed);
    MdpDescription d;
    d.horizon_bound = p.depth;
    auto name = [](int layer_index, std::size_t i) { return "d" + std::to_string(layer_index) + "_" + std::to_string(i); };

    std::vector<std::pair<std::string, bool>> current{{"root", false}};
    d.states.push_back({"root", false, std::nullopt});
    d.mu.push_back({"root", 1.0});
    for (int layer_index = 1; layer_index <= p.depth; ++layer_index) {
        const bool last = layer_index == p.depth;
        std::vector<std::string> open;
        for (const auto& [id, terminal] : current)
            if (!terminal) open.push_back(id);
        if (open.empty()) break;

        std::vector<int> arity(open.size());
        std::size_t slots = 0;
        for (std::size_t i = 0; i < open.size(); ++i) {
            arity[i] = static_cast<int>(g.uniform_int(p.branching_min, p.branching_max));
            slots += static_cast<std::size_t>(arity[i]);
        }
        const std::size_t n_next = p.width > 0 ? std::min<std::size_t>(slots, static_cast<std::size_t>(p.width)) : slots;
        std::vector<std::pair<std::string, bool>> next;
        for (std::size_t i = 0; i < n_next; ++i) {
            const bool terminal = last || g.bernoulli(p.early_terminal_prob);
            MdpDescription::State st{name(layer_index, i), terminal, std::nullopt};
            if (terminal) st.reward = g.bernoulli(p.reward_prob) ? 1.0 : 0.0;
            d.states.push_back(st);
            next.emplace_back(st.id, terminal);
        }
        std::size_t fresh = 0;
        for (std::size_t i = 0; i < open.size(); ++i) {
            for (int a = 0; a < arity[i]; ++a) {
                // tree mode consumes successors in order; shared mode covers each
                // successor once before sampling uniformly
                std::size_t target;
                if (p.width == 0 || fresh < n_next) {
                    target = fresh++;
                } else {
                    target = static_cast<std::size_t>(g.uniform_int(0, static_cast<std::int64_t>(n_next) - 1));
                }
                d.transitions.push_back({open[i], "a" + std::to_string(a), next[target].first});
            }
        }
        current = std::move(next);
    }
    return d;
}

inline StepMdp random_mdp(const RandomMdpParams& p, std::uint64_t seed) {
    return StepMdp::from_description(random_mdp_description(p, seed));
}

/// Logits drawn i.i.d. Normal(0, sigma).
inline TabularPolicy random_policy(const StepMdp& mdp, double sigma, std::uint64_t seed, std::string tag = "random") {
    rng::CounterRng g(seed);
    std::vector<std::vector<double>> logits(mdp.num_states());
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        logits[s].resize(mdp.num_actions(s));
        for (double& z : logits[s]) z = g.normal(0.0, sigma);
    }
    return TabularPolicy(mdp, std::move(logits), std::move(tag));
}

}  // namespace dapo

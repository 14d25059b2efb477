#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dapo {

using StateId = std::size_t;
using ActionIndex = std::size_t;

/// Raised for malformed input files, configs, or arguments (CLI exit code 2).
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raw, possibly invalid, description of a step-level MDP as read from disk.
struct MdpDescription {
    struct State {
        std::string id;
        bool terminal = false;
        std::optional<double> reward;  // terminal states only
    };
    struct Transition {
        std::string from;
        std::string action;
        std::string to;
    };
    struct Start {
        std::string state;
        double prob = 0.0;
    };

    std::vector<State> states;
    std::vector<Transition> transitions;
    std::vector<Start> mu;
    long long horizon_bound = 0;
};

namespace detail {

inline std::string format_number(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", x);
    return buf;
}

}  // namespace detail

/**
 * Every violated structural invariant of a description, in a fixed order:
 * identifiers, rewards, transitions, action sets, start distribution,
 * acyclicity, and finally the horizon bound. Empty means valid.
 */
inline std::vector<std::string> validate(const MdpDescription& d) {
    std::vector<std::string> report;
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < d.states.size(); ++i) {
        const auto& s = d.states[i];
        if (s.id.empty()) report.push_back("state #" + std::to_string(i) + " has an empty id");
        if (!index.emplace(s.id, i).second) report.push_back("duplicate state id '" + s.id + "'");
        if (s.terminal) {
            if (!s.reward) {
                report.push_back("terminal state '" + s.id + "' has no reward");
            } else if (*s.reward != 0.0 && *s.reward != 1.0) {
                report.push_back("terminal state '" + s.id + "' has non-binary reward " +
                                 detail::format_number(*s.reward));
            }
        } else if (s.reward && *s.reward != 0.0) {
            report.push_back("nonterminal state '" + s.id + "' carries a reward");
        }
    }
    if (d.states.empty()) report.push_back("no states");

    std::vector<std::vector<std::size_t>> children(d.states.size());
    std::vector<std::size_t> out_degree(d.states.size(), 0);
    std::set<std::pair<std::string, std::string>> seen_edges;
    for (const auto& t : d.transitions) {
        const auto from = index.find(t.from);
        const auto to = index.find(t.to);
        if (from == index.end()) {
            report.push_back("transition from unknown state '" + t.from + "'");
            continue;
        }
        if (to == index.end()) {
            report.push_back("transition " + t.from + "/" + t.action + " leads to unknown state '" + t.to + "'");
            continue;
        }
        if (t.action.empty()) report.push_back("transition from '" + t.from + "' has an empty action id");
        if (!seen_edges.emplace(t.from, t.action).second) {
            report.push_back("duplicate action '" + t.action + "' at state '" + t.from + "'");
            continue;
        }
        if (d.states[from->second].terminal) {
            report.push_back("terminal state '" + t.from + "' has action '" + t.action + "'");
        }
        children[from->second].push_back(to->second);
        ++out_degree[from->second];
    }
    for (std::size_t i = 0; i < d.states.size(); ++i) {
        if (!d.states[i].terminal && out_degree[i] == 0) {
            report.push_back("nonterminal state '" + d.states[i].id + "' has no actions");
        }
    }

    double mu_sum = 0.0;
    std::set<std::string> mu_seen;
    for (const auto& m : d.mu) {
        if (!index.contains(m.state)) report.push_back("μ references unknown state '" + m.state + "'");
        if (!(m.prob > 0.0)) report.push_back("μ(" + m.state + ") = " + detail::format_number(m.prob) + " is not positive");
        if (!mu_seen.insert(m.state).second) report.push_back("μ lists state '" + m.state + "' twice");
        mu_sum += m.prob;
    }
    if (d.mu.empty()) {
        report.push_back("μ is empty");
    } else if (std::abs(mu_sum - 1.0) > 1e-12) {
        report.push_back("μ sums to " + detail::format_number(mu_sum));
    }

    // Iterative DFS colouring: grey = on the current path.
    enum : unsigned char { white, grey, black };
    std::vector<unsigned char> colour(d.states.size(), white);
    bool cyclic = false;
    for (std::size_t root = 0; root < d.states.size() && !cyclic; ++root) {
        if (colour[root] != white) continue;
        std::vector<std::pair<std::size_t, std::size_t>> stack{{root, 0}};
        colour[root] = grey;
        while (!stack.empty() && !cyclic) {
            auto& [node, next] = stack.back();
            if (next < children[node].size()) {
                const std::size_t child = children[node][next++];
                if (colour[child] == grey) {
                    report.push_back("cycle/ancestor revisit: '" + d.states[node].id + "' -> '" + d.states[child].id + "'");
                    cyclic = true;
                } else if (colour[child] == white) {
                    colour[child] = grey;
                    stack.emplace_back(child, 0);
                }
            } else {
                colour[node] = black;
                stack.pop_back();
            }
        }
    }

    if (d.horizon_bound <= 0) {
        report.push_back("horizon_bound must be positive");
    } else if (!cyclic) {
        // Longest path (in steps) from every state, children first.
        std::vector<long long> longest(d.states.size(), -1);
        for (std::size_t root = 0; root < d.states.size(); ++root) {
            std::vector<std::pair<std::size_t, std::size_t>> stack{{root, 0}};
            while (!stack.empty()) {
                auto& [node, next] = stack.back();
                if (longest[node] >= 0) {
                    stack.pop_back();
                    continue;
                }
                if (next < children[node].size()) {
                    const std::size_t child = children[node][next++];
                    if (longest[child] < 0) stack.emplace_back(child, 0);
                } else {
                    long long best = 0;
                    for (auto c : children[node]) best = std::max(best, longest[c] + 1);
                    longest[node] = best;
                    stack.pop_back();
                }
            }
        }
        const long long worst = *std::max_element(longest.begin(), longest.end());
        if (worst > d.horizon_bound) {
            report.push_back("horizon exceeded: longest path has " + std::to_string(worst) +
                             " steps > horizon_bound " + std::to_string(d.horizon_bound));
        }
    }
    return report;
}

/// Thrown when a description fails validation; carries the full report.
class InvalidMdp : public InvalidInput {
public:
    explicit InvalidMdp(std::vector<std::string> report)
        : InvalidInput(join(report)), report_(std::move(report)) {}
    const std::vector<std::string>& report() const noexcept { return report_; }

private:
    static std::string join(const std::vector<std::string>& r) {
        std::string out = "invalid MDP:";
        for (const auto& line : r) out += "\n  - " + line;
        return out;
    }
    std::vector<std::string> report_;
};

/**
 * Finite deterministic step-level MDP over a DAG with binary terminal rewards.
 *
 * Immutable once built. States keep the order of the description; actions keep
 * the order in which their transitions were listed. The edge reward r(s, a) is
 * the terminal reward of f(s, a) when that successor is terminal and 0 otherwise,
 * and V(terminal) = 0, so r(s_{T-1}, a_{T-1}) carries the outcome.
 */
class StepMdp {
public:
    struct Action {
        std::string id;
        StateId next;
    };

    static StepMdp from_description(const MdpDescription& d) {
        if (auto report = dapo::validate(d); !report.empty()) throw InvalidMdp(std::move(report));
        StepMdp m;
        m.horizon_ = static_cast<int>(d.horizon_bound);
        for (const auto& s : d.states) {
            m.index_.emplace(s.id, m.names_.size());
            m.names_.push_back(s.id);
            m.terminal_.push_back(s.terminal);
            m.reward_.push_back(s.terminal ? *s.reward : 0.0);
        }
        m.actions_.resize(d.states.size());
        for (const auto& t : d.transitions) {
            m.actions_[m.index_.at(t.from)].push_back({t.action, m.index_.at(t.to)});
        }
        m.mu_.assign(d.states.size(), 0.0);
        for (const auto& s : d.mu) {
            const StateId id = m.index_.at(s.state);
            m.mu_[id] = s.prob;
            m.starts_.push_back(id);
        }
        m.build_topological_order();
        return m;
    }

    std::size_t num_states() const noexcept { return names_.size(); }
    const std::string& state_name(StateId s) const { return names_.at(s); }
    std::optional<StateId> find_state(const std::string& name) const {
        if (auto it = index_.find(name); it != index_.end()) return it->second;
        return std::nullopt;
    }
    StateId state(const std::string& name) const {
        if (auto s = find_state(name)) return *s;
        throw std::domain_error("unknown state '" + name + "'");
    }

    bool is_terminal(StateId s) const { return terminal_.at(s); }
    double terminal_reward(StateId s) const { return reward_.at(s); }

    std::span<const Action> actions(StateId s) const { return actions_.at(s); }
    std::size_t num_actions(StateId s) const { return actions_.at(s).size(); }
    std::optional<ActionIndex> find_action(StateId s, const std::string& id) const {
        const auto& list = actions_.at(s);
        for (std::size_t a = 0; a < list.size(); ++a)
            if (list[a].id == id) return a;
        return std::nullopt;
    }
    ActionIndex action(StateId s, const std::string& id) const {
        if (auto a = find_action(s, id)) return *a;
        throw std::domain_error("unknown action '" + id + "' at state '" + state_name(s) + "'");
    }
    StateId next(StateId s, ActionIndex a) const { return actions_.at(s).at(a).next; }

    /// r(s, a): outcome reward when the step ends the trajectory, otherwise 0.
    double reward(StateId s, ActionIndex a) const {
        const StateId n = next(s, a);
        return terminal_[n] ? reward_[n] : 0.0;
    }

    /// Dense start distribution μ indexed by state.
    std::span<const double> initial_distribution() const noexcept { return mu_; }
    std::span<const StateId> start_states() const noexcept { return starts_; }
    int horizon_bound() const noexcept { return horizon_; }

    /// Parents before children.
    std::span<const StateId> topological_order() const noexcept { return topo_; }

    std::vector<StateId> nonterminal_states() const {
        std::vector<StateId> out;
        for (StateId s = 0; s < num_states(); ++s)
            if (!terminal_[s]) out.push_back(s);
        return out;
    }

    MdpDescription describe() const {
        MdpDescription d;
        d.horizon_bound = horizon_;
        for (StateId s = 0; s < num_states(); ++s) {
            MdpDescription::State st{names_[s], terminal_[s], std::nullopt};
            if (terminal_[s]) st.reward = reward_[s];
            d.states.push_back(std::move(st));
        }
        for (StateId s = 0; s < num_states(); ++s)
            for (const auto& a : actions_[s]) d.transitions.push_back({names_[s], a.id, names_[a.next]});
        for (StateId s : starts_) d.mu.push_back({names_[s], mu_[s]});
        return d;
    }

private:
    StepMdp() = default;

    void build_topological_order() {
        std::vector<std::size_t> indegree(num_states(), 0);
        for (const auto& list : actions_)
            for (const auto& a : list) ++indegree[a.next];
        std::vector<StateId> queue;
        for (StateId s = 0; s < num_states(); ++s)
            if (indegree[s] == 0) queue.push_back(s);
        for (std::size_t head = 0; head < queue.size(); ++head) {
            const StateId s = queue[head];
            topo_.push_back(s);
            for (const auto& a : actions_[s])
                if (--indegree[a.next] == 0) queue.push_back(a.next);
        }
    }

    std::vector<std::string> names_;
    std::unordered_map<std::string, StateId> index_;
    std::vector<bool> terminal_;
    std::vector<double> reward_;
    std::vector<std::vector<Action>> actions_;
    std::vector<double> mu_;
    std::vector<StateId> starts_;
    std::vector<StateId> topo_;
    int horizon_ = 0;
};

/// A constructed StepMdp is valid by construction; re-checks its description.
inline std::vector<std::string> validate(const StepMdp& mdp) { return validate(mdp.describe()); }

}  // namespace dapo

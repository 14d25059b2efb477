#pragma once

#include <string>
#include <vector>

#include "dapo/csv.hpp"
#include "dapo/exact_values.hpp"
#include "dapo/mdp.hpp"
#include "dapo/policy.hpp"
#include "json.hpp"

namespace dapo::io {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// MDP files
//
// {"states": [{"id": "root", "terminal": false}, {"id": "win", "terminal": true, "reward": 1}, ...],
//  "transitions": [{"from": "root", "action": "a0", "to": "win"}, ...],
//  "mu": [{"state": "root", "prob": 1.0}],
//  "horizon_bound": 2}
// ---------------------------------------------------------------------------

inline MdpDescription description_from_json(const json& j) {
    try {
        MdpDescription d;
        for (const auto& s : j.at("states")) {
            MdpDescription::State st;
            st.id = s.at("id").get<std::string>();
            st.terminal = s.value("terminal", false);
            if (s.contains("reward") && !s.at("reward").is_null()) st.reward = s.at("reward").get<double>();
            d.states.push_back(std::move(st));
        }
        for (const auto& t : j.at("transitions"))
            d.transitions.push_back({t.at("from").get<std::string>(), t.at("action").get<std::string>(),
                                     t.at("to").get<std::string>()});
        for (const auto& m : j.at("mu")) d.mu.push_back({m.at("state").get<std::string>(), m.at("prob").get<double>()});
        d.horizon_bound = j.at("horizon_bound").get<long long>();
        return d;
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("malformed MDP file: ") + e.what());
    }
}

inline json to_json(const MdpDescription& d) {
    json j;
    j["states"] = json::array();
    for (const auto& s : d.states) {
        json st = {{"id", s.id}, {"terminal", s.terminal}};
        if (s.reward) st["reward"] = static_cast<int>(*s.reward);
        j["states"].push_back(std::move(st));
    }
    j["transitions"] = json::array();
    for (const auto& t : d.transitions) j["transitions"].push_back({{"from", t.from}, {"action", t.action}, {"to", t.to}});
    j["mu"] = json::array();
    for (const auto& m : d.mu) j["mu"].push_back({{"state", m.state}, {"prob", m.prob}});
    j["horizon_bound"] = d.horizon_bound;
    return j;
}

inline MdpDescription parse_description(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("MDP file is not valid JSON: ") + e.what());
    }
    return description_from_json(j);
}

/// Parse, validate, and build; InvalidMdp carries the full report.
inline StepMdp load_mdp(const std::string& path) {
    return StepMdp::from_description(parse_description(csv::read_file(path)));
}

inline std::string dump_mdp(const StepMdp& mdp) { return to_json(mdp.describe()).dump(2) + "\n"; }

inline void save_mdp(const StepMdp& mdp, const std::string& path) { csv::write_file(path, dump_mdp(mdp)); }

// ---------------------------------------------------------------------------
// Policies: CSV (state, action, logit)
// ---------------------------------------------------------------------------

inline std::string policy_csv(const StepMdp& mdp, const TabularPolicy& policy) {
    csv::Writer w({"state", "action", "logit"});
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        const auto actions = mdp.actions(s);
        for (ActionIndex a = 0; a < actions.size(); ++a)
            w.row({mdp.state_name(s), actions[a].id, csv::num(policy.logit(s, a))});
    }
    return w.str();
}

/// Rows absent from the file keep logit 0.
inline TabularPolicy parse_policy(const StepMdp& mdp, const csv::Table& t, std::string tag) {
    TabularPolicy policy(mdp, std::move(tag));
    const auto cs = t.column("state"), ca = t.column("action"), cl = t.column("logit");
    for (const auto& row : t.rows) {
        const auto s = mdp.find_state(row[cs]);
        if (!s) throw InvalidInput("policy references unknown state '" + row[cs] + "'");
        const auto a = mdp.find_action(*s, row[ca]);
        if (!a) throw InvalidInput("policy references unknown action '" + row[ca] + "' at '" + row[cs] + "'");
        policy.set_logit(*s, *a, csv::to_double(row[cl]));
    }
    return policy;
}

inline TabularPolicy load_policy(const StepMdp& mdp, const std::string& path) {
    return parse_policy(mdp, csv::read(path), path);
}

// ---------------------------------------------------------------------------
// Value tables: CSV (state, action, v, q, adv, beta, policy_tag)
// ---------------------------------------------------------------------------

inline std::string value_table_csv(const StepMdp& mdp, const ValueTable& t) {
    csv::Writer w({"state", "action", "v", "q", "adv", "beta", "policy_tag"});
    for (StateId s = 0; s < mdp.num_states(); ++s) {
        if (mdp.is_terminal(s)) {
            w.row({mdp.state_name(s), "", csv::num(t.v[s]), "", "", csv::num(t.beta), t.policy_tag});
            continue;
        }
        const auto actions = mdp.actions(s);
        for (ActionIndex a = 0; a < actions.size(); ++a)
            w.row({mdp.state_name(s), actions[a].id, csv::num(t.v[s]), csv::num(t.q[s][a]), csv::num(t.adv[s][a]),
                   csv::num(t.beta), t.policy_tag});
    }
    return w.str();
}

}  // namespace dapo::io

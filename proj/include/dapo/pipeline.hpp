#pragma once

#include <openssl/evp.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dapo/critic.hpp"
#include "dapo/csv.hpp"
#include "dapo/dataset.hpp"
#include "dapo/exact_values.hpp"
#include "dapo/instances.hpp"
#include "dapo/io.hpp"
#include "dapo/iterate.hpp"
#include "dapo/mdp.hpp"
#include "dapo/objective.hpp"
#include "dapo/policy.hpp"
#include "json.hpp"

namespace dapo {

namespace fs = std::filesystem;

/// Lower-case hex SHA-256 of a byte string.
inline std::string sha256_hex(const std::string& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("SHA-256 failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xF];
    }
    return out;
}

/// Where the MDP comes from: exactly one of file, random, builtin.
struct MdpSource {
    std::optional<std::string> file;
    std::optional<RandomMdpParams> random;
    std::uint64_t random_seed = 0;
    std::optional<std::string> builtin;  // "t2"
};

struct ExperimentConfig {
    MdpSource mdp;
    std::optional<std::string> ref_policy;  // CSV; uniform when absent
    IterateConfig iterate;                  // iterate.dataset.beta is β
    std::string output_dir = "run";
};

inline StepMdp load_source(const MdpSource& src) {
    if (src.file) return io::load_mdp(*src.file);
    if (src.random) return random_mdp(*src.random, src.random_seed);
    if (src.builtin) {
        if (*src.builtin == "t2") return make_t2();
        throw InvalidInput("unknown builtin MDP '" + *src.builtin + "'");
    }
    throw InvalidInput("config names no MDP");
}

// ---------------------------------------------------------------------------
// Config (de)serialization
// ---------------------------------------------------------------------------

inline io::json random_params_to_json(const RandomMdpParams& p) {
    return {{"depth", p.depth},         {"branching_min", p.branching_min},
            {"branching_max", p.branching_max}, {"width", p.width},
            {"reward_prob", p.reward_prob}, {"early_terminal_prob", p.early_terminal_prob},
            {"state_cap", p.state_cap}};
}

inline RandomMdpParams random_params_from_json(const io::json& j) {
    RandomMdpParams p;
    p.depth = j.value("depth", p.depth);
    p.branching_min = j.value("branching_min", p.branching_min);
    p.branching_max = j.value("branching_max", std::max(p.branching_min, p.branching_max));
    p.width = j.value("width", p.width);
    p.reward_prob = j.value("reward_prob", p.reward_prob);
    p.early_terminal_prob = j.value("early_terminal_prob", p.early_terminal_prob);
    p.state_cap = j.value("state_cap", p.state_cap);
    return p;
}

inline io::json to_json(const ExperimentConfig& c) {
    const auto& it = c.iterate;
    io::json mdp;
    if (c.mdp.file) mdp["file"] = *c.mdp.file;
    if (c.mdp.random) mdp["random"] = random_params_to_json(*c.mdp.random), mdp["seed"] = c.mdp.random_seed;
    if (c.mdp.builtin) mdp["builtin"] = *c.mdp.builtin;
    io::json j = {
        {"mdp", mdp},
        {"beta", it.dataset.beta},
        {"source", to_string(it.source)},
        {"anchor", to_string(it.anchor_mode())},
        {"update", it.update == PolicyUpdate::train ? "train" : "kkt"},
        {"coverage", to_string(it.coverage)},
        {"critic",
         {{"rollouts_per_start", it.critic.rollouts_per_start},
          {"completions", it.critic.completions},
          {"learning_rate", it.critic.train.learning_rate},
          {"epochs", it.critic.train.epochs},
          {"clamp_epsilon", it.critic.train.clamp_epsilon},
          {"grad_tol", it.critic.train.grad_tol},
          {"optimizer", it.critic.train.optimizer == CriticOptimizer::newton ? "newton" : "gradient_descent"}}},
        {"dataset",
         {{"m", it.dataset.m},
          {"gap_threshold", it.dataset.gap_threshold},
          {"gap_filter", it.dataset.gap_filter},
          {"dedup", it.dataset.dedup},
          {"full_action_set", it.dataset.full_action_set},
          {"state_weighting", it.dataset.state_weighting == StateWeighting::visits ? "visits" : "uniform"}}},
        {"train",
         {{"lr", it.train.lr},
          {"max_steps", it.train.max_steps},
          {"tol", it.train.tol},
          {"grad_tol", it.train.grad_tol},
          {"batching", to_string(it.train.batching)},
          {"batch_size", it.train.batch_size}}},
        {"iterations", it.iterations},
        {"master_seed", it.seed},
        {"output_dir", c.output_dir}};
    if (c.ref_policy) j["ref_policy"] = *c.ref_policy;
    return j;
}

/// Missing keys take their defaults; unknown enum strings and bad values
/// raise InvalidInput.
inline ExperimentConfig config_from_json(const io::json& j) {
    try {
        ExperimentConfig c;
        auto& it = c.iterate;
        const auto& m = j.at("mdp");
        int sources = 0;
        if (m.contains("file")) c.mdp.file = m.at("file").get<std::string>(), ++sources;
        if (m.contains("random")) {
            c.mdp.random = random_params_from_json(m.at("random"));
            c.mdp.random_seed = m.value("seed", std::uint64_t{0});
            ++sources;
        }
        if (m.contains("builtin")) c.mdp.builtin = m.at("builtin").get<std::string>(), ++sources;
        if (sources != 1) throw InvalidInput("config.mdp must name exactly one of file, random, builtin");
        if (j.contains("ref_policy")) c.ref_policy = j.at("ref_policy").get<std::string>();

        it.dataset.beta = j.value("beta", 1.0);
        it.source = parse_source(j.value("source", std::string("exact")));
        if (j.contains("anchor")) it.anchor = parse_anchor(j.at("anchor").get<std::string>());
        const auto update = j.value("update", std::string("train"));
        if (update != "train" && update != "kkt") throw InvalidInput("unknown update '" + update + "'");
        it.update = update == "train" ? PolicyUpdate::train : PolicyUpdate::kkt;
        it.coverage = parse_coverage(j.value("coverage", std::string("all")));

        if (j.contains("critic")) {
            const auto& cj = j.at("critic");
            it.critic.rollouts_per_start = cj.value("rollouts_per_start", it.critic.rollouts_per_start);
            it.critic.completions = cj.value("completions", it.critic.completions);
            it.critic.train.learning_rate = cj.value("learning_rate", it.critic.train.learning_rate);
            it.critic.train.epochs = cj.value("epochs", it.critic.train.epochs);
            it.critic.train.clamp_epsilon = cj.value("clamp_epsilon", it.critic.train.clamp_epsilon);
            it.critic.train.grad_tol = cj.value("grad_tol", it.critic.train.grad_tol);
            const auto opt = cj.value("optimizer", std::string("newton"));
            if (opt != "newton" && opt != "gradient_descent") throw InvalidInput("unknown critic optimizer '" + opt + "'");
            it.critic.train.optimizer = opt == "newton" ? CriticOptimizer::newton : CriticOptimizer::gradient_descent;
        }
        if (j.contains("dataset")) {
            const auto& dj = j.at("dataset");
            it.dataset.m = dj.value("m", it.dataset.m);
            it.dataset.gap_threshold = dj.value("gap_threshold", it.dataset.gap_threshold);
            it.dataset.gap_filter = dj.value("gap_filter", it.dataset.gap_filter);
            it.dataset.dedup = dj.value("dedup", it.dataset.dedup);
            it.dataset.full_action_set = dj.value("full_action_set", it.dataset.full_action_set);
            const auto w = dj.value("state_weighting", std::string("visits"));
            if (w != "visits" && w != "uniform") throw InvalidInput("unknown state weighting '" + w + "'");
            it.dataset.state_weighting = w == "visits" ? StateWeighting::visits : StateWeighting::uniform;
        }
        if (j.contains("train")) {
            const auto& tj = j.at("train");
            it.train.lr = tj.value("lr", it.train.lr);
            it.train.max_steps = tj.value("max_steps", it.train.max_steps);
            it.train.tol = tj.value("tol", it.train.tol);
            it.train.grad_tol = tj.value("grad_tol", it.train.grad_tol);
            it.train.batching = parse_batching(tj.value("batching", std::string("state_wise")));
            it.train.batch_size = tj.value("batch_size", it.train.batch_size);
        }
        it.iterations = j.value("iterations", 1);
        it.seed = j.value("master_seed", std::uint64_t{0});
        it.train.seed = rng::stage_seed(it.seed, "train_policy");
        c.output_dir = j.value("output_dir", c.output_dir);
        validate(it);
        return c;
    } catch (const io::json::exception& e) {
        throw InvalidInput(std::string("malformed config: ") + e.what());
    }
}

inline ExperimentConfig load_config(const std::string& path) {
    io::json j;
    try {
        j = io::json::parse(csv::read_file(path));
    } catch (const io::json::exception& e) {
        throw InvalidInput("config '" + path + "' is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct Artifact {
    std::string name;
    std::string sha256;
    std::size_t bytes = 0;
};

struct RunResult {
    std::vector<IterationRecord> iterations;
    std::vector<Artifact> artifacts;
    std::string manifest_path;
};

inline std::string iterations_csv(const std::vector<IterationRecord>& recs, AnchorMode mode) {
    csv::Writer w({"iteration", "anchor", "value_before", "value_after", "improvement", "unregularized_before",
                   "unregularized_after", "dataset_states", "lambda_states", "lambda_mean", "lambda_max", "train_steps",
                   "train_loss", "train_grad_norm", "converged"});
    for (const auto& r : recs)
        w.row({std::to_string(r.index), to_string(mode), csv::num(r.value_before), csv::num(r.value_after),
               csv::num(r.improvement()), csv::num(r.unregularized_before), csv::num(r.unregularized_after),
               std::to_string(r.dataset_states), std::to_string(r.lambda_states), csv::num(r.lambda_mean),
               csv::num(r.lambda_max), std::to_string(r.training.steps), csv::num(r.training.loss),
               csv::num(r.training.grad_norm), r.training.converged ? "true" : "false"});
    return w.str();
}

/**
 * generate → mc_estimate → train_critic → build_advantage_dataset →
 * train_policy, repeated `iterations` times. Writes into output_dir:
 *   mdp.json, ref_policy.csv, and per round k: [targets_k.csv, critic_k.csv,]
 *   dataset_k.csv, policy_k.csv, values_k.csv; then iterations.csv and
 *   manifest.json (artifact hashes plus the config echo).
 * Stage faults are rethrown with the config echo appended.
 */
inline RunResult run_pipeline(const ExperimentConfig& config) {
    const auto echo = to_json(config).dump(2);
    RunResult out;
    try {
        const auto mdp = load_source(config.mdp);
        const TabularPolicy ref = config.ref_policy ? io::load_policy(mdp, *config.ref_policy) : TabularPolicy(mdp, "ref");
        out.iterations = iterate_dapo(mdp, ref, config.iterate);

        fs::create_directories(config.output_dir);
        auto emit = [&](const std::string& name, const std::string& content) {
            csv::write_file((fs::path(config.output_dir) / name).string(), content);
            out.artifacts.push_back({name, sha256_hex(content), content.size()});
        };
        emit("mdp.json", io::dump_mdp(mdp));
        emit("ref_policy.csv", io::policy_csv(mdp, ref));
        const double beta = config.iterate.dataset.beta;
        const auto mode = config.iterate.anchor_mode();
        TabularPolicy previous = ref;
        for (const auto& rec : out.iterations) {
            const auto k = std::to_string(rec.index);
            if (rec.critic) {
                emit("targets_" + k + ".csv", targets_csv(mdp, rec.targets));
                emit("critic_" + k + ".csv", critic_csv(mdp, *rec.critic));
            }
            emit("dataset_" + k + ".csv", dataset_csv(mdp, rec.dataset));
            emit("policy_" + k + ".csv", io::policy_csv(mdp, rec.policy));
            const auto& anchor = mode == AnchorMode::fixed ? ref : previous;
            emit("values_" + k + ".csv", io::value_table_csv(mdp, evaluate(mdp, rec.policy, anchor, beta)));
            previous = rec.policy;
        }
        emit("iterations.csv", iterations_csv(out.iterations, mode));

        io::json manifest;
        manifest["config"] = io::json::parse(echo);
        manifest["artifacts"] = io::json::array();
        for (const auto& a : out.artifacts)
            manifest["artifacts"].push_back({{"name", a.name}, {"sha256", a.sha256}, {"bytes", a.bytes}});
        out.manifest_path = (fs::path(config.output_dir) / "manifest.json").string();
        csv::write_file(out.manifest_path, manifest.dump(2) + "\n");
    } catch (const InvalidInput&) {
        throw;
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string(e.what()) + "\nconfig:\n" + echo);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct RunReport {
    std::string text;
    std::string csv;
    std::vector<std::string> missing;  // absent or hash-mismatched artifacts
    std::vector<int> monotone_violations;
    std::vector<std::string> failed_checks;
    int exit_code = 0;  // 0 ok, 1 violation / failed check / missing artifact, 2 no manifest
};

/**
 * Summarizes a run directory: per-iteration values, multiplier statistics and
 * verdicts from checks.csv when present. The tracked sequence is V_β(μ) for
 * the fixed anchor and the unregularized V(μ) for the moving anchor; a drop of
 * more than 1e-9 is a violation.
 */
inline RunReport report_run(const std::string& dir) {
    RunReport rep;
    const auto manifest_path = fs::path(dir) / "manifest.json";
    if (!fs::exists(manifest_path)) {
        rep.text = "missing manifest: " + manifest_path.string() + "\n";
        rep.exit_code = 2;
        return rep;
    }
    io::json manifest;
    try {
        manifest = io::json::parse(csv::read_file(manifest_path.string()));
    } catch (const io::json::exception& e) {
        rep.text = std::string("unreadable manifest: ") + e.what() + "\n";
        rep.exit_code = 2;
        return rep;
    }
    for (const auto& a : manifest.at("artifacts")) {
        const auto name = a.at("name").get<std::string>();
        const auto path = fs::path(dir) / name;
        if (!fs::exists(path)) rep.missing.push_back(name + " (missing)");
        else if (sha256_hex(csv::read_file(path.string())) != a.at("sha256").get<std::string>())
            rep.missing.push_back(name + " (hash mismatch)");
    }

    std::ostringstream text;
    csv::Writer out({"iteration", "anchor", "value_before", "value_after", "improvement", "unregularized_after",
                     "lambda_mean", "lambda_max", "monotone"});
    const auto iter_path = fs::path(dir) / "iterations.csv";
    if (fs::exists(iter_path)) {
        const auto t = csv::read(iter_path.string());
        const auto ci = t.column("iteration"), ca = t.column("anchor"), cb = t.column("value_before"),
                   cv = t.column("value_after"), cu = t.column("unregularized_before"), cua = t.column("unregularized_after"),
                   clm = t.column("lambda_mean"), clx = t.column("lambda_max");
        char line[256];
        std::snprintf(line, sizeof line, "%-9s %-7s %-14s %-14s %-12s %-14s %-12s %-12s %s\n", "iteration", "anchor",
                      "V_before", "V_after", "gain", "V_unreg", "lambda_mean", "lambda_max", "monotone");
        text << line;
        for (const auto& row : t.rows) {
            const bool fixed = row[ca] == "fixed";
            const double before = csv::to_double(fixed ? row[cb] : row[cu]);
            const double after = csv::to_double(fixed ? row[cv] : row[cua]);
            const bool ok = after >= before - 1e-9;
            if (!ok) rep.monotone_violations.push_back(static_cast<int>(csv::to_int(row[ci])));
            const double gain = csv::to_double(row[cv]) - csv::to_double(row[cb]);
            std::snprintf(line, sizeof line, "%-9s %-7s %-14.9f %-14.9f %-12.3e %-14.9f %-12.3e %-12.3e %s\n",
                          row[ci].c_str(), row[ca].c_str(), csv::to_double(row[cb]), csv::to_double(row[cv]), gain,
                          csv::to_double(row[cua]), csv::to_double(row[clm]), csv::to_double(row[clx]),
                          ok ? "ok" : "VIOLATION");
            text << line;
            out.row({row[ci], row[ca], row[cb], row[cv], csv::num(gain), row[cua], row[clm], row[clx],
                     ok ? "true" : "false"});
        }
    } else {
        rep.missing.push_back("iterations.csv (missing)");
    }

    const auto checks_path = fs::path(dir) / "checks.csv";
    if (fs::exists(checks_path)) {
        const auto t = csv::read(checks_path.string());
        const auto cn = t.column("check"), cp = t.column("passed"), cm = t.column("max_residual"), ct = t.column("tolerance");
        text << "\nchecks:\n";
        for (const auto& row : t.rows) {
            const bool passed = row[cp] == "true";
            if (!passed) rep.failed_checks.push_back(row[cn]);
            text << "  " << (passed ? "PASS " : "FAIL ") << row[cn] << "  max_residual " << row[cm] << " tol " << row[ct] << "\n";
        }
    }
    for (const auto& m : rep.missing) text << "missing artifact: " << m << "\n";
    if (!rep.monotone_violations.empty()) text << "monotone violations: " << rep.monotone_violations.size() << "\n";

    rep.text = text.str();
    rep.csv = out.str();
    rep.exit_code = (rep.missing.empty() && rep.monotone_violations.empty() && rep.failed_checks.empty()) ? 0 : 1;
    csv::write_file((fs::path(dir) / "report.csv").string(), rep.csv);
    return rep;
}

}  // namespace dapo

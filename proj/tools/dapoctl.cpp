// dapoctl: command-line front end for the dapo library.
//
// Exit codes: 0 success, 1 check failure or run fault, 2 invalid input.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dapo/dapo.hpp"

namespace {

using namespace dapo;

struct Globals {
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string config;
    std::string out;
};

/// Writes to --out when given, stdout otherwise.
void emit(const Globals& g, const std::string& content) {
    if (g.out.empty()) std::cout << content;
    else csv::write_file(g.out, content);
}

TabularPolicy policy_or_uniform(const StepMdp& mdp, const std::string& path, const std::string& tag) {
    return path.empty() ? TabularPolicy(mdp, tag) : io::load_policy(mdp, path);
}

std::string visits_csv(const StepMdp& mdp, const StateVisits& v) {
    csv::Writer w({"state", "visits"});
    for (const auto& [s, n] : v) w.row({mdp.state_name(s), std::to_string(n)});
    return w.str();
}

StateVisits parse_visits(const StepMdp& mdp, const csv::Table& t) {
    const auto cs = t.column("state"), cv = t.column("visits");
    StateVisits out;
    for (const auto& row : t.rows) {
        const auto s = mdp.find_state(row[cs]);
        if (!s) throw InvalidInput("visits reference unknown state '" + row[cs] + "'");
        const auto n = csv::to_int(row[cv]);
        if (n < 1) throw InvalidInput("visit counts must be >= 1");
        out[*s] += static_cast<std::size_t>(n);
    }
    return out;
}

int print_reports(const std::vector<CheckReport>& reports) {
    for (const auto& r : reports)
        std::printf("%s %-50s instances=%d max_residual=%.3e tol=%.1e%s%s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                    r.instances, r.max_residual, r.tolerance, r.detail.empty() ? "" : "  ", r.detail.c_str());
    return all_passed(reports) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DAPO on step-level KL-regularized MDPs"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Master seed")->each([&](const std::string&) { g.seed_given = true; });
    app.add_option("--config", g.config, "Experiment config file (JSON)");
    app.add_option("--out", g.out, "Output file or directory");

    int exit_code = 0;

    // validate ---------------------------------------------------------------
    std::string validate_path;
    auto* validate_cmd = app.add_subcommand("validate", "Validate an MDP file");
    validate_cmd->add_option("mdp", validate_path, "MDP file")->required();
    validate_cmd->callback([&] {
        const auto desc = io::parse_description(csv::read_file(validate_path));
        const auto report = validate(desc);
        if (report.empty()) {
            std::cout << "valid\n";
            return;
        }
        for (const auto& line : report) std::cout << line << "\n";
        exit_code = 2;
    });

    // gen-mdp ----------------------------------------------------------------
    RandomMdpParams gen;
    auto* gen_cmd = app.add_subcommand("gen-mdp", "Generate a random layered DAG MDP");
    gen_cmd->add_option("--depth", gen.depth)->capture_default_str();
    gen_cmd->add_option("--branching-min", gen.branching_min)->capture_default_str();
    gen_cmd->add_option("--branching-max", gen.branching_max)->capture_default_str();
    gen_cmd->add_option("--width", gen.width, "States per layer cap (0 = tree)")->capture_default_str();
    gen_cmd->add_option("--reward-prob", gen.reward_prob)->capture_default_str();
    gen_cmd->add_option("--early-terminal-prob", gen.early_terminal_prob)->capture_default_str();
    gen_cmd->add_option("--state-cap", gen.state_cap)->capture_default_str();
    gen_cmd->callback([&] {
        if (gen.depth < 1 || gen.branching_min < 1 || gen.branching_max < gen.branching_min)
            throw InvalidInput("need depth >= 1 and 1 <= branching-min <= branching-max");
        std::optional<MdpDescription> desc;
        try {
            desc = random_mdp_description(gen, g.seed);
        } catch (const std::invalid_argument& e) {
            throw InvalidInput(e.what());
        }
        emit(g, io::dump_mdp(StepMdp::from_description(*desc)));
    });

    // values -----------------------------------------------------------------
    std::string values_mdp, values_policy, values_ref;
    double values_beta = 0.0;
    bool values_optimal = false;
    auto* values_cmd = app.add_subcommand("values", "Exact V/Q/A table of a policy, or the optimal solution");
    values_cmd->add_option("mdp", values_mdp)->required();
    values_cmd->add_option("--policy", values_policy, "Policy CSV (uniform when omitted)");
    values_cmd->add_option("--ref", values_ref, "Reference policy CSV (uniform when omitted)");
    values_cmd->add_option("--beta", values_beta)->capture_default_str();
    values_cmd->add_flag("--optimal", values_optimal, "Solve for the optimal policy instead");
    values_cmd->callback([&] {
        const auto mdp = io::load_mdp(values_mdp);
        const auto ref = policy_or_uniform(mdp, values_ref, "ref");
        if (values_optimal) {
            const auto sol = solve_optimal(mdp, ref, values_beta);
            auto table = evaluate(mdp, sol.pi_star, ref, values_beta);
            emit(g, io::value_table_csv(mdp, table));
            return;
        }
        emit(g, io::value_table_csv(mdp, evaluate(mdp, policy_or_uniform(mdp, values_policy, "policy"), ref, values_beta)));
    });

    // critic -----------------------------------------------------------------
    auto* critic_cmd = app.add_subcommand("critic", "Critic pipeline");
    critic_cmd->require_subcommand(1);
    std::string cg_mdp, cg_policy;
    std::size_t cg_rollouts = 64;
    auto* cg = critic_cmd->add_subcommand("generate", "Visit counts of generator rollouts (CSV state,visits)");
    cg->add_option("mdp", cg_mdp)->required();
    cg->add_option("--generator", cg_policy, "Generator policy CSV (uniform when omitted)");
    cg->add_option("--rollouts", cg_rollouts, "Rollouts per start state")->capture_default_str();
    cg->callback([&] {
        const auto mdp = io::load_mdp(cg_mdp);
        const auto gen_policy = policy_or_uniform(mdp, cg_policy, "generator");
        emit(g, visits_csv(mdp, generate_states(mdp, gen_policy, mdp.start_states(), cg_rollouts, rng::stage_seed(g.seed, "generate"))));
    });

    std::string ce_mdp, ce_completer, ce_states;
    int ce_n = 4096;
    auto* ce = critic_cmd->add_subcommand("estimate", "Monte-Carlo targets (CSV state,n,successes)");
    ce->add_option("mdp", ce_mdp)->required();
    ce->add_option("--completer", ce_completer, "Completer policy CSV (uniform when omitted)");
    ce->add_option("--states", ce_states, "Visits CSV (every nonterminal state when omitted)");
    ce->add_option("--n", ce_n, "Completions per state")->capture_default_str();
    ce->callback([&] {
        const auto mdp = io::load_mdp(ce_mdp);
        const auto completer = policy_or_uniform(mdp, ce_completer, "completer");
        const auto states = ce_states.empty() ? all_nonterminal_states(mdp) : parse_visits(mdp, csv::read(ce_states));
        if (ce_n < 1) throw InvalidInput("--n must be >= 1");
        emit(g, targets_csv(mdp, mc_targets(mdp, completer, states, ce_n, rng::stage_seed(g.seed, "mc_estimate"))));
    });

    std::string ct_mdp, ct_targets, ct_optimizer = "newton";
    CriticConfig ct_cfg;
    auto* ct = critic_cmd->add_subcommand("train", "Fit a tabular critic to targets (CSV state,raw_score)");
    ct->add_option("mdp", ct_mdp)->required();
    ct->add_option("--targets", ct_targets)->required();
    ct->add_option("--lr", ct_cfg.learning_rate)->capture_default_str();
    ct->add_option("--epochs", ct_cfg.epochs)->capture_default_str();
    ct->add_option("--clamp-epsilon", ct_cfg.clamp_epsilon)->capture_default_str();
    ct->add_option("--optimizer", ct_optimizer)->check(CLI::IsMember({"newton", "gradient_descent"}))->capture_default_str();
    ct->callback([&] {
        const auto mdp = io::load_mdp(ct_mdp);
        ct_cfg.optimizer = ct_optimizer == "newton" ? CriticOptimizer::newton : CriticOptimizer::gradient_descent;
        const auto targets = parse_targets(mdp, csv::read(ct_targets));
        const auto critic = train_critic(targets, ct_cfg);
        std::fprintf(stderr, "bce %.9g epochs %d grad %.3e\n", critic_loss(critic, targets), critic.epochs_run,
                     critic.final_grad_norm);
        emit(g, critic_csv(mdp, critic));
    });

    std::string ca_mdp, ca_critic, ca_completer;
    auto* ca = critic_cmd->add_subcommand("accuracy", "Critic error against the completer's exact values");
    ca->add_option("mdp", ca_mdp)->required();
    ca->add_option("--critic", ca_critic)->required();
    ca->add_option("--completer", ca_completer, "Completer policy CSV (uniform when omitted)");
    ca->callback([&] {
        const auto mdp = io::load_mdp(ca_mdp);
        const auto completer = policy_or_uniform(mdp, ca_completer, "completer");
        const auto acc = critic_accuracy(mdp, parse_critic(mdp, csv::read(ca_critic)), evaluate(mdp, completer, completer, 0.0));
        csv::Writer w({"state", "abs_error"});
        for (const auto& [s, e] : acc.per_state) w.row({mdp.state_name(s), csv::num(e)});
        for (StateId s : acc.uncovered) w.row({mdp.state_name(s), "uncovered"});
        emit(g, w.str());
        std::fprintf(stderr, "max %.6g mean %.6g uncovered %zu\n", acc.max_abs_error, acc.mean_abs_error, acc.uncovered.size());
    });

    // dapo -------------------------------------------------------------------
    auto* dapo_cmd = app.add_subcommand("dapo", "Advantage datasets, training, exact solutions, iteration");
    dapo_cmd->require_subcommand(1);

    std::string dd_mdp, dd_ref, dd_critic, dd_states, dd_source = "exact", dd_weighting = "visits";
    DatasetConfig dd_cfg;
    bool dd_no_gap = false, dd_no_dedup = false;
    auto* dd = dapo_cmd->add_subcommand("dataset", "Build an advantage dataset (CSV state,action,a_hat,source,weight)");
    dd->add_option("mdp", dd_mdp)->required();
    dd->add_option("--ref", dd_ref, "Sampling reference CSV (uniform when omitted)");
    dd->add_option("--source", dd_source)->check(CLI::IsMember({"exact", "critic"}))->capture_default_str();
    dd->add_option("--critic", dd_critic, "Critic CSV (source=critic)");
    dd->add_option("--states", dd_states, "Visits CSV (every nonterminal state when omitted)");
    dd->add_option("--m", dd_cfg.m)->capture_default_str();
    dd->add_option("--beta", dd_cfg.beta)->capture_default_str();
    dd->add_option("--gap-threshold", dd_cfg.gap_threshold)->capture_default_str();
    dd->add_flag("--no-gap-filter", dd_no_gap);
    dd->add_flag("--no-dedup", dd_no_dedup);
    dd->add_flag("--full-action-set", dd_cfg.full_action_set);
    dd->add_option("--state-weighting", dd_weighting)->check(CLI::IsMember({"visits", "uniform"}))->capture_default_str();
    dd->callback([&] {
        const auto mdp = io::load_mdp(dd_mdp);
        const auto ref = policy_or_uniform(mdp, dd_ref, "ref");
        dd_cfg.gap_filter = !dd_no_gap;
        dd_cfg.dedup = !dd_no_dedup;
        dd_cfg.state_weighting = dd_weighting == "visits" ? StateWeighting::visits : StateWeighting::uniform;
        const auto states = dd_states.empty() ? all_nonterminal_states(mdp) : parse_visits(mdp, csv::read(dd_states));
        std::optional<ValueTable> exact;
        std::optional<CriticTable> critic;
        ValueSource source;
        if (dd_source == "exact") {
            exact = evaluate(mdp, ref, ref, dd_cfg.beta);
            source = ValueSource::from_exact(*exact);
        } else {
            if (dd_critic.empty()) throw InvalidInput("--source critic needs --critic");
            critic = parse_critic(mdp, csv::read(dd_critic));
            source = ValueSource::from_critic(*critic);
        }
        emit(g, dataset_csv(mdp, build_advantage_dataset(mdp, states, ref, source, dd_cfg, rng::stage_seed(g.seed, "dataset"))));
    });

    std::string dt_mdp, dt_dataset, dt_ref, dt_init, dt_batching = "state_wise";
    double dt_beta = 1.0;
    TrainConfig dt_cfg;
    auto* dt = dapo_cmd->add_subcommand("train", "Fit a policy to an advantage dataset (CSV state,action,logit)");
    dt->add_option("mdp", dt_mdp)->required();
    dt->add_option("--dataset", dt_dataset)->required();
    dt->add_option("--ref", dt_ref, "Reference CSV (uniform when omitted)");
    dt->add_option("--init", dt_init, "Initial policy CSV (the reference when omitted)");
    dt->add_option("--beta", dt_beta)->capture_default_str();
    dt->add_option("--lr", dt_cfg.lr)->capture_default_str();
    dt->add_option("--max-steps", dt_cfg.max_steps)->capture_default_str();
    dt->add_option("--tol", dt_cfg.tol)->capture_default_str();
    dt->add_option("--grad-tol", dt_cfg.grad_tol)->capture_default_str();
    dt->add_option("--batching", dt_batching)->check(CLI::IsMember({"state_wise", "full", "shuffled"}))->capture_default_str();
    dt->add_option("--batch-size", dt_cfg.batch_size)->capture_default_str();
    dt->callback([&] {
        const auto mdp = io::load_mdp(dt_mdp);
        const auto ref = policy_or_uniform(mdp, dt_ref, "ref");
        const auto init = dt_init.empty() ? ref : io::load_policy(mdp, dt_init);
        const auto ds = parse_dataset(mdp, csv::read(dt_dataset), dt_beta);
        dt_cfg.batching = parse_batching(dt_batching);
        dt_cfg.seed = rng::stage_seed(g.seed, "train_policy");
        const auto res = train_policy(ds, ref, init, dt_cfg);
        std::fprintf(stderr, "loss %.9g grad %.3e steps %d converged %s\n", res.loss, res.grad_norm, res.steps,
                     res.converged ? "true" : "false");
        emit(g, io::policy_csv(mdp, res.policy));
    });

    std::string ds_mdp, ds_ref, ds_nu;
    double ds_beta = 1.0;
    auto* ds_cmd = dapo_cmd->add_subcommand("solve-exact", "Exact per-state DAPO step (CSV state,action,u_plus,lambda_star)");
    ds_cmd->add_option("mdp", ds_mdp)->required();
    ds_cmd->add_option("--ref", ds_ref, "Reference CSV (uniform when omitted)");
    ds_cmd->add_option("--nu", ds_nu, "Action sampling distribution CSV (the reference when omitted)");
    ds_cmd->add_option("--beta", ds_beta)->capture_default_str();
    ds_cmd->callback([&] {
        const auto mdp = io::load_mdp(ds_mdp);
        const auto ref = policy_or_uniform(mdp, ds_ref, "ref");
        const auto nu = ds_nu.empty() ? ref : io::load_policy(mdp, ds_nu);
        emit(g, dapo_solution_csv(mdp, exact_dapo_policy(mdp, ref, evaluate(mdp, ref, ref, ds_beta), nu)));
    });

    std::string di_mdp, di_ref, di_source = "exact", di_anchor, di_update = "train", di_coverage = "all";
    IterateConfig di_cfg;
    bool di_no_gap = false;
    auto* di = dapo_cmd->add_subcommand("iterate", "Iterative DAPO (CSV per-iteration summary)");
    di->add_option("mdp", di_mdp)->required();
    di->add_option("--ref", di_ref, "Initial reference CSV (uniform when omitted)");
    di->add_option("--iterations", di_cfg.iterations)->capture_default_str();
    di->add_option("--beta", di_cfg.dataset.beta)->capture_default_str();
    di->add_option("--source", di_source)->check(CLI::IsMember({"exact", "critic"}))->capture_default_str();
    di->add_option("--anchor", di_anchor, "fixed|moving (default by source)")->check(CLI::IsMember({"fixed", "moving"}));
    di->add_option("--update", di_update)->check(CLI::IsMember({"train", "kkt"}))->capture_default_str();
    di->add_option("--coverage", di_coverage)->check(CLI::IsMember({"all", "generated"}))->capture_default_str();
    di->add_option("--m", di_cfg.dataset.m)->capture_default_str();
    di->add_option("--completions", di_cfg.critic.completions)->capture_default_str();
    di->add_option("--rollouts", di_cfg.critic.rollouts_per_start)->capture_default_str();
    di->add_flag("--full-action-set", di_cfg.dataset.full_action_set);
    di->add_flag("--no-gap-filter", di_no_gap);
    di->callback([&] {
        const auto mdp = io::load_mdp(di_mdp);
        const auto ref = policy_or_uniform(mdp, di_ref, "ref");
        di_cfg.source = parse_source(di_source);
        if (!di_anchor.empty()) di_cfg.anchor = parse_anchor(di_anchor);
        di_cfg.update = di_update == "train" ? PolicyUpdate::train : PolicyUpdate::kkt;
        di_cfg.coverage = parse_coverage(di_coverage);
        di_cfg.dataset.gap_filter = !di_no_gap;
        di_cfg.seed = g.seed;
        di_cfg.train.seed = rng::stage_seed(g.seed, "train_policy");
        validate(di_cfg);
        emit(g, iterations_csv(iterate_dapo(mdp, ref, di_cfg), di_cfg.anchor_mode()));
    });

    // verify -----------------------------------------------------------------
    std::string suite = "all";
    InstanceConfig verify_cfg;
    auto* verify_cmd = app.add_subcommand("verify", "Numerical certification suite");
    verify_cmd->add_option("--suite", suite)
        ->check(CLI::IsMember({"all", "pdl", "bellman", "gradient", "monotone", "jensen"}))
        ->capture_default_str();
    verify_cmd->add_option("--instances", verify_cfg.instances)->check(CLI::PositiveNumber)->capture_default_str();
    verify_cmd->callback([&] {
        verify_cfg.seed = g.seed;
        const auto reports = run_suite(suite, verify_cfg);
        if (!g.out.empty()) csv::write_file(g.out, reports_csv(reports));
        exit_code = print_reports(reports);
    });

    // report -----------------------------------------------------------------
    std::string report_dir;
    auto* report_cmd = app.add_subcommand("report", "Summarize a run directory");
    report_cmd->add_option("run_dir", report_dir)->required();
    report_cmd->callback([&] {
        const auto rep = report_run(report_dir);
        std::cout << rep.text;
        exit_code = rep.exit_code;
    });

    // run --------------------------------------------------------------------
    std::string run_config;
    auto* run_cmd = app.add_subcommand("run", "Run the full pipeline from a config file");
    run_cmd->add_option("config_file", run_config, "Config file (or the global --config)");
    run_cmd->callback([&] {
        const auto path = run_config.empty() ? g.config : run_config;
        if (path.empty()) throw InvalidInput("run needs a config file");
        auto cfg = load_config(path);
        if (!g.out.empty()) cfg.output_dir = g.out;
        if (g.seed_given) {
            cfg.iterate.seed = g.seed;
            cfg.iterate.train.seed = rng::stage_seed(g.seed, "train_policy");
        }
        const auto res = run_pipeline(cfg);
        for (const auto& rec : res.iterations)
            std::printf("iteration %d  V_before %.9f  V_after %.9f  gain %.3e\n", rec.index, rec.value_before,
                        rec.value_after, rec.improvement());
        std::printf("manifest %s (%zu artifacts)\n", res.manifest_path.c_str(), res.artifacts.size());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const InvalidMdp& e) {
        std::cerr << "invalid MDP:\n";
        for (const auto& line : e.report()) std::cerr << "  " << line << "\n";
        return 2;
    } catch (const InvalidInput& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const std::domain_error& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}

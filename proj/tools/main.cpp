// mlenkf command-line driver.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <mlenkf/mlenkf.hpp>

int run_selftest(std::ostream& out);

namespace {

using namespace mlenkf;
namespace fs = std::filesystem;

/// Problems with the user's configuration; mapped to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config;
    std::vector<double> eps;
    std::string model;
    std::string method = "both";
    std::size_t horizon = 0;
    std::size_t replicas = 0;
    std::uint64_t seed = 0;
    std::size_t jobs = 0;
    std::string output;
    std::vector<std::string> sets;
    std::string mode;

    const CLI::App* app = nullptr;

    bool given(const std::string& flag) const { return app && app->count(flag) > 0; }
};

void add_experiment_flags(CLI::App* sub, Options& o, bool with_method)
{
    sub->add_option("--config", o.config, "JSON experiment configuration");
    sub->add_option("--eps", o.eps, "accuracy target(s); replaces the eps grid")->delimiter(',');
    sub->add_option("--model", o.model, "ou | double-well | cosine");
    if (with_method) sub->add_option("--method", o.method, "enkf | mlenkf | dmfenkf | kalman | both");
    sub->add_option("--horizon", o.horizon, "number of observation times");
    sub->add_option("--replicas", o.replicas, "independent filter runs per eps");
    sub->add_option("--seed", o.seed, "master seed (default 0)");
    sub->add_option("--jobs", o.jobs, "worker threads");
    sub->add_option("--output", o.output, "results directory");
    sub->add_option("--set", o.sets, "config override key=value (repeatable)");
    sub->add_option("--mode", o.mode, "multilevel plan mode: paper | corollary");
}

ExperimentConfig build_config(const Options& o)
{
    try {
        ExperimentConfig cfg;
        if (!o.config.empty()) cfg = load_config(o.config);
        if (o.given("--eps")) cfg.eps_grid = o.eps;
        if (o.given("--model")) cfg.model = o.model;
        if (o.given("--horizon")) cfg.horizon = o.horizon;
        if (o.given("--replicas")) cfg.replicas = o.replicas;
        if (o.given("--seed")) cfg.master_seed = o.seed;
        if (o.given("--jobs")) cfg.jobs = o.jobs;
        if (o.given("--mode")) cfg.plan_mode = plan_mode_from_name(o.mode);
        for (const auto& s : o.sets) cfg = apply_override(cfg, s);
        cfg.validate();
        return cfg;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

void write_reference(const fs::path& path, const ReferenceSolution& ref)
{
    write_qoi_csv(path, ref.qois, ref.values, "reference source: " + ref.source);
}

int cmd_plan(const Options& o, double alpha, double beta)
{
    if (o.eps.size() != 1) throw ConfigError("plan needs exactly one --eps");
    PlanOptions opt;
    try {
        if (!o.mode.empty()) opt.mode = plan_mode_from_name(o.mode);
        const double eps = o.eps.front();
        const MLPlan plan = ml_plan(eps, alpha, beta, opt);
        nlohmann::json j = plan_to_json(plan);
        const auto single = enkf_parameters(eps, alpha);
        j["enkf"] = {{"N", single.N}, {"P", single.P}};
        std::cout << j.dump(2) << '\n';
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return 0;
}

/// One filter run on freshly synthesized data, printed next to the reference.
int cmd_run(const Options& o, Method method)
{
    ExperimentConfig cfg = build_config(o);
    cfg.method = method;
    const double eps = cfg.eps_grid.front();
    const DynamicsModel model = cfg.dynamics();
    const ObservationModel obs = cfg.observation();
    const GaussianPrior prior = cfg.prior();
    const auto data = synthesize_observations(model, obs, cfg.horizon, cfg.master_seed, prior, cfg.truth_substeps);
    const auto ref = compute_reference(cfg, data);
    const ReplicaRunner runner{cfg, model, obs, prior, data};
    const auto table = runner(method, eps, 0);

    std::printf("n,y,mean,variance,reference_mean,reference_variance\n");
    for (std::size_t n = 0; n < table.size(); ++n) {
        const double y = n == 0 ? NAN : data.observations[n - 1][0];
        std::printf("%zu,%.10g,%.10g,%.10g,%.10g,%.10g\n", n, y, derive_qoi("mean", table[n]),
                    derive_qoi("variance", table[n]), derive_qoi("mean", ref.values[n]),
                    derive_qoi("variance", ref.values[n]));
    }
    if (!o.output.empty()) {
        const fs::path dir(o.output);
        fs::create_directories(dir);
        write_qoi_csv(dir / "estimate.csv", {"mean", "second_moment"}, table);
        write_reference(dir / "reference.csv", ref);
        nlohmann::json j = {{"config", to_json(cfg)}, {"overrides", o.sets}, {"eps", eps},
                            {"observation_hash", observation_hash(data.observations)}};
        if (method == Method::MLEnKF) j["plan"] = plan_to_json(ml_plan(eps, cfg.alpha, cfg.beta, plan_options(cfg)));
        write_text(dir / "plan.json", j.dump(2) + "\n");
    }
    return 0;
}

int cmd_benchmark(const Options& o)
{
    ExperimentConfig cfg = build_config(o);
    std::vector<Method> methods;
    try {
        if (o.method == "both") methods = {Method::EnKF, Method::MLEnKF};
        else methods = {method_from_name(o.method)};
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    const fs::path dir = o.output.empty() ? fs::path("results") : fs::path(o.output);

    std::vector<BenchmarkRecord> records;
    nlohmann::json plans = nlohmann::json::array();
    nlohmann::json fits = nlohmann::json::array();
    ReferenceSolution reference;
    std::uint64_t hash = 0;
    for (Method m : methods) {
        cfg.method = m;
        const auto res = rmse_experiment(cfg);
        reference = res.reference;
        hash = res.observation_hash;
        for (const auto& p : res.plans) plans.push_back(p);
        for (const auto& qoi : cfg.qois) {
            std::vector<std::pair<double, double>> pts;
            for (const auto& r : res.records) {
                if (r.qoi != qoi) continue;
                std::fprintf(stderr, "%-7s %-8s eps=%-10.6g runtime=%-10.4g rmse=%.4e\n",
                             std::string(to_string(m)).c_str(), qoi.c_str(), r.eps, r.runtime_s, r.rmse);
                if (r.rmse > 0.0 && r.runtime_s > 0.0) pts.emplace_back(r.runtime_s, r.rmse);
            }
            if (pts.size() >= 3) {
                try {
                    const auto fit = fit_loglog_slope(pts);
                    fits.push_back({{"method", std::string(to_string(m))}, {"qoi", qoi}, {"slope", fit.slope},
                                    {"intercept", fit.intercept}});
                    std::fprintf(stderr, "%-7s %-8s fitted slope %.3f\n", std::string(to_string(m)).c_str(),
                                 qoi.c_str(), fit.slope);
                } catch (const std::invalid_argument&) {
                    // Degenerate timings (for instance a deterministic method) have no slope.
                }
            }
        }
        records.insert(records.end(), res.records.begin(), res.records.end());
    }

    emit_results(records, dir);
    write_reference(dir / "reference.csv", reference);
    nlohmann::json j = {{"config", to_json(cfg)},
                        {"overrides", o.sets},
                        {"methods", nlohmann::json::array()},
                        {"observation_hash", hash},
                        {"plans", plans},
                        {"fits", fits}};
    for (Method m : methods) j["methods"].push_back(std::string(to_string(m)));
    write_text(dir / "plan.json", j.dump(2) + "\n");
    std::cout << "wrote " << records.size() << " records to " << (dir / "records.csv").string() << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Multilevel ensemble Kalman filtering experiments"};
    app.require_subcommand(1);
    app.fallthrough(false);

    Options o;
    double alpha = 1.0, beta = 2.0;

    auto* plan = app.add_subcommand("plan", "print the multilevel plan for one accuracy");
    plan->add_option("--eps", o.eps, "accuracy target")->required();
    plan->add_option("--mode", o.mode, "paper | corollary");
    plan->add_option("--alpha", alpha, "weak rate");
    plan->add_option("--beta", beta, "strong rate");

    auto* run_enkf = app.add_subcommand("run-enkf", "one EnKF run against the reference");
    auto* run_ml = app.add_subcommand("run-mlenkf", "one MLEnKF run against the reference");
    auto* run_dmf = app.add_subcommand("run-dmfenkf", "the density-based mean-field filter against the reference");
    auto* bench = app.add_subcommand("benchmark", "RMSE-versus-runtime experiment over the eps grid");
    auto* selftest = app.add_subcommand("selftest", "quick invariant checks");
    for (auto* sub : {run_enkf, run_ml, run_dmf}) add_experiment_flags(sub, o, false);
    add_experiment_flags(bench, o, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 2;
    }

    try {
        if (plan->parsed()) return cmd_plan(o, alpha, beta);
        if (selftest->parsed()) return run_selftest(std::cout);
        for (auto [sub, method] : {std::pair{run_enkf, Method::EnKF}, std::pair{run_ml, Method::MLEnKF},
                                   std::pair{run_dmf, Method::DMFEnKF}}) {
            if (sub->parsed()) {
                o.app = sub;
                return cmd_run(o, method);
            }
        }
        if (bench->parsed()) {
            o.app = bench;
            return cmd_benchmark(o);
        }
    } catch (const ConfigError& e) {
        std::cerr << "mlenkf: configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "mlenkf: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "enkf.hpp"
#include "models.hpp"
#include "multilevel.hpp"
#include "parallel.hpp"
#include "reference.hpp"
#include "rng.hpp"

namespace mlenkf {

enum class Method { EnKF, MLEnKF, DMFEnKF, Kalman };

inline std::string_view to_string(Method m)
{
    switch (m) {
    case Method::EnKF: return "enkf";
    case Method::MLEnKF: return "mlenkf";
    case Method::DMFEnKF: return "dmfenkf";
    case Method::Kalman: return "kalman";
    }
    return "?";
}

inline Method method_from_name(std::string_view name)
{
    if (name == "enkf") return Method::EnKF;
    if (name == "mlenkf") return Method::MLEnKF;
    if (name == "dmfenkf") return Method::DMFEnKF;
    if (name == "kalman") return Method::Kalman;
    throw std::invalid_argument("unknown method '" + std::string(name) + "'");
}

inline std::string_view to_string(CovarianceMode m)
{
    return m == CovarianceMode::Biased ? "biased" : "unbiased";
}

inline CovarianceMode covariance_mode_from_name(std::string_view name)
{
    if (name == "biased") return CovarianceMode::Biased;
    if (name == "unbiased") return CovarianceMode::Unbiased;
    throw std::invalid_argument("unknown covariance mode '" + std::string(name) + "'");
}

struct ExperimentConfig {
    std::string model = "ou";
    double sigma = 0.5;
    double H = 1.0;
    double Gamma = 0.1;
    std::size_t horizon = 10;
    std::vector<double> eps_grid{0x1p-4, 0x1p-5, 0x1p-6, 0x1p-7, 0x1p-8};
    std::size_t replicas = 100;
    std::vector<std::string> qois{"mean"};
    std::uint64_t master_seed = 0;
    Method method = Method::EnKF;

    PlanMode plan_mode = PlanMode::Paper;
    double alpha = 1.0;
    double beta = 2.0;
    Scheme scheme = Scheme::Milstein;
    CovarianceMode covariance_mode = CovarianceMode::Biased;
    /// Resolution of the truth path when the model has no exact step.
    std::size_t truth_substeps = 4096;
    DensityGridConfig grid;
    /// CSV file caching the density-based reference; empty disables caching.
    std::string reference_cache;
    std::size_t jobs = 1;

    void validate() const
    {
        model_from_name(model, sigma);
        if (!(Gamma > 0.0)) throw std::invalid_argument("Gamma must be positive");
        if (replicas < 1) throw std::invalid_argument("replicas must be >= 1");
        if (eps_grid.empty()) throw std::invalid_argument("eps_grid must not be empty");
        for (std::size_t i = 0; i < eps_grid.size(); ++i) {
            if (!(eps_grid[i] > 0.0 && eps_grid[i] < 1.0)) throw std::invalid_argument("every eps must lie in (0, 1)");
            if (i > 0 && !(eps_grid[i] < eps_grid[i - 1])) {
                throw std::invalid_argument("eps_grid must be strictly decreasing");
            }
        }
        if (qois.empty()) throw std::invalid_argument("qois must not be empty");
        for (const auto& q : qois) {
            if (q != "mean" && q != "variance") throw std::invalid_argument("unknown qoi '" + q + "'");
        }
        if (truth_substeps < 1) throw std::invalid_argument("truth_substeps must be >= 1");
        if (grid.Nx < 2 || !(grid.x1 > grid.x0) || !(grid.dt > 0.0)) throw std::invalid_argument("invalid density grid");
    }

    DynamicsModel dynamics() const { return model_from_name(model, sigma); }
    ObservationModel observation() const { return ObservationModel::scalar(H, Gamma); }
    GaussianPrior prior() const { return GaussianPrior::scalar(0.0, Gamma); }
};

inline PlanOptions plan_options(const ExperimentConfig& c)
{
    PlanOptions opt;
    opt.mode = c.plan_mode;
    return opt;
}

inline nlohmann::json to_json(const ExperimentConfig& c)
{
    return {
        {"model", c.model},
        {"sigma", c.sigma},
        {"H", c.H},
        {"Gamma", c.Gamma},
        {"horizon", c.horizon},
        {"eps_grid", c.eps_grid},
        {"replicas", c.replicas},
        {"qois", c.qois},
        {"master_seed", c.master_seed},
        {"method", std::string(to_string(c.method))},
        {"plan_mode", std::string(to_string(c.plan_mode))},
        {"alpha", c.alpha},
        {"beta", c.beta},
        {"scheme", std::string(to_string(c.scheme))},
        {"covariance_mode", std::string(to_string(c.covariance_mode))},
        {"truth_substeps", c.truth_substeps},
        {"grid", {{"x0", c.grid.x0}, {"x1", c.grid.x1}, {"Nx", c.grid.Nx}, {"dt", c.grid.dt}}},
        {"reference_cache", c.reference_cache},
        {"jobs", c.jobs},
    };
}

/// Reads the keys present in `j` on top of `base`; unknown keys are rejected.
inline ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {})
{
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
    ExperimentConfig c = std::move(base);
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "model") c.model = v.get<std::string>();
            else if (key == "sigma") c.sigma = v.get<double>();
            else if (key == "H") c.H = v.get<double>();
            else if (key == "Gamma") c.Gamma = v.get<double>();
            else if (key == "horizon") c.horizon = v.get<std::size_t>();
            else if (key == "eps_grid") c.eps_grid = v.get<std::vector<double>>();
            else if (key == "replicas") c.replicas = v.get<std::size_t>();
            else if (key == "qois") c.qois = v.get<std::vector<std::string>>();
            else if (key == "master_seed") c.master_seed = v.get<std::uint64_t>();
            else if (key == "method") c.method = method_from_name(v.get<std::string>());
            else if (key == "plan_mode") c.plan_mode = plan_mode_from_name(v.get<std::string>());
            else if (key == "alpha") c.alpha = v.get<double>();
            else if (key == "beta") c.beta = v.get<double>();
            else if (key == "scheme") c.scheme = scheme_from_name(v.get<std::string>());
            else if (key == "covariance_mode") c.covariance_mode = covariance_mode_from_name(v.get<std::string>());
            else if (key == "truth_substeps") c.truth_substeps = v.get<std::size_t>();
            else if (key == "reference_cache") c.reference_cache = v.get<std::string>();
            else if (key == "jobs") c.jobs = v.get<std::size_t>();
            else if (key == "grid") {
                if (!v.is_object()) throw std::invalid_argument("grid must be an object");
                for (const auto& [gk, gv] : v.items()) {
                    if (gk == "x0") c.grid.x0 = gv.get<double>();
                    else if (gk == "x1") c.grid.x1 = gv.get<double>();
                    else if (gk == "Nx") c.grid.Nx = gv.get<std::size_t>();
                    else if (gk == "dt") c.grid.dt = gv.get<double>();
                    else throw std::invalid_argument("unknown grid key '" + gk + "'");
                }
            } else {
                throw std::invalid_argument("unknown config key '" + key + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument("bad value for config key '" + key + "': " + e.what());
        }
    }
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {})
{
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("cannot parse config file " + path.string() + ": " + e.what());
    }
    return config_from_json(j, std::move(base));
}

/// Applies "key=value". Dotted keys address nested objects (grid.Nx=2000);
/// the value is read as JSON and falls back to a plain string.
inline ExperimentConfig apply_override(const ExperimentConfig& c, std::string_view assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw std::invalid_argument("override must look like key=value, got '" + std::string(assignment) + "'");
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    nlohmann::json patch = nlohmann::json::object();
    nlohmann::json* cursor = &patch;
    std::string_view rest = key;
    for (auto dot = rest.find('.'); dot != std::string_view::npos; dot = rest.find('.')) {
        cursor = &(*cursor)[std::string(rest.substr(0, dot))];
        rest.remove_prefix(dot + 1);
    }
    (*cursor)[std::string(rest)] = std::move(value);
    return config_from_json(patch, c);
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

struct ObservationData {
    /// u_0..u_horizon.
    std::vector<Vector> truth;
    /// y_1..y_horizon.
    std::vector<Vector> observations;
};

/// FNV-1a over the raw bytes of the observation values.
inline std::uint64_t observation_hash(const std::vector<Vector>& ys)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& y : ys) {
        for (Eigen::Index i = 0; i < y.size(); ++i) {
            const double v = y[i];
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof v);
            for (unsigned char b : bytes) {
                h ^= b;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

/// One truth path from the prior (exact transition where available, else
/// `substeps` Milstein substeps per unit time) and y_n = H u_n + eta_n.
inline ObservationData synthesize_observations(const DynamicsModel& model, const ObservationModel& obs,
                                               std::size_t horizon, std::uint64_t seed, const GaussianPrior& prior,
                                               std::size_t substeps = 4096)
{
    RngStream rng = RngStream::child(seed, {0x4f4253ULL});
    ObservationData data;
    Vector u(static_cast<Eigen::Index>(prior.dim()));
    prior.sample(rng, {u.data(), prior.dim()});
    data.truth.push_back(u);
    const bool exact = model.has_exact_step();
    const Scheme scheme = exact ? Scheme::Exact : Scheme::Milstein;
    const std::size_t n = exact ? 1 : substeps;
    for (std::size_t k = 0; k < horizon; ++k) {
        u = simulate_step(model, u, NoisePath::sample(n, model.state_dim(), rng), scheme);
        Vector eta(static_cast<Eigen::Index>(obs.obs_dim()));
        obs.sample_noise(rng, {eta.data(), obs.obs_dim()});
        data.truth.push_back(u);
        data.observations.push_back(obs.H() * u + eta);
    }
    return data;
}

// ---------------------------------------------------------------------------
// Reference solutions
// ---------------------------------------------------------------------------

/// The observables every filter evaluates; QoIs are derived from them.
inline std::vector<Observable> moment_observables()
{
    return {observables::first_moment(), observables::second_moment()};
}

/// mean -> mu[x], variance -> mu[x^2] - mu[x]^2 from a moment table row.
inline double derive_qoi(std::string_view qoi, const std::vector<double>& moments)
{
    if (qoi == "mean") return moments.at(0);
    if (qoi == "variance") return moments.at(1) - moments.at(0) * moments.at(0);
    throw std::invalid_argument("unknown qoi '" + std::string(qoi) + "'");
}

struct ReferenceSolution {
    std::string source;
    std::vector<std::string> qois;
    /// values[n][k] for n = 0..horizon and qoi k.
    std::vector<std::vector<double>> values;
};

inline void write_qoi_csv(const std::filesystem::path& path, const std::vector<std::string>& names,
                          const std::vector<std::vector<double>>& table, const std::string& comment = {})
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    if (!comment.empty()) out << "# " << comment << '\n';
    out << "n,qoi_name,value\n";
    char buf[64];
    for (std::size_t n = 0; n < table.size(); ++n) {
        for (std::size_t k = 0; k < names.size(); ++k) {
            std::snprintf(buf, sizeof buf, "%.17g", table[n].at(k));
            out << n << ',' << names[k] << ',' << buf << '\n';
        }
    }
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

/// Reads a (n, qoi_name, value) file. Returns the leading comment, if any.
inline std::string read_qoi_csv(const std::filesystem::path& path, std::vector<std::string>& names,
                                std::vector<std::vector<double>>& table)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line, comment;
    names.clear();
    table.clear();
    std::map<std::string, std::size_t> column;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            comment = line.substr(std::min<std::size_t>(2, line.size()));
            continue;
        }
        if (line == "n,qoi_name,value") continue;
        std::stringstream ss(line);
        std::string n_s, name, v_s;
        if (!std::getline(ss, n_s, ',') || !std::getline(ss, name, ',') || !std::getline(ss, v_s)) {
            throw std::runtime_error("malformed line in " + path.string() + ": " + line);
        }
        const std::size_t n = std::stoull(n_s);
        auto [it, inserted] = column.emplace(name, names.size());
        if (inserted) names.push_back(name);
        if (table.size() <= n) table.resize(n + 1);
        if (table[n].size() <= it->second) table[n].resize(it->second + 1, std::numeric_limits<double>::quiet_NaN());
        table[n][it->second] = std::stod(v_s);
    }
    return comment;
}

inline void write_density_csv(const std::filesystem::path& path, const DensityGrid& rho)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "x,rho\n";
    char buf[96];
    for (std::size_t i = 0; i <= rho.Nx(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g", rho.x(i), rho.values()[i]);
        out << buf << '\n';
    }
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

/// Reference moments: Kalman filter when the dynamics are linear-Gaussian,
/// otherwise the density-based mean-field filter, optionally cached on disk.
inline ReferenceSolution compute_reference(const ExperimentConfig& cfg, const ObservationData& data)
{
    const DynamicsModel model = cfg.dynamics();
    const ObservationModel obs = cfg.observation();
    const std::vector<std::string> names{"mean", "second_moment"};
    ReferenceSolution ref;
    ref.qois = names;
    if (model.kind() == ModelKind::OrnsteinUhlenbeck && model.state_dim() == 1) {
        ref.source = "kalman";
        const GaussianState init{Vector::Zero(1), Matrix::Constant(1, 1, cfg.Gamma), 0};
        for (const auto& s : kalman_run(init, LinearModel::ornstein_uhlenbeck(cfg.sigma), obs, data.observations)) {
            ref.values.push_back({s.mean[0], s.cov(0, 0) + s.mean[0] * s.mean[0]});
        }
        return ref;
    }

    ref.source = "dmfenkf";
    std::ostringstream tag;
    tag << "model=" << cfg.model << " sigma=" << cfg.sigma << " observations=" << std::hex
        << observation_hash(data.observations) << std::dec << " grid=" << cfg.grid.x0 << ',' << cfg.grid.x1 << ','
        << cfg.grid.Nx << ',' << cfg.grid.dt;
    if (!cfg.reference_cache.empty() && std::filesystem::exists(cfg.reference_cache)) {
        std::vector<std::string> cached_names;
        std::vector<std::vector<double>> table;
        if (read_qoi_csv(cfg.reference_cache, cached_names, table) == tag.str() && cached_names == names &&
            table.size() == data.observations.size() + 1) {
            ref.values = std::move(table);
            return ref;
        }
    }
    const auto run = dmfenkf_run(model, obs, data.observations, cfg.grid, 0.0, cfg.Gamma, moment_observables());
    for (const auto& step : run) ref.values.push_back(step.qoi);
    if (!cfg.reference_cache.empty()) write_qoi_csv(cfg.reference_cache, names, ref.values, tag.str());
    return ref;
}

// ---------------------------------------------------------------------------
// RMSE experiment
// ---------------------------------------------------------------------------

struct BenchmarkRecord {
    Method method = Method::EnKF;
    std::string model;
    std::string qoi;
    double eps = 0.0;
    /// Sum of per-replica filter busy times.
    double runtime_s = 0.0;
    double rmse = 0.0;
    std::uint64_t seed = 0;
    /// Delta-method Monte Carlo standard error of rmse (not serialized).
    double rmse_std_error = 0.0;
    /// Time-averaged squared error of each replica (not serialized).
    std::vector<double> replica_mse;
    std::string plan_summary;
};

struct ExperimentResult {
    std::vector<BenchmarkRecord> records;
    ReferenceSolution reference;
    ObservationData data;
    std::uint64_t observation_hash = 0;
    /// One entry per eps with the resolved method parameters.
    nlohmann::json plans = nlohmann::json::array();
    double reference_seconds = 0.0;
    /// Filter timers only start after this many seconds of experiment time.
    double filters_started_at = 0.0;
};

inline std::uint64_t replica_seed(std::uint64_t master, std::size_t replica)
{
    return derive_seed(master, {0x5245504cULL, replica});
}

inline nlohmann::json plan_to_json(const MLPlan& p)
{
    return {{"eps", p.eps},         {"alpha", p.alpha},       {"beta", p.beta},
            {"s", p.s},             {"s_case", p.s_case},     {"mode", std::string(to_string(p.mode))},
            {"L", p.L},             {"N_levels", p.N_levels}, {"P_levels", p.P_levels},
            {"M_levels", p.M_levels}};
}

/// Moment table m[n][{x, x^2}] of one replica of `method` at accuracy `eps`.
struct ReplicaRunner {
    const ExperimentConfig& cfg;
    const DynamicsModel& model;
    const ObservationModel& obs;
    const GaussianPrior& prior;
    const ObservationData& data;

    std::vector<std::vector<double>> operator()(Method method, double eps, std::size_t replica) const
    {
        const auto phis = moment_observables();
        const std::uint64_t seed = replica_seed(cfg.master_seed, replica);
        switch (method) {
        case Method::EnKF: {
            const auto par = enkf_parameters(eps, cfg.alpha);
            EnkfConfig ec;
            ec.N = par.N;
            ec.P = par.P;
            ec.scheme = cfg.scheme;
            ec.seed = seed;
            ec.covariance_mode = cfg.covariance_mode;
            return enkf_run(ec, model, obs, data.observations, prior, phis).qoi;
        }
        case Method::MLEnKF: {
            const MLPlan plan = ml_plan(eps, cfg.alpha, cfg.beta, plan_options(cfg));
            LevelOptions lo;
            lo.scheme = cfg.scheme;
            lo.covariance_mode = cfg.covariance_mode;
            return mlenkf_estimate(plan, model, obs, data.observations, prior, phis, seed, lo, 1);
        }
        case Method::DMFEnKF: {
            std::vector<std::vector<double>> out;
            for (const auto& s : dmfenkf_run(model, obs, data.observations, cfg.grid, 0.0, cfg.Gamma, phis)) {
                out.push_back(s.qoi);
            }
            return out;
        }
        case Method::Kalman: {
            if (model.kind() != ModelKind::OrnsteinUhlenbeck) {
                throw std::invalid_argument("the Kalman method needs linear dynamics");
            }
            const GaussianState init{Vector::Zero(1), Matrix::Constant(1, 1, cfg.Gamma), 0};
            std::vector<std::vector<double>> out;
            for (const auto& s : kalman_run(init, LinearModel::ornstein_uhlenbeck(cfg.sigma), obs, data.observations)) {
                out.push_back({s.mean[0], s.cov(0, 0) + s.mean[0] * s.mean[0]});
            }
            return out;
        }
        }
        throw std::logic_error("unhandled method");
    }
};

/// Time-averaged RMSE against the reference for every eps of the grid.
///
/// All replicas and eps values consume one frozen observation sequence.
/// Deterministic methods (DMFEnKF, Kalman) are run once and reused for
/// every replica.
inline ExperimentResult rmse_experiment(const ExperimentConfig& cfg)
{
    using Clock = std::chrono::steady_clock;
    cfg.validate();
    const auto t_begin = Clock::now();
    ExperimentResult result;
    const DynamicsModel model = cfg.dynamics();
    const ObservationModel obs = cfg.observation();
    const GaussianPrior prior = cfg.prior();
    result.data = synthesize_observations(model, obs, cfg.horizon, cfg.master_seed, prior, cfg.truth_substeps);
    result.observation_hash = observation_hash(result.data.observations);

    const auto t_ref = Clock::now();
    result.reference = compute_reference(cfg, result.data);
    result.reference_seconds = std::chrono::duration<double>(Clock::now() - t_ref).count();
    result.filters_started_at = std::chrono::duration<double>(Clock::now() - t_begin).count();

    const ReplicaRunner runner{cfg, model, obs, prior, result.data};
    const std::size_t rows = cfg.horizon + 1;
    const bool deterministic = cfg.method == Method::DMFEnKF || cfg.method == Method::Kalman;

    for (double eps : cfg.eps_grid) {
        nlohmann::json plan_json = {{"method", std::string(to_string(cfg.method))}, {"eps", eps}};
        std::string summary;
        if (cfg.method == Method::EnKF) {
            const auto par = enkf_parameters(eps, cfg.alpha);
            plan_json["N"] = par.N;
            plan_json["P"] = par.P;
            summary = "N=" + std::to_string(par.N) + " P=" + std::to_string(par.P);
        } else if (cfg.method == Method::MLEnKF) {
            const MLPlan plan = ml_plan(eps, cfg.alpha, cfg.beta, plan_options(cfg));
            plan.validate();
            plan_json["plan"] = plan_to_json(plan);
            summary = "L=" + std::to_string(plan.L);
        }
        result.plans.push_back(plan_json);

        const std::size_t runs = deterministic ? 1 : cfg.replicas;
        std::vector<std::vector<std::vector<double>>> tables(runs);
        std::vector<double> busy(runs, 0.0);
        parallel_for(runs, cfg.jobs, [&](std::size_t r) {
            const auto t0 = Clock::now();
            tables[r] = runner(cfg.method, eps, r);
            busy[r] = std::chrono::duration<double>(Clock::now() - t0).count();
        });
        double runtime = 0.0;
        for (double b : busy) runtime += b;

        for (const auto& qoi : cfg.qois) {
            std::vector<double> per_replica(cfg.replicas, 0.0);
            for (std::size_t r = 0; r < cfg.replicas; ++r) {
                const auto& table = tables[deterministic ? 0 : r];
                if (table.size() != rows) throw std::runtime_error("filter returned the wrong number of time steps");
                double acc = 0.0;
                for (std::size_t n = 0; n < rows; ++n) {
                    const double e = derive_qoi(qoi, table[n]) - derive_qoi(qoi, result.reference.values.at(n));
                    acc += e * e;
                }
                per_replica[r] = acc / static_cast<double>(rows);
            }
            double mean = 0.0;
            for (double v : per_replica) mean += v;
            mean /= static_cast<double>(cfg.replicas);
            double var = 0.0;
            for (double v : per_replica) var += (v - mean) * (v - mean);
            const double R = static_cast<double>(cfg.replicas);
            var = cfg.replicas > 1 ? var / (R - 1.0) : 0.0;
            BenchmarkRecord rec;
            rec.method = cfg.method;
            rec.model = cfg.model;
            rec.qoi = qoi;
            rec.eps = eps;
            rec.runtime_s = runtime;
            rec.rmse = std::sqrt(mean);
            rec.seed = cfg.master_seed;
            rec.rmse_std_error = rec.rmse > 0.0 ? std::sqrt(var / R) / (2.0 * rec.rmse) : 0.0;
            rec.plan_summary = summary;
            rec.replica_mse = std::move(per_replica);
            result.records.push_back(std::move(rec));
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Slope fits and output
// ---------------------------------------------------------------------------

struct LogLogFit {
    double slope = 0.0;
    double intercept = 0.0;
};

/// Ordinary least squares of log(y) on log(x).
inline LogLogFit fit_loglog_slope(const std::vector<std::pair<double, double>>& points)
{
    if (points.size() < 3) throw std::invalid_argument("a slope fit needs at least three points");
    double sx = 0.0, sy = 0.0;
    for (const auto& [x, y] : points) {
        if (!(x > 0.0) || !(y > 0.0)) throw std::invalid_argument("slope fit needs positive coordinates");
        sx += std::log(x);
        sy += std::log(y);
    }
    const double n = static_cast<double>(points.size());
    const double mx = sx / n, my = sy / n;
    double sxx = 0.0, sxy = 0.0;
    for (const auto& [x, y] : points) {
        sxx += (std::log(x) - mx) * (std::log(x) - mx);
        sxy += (std::log(x) - mx) * (std::log(y) - my);
    }
    if (!(sxx > 0.0)) throw std::invalid_argument("degenerate slope fit: all abscissae are equal");
    const double slope = sxy / sxx;
    return {slope, my - slope * mx};
}

inline void write_records_csv(const std::filesystem::path& path, const std::vector<BenchmarkRecord>& records)
{
    if (records.empty()) throw std::invalid_argument("no records to write");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "method,model,qoi,eps,runtime_s,rmse,seed\n";
    char buf[128];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", r.eps, r.runtime_s, r.rmse);
        out << to_string(r.method) << ',' << r.model << ',' << r.qoi << ',' << buf << ',' << r.seed << '\n';
    }
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline std::vector<BenchmarkRecord> read_records_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "method,model,qoi,eps,runtime_s,rmse,seed") {
        throw std::runtime_error("unexpected header in " + path.string());
    }
    std::vector<BenchmarkRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::vector<std::string> f;
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() != 7) throw std::runtime_error("malformed record in " + path.string() + ": " + line);
        BenchmarkRecord r;
        r.method = method_from_name(f[0]);
        r.model = f[1];
        r.qoi = f[2];
        r.eps = std::stod(f[3]);
        r.runtime_s = std::stod(f[4]);
        r.rmse = std::stod(f[5]);
        r.seed = std::stoull(f[6]);
        records.push_back(std::move(r));
    }
    return records;
}

/// Log-log scatter of rmse against runtime, one polyline per method/qoi and
/// guide lines of slope -1/3 and -1/2.
inline std::string records_svg(const std::vector<BenchmarkRecord>& records)
{
    if (records.empty()) throw std::invalid_argument("no records to plot");
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
    for (const auto& r : records) {
        const double x = std::log10(std::max(r.runtime_s, 1e-9));
        const double y = std::log10(std::max(r.rmse, 1e-300));
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
    }
    xmin -= 0.25, xmax += 0.25, ymin -= 0.25, ymax += 0.25;
    const double W = 640, Hh = 480, pad = 60;
    auto px = [&](double x) { return pad + (x - xmin) / (xmax - xmin) * (W - 2 * pad); };
    auto py = [&](double y) { return Hh - pad - (y - ymin) / (ymax - ymin) * (Hh - 2 * pad); };

    std::ostringstream svg;
    svg << std::setprecision(6);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << Hh << "\">\n";
    svg << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << W - 2 * pad << "\" height=\"" << Hh - 2 * pad
        << "\" fill=\"none\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"" << Hh - 15 << "\" text-anchor=\"middle\">log10 runtime [s]</text>\n";
    svg << "<text x=\"15\" y=\"" << Hh / 2 << "\" transform=\"rotate(-90 15 " << Hh / 2
        << ")\" text-anchor=\"middle\">log10 RMSE</text>\n";

    std::map<std::string, std::vector<std::pair<double, double>>> series;
    for (const auto& r : records) {
        series[std::string(to_string(r.method)) + ":" + r.qoi].emplace_back(std::log10(std::max(r.runtime_s, 1e-9)),
                                                                           std::log10(std::max(r.rmse, 1e-300)));
    }
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    std::size_t idx = 0;
    for (auto& [name, pts] : series) {
        std::sort(pts.begin(), pts.end());
        const char* color = colors[idx % std::size(colors)];
        svg << "<g class=\"series\" data-name=\"" << name << "\">\n<polyline fill=\"none\" stroke=\"" << color
            << "\" points=\"";
        for (const auto& [x, y] : pts) svg << px(x) << ',' << py(y) << ' ';
        svg << "\"/>\n";
        for (const auto& [x, y] : pts) {
            svg << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        }
        svg << "<text x=\"" << W - pad - 5 << "\" y=\"" << pad + 18 * (idx + 1) << "\" text-anchor=\"end\" fill=\""
            << color << "\">" << name << "</text>\n</g>\n";
        ++idx;
    }
    // Guide lines anchored at the upper-left corner of the data range.
    const double x0 = xmin + 0.25, y0 = ymax - 0.25, span = xmax - xmin - 0.5;
    for (const auto& [label, slope] : {std::pair{"slope -1/3", -1.0 / 3.0}, std::pair{"slope -1/2", -0.5}}) {
        const double x1 = x0 + std::max(span, 0.5);
        const double y1 = y0 + slope * (x1 - x0);
        svg << "<g class=\"guide\" data-slope=\"" << slope << "\"><line x1=\"" << px(x0) << "\" y1=\"" << py(y0)
            << "\" x2=\"" << px(x1) << "\" y2=\"" << py(y1) << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>"
            << "<text x=\"" << px(x1) << "\" y=\"" << py(y1) - 4 << "\" fill=\"gray\">" << label << "</text></g>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

enum class OutputFormat { Csv, Svg };

/// Writes records.csv and/or plot.svg into `dir`.
inline std::vector<std::filesystem::path> emit_results(const std::vector<BenchmarkRecord>& records,
                                                       const std::filesystem::path& dir,
                                                       const std::vector<OutputFormat>& formats = {OutputFormat::Csv,
                                                                                                   OutputFormat::Svg})
{
    if (records.empty()) throw std::invalid_argument("no records to emit");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
    std::vector<std::filesystem::path> written;
    for (OutputFormat f : formats) {
        if (f == OutputFormat::Csv) {
            write_records_csv(dir / "records.csv", records);
            written.push_back(dir / "records.csv");
        } else {
            const auto path = dir / "plot.svg";
            std::ofstream out(path);
            if (!out) throw std::runtime_error("cannot write " + path.string());
            out << records_svg(records);
            if (!out) throw std::runtime_error("failed writing " + path.string());
            written.push_back(path);
        }
    }
    return written;
}

} // namespace mlenkf

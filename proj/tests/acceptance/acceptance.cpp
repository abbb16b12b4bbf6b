// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <mlenkf/mlenkf.hpp>

#include "invariants.hpp"

namespace {

using namespace mlenkf;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0)
{
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

std::size_t workers()
{
    return std::max(1u, std::thread::hardware_concurrency());
}

ExperimentConfig slope_experiment(Method method)
{
    ExperimentConfig cfg;
    cfg.model = "ou";
    cfg.method = method;
    cfg.eps_grid = {0x1p-4, 0x1p-5, 0x1p-6, 0x1p-7};
    cfg.horizon = 10;
    cfg.replicas = 100;
    cfg.qois = {"mean"};
    cfg.master_seed = 2024;
    cfg.jobs = workers();
    return cfg;
}

std::vector<std::pair<double, double>> runtime_rmse(const std::vector<BenchmarkRecord>& records)
{
    std::vector<std::pair<double, double>> pts;
    for (const auto& r : records) pts.emplace_back(r.runtime_s, r.rmse);
    return pts;
}

std::string describe(const std::vector<BenchmarkRecord>& records)
{
    std::string s;
    for (const auto& r : records) s += fmt(" [eps=2^%.0f t=%.3gs rmse=%.3e]", std::log2(r.eps), r.runtime_s, r.rmse);
    return s;
}

std::vector<BenchmarkRecord> enkf_records;
std::vector<BenchmarkRecord> ml_records;

Outcome ac1()
{
    enkf_records = rmse_experiment(slope_experiment(Method::EnKF)).records;
    const double slope = fit_loglog_slope(runtime_rmse(enkf_records)).slope;
    return {slope >= -0.43 && slope <= -0.23,
            fmt("slope %.3f, window [-0.43, -0.23];", slope) + describe(enkf_records)};
}

Outcome ac2()
{
    if (enkf_records.empty()) enkf_records = rmse_experiment(slope_experiment(Method::EnKF)).records;
    ml_records = rmse_experiment(slope_experiment(Method::MLEnKF)).records;
    const double slope = fit_loglog_slope(runtime_rmse(ml_records)).slope;
    // EnKF's RMSE at MLEnKF's runtime for the smallest eps, read off EnKF's own log-log fit.
    const auto enkf_fit = fit_loglog_slope(runtime_rmse(enkf_records));
    const auto& last = ml_records.back();
    const double enkf_at_equal_time = std::exp(enkf_fit.intercept + enkf_fit.slope * std::log(last.runtime_s));
    const bool slope_ok = slope >= -0.62 && slope <= -0.38;
    const bool wins = last.rmse < enkf_at_equal_time;
    return {slope_ok && wins,
            fmt("slope %.3f, window [-0.62, -0.38]; at t=%.3gs MLEnKF rmse %.3e vs EnKF %.3e;", slope, last.runtime_s,
                last.rmse, enkf_at_equal_time) +
                describe(ml_records)};
}

/// Kalman filter of the N-substep Milstein map of the OU model, which is
/// itself linear-Gaussian: u -> (1 - 1/N)^N u + noise.
LinearModel discretised_ou(double sigma, std::size_t N)
{
    const double r = 1.0 - 1.0 / static_cast<double>(N);
    double q = 0.0, rp = 1.0;
    for (std::size_t j = 0; j < N; ++j) {
        q += rp;
        rp *= r * r;
    }
    q *= sigma * sigma / static_cast<double>(N);
    return {Matrix::Constant(1, 1, std::pow(r, static_cast<double>(N))), Matrix::Constant(1, 1, q)};
}

Outcome ac3()
{
    const std::size_t N = 256;
    const auto model = DynamicsModel::ornstein_uhlenbeck(0.5);
    const auto obs = ObservationModel::scalar(1.0, 0.1);
    const auto prior = GaussianPrior::scalar(0.0, 0.1);
    const auto data = synthesize_observations(model, obs, 10, 7, prior);
    const auto kf = kalman_run({Vector::Zero(1), Matrix::Constant(1, 1, 0.1), 0}, discretised_ou(0.5, N), obs,
                               data.observations);
    const std::size_t replicas = 20;
    std::vector<std::pair<double, double>> pts;
    std::string detail;
    for (std::size_t P : {100u, 1000u, 10000u, 100000u}) {
        std::vector<double> mse(replicas);
        parallel_for(replicas, workers(), [&](std::size_t r) {
            EnkfConfig cfg;
            cfg.N = N;
            cfg.P = P;
            cfg.seed = derive_seed(0x414333, {P, r});
            const auto run = enkf_run(cfg, model, obs, data.observations, prior, {observables::first_moment()});
            double acc = 0.0;
            for (std::size_t n = 0; n < kf.size(); ++n) acc += std::pow(run.qoi[n][0] - kf[n].mean[0], 2);
            mse[r] = acc / static_cast<double>(kf.size());
        });
        double m = 0.0;
        for (double v : mse) m += v;
        const double err = std::sqrt(m / static_cast<double>(replicas));
        pts.emplace_back(static_cast<double>(P), err);
        detail += fmt(" [P=%.0f err=%.3e]", static_cast<double>(P), err);
    }
    const double slope = fit_loglog_slope(pts).slope;
    return {slope >= -0.6 && slope <= -0.4, fmt("slope %.3f, window [-0.6, -0.4];", slope) + detail};
}

Outcome ac4()
{
    const auto model = DynamicsModel::ornstein_uhlenbeck(0.5);
    const std::size_t paths = 100000;
    std::vector<std::pair<double, double>> pts;
    std::string detail;
    for (std::size_t N : {2u, 4u, 8u, 16u, 32u, 64u}) {
        RngStream rng(derive_seed(0x414334, {N}));
        double acc = 0.0;
        for (std::size_t p = 0; p < paths; ++p) {
            const Vector u = Vector::Constant(1, std::sqrt(0.1) * rng.gaussian());
            const auto noise = NoisePath::sample(2 * N, 1, rng);
            const auto [fine, coarse] = simulate_coupled_step(model, u, u, noise, N, Scheme::Milstein);
            acc += (fine - coarse).squaredNorm();
        }
        const double msd = acc / static_cast<double>(paths);
        pts.emplace_back(static_cast<double>(N), msd);
        detail += fmt(" [N=%.0f E|d|^2=%.3e]", static_cast<double>(N), msd);
    }
    const double slope = fit_loglog_slope(pts).slope;
    return {slope >= -2.3 && slope <= -1.7, fmt("slope %.3f, window [-2.3, -1.7];", slope) + detail};
}

Outcome ac5()
{
    const MLPlan plan = ml_plan(0x1p-6);
    const auto model = DynamicsModel::ornstein_uhlenbeck(0.5);
    const auto obs = ObservationModel::scalar(1.0, 0.1);
    const auto prior = GaussianPrior::scalar(0.0, 0.1);
    const auto data = synthesize_observations(model, obs, 10, 11, prior);
    const std::size_t samples = 1000;
    std::vector<double> levels, log2var;
    std::string detail;
    for (std::size_t l = 1; l <= 5; ++l) {
        std::vector<std::vector<std::vector<double>>> inc(samples);
        parallel_for(samples, workers(), [&](std::size_t m) {
            inc[m] = level_increment(l, m, plan, model, obs, data.observations, prior, {observables::first_moment()},
                                     0x414335);
        });
        // Sample variance of the increment, averaged over the assimilation times n = 1..10.
        double var = 0.0;
        for (std::size_t n = 1; n < inc[0].size(); ++n) {
            double s = 0.0, s2 = 0.0;
            for (const auto& t : inc) {
                s += t[n][0];
                s2 += t[n][0] * t[n][0];
            }
            const double mean = s / static_cast<double>(samples);
            var += (s2 - static_cast<double>(samples) * mean * mean) / static_cast<double>(samples - 1);
        }
        var /= static_cast<double>(inc[0].size() - 1);
        levels.push_back(static_cast<double>(l));
        log2var.push_back(std::log2(var));
        detail += fmt(" [l=%.0f var=%.3e]", static_cast<double>(l), var);
    }
    double ml = 0.0, mv = 0.0;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        ml += levels[i];
        mv += log2var[i];
    }
    ml /= static_cast<double>(levels.size());
    mv /= static_cast<double>(levels.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        sxy += (levels[i] - ml) * (log2var[i] - mv);
        sxx += (levels[i] - ml) * (levels[i] - ml);
    }
    const double slope = sxy / sxx;
    return {slope <= -1.5, fmt("log2 slope %.3f, required <= -1.5;", slope) + detail};
}

Outcome ac6()
{
    const MLPlan p = ml_plan(0x1p-4);
    const auto e = enkf_parameters(0x1p-4);
    const bool ok = p.L == 3 && p.N_levels == std::vector<std::size_t>{2, 4, 8, 16} &&
                    p.P_levels == std::vector<std::size_t>{10, 20, 40, 80} &&
                    p.M_levels == std::vector<std::size_t>{576, 72, 18, 5} && e.N == 16 && e.P == 2048;
    return {ok, plan_to_json(p).dump() + fmt(" enkf N=%.0f P=%.0f", static_cast<double>(e.N), static_cast<double>(e.P))};
}

Outcome ac7()
{
    const auto model = DynamicsModel::ornstein_uhlenbeck(0.5);
    const auto obs = ObservationModel::scalar(1.0, 0.1);
    const auto data = synthesize_observations(model, obs, 20, 13, GaussianPrior::scalar(0.0, 0.1));
    const auto dmf = dmfenkf_run(model, obs, data.observations, {}, 0.0, 0.1, {observables::first_moment()});
    const auto kf = kalman_run({Vector::Zero(1), Matrix::Constant(1, 1, 0.1), 0}, LinearModel::ornstein_uhlenbeck(0.5),
                               obs, data.observations);
    double worst = 0.0;
    for (std::size_t n = 0; n < kf.size(); ++n) worst = std::max(worst, std::abs(dmf[n].qoi[0] - kf[n].mean[0]));

    const auto rho = DensityGrid::gaussian(-5, 5, 4000, 0.0, 0.125);
    const auto out = fpe_propagate(rho, model, 1e-3);
    double l1 = 0.0;
    for (std::size_t i = 0; i <= rho.Nx(); ++i) l1 += std::abs(rho.values()[i] - out.values()[i]);
    l1 *= rho.dx();
    return {worst < 1e-3 && l1 < 1e-4,
            fmt("max_n<=20 |DMFEnKF - Kalman| = %.3e (< 1e-3); stationary L1 = %.3e (< 1e-4)", worst, l1)};
}

Outcome ac8()
{
    bool all = true;
    std::string detail;
    for (const auto& c : invariants::run_all(5)) {
        all = all && c.pass;
        detail += std::string(" [") + (c.pass ? "ok " : "FAILED ") + c.name + ": " + c.detail + "]";
    }
    return {all, detail};
}

} // namespace

int main(int argc, char** argv)
{
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    auto wanted = [&](int k) { return selected.empty() || selected.count(k) > 0; };

    struct Criterion {
        int id;
        const char* name;
        Outcome (*run)();
    };
    const Criterion criteria[] = {
        {1, "EnKF RMSE-vs-runtime slope", ac1},
        {2, "MLEnKF RMSE-vs-runtime slope and equal-runtime win", ac2},
        {3, "EnKF statistical rate in P", ac3},
        {4, "strong coupling rate of fine/coarse paths", ac4},
        {5, "level-increment variance decay", ac5},
        {6, "parameter plan reproduction", ac6},
        {7, "DMFEnKF agrees with Kalman; stationary density preserved", ac7},
        {8, "invariant suites", ac8},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        if (!wanted(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s AC%d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
        std::fflush(stdout);
        failures += o.pass ? 0 : 1;
    }
    if (wanted(9)) {
        std::printf("N/A  AC9 absolute wall-clock numbers and canonical-MLEnKF curves: excluded, slopes substitute\n");
    }
    if (!enkf_records.empty() || !ml_records.empty()) {
        std::vector<BenchmarkRecord> all = enkf_records;
        all.insert(all.end(), ml_records.begin(), ml_records.end());
        emit_results(all, "acceptance_results");
    }
    return failures == 0 ? 0 : 1;
}

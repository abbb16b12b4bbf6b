#pragma once

// Invariant checks shared by `mlenkf selftest` and the acceptance binary.

#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <mlenkf/mlenkf.hpp>

namespace invariants {

struct Check {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace detail {

using namespace mlenkf;

inline std::string fmt(const char* f, double a, double b = 0.0)
{
    char buf[160];
    std::snprintf(buf, sizeof buf, f, a, b);
    return buf;
}

inline std::vector<Vector> scalar_observations(std::initializer_list<double> ys)
{
    std::vector<Vector> out;
    for (double y : ys) out.push_back(Vector::Constant(1, y));
    return out;
}

inline Check noise_coarsening()
{
    const MLPlan plan = ml_plan(0x1p-5);
    RngStream rng(derive_seed(1, {0x4e43}));
    auto state = initial_coupled_state(3, plan, GaussianPrior::scalar(0.0, 0.1), rng);
    std::size_t paths = 0, bad = 0;
    double worst_sum_gap = 0.0;
    for (int n = 0; n < 3; ++n) {
        CoupledStepTrace trace;
        coupled_step_in_place(state, DynamicsModel::double_well(), ObservationModel::scalar(1.0, 0.1),
                              Vector::Constant(1, 0.2), Scheme::Milstein, rng, CovarianceMode::Biased, &trace);
        for (std::size_t i = 0; i < trace.fine_noise.size(); ++i) {
            ++paths;
            if (!(trace.fine_noise[i].coarsen(2) == trace.coarse_noise[i])) ++bad;
            const auto& f = trace.fine_noise[i].increments();
            const auto& c = trace.coarse_noise[i].increments();
            const double gap = std::abs(std::accumulate(f.begin(), f.end(), 0.0) - std::accumulate(c.begin(), c.end(), 0.0));
            worst_sum_gap = std::max(worst_sum_gap, gap);
        }
    }
    return {"noise-coarsening identity", bad == 0 && worst_sum_gap < 1e-13,
            std::to_string(paths) + " paths, " + std::to_string(bad) + " mismatches, max total-increment gap " +
                fmt("%.2e", worst_sum_gap)};
}

inline Check perturbation_sharing()
{
    const MLPlan plan = ml_plan(0x1p-4);
    std::size_t pairs = 0, bad = 0;
    for (bool swapped : {false, true}) {
        RngStream rng(derive_seed(2, {0x5053, swapped ? 1u : 0u}));
        auto state = initial_coupled_state(2, plan, GaussianPrior::scalar(0.0, 0.1), rng, swapped);
        for (int n = 0; n < 3; ++n) {
            CoupledStepTrace trace;
            coupled_step_in_place(state, DynamicsModel::ornstein_uhlenbeck(), ObservationModel::scalar(1.0, 0.1),
                                  Vector::Constant(1, -0.1), Scheme::Milstein, rng, CovarianceMode::Biased, &trace);
            const std::size_t half = state.coarse_size();
            for (std::size_t i = 0; i < state.fine.size(); ++i) {
                const bool first = i < half;
                const auto& partner = (first != swapped) ? trace.eta_coarse1 : trace.eta_coarse2;
                const auto j = static_cast<Eigen::Index>(first ? i : i - half);
                ++pairs;
                if (trace.eta(static_cast<Eigen::Index>(i), 0) != partner(j, 0)) ++bad;
            }
        }
    }
    return {"perturbed-observation sharing audit", bad == 0,
            std::to_string(pairs) + " fine/coarse pairs, " + std::to_string(bad) + " mismatches"};
}

inline Check covariance_relation()
{
    RngStream rng(derive_seed(3, {0x4356}));
    double worst = 0.0;
    for (Eigen::Index P : {2, 3, 10, 101, 1000}) {
        ParticleMatrix X(P, 2);
        for (Eigen::Index i = 0; i < P; ++i) X.row(i) << rng.gaussian(), 0.5 * rng.gaussian() + 1.0;
        const Matrix B = sample_covariance(X, CovarianceMode::Biased);
        const Matrix U = sample_covariance(X, CovarianceMode::Unbiased);
        const Matrix scaled = B * (static_cast<double>(P) / static_cast<double>(P - 1));
        worst = std::max(worst, (U - scaled).cwiseAbs().maxCoeff() / U.cwiseAbs().maxCoeff());
    }
    return {"biased/unbiased covariance relation", worst < 1e-14, "max relative deviation " + fmt("%.2e", worst)};
}

/// Sum of level increments against a direct finest-level EnKF; 3 sigma.
inline Check telescoping(std::size_t samples)
{
    MLPlan plan;
    plan.eps = 0.25;
    plan.L = 2;
    plan.N_levels = {2, 4, 8};
    plan.P_levels = {10, 20, 40};
    plan.M_levels = {1, 1, 1};
    const auto model = DynamicsModel::ornstein_uhlenbeck(0.5);
    const auto obs = ObservationModel::scalar(1.0, 0.1);
    const auto prior = GaussianPrior::scalar(0.0, 0.1);
    const auto ys = scalar_observations({0.4, -0.2, 0.3});
    const std::vector<Observable> phis{observables::second_moment()};

    std::vector<double> tele(samples), direct(samples);
    parallel_for(samples, std::thread::hardware_concurrency(), [&](std::size_t r) {
        double sum = 0.0;
        for (std::size_t l = 0; l <= plan.L; ++l) {
            sum += level_increment(l, r, plan, model, obs, ys, prior, phis, 0x54454c45).back()[0];
        }
        tele[r] = sum;
        EnkfConfig cfg;
        cfg.N = plan.N_levels.back();
        cfg.P = plan.P_levels.back();
        cfg.seed = derive_seed(0x44495245, {r});
        direct[r] = enkf_run(cfg, model, obs, ys, prior, phis).qoi.back()[0];
    });
    auto stats = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double s2 = 0.0;
        for (double x : v) s2 += (x - m) * (x - m);
        s2 /= static_cast<double>(v.size() - 1);
        return std::pair{m, s2 / static_cast<double>(v.size())};
    };
    const auto [mt, vt] = stats(tele);
    const auto [md, vd] = stats(direct);
    const double gap = std::abs(mt - md);
    const double sigma = std::sqrt(vt + vd);
    return {"telescoping consistency (3 sigma)", gap <= 3.0 * sigma,
            std::to_string(samples) + " samples, |gap| = " + fmt("%.3e = %.2f sigma", gap, gap / sigma)};
}

/// Bit-identical MLEnKF estimates and RMSE records for 1 and 8 workers.
inline Check determinism_under_jobs(std::size_t replicas)
{
    const MLPlan plan = ml_plan(0x1p-5);
    const auto model = DynamicsModel::double_well(0.5);
    const auto obs = ObservationModel::scalar(1.0, 0.1);
    const auto prior = GaussianPrior::scalar(0.0, 0.1);
    const auto ys = scalar_observations({0.1, 0.3, -0.2, 0.5});
    const auto phis = moment_observables();
    const auto one = mlenkf_estimate(plan, model, obs, ys, prior, phis, 99, {}, 1);
    const auto eight = mlenkf_estimate(plan, model, obs, ys, prior, phis, 99, {}, 8);

    ExperimentConfig cfg;
    cfg.method = Method::MLEnKF;
    cfg.eps_grid = {0x1p-3, 0x1p-4};
    cfg.replicas = replicas;
    cfg.horizon = 5;
    cfg.qois = {"mean", "variance"};
    cfg.jobs = 1;
    const auto a = rmse_experiment(cfg);
    cfg.jobs = 8;
    const auto b = rmse_experiment(cfg);
    bool same = one == eight && a.records.size() == b.records.size();
    for (std::size_t k = 0; same && k < a.records.size(); ++k) {
        same = a.records[k].rmse == b.records[k].rmse && a.records[k].replica_mse == b.records[k].replica_mse;
    }
    return {"determinism under --jobs 1 vs 8", same,
            "estimator and " + std::to_string(a.records.size()) + " RMSE records compared bitwise"};
}

} // namespace detail

/// `scale` multiplies the Monte Carlo sample sizes.
inline std::vector<Check> run_all(std::size_t scale = 1)
{
    return {detail::noise_coarsening(), detail::perturbation_sharing(), detail::covariance_relation(),
            detail::telescoping(2000 * scale), detail::determinism_under_jobs(4 * scale)};
}

} // namespace invariants

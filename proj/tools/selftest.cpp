#include <chrono>
#include <cmath>
#include <ostream>

#include <mlenkf/mlenkf.hpp>

#include "invariants.hpp"

namespace {

using namespace mlenkf;

invariants::Check plan_values()
{
    const MLPlan p = ml_plan(0x1p-4);
    const auto e = enkf_parameters(0x1p-4);
    const bool ok = p.L == 3 && p.N_levels == std::vector<std::size_t>{2, 4, 8, 16} &&
                    p.P_levels == std::vector<std::size_t>{10, 20, 40, 80} &&
                    p.M_levels == std::vector<std::size_t>{576, 72, 18, 5} && e.N == 16 && e.P == 2048;
    return {"plan at eps=2^-4", ok, plan_to_json(p).dump()};
}

invariants::Check kalman_hand_step()
{
    const auto post = kalman_step({Vector::Zero(1), Matrix::Constant(1, 1, 0.1), 0}, LinearModel::ornstein_uhlenbeck(0.5),
                                  ObservationModel::scalar(1.0, 0.1), Vector::Constant(1, 1.0));
    return {"kalman hand step", std::abs(post.mean[0] - 0.548770) < 1e-6, invariants::detail::fmt("m+ = %.6f", post.mean[0])};
}

invariants::Check stationary_density()
{
    const auto rho = DensityGrid::gaussian(-5, 5, 4000, 0.0, 0.125);
    const auto out = fpe_propagate(rho, DynamicsModel::ornstein_uhlenbeck(0.5), 1e-3);
    double l1 = 0.0;
    for (std::size_t i = 0; i <= rho.Nx(); ++i) l1 += std::abs(rho.values()[i] - out.values()[i]);
    l1 *= rho.dx();
    return {"OU stationary density", l1 < 1e-4, invariants::detail::fmt("L1 = %.2e", l1)};
}

} // namespace

int run_selftest(std::ostream& out)
{
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<invariants::Check> checks{plan_values(), kalman_hand_step(), stationary_density()};
    for (auto& c : invariants::run_all(1)) checks.push_back(std::move(c));
    int failed = 0;
    for (const auto& c : checks) {
        out << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
        failed += c.pass ? 0 : 1;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << (checks.size() - static_cast<std::size_t>(failed)) << '/' << checks.size() << " checks passed in " << secs
        << " s\n";
    return failed == 0 ? 0 : 1;
}

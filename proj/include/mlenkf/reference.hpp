#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "enkf.hpp"
#include "models.hpp"

namespace mlenkf {

// ---------------------------------------------------------------------------
// Kalman filter for linear-Gaussian dynamics
// ---------------------------------------------------------------------------

struct GaussianState {
    Vector mean;
    Matrix cov;
    std::size_t time_index = 0;
};

/// u_{n+1} = A u_n + xi,  xi ~ N(0, Q).
struct LinearModel {
    Matrix A;
    Matrix Q;

    /// Exact unit-time OU transition: A = e^{-1} I, Q = sigma^2 (1 - e^{-2}) / 2 I.
    static LinearModel ornstein_uhlenbeck(double sigma = 0.5, std::size_t dim = 1)
    {
        const auto d = static_cast<Eigen::Index>(dim);
        const double sd = ou_transition_std(sigma, 1.0);
        return {std::exp(-1.0) * Matrix::Identity(d, d), sd * sd * Matrix::Identity(d, d)};
    }
};

/// Predict m = A m, C = A C A^T + Q, then update with gain K = C H^T (H C H^T + Gamma)^{-1}.
inline GaussianState kalman_step(const GaussianState& state, const LinearModel& lin, const ObservationModel& obs,
                                 const Vector& y)
{
    if (!state.mean.allFinite() || !state.cov.allFinite() || !y.allFinite()) {
        throw std::invalid_argument("non-finite input to kalman_step");
    }
    if (static_cast<std::size_t>(y.size()) != obs.obs_dim()) throw std::invalid_argument("observation dimension mismatch");
    const Vector m_pred = lin.A * state.mean;
    const Matrix C_pred = lin.A * state.cov * lin.A.transpose() + lin.Q;
    const Matrix K = kalman_gain(C_pred, obs);
    const auto d = state.mean.size();
    GaussianState out;
    out.mean = m_pred + K * (y - obs.H() * m_pred);
    const Matrix C_post = (Matrix::Identity(d, d) - K * obs.H()) * C_pred;
    out.cov = 0.5 * (C_post + C_post.transpose());
    out.time_index = state.time_index + 1;
    return out;
}

/// States for n = 0..horizon.
inline std::vector<GaussianState> kalman_run(const GaussianState& initial, const LinearModel& lin,
                                             const ObservationModel& obs, const std::vector<Vector>& observations)
{
    std::vector<GaussianState> out{initial};
    out.reserve(observations.size() + 1);
    for (const auto& y : observations) out.push_back(kalman_step(out.back(), lin, obs, y));
    return out;
}

// ---------------------------------------------------------------------------
// Density-based mean-field EnKF (one-dimensional state)
// ---------------------------------------------------------------------------

class BoundaryMassError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Density samples on the Nx + 1 nodes x_i = x0 + i dx of [x0, x1].
class DensityGrid {
public:
    DensityGrid(double x0, double x1, std::size_t Nx) : x0_(x0), x1_(x1), Nx_(Nx), values_(Nx + 1, 0.0)
    {
        if (!(x1 > x0)) throw std::invalid_argument("density grid needs x0 < x1");
        if (Nx < 2) throw std::invalid_argument("density grid needs at least two cells");
    }

    static DensityGrid from_function(double x0, double x1, std::size_t Nx, const std::function<double(double)>& f)
    {
        DensityGrid g(x0, x1, Nx);
        for (std::size_t i = 0; i <= Nx; ++i) g.values_[i] = f(g.x(i));
        return g;
    }

    /// Normalized N(mean, var) sampled on the mesh.
    static DensityGrid gaussian(double x0, double x1, std::size_t Nx, double mean, double var)
    {
        auto g = from_function(x0, x1, Nx, [&](double x) {
            return std::exp(-(x - mean) * (x - mean) / (2.0 * var)) / std::sqrt(2.0 * std::numbers::pi * var);
        });
        g.normalize();
        return g;
    }

    double x0() const noexcept { return x0_; }
    double x1() const noexcept { return x1_; }
    std::size_t Nx() const noexcept { return Nx_; }
    double dx() const noexcept { return (x1_ - x0_) / static_cast<double>(Nx_); }
    double x(std::size_t i) const noexcept { return x0_ + static_cast<double>(i) * dx(); }
    std::vector<double>& values() noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    /// Trapezoid rule for the integral of f(x) rho(x).
    double integrate(const std::function<double(double)>& f) const
    {
        double acc = 0.0;
        for (std::size_t i = 0; i <= Nx_; ++i) {
            const double w = (i == 0 || i == Nx_) ? 0.5 : 1.0;
            acc += w * f(x(i)) * values_[i];
        }
        return acc * dx();
    }

    double mass() const
    {
        double acc = 0.0;
        for (std::size_t i = 0; i <= Nx_; ++i) acc += ((i == 0 || i == Nx_) ? 0.5 : 1.0) * values_[i];
        return acc * dx();
    }

    void normalize()
    {
        const double m = mass();
        if (!(m > 0.0) || !std::isfinite(m)) throw std::runtime_error("cannot normalize a density with zero mass");
        for (auto& v : values_) v /= m;
    }

    /// Mass within two cells of either endpoint.
    double boundary_mass() const
    {
        double acc = 0.0;
        for (std::size_t k = 0; k <= 2; ++k) {
            acc += std::abs(values_[k]) + std::abs(values_[Nx_ - k]);
        }
        return acc * dx();
    }

    /// Linear interpolation, zero outside [x0, x1].
    double interpolate(double xq) const
    {
        if (xq < x0_ || xq > x1_) return 0.0;
        const double t = (xq - x0_) / dx();
        auto i = static_cast<std::size_t>(std::floor(t));
        if (i >= Nx_) return values_[Nx_];
        const double w = t - static_cast<double>(i);
        return (1.0 - w) * values_[i] + w * values_[i + 1];
    }

private:
    double x0_;
    double x1_;
    std::size_t Nx_;
    std::vector<double> values_;
};

struct DensityMoments {
    double mean = 0.0;
    double variance = 0.0;
};

/// Trapezoid-rule mean and variance.
inline DensityMoments density_moments(const DensityGrid& rho)
{
    const double mass = rho.mass();
    const double m1 = rho.integrate([](double x) { return x; }) / mass;
    const double m2 = rho.integrate([&](double x) { return (x - m1) * (x - m1); }) / mass;
    return {m1, std::max(m2, 0.0)};
}

struct FpeDiagnostics {
    double mass_before_renormalization = 1.0;
    double negative_mass = 0.0;
    double boundary_mass = 0.0;
    std::size_t steps = 0;
};

/// Tolerance on the mass lost through the boundary in one propagation.
inline constexpr double kMaxMassLoss = 1e-6;
/// Tolerance on the mass sitting next to the boundary.
inline constexpr double kMaxBoundaryMass = 1e-8;

/// Crank-Nicolson solution of
///   d_t p = -d_x(a(x) p) + (sigma^2 / 2) d_xx p
/// over time T with step dt, centered differences, zero Dirichlet data.
/// Negative undershoot is clipped and the result renormalized.
inline DensityGrid fpe_propagate(const DensityGrid& rho, const DynamicsModel& model, double dt, double T = 1.0,
                                 FpeDiagnostics* diag = nullptr)
{
    if (model.state_dim() != 1) throw std::invalid_argument("the density solver is one-dimensional");
    if (!model.has_constant_diffusion()) throw std::invalid_argument("the density solver needs constant diffusion");
    if (!(dt > 0.0) || !(T > 0.0)) throw std::invalid_argument("time step and horizon must be positive");
    const double steps_real = T / dt;
    const auto steps = static_cast<std::size_t>(std::llround(steps_real));
    if (steps == 0 || std::abs(steps_real - static_cast<double>(steps)) > 1e-9 * steps_real) {
        throw std::invalid_argument("time step must divide the propagation horizon");
    }

    const std::size_t Nx = rho.Nx();
    const double dx = rho.dx();
    const double D = 0.5 * model.sigma() * model.sigma();
    std::vector<double> a(Nx + 1);
    for (std::size_t i = 0; i <= Nx; ++i) {
        const double xi = rho.x(i);
        model.drift(std::span<const double>(&xi, 1), std::span<double>(&a[i], 1));
    }

    // Interior unknowns i = 1..Nx-1; operator row i: lo * p_{i-1} + di * p_i + up * p_{i+1}.
    const std::size_t n = Nx - 1;
    std::vector<double> lo(n), di(n), up(n);
    const double diff = D / (dx * dx);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = k + 1;
        lo[k] = a[i - 1] / (2.0 * dx) + diff;
        di[k] = -2.0 * diff;
        up[k] = -a[i + 1] / (2.0 * dx) + diff;
    }
    // Thomas factorization of (I - dt/2 A).
    std::vector<double> cprime(n), denom(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double b = 1.0 - 0.5 * dt * di[k];
        const double c = -0.5 * dt * up[k];
        const double alow = k > 0 ? -0.5 * dt * lo[k] : 0.0;
        const double den = b - (k > 0 ? alow * cprime[k - 1] : 0.0);
        if (!(std::abs(den) > 1e-300) || !std::isfinite(den)) {
            throw std::runtime_error("Crank-Nicolson system is singular");
        }
        denom[k] = den;
        cprime[k] = c / den;
    }

    std::vector<double> p(rho.values().begin() + 1, rho.values().end() - 1);
    std::vector<double> rhs(n), tmp(n);
    for (std::size_t step = 0; step < steps; ++step) {
        for (std::size_t k = 0; k < n; ++k) {
            const double left = k > 0 ? p[k - 1] : 0.0;
            const double right = k + 1 < n ? p[k + 1] : 0.0;
            rhs[k] = p[k] + 0.5 * dt * (lo[k] * left + di[k] * p[k] + up[k] * right);
        }
        for (std::size_t k = 0; k < n; ++k) {
            const double alow = k > 0 ? -0.5 * dt * lo[k] : 0.0;
            tmp[k] = (rhs[k] - (k > 0 ? alow * tmp[k - 1] : 0.0)) / denom[k];
        }
        for (std::size_t k = n; k-- > 0;) {
            p[k] = tmp[k] - (k + 1 < n ? cprime[k] * p[k + 1] : 0.0);
        }
    }
    for (double v : p) {
        if (!std::isfinite(v)) throw std::runtime_error("Crank-Nicolson solve produced non-finite values");
    }

    DensityGrid out(rho.x0(), rho.x1(), Nx);
    double negative = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        if (p[k] < 0.0) {
            negative += -p[k];
            p[k] = 0.0;
        }
        out.values()[k + 1] = p[k];
    }
    negative *= dx;
    const double mass_in = rho.mass();
    const double mass_out = out.mass();
    const double boundary = out.boundary_mass();
    if (diag) {
        diag->mass_before_renormalization = mass_out;
        diag->negative_mass = negative;
        diag->boundary_mass = boundary;
        diag->steps = steps;
    }
    if (boundary > kMaxBoundaryMass) {
        throw BoundaryMassError("density reaches the grid boundary (mass " + std::to_string(boundary) +
                                "); enlarge [x0, x1]");
    }
    if (std::abs(mass_in - mass_out) > kMaxMassLoss) {
        throw BoundaryMassError("density lost mass " + std::to_string(mass_in - mass_out) +
                                " during propagation; enlarge [x0, x1]");
    }
    out.normalize();
    return out;
}

/// Convolution with the N(0, variance) density, direct summation on the mesh.
/// The sampled kernel is normalized to unit discrete mass.
inline DensityGrid convolve_gaussian(const DensityGrid& rho, double variance)
{
    if (variance < 0.0) throw std::invalid_argument("convolution variance must be non-negative");
    if (variance == 0.0) return rho;
    const std::size_t Nx = rho.Nx();
    const double dx = rho.dx();
    std::vector<double> kernel(Nx + 1);
    std::size_t width = 0;
    for (std::size_t k = 0; k <= Nx; ++k) {
        const double z = static_cast<double>(k) * dx;
        kernel[k] = std::exp(-z * z / (2.0 * variance));
        if (kernel[k] > 0.0) width = k;
    }
    double kmass = kernel[0];
    for (std::size_t k = 1; k <= width; ++k) kmass += 2.0 * kernel[k];
    kmass *= dx;
    for (auto& v : kernel) v /= kmass;

    DensityGrid out(rho.x0(), rho.x1(), Nx);
    const auto& in = rho.values();
    for (std::size_t i = 0; i <= Nx; ++i) {
        const std::size_t jlo = i > width ? i - width : 0;
        const std::size_t jhi = std::min(Nx, i + width);
        double acc = 0.0;
        for (std::size_t j = jlo; j <= jhi; ++j) {
            acc += in[j] * kernel[i > j ? i - j : j - i];
        }
        out.values()[i] = acc * dx;
    }
    return out;
}

struct MeanFieldUpdateInfo {
    DensityMoments prediction;
    double gain = 0.0;
};

/// Mean-field analysis of a predicted density (scalar state and observation).
///
/// With K = C H / (H^2 C + Gamma) the updated state is X + Y where
/// X = (1 - K H) v + K y and Y = K eta ~ N(0, K^2 Gamma). The density of X is
/// obtained by the affine change of variables and then convolved with Y's.
inline DensityGrid mfenkf_update(const DensityGrid& rho_pred, const ObservationModel& obs, const Vector& y,
                                 MeanFieldUpdateInfo* info = nullptr)
{
    if (obs.obs_dim() != 1 || obs.state_dim() != 1 || y.size() != 1) {
        throw std::invalid_argument("the density update is scalar");
    }
    const double H = obs.H()(0, 0);
    const double Gamma = obs.gamma()(0, 0);
    const DensityMoments mom = density_moments(rho_pred);
    const double K = mom.variance * H / (H * mom.variance * H + Gamma);
    if (info) {
        info->prediction = mom;
        info->gain = K;
    }
    if (K == 0.0) {
        DensityGrid out = rho_pred;
        out.normalize();
        return out;
    }
    const double a = 1.0 - K * H;
    if (std::abs(a) < 1e-12) throw std::runtime_error("degenerate affine map in mean-field update");
    const double shift = K * y[0];
    DensityGrid affine(rho_pred.x0(), rho_pred.x1(), rho_pred.Nx());
    for (std::size_t i = 0; i <= affine.Nx(); ++i) {
        affine.values()[i] = rho_pred.interpolate((affine.x(i) - shift) / a) / std::abs(a);
    }
    DensityGrid out = convolve_gaussian(affine, K * K * Gamma);
    out.normalize();
    return out;
}

struct DensityGridConfig {
    double x0 = -5.0;
    double x1 = 5.0;
    std::size_t Nx = 4000;
    double dt = 1e-3;
};

struct DmfenkfStep {
    std::optional<DensityGrid> predicted;
    DensityGrid updated;
    std::optional<DensityMoments> prediction_moments;
    DensityMoments updated_moments;
    double gain = 0.0;
    std::vector<double> qoi;
};

/// Deterministic mean-field EnKF: Fokker-Planck prediction, moment-based
/// gain, affine-plus-convolution update. Entry n = 0 holds the initial density.
inline std::vector<DmfenkfStep> dmfenkf_run(const DynamicsModel& model, const ObservationModel& obs,
                                            const std::vector<Vector>& observations, const DensityGridConfig& grid,
                                            const DensityGrid& initial, const std::vector<Observable>& phis,
                                            bool keep_densities = true)
{
    auto expectations = [&](const DensityGrid& rho) {
        std::vector<double> q;
        for (const auto& phi : phis) {
            q.push_back(rho.integrate([&](double x) { return phi(std::span<const double>(&x, 1)); }) / rho.mass());
        }
        return q;
    };
    std::vector<DmfenkfStep> out;
    out.reserve(observations.size() + 1);
    {
        DmfenkfStep first{std::nullopt, initial, std::nullopt, density_moments(initial), 0.0, expectations(initial)};
        out.push_back(std::move(first));
    }
    DensityGrid current = initial;
    for (const auto& y : observations) {
        DensityGrid pred = fpe_propagate(current, model, grid.dt, 1.0);
        MeanFieldUpdateInfo info;
        DensityGrid upd = mfenkf_update(pred, obs, y, &info);
        DmfenkfStep step{keep_densities ? std::optional<DensityGrid>(pred) : std::nullopt,
                         upd,
                         info.prediction,
                         density_moments(upd),
                         info.gain,
                         expectations(upd)};
        current = std::move(upd);
        out.push_back(std::move(step));
    }
    return out;
}

/// Overload starting from N(prior_mean, prior_var) on the configured grid.
inline std::vector<DmfenkfStep> dmfenkf_run(const DynamicsModel& model, const ObservationModel& obs,
                                            const std::vector<Vector>& observations, const DensityGridConfig& grid,
                                            double prior_mean, double prior_var, const std::vector<Observable>& phis)
{
    const DensityGrid initial = DensityGrid::gaussian(grid.x0, grid.x1, grid.Nx, prior_mean, prior_var);
    return dmfenkf_run(model, obs, observations, grid, initial, phis);
}

} // namespace mlenkf

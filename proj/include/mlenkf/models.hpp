#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "rng.hpp"

namespace mlenkf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class ModelKind { OrnsteinUhlenbeck, DoubleWell, CosineDrift, Custom };

enum class Scheme { EulerMaruyama, Milstein, Exact };

inline std::string_view to_string(Scheme s)
{
    switch (s) {
    case Scheme::EulerMaruyama: return "euler-maruyama";
    case Scheme::Milstein: return "milstein";
    case Scheme::Exact: return "exact";
    }
    return "?";
}

inline Scheme scheme_from_name(std::string_view name)
{
    if (name == "euler-maruyama" || name == "euler" || name == "em") return Scheme::EulerMaruyama;
    if (name == "milstein") return Scheme::Milstein;
    if (name == "exact") return Scheme::Exact;
    throw std::invalid_argument("unknown scheme '" + std::string(name) + "'");
}

/// Hidden-state SDE  du = a(u) dt + b(u) dW  observed once per unit of time.
///
/// The three built-in models are gradient flows a = -V' with constant
/// diffusion and act componentwise. Custom models supply a vector field and,
/// optionally, a state-dependent scalar diffusion with its gradient (used by
/// the Milstein correction).
class DynamicsModel {
public:
    using VectorField = std::function<void(std::span<const double>, std::span<double>)>;
    using ScalarField = std::function<double(std::span<const double>)>;

    static DynamicsModel ornstein_uhlenbeck(double sigma = 0.5, std::size_t dim = 1)
    {
        return DynamicsModel(ModelKind::OrnsteinUhlenbeck, sigma, dim);
    }

    /// V(u) = 1/(2+4u^2) + u^2/4.
    static DynamicsModel double_well(double sigma = 0.5, std::size_t dim = 1)
    {
        return DynamicsModel(ModelKind::DoubleWell, sigma, dim);
    }

    /// a(u) = -(u + pi cos(pi u / 5) / 5).
    static DynamicsModel cosine_drift(double sigma = 0.5, std::size_t dim = 1)
    {
        return DynamicsModel(ModelKind::CosineDrift, sigma, dim);
    }

    /// `diffusion` and `diffusion_gradient` may be left empty for constant sigma.
    static DynamicsModel custom(std::size_t dim, VectorField drift, double sigma,
                                ScalarField diffusion = {}, VectorField diffusion_gradient = {})
    {
        if (!drift) throw std::invalid_argument("custom model needs a drift");
        if (static_cast<bool>(diffusion) != static_cast<bool>(diffusion_gradient)) {
            throw std::invalid_argument("state-dependent diffusion needs its gradient");
        }
        DynamicsModel m(ModelKind::Custom, sigma, dim);
        m.drift_ = std::move(drift);
        m.diffusion_ = std::move(diffusion);
        m.diffusion_gradient_ = std::move(diffusion_gradient);
        return m;
    }

    ModelKind kind() const noexcept { return kind_; }
    double sigma() const noexcept { return sigma_; }
    std::size_t state_dim() const noexcept { return dim_; }
    bool has_exact_step() const noexcept { return kind_ == ModelKind::OrnsteinUhlenbeck; }
    bool has_constant_diffusion() const noexcept { return !diffusion_; }

    std::string_view name() const noexcept
    {
        switch (kind_) {
        case ModelKind::OrnsteinUhlenbeck: return "ou";
        case ModelKind::DoubleWell: return "double-well";
        case ModelKind::CosineDrift: return "cosine";
        case ModelKind::Custom: return "custom";
        }
        return "?";
    }

    /// Componentwise drift of the built-in models.
    static double builtin_drift(ModelKind kind, double x) noexcept
    {
        switch (kind) {
        case ModelKind::OrnsteinUhlenbeck:
            return -x;
        case ModelKind::DoubleWell: {
            const double q = 2.0 + 4.0 * x * x;
            return -(x / 2.0 - 8.0 * x / (q * q));
        }
        case ModelKind::CosineDrift:
            return -(x + std::numbers::pi * std::cos(std::numbers::pi * x / 5.0) / 5.0);
        case ModelKind::Custom:
            break;
        }
        return 0.0;
    }

    void drift(std::span<const double> u, std::span<double> out) const
    {
        if (kind_ == ModelKind::Custom) {
            drift_(u, out);
            return;
        }
        for (std::size_t j = 0; j < u.size(); ++j) out[j] = builtin_drift(kind_, u[j]);
    }

    Vector drift(const Vector& u) const
    {
        Vector out(u.size());
        drift(std::span<const double>(u.data(), u.size()), std::span<double>(out.data(), out.size()));
        return out;
    }

    double diffusion(std::span<const double> u) const
    {
        return diffusion_ ? diffusion_(u) : sigma_;
    }

    void diffusion_gradient(std::span<const double> u, std::span<double> out) const
    {
        if (diffusion_gradient_) {
            diffusion_gradient_(u, out);
        } else {
            for (auto& v : out) v = 0.0;
        }
    }

private:
    DynamicsModel(ModelKind kind, double sigma, std::size_t dim) : kind_(kind), sigma_(sigma), dim_(dim)
    {
        if (!(sigma > 0.0) || !std::isfinite(sigma)) {
            throw std::invalid_argument("diffusion sigma must be positive and finite");
        }
        if (dim == 0) throw std::invalid_argument("state dimension must be positive");
    }

    ModelKind kind_;
    double sigma_;
    std::size_t dim_;
    VectorField drift_;
    ScalarField diffusion_;
    VectorField diffusion_gradient_;
};

/// Looks up a built-in model by its configuration name ("ou", "double-well", "cosine").
inline DynamicsModel model_from_name(std::string_view name, double sigma = 0.5)
{
    if (name == "ou") return DynamicsModel::ornstein_uhlenbeck(sigma);
    if (name == "double-well" || name == "dw") return DynamicsModel::double_well(sigma);
    if (name == "cosine") return DynamicsModel::cosine_drift(sigma);
    throw std::invalid_argument("unknown model '" + std::string(name) + "'");
}

/// Brownian increments over one unit of time on a uniform grid of N substeps.
/// Increment k is N(0, I/N). Immutable once built.
class NoisePath {
public:
    NoisePath(std::size_t n_substeps, std::size_t dim, std::vector<double> increments)
        : n_(n_substeps), dim_(dim), increments_(std::move(increments))
    {
        if (n_ == 0) throw std::invalid_argument("noise path needs at least one substep");
        if (increments_.size() != n_ * dim_) throw std::invalid_argument("noise path size mismatch");
    }

    template <GaussianSource G>
    static NoisePath sample(std::size_t n_substeps, std::size_t dim, G& source)
    {
        if (n_substeps == 0) throw std::invalid_argument("noise path needs at least one substep");
        const double scale = std::sqrt(1.0 / static_cast<double>(n_substeps));
        std::vector<double> inc(n_substeps * dim);
        for (auto& v : inc) v = scale * source.gaussian();
        return NoisePath(n_substeps, dim, std::move(inc));
    }

    static NoisePath zeros(std::size_t n_substeps, std::size_t dim)
    {
        return NoisePath(n_substeps, dim, std::vector<double>(n_substeps * dim, 0.0));
    }

    std::size_t n_substeps() const noexcept { return n_; }
    std::size_t dim() const noexcept { return dim_; }
    std::span<const double> increment(std::size_t k) const
    {
        return std::span<const double>(increments_).subspan(k * dim_, dim_);
    }
    const std::vector<double>& increments() const noexcept { return increments_; }

    /// Sums each run of `factor` consecutive increments.
    NoisePath coarsen(std::size_t factor = 2) const
    {
        if (factor == 0 || n_ % factor != 0) {
            throw std::invalid_argument("coarsening factor must divide the number of substeps");
        }
        const std::size_t nc = n_ / factor;
        std::vector<double> out(nc * dim_, 0.0);
        for (std::size_t j = 0; j < nc; ++j) {
            for (std::size_t r = 0; r < factor; ++r) {
                for (std::size_t c = 0; c < dim_; ++c) {
                    out[j * dim_ + c] += increments_[(j * factor + r) * dim_ + c];
                }
            }
        }
        return NoisePath(nc, dim_, std::move(out));
    }

    friend bool operator==(const NoisePath&, const NoisePath&) = default;

private:
    std::size_t n_;
    std::size_t dim_;
    std::vector<double> increments_;
};

/// Standard deviation of the exact OU transition over a time span dt.
inline double ou_transition_std(double sigma, double dt)
{
    return std::sqrt(sigma * sigma * (1.0 - std::exp(-2.0 * dt)) / 2.0);
}

/// Exact unit-time OU transition u e^{-1} + sqrt(sigma^2 (1 - e^{-2}) / 2) * gauss.
inline Vector exact_ou_step(const Vector& u, double sigma, const Vector& gauss)
{
    if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
    if (u.size() != gauss.size()) throw std::invalid_argument("dimension mismatch");
    if (!u.allFinite() || !gauss.allFinite()) throw std::invalid_argument("non-finite input");
    const double decay = std::exp(-1.0);
    const double sd = ou_transition_std(sigma, 1.0);
    Vector out(u.size());
    for (Eigen::Index j = 0; j < u.size(); ++j) out[j] = u[j] * decay + sd * gauss[j];
    return out;
}

namespace detail {

/// Advances one state over one unit of time, one substep at a time.
///
/// Euler-Maruyama and Milstein update in place. The exact OU scheme keeps the
/// deterministic part u e^{-1} aside and accumulates the weighted substep
/// noise, so zero noise gives u e^{-1} bit-for-bit at every resolution.
class Stepper {
public:
    Stepper(const DynamicsModel& model, std::size_t n_substeps, Scheme scheme)
        : model_(model), n_(n_substeps), scheme_(scheme), dt_(1.0 / static_cast<double>(n_substeps)),
          sqrt_dt_(std::sqrt(dt_)), scratch_(model.state_dim()), grad_(model.state_dim())
    {
        if (n_substeps == 0) throw std::invalid_argument("number of substeps must be >= 1");
        if (scheme == Scheme::Exact && !model.has_exact_step()) {
            throw std::invalid_argument("model '" + std::string(model.name()) + "' has no exact step");
        }
        if (scheme == Scheme::Exact) {
            substep_sd_ = ou_transition_std(model.sigma(), dt_);
        }
    }

    std::size_t n_substeps() const noexcept { return n_; }
    double dt() const noexcept { return dt_; }
    double sigma() const noexcept { return model_.sigma(); }
    ModelKind kind() const noexcept { return model_.kind(); }

    /// Scalar built-in model with an in-place scheme; see scalar_loop().
    bool scalar_fast_path() const noexcept
    {
        return model_.state_dim() == 1 && model_.kind() != ModelKind::Custom && scheme_ != Scheme::Exact;
    }

    void begin(std::span<double> u)
    {
        for (double x : u) {
            if (!std::isfinite(x)) throw std::invalid_argument("non-finite state input");
        }
        if (scheme_ == Scheme::Exact) {
            accum_.assign(u.size(), 0.0);
        }
    }

    /// Applies substep k with Brownian increment dw (length d).
    void substep(std::size_t k, std::span<double> u, std::span<const double> dw)
    {
        const std::size_t d = u.size();
        if (scheme_ == Scheme::Exact) {
            const double weight = substep_sd_ * std::exp(-static_cast<double>(n_ - 1 - k) * dt_);
            for (std::size_t j = 0; j < d; ++j) accum_[j] += weight * (dw[j] / sqrt_dt_);
            return;
        }
        const ModelKind kind = model_.kind();
        if (kind != ModelKind::Custom) {
            const double sigma = model_.sigma();
            for (std::size_t j = 0; j < d; ++j) {
                u[j] += DynamicsModel::builtin_drift(kind, u[j]) * dt_ + sigma * dw[j];
            }
            return;
        }
        model_.drift(u, scratch_);
        const double b = model_.diffusion(u);
        if (scheme_ == Scheme::Milstein && !model_.has_constant_diffusion()) {
            model_.diffusion_gradient(u, grad_);
            for (std::size_t j = 0; j < d; ++j) {
                u[j] += scratch_[j] * dt_ + b * dw[j] + 0.5 * b * grad_[j] * (dw[j] * dw[j] - dt_);
            }
        } else {
            for (std::size_t j = 0; j < d; ++j) u[j] += scratch_[j] * dt_ + b * dw[j];
        }
    }

    void finish(std::span<double> u)
    {
        if (scheme_ == Scheme::Exact) {
            const double decay = std::exp(-1.0);
            for (std::size_t j = 0; j < u.size(); ++j) u[j] = u[j] * decay + accum_[j];
        }
    }

private:
    const DynamicsModel& model_;
    std::size_t n_;
    Scheme scheme_;
    double dt_;
    double sqrt_dt_;
    double substep_sd_ = 0.0;
    std::vector<double> scratch_;
    std::vector<double> grad_;
    std::vector<double> accum_;
};

/// Calls fn(std::integral_constant<ModelKind, K>{}) for the built-in kind K,
/// so hot loops get the drift inlined without a per-substep switch.
template <class Fn>
decltype(auto) dispatch_builtin(ModelKind kind, Fn&& fn)
{
    switch (kind) {
    case ModelKind::OrnsteinUhlenbeck: return fn(std::integral_constant<ModelKind, ModelKind::OrnsteinUhlenbeck>{});
    case ModelKind::DoubleWell: return fn(std::integral_constant<ModelKind, ModelKind::DoubleWell>{});
    case ModelKind::CosineDrift: return fn(std::integral_constant<ModelKind, ModelKind::CosineDrift>{});
    case ModelKind::Custom: break;
    }
    throw std::logic_error("not a built-in model");
}

/// Receives the increments a coupled propagation actually consumed.
struct NoiseRecorder {
    std::vector<double> fine;
    std::vector<double> coarse;
};

/// Fine/coarse propagation driven by one stream of fine increments. The coarse
/// path consumes running sums of `factor` fine increments.
template <class NextIncrement>
void coupled_advance(const DynamicsModel& model, std::span<double> u_fine, std::span<double> u_coarse,
                     Stepper& fine, Stepper& coarse, NextIncrement&& next, NoiseRecorder* record = nullptr)
{
    const std::size_t nf = fine.n_substeps();
    const std::size_t nc = coarse.n_substeps();
    if (nc == 0 || nf % nc != 0) {
        throw std::invalid_argument("coarsening factor must divide the fine number of substeps");
    }
    const std::size_t factor = nf / nc;
    const std::size_t d = model.state_dim();
    double dw_stack[4];
    std::vector<double> dw_heap;
    double dwc_stack[4];
    std::vector<double> dwc_heap;
    std::span<double> dw, dwc;
    if (d <= 4) {
        dw = std::span<double>(dw_stack, d);
        dwc = std::span<double>(dwc_stack, d);
    } else {
        dw_heap.resize(d);
        dwc_heap.resize(d);
        dw = dw_heap;
        dwc = dwc_heap;
    }
    if (fine.scalar_fast_path() && coarse.scalar_fast_path() && !record) {
        if (!std::isfinite(u_fine[0]) || !std::isfinite(u_coarse[0])) {
            throw std::invalid_argument("non-finite state input");
        }
        const double dtf = fine.dt();
        const double dtc = coarse.dt();
        const double sigma = fine.sigma();
        dispatch_builtin(model.kind(), [&](auto kind) {
            double xf = u_fine[0];
            double xc = u_coarse[0];
            double sum = 0.0;
            std::size_t count = 0;
            for (std::size_t k = 0; k < nf; ++k) {
                next(dw);
                xf += DynamicsModel::builtin_drift(kind, xf) * dtf + sigma * dw[0];
                sum += dw[0];
                if (++count == factor) {
                    xc += DynamicsModel::builtin_drift(kind, xc) * dtc + sigma * sum;
                    sum = 0.0;
                    count = 0;
                }
            }
            u_fine[0] = xf;
            u_coarse[0] = xc;
        });
        return;
    }
    fine.begin(u_fine);
    coarse.begin(u_coarse);
    for (std::size_t j = 0; j < d; ++j) dwc[j] = 0.0;
    for (std::size_t k = 0; k < nf; ++k) {
        next(dw);
        if (record) record->fine.insert(record->fine.end(), dw.begin(), dw.end());
        fine.substep(k, u_fine, dw);
        for (std::size_t j = 0; j < d; ++j) dwc[j] += dw[j];
        if ((k + 1) % factor == 0) {
            if (record) record->coarse.insert(record->coarse.end(), dwc.begin(), dwc.end());
            coarse.substep(k / factor, u_coarse, dwc);
            for (std::size_t j = 0; j < d; ++j) dwc[j] = 0.0;
        }
    }
    fine.finish(u_fine);
    coarse.finish(u_coarse);
}

template <class NextIncrement>
void advance(std::span<double> u, Stepper& stepper, NextIncrement&& next)
{
    const std::size_t d = u.size();
    double dw_stack[4];
    std::vector<double> dw_heap;
    std::span<double> dw;
    if (d <= 4) {
        dw = std::span<double>(dw_stack, d);
    } else {
        dw_heap.resize(d);
        dw = dw_heap;
    }
    if (stepper.scalar_fast_path()) {
        if (!std::isfinite(u[0])) throw std::invalid_argument("non-finite state input");
        const double dt = stepper.dt();
        const double sigma = stepper.sigma();
        const std::size_t n = stepper.n_substeps();
        u[0] = dispatch_builtin(stepper.kind(), [&](auto kind) {
            double x = u[0];
            for (std::size_t k = 0; k < n; ++k) {
                next(dw);
                x += DynamicsModel::builtin_drift(kind, x) * dt + sigma * dw[0];
            }
            return x;
        });
        return;
    }
    stepper.begin(u);
    for (std::size_t k = 0; k < stepper.n_substeps(); ++k) {
        next(dw);
        stepper.substep(k, u, dw);
    }
    stepper.finish(u);
}

/// Increment generator drawing N(0, dt I) increments from a Gaussian source.
template <GaussianSource G>
struct SampledIncrements {
    G& source;
    double sqrt_dt;
    void operator()(std::span<double> dw)
    {
        for (auto& v : dw) v = sqrt_dt * source.gaussian();
    }
};

struct PathIncrements {
    const NoisePath& path;
    std::size_t k = 0;
    void operator()(std::span<double> dw)
    {
        auto src = path.increment(k++);
        std::copy(src.begin(), src.end(), dw.begin());
    }
};

} // namespace detail

/// State advanced one unit of time with `noise.n_substeps()` uniform substeps.
/// Milstein and Euler-Maruyama coincide for constant diffusion.
inline Vector simulate_step(const DynamicsModel& model, const Vector& u, const NoisePath& noise, Scheme scheme)
{
    if (static_cast<std::size_t>(u.size()) != model.state_dim() || noise.dim() != model.state_dim()) {
        throw std::invalid_argument("dimension mismatch in simulate_step");
    }
    detail::Stepper stepper(model, noise.n_substeps(), scheme);
    Vector out = u;
    detail::advance(std::span<double>(out.data(), out.size()), stepper, detail::PathIncrements{noise});
    return out;
}

/// Propagates a fine/coarse pair with shared noise. The coarse state consumes
/// `noise_fine.coarsen(N_fine / N_coarse)`.
inline std::pair<Vector, Vector> simulate_coupled_step(const DynamicsModel& model, const Vector& u_fine,
                                                       const Vector& u_coarse, const NoisePath& noise_fine,
                                                       std::size_t coarse_substeps, Scheme scheme)
{
    const std::size_t d = model.state_dim();
    if (static_cast<std::size_t>(u_fine.size()) != d || static_cast<std::size_t>(u_coarse.size()) != d ||
        noise_fine.dim() != d) {
        throw std::invalid_argument("dimension mismatch in simulate_coupled_step");
    }
    if (coarse_substeps == 0 || noise_fine.n_substeps() % coarse_substeps != 0) {
        throw std::invalid_argument("coarsening factor must divide the fine number of substeps");
    }
    detail::Stepper fine(model, noise_fine.n_substeps(), scheme);
    detail::Stepper coarse(model, coarse_substeps, scheme);
    Vector vf = u_fine;
    Vector vc = u_coarse;
    detail::coupled_advance(model, std::span<double>(vf.data(), d), std::span<double>(vc.data(), d), fine, coarse,
                            detail::PathIncrements{noise_fine});
    return {std::move(vf), std::move(vc)};
}

/// Default-factor overload: the coarse level uses half the fine substeps.
inline std::pair<Vector, Vector> simulate_coupled_step(const DynamicsModel& model, const Vector& u_fine,
                                                       const Vector& u_coarse, const NoisePath& noise_fine,
                                                       Scheme scheme)
{
    if (noise_fine.n_substeps() % 2 != 0) {
        throw std::invalid_argument("coarsening factor must divide the fine number of substeps");
    }
    return simulate_coupled_step(model, u_fine, u_coarse, noise_fine, noise_fine.n_substeps() / 2, scheme);
}

} // namespace mlenkf

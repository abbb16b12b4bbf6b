#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "models.hpp"
#include "rng.hpp"

namespace mlenkf {

/// Rows are particles.
using ParticleMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Nearest integer, ties away from zero.
inline long long round_nearest(double x)
{
    return std::llround(x);
}

/// Linear observation y = H u + eta, eta ~ N(0, Gamma).
class ObservationModel {
public:
    ObservationModel(Matrix H, Matrix gamma) : H_(std::move(H)), gamma_(std::move(gamma))
    {
        if (gamma_.rows() != gamma_.cols() || gamma_.rows() != H_.rows()) {
            throw std::invalid_argument("observation operator and noise covariance disagree in size");
        }
        if (!H_.allFinite() || !gamma_.allFinite()) throw std::invalid_argument("non-finite observation model");
        if (!gamma_.isApprox(gamma_.transpose(), 1e-12)) {
            throw std::invalid_argument("observation covariance must be symmetric");
        }
        Eigen::LLT<Matrix> llt(gamma_);
        if (llt.info() != Eigen::Success) {
            throw std::invalid_argument("observation covariance must be positive definite");
        }
        chol_ = llt.matrixL();
    }

    static ObservationModel scalar(double h = 1.0, double gamma = 0.1)
    {
        return ObservationModel(Matrix::Constant(1, 1, h), Matrix::Constant(1, 1, gamma));
    }

    const Matrix& H() const noexcept { return H_; }
    const Matrix& gamma() const noexcept { return gamma_; }
    const Matrix& gamma_chol() const noexcept { return chol_; }
    std::size_t obs_dim() const noexcept { return static_cast<std::size_t>(H_.rows()); }
    std::size_t state_dim() const noexcept { return static_cast<std::size_t>(H_.cols()); }

    /// One N(0, Gamma) draw written into `out`.
    template <GaussianSource G>
    void sample_noise(G& source, std::span<double> out) const
    {
        const std::size_t m = obs_dim();
        double z_stack[4];
        std::vector<double> z_heap;
        double* z = z_stack;
        if (m > 4) {
            z_heap.resize(m);
            z = z_heap.data();
        }
        for (std::size_t k = 0; k < m; ++k) z[k] = source.gaussian();
        for (std::size_t r = 0; r < m; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c <= r; ++c) acc += chol_(r, c) * z[c];
            out[r] = acc;
        }
    }

private:
    Matrix H_;
    Matrix gamma_;
    Matrix chol_;
};

enum class Phase { Updated, Prediction };

struct EnsembleState {
    ParticleMatrix particles;
    std::size_t time_index = 0;
    Phase phase = Phase::Updated;

    std::size_t size() const noexcept { return static_cast<std::size_t>(particles.rows()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(particles.cols()); }

    std::span<double> particle(std::size_t i) { return {particles.row(static_cast<Eigen::Index>(i)).data(), dim()}; }
    std::span<const double> particle(std::size_t i) const
    {
        return {particles.row(static_cast<Eigen::Index>(i)).data(), dim()};
    }
};

enum class CovarianceMode { Biased, Unbiased };

struct EnkfConfig {
    std::size_t N = 1;
    std::size_t P = 1;
    Scheme scheme = Scheme::Milstein;
    std::uint64_t seed = 0;
    CovarianceMode covariance_mode = CovarianceMode::Biased;

    void validate() const
    {
        if (N < 1) throw std::invalid_argument("EnKF resolution N must be >= 1");
        if (P < 1) throw std::invalid_argument("EnKF ensemble size P must be >= 1");
        if (covariance_mode == CovarianceMode::Unbiased && P < 2) {
            throw std::invalid_argument("unbiased covariance needs at least two particles");
        }
    }
};

/// Scalar observable phi of the state.
struct Observable {
    std::string name;
    std::function<double(std::span<const double>)> fn;

    double operator()(std::span<const double> u) const { return fn(u); }
};

namespace observables {

/// phi(u) = u_0
inline Observable first_moment()
{
    return {"x", [](std::span<const double> u) { return u[0]; }};
}

/// phi(u) = u_0^2
inline Observable second_moment()
{
    return {"x^2", [](std::span<const double> u) { return u[0] * u[0]; }};
}

inline Observable constant(double c)
{
    return {"const", [c](std::span<const double>) { return c; }};
}

} // namespace observables

/// Gaussian initial law N(mean, cov); the default experiment uses N(0, Gamma).
class GaussianPrior {
public:
    GaussianPrior(Vector mean, Matrix cov) : mean_(std::move(mean)), cov_(std::move(cov))
    {
        if (cov_.rows() != mean_.size() || cov_.cols() != mean_.size()) {
            throw std::invalid_argument("prior mean and covariance disagree in size");
        }
        Eigen::LLT<Matrix> llt(cov_);
        if (llt.info() != Eigen::Success) throw std::invalid_argument("prior covariance must be positive definite");
        chol_ = llt.matrixL();
    }

    static GaussianPrior scalar(double mean, double var)
    {
        return GaussianPrior(Vector::Constant(1, mean), Matrix::Constant(1, 1, var));
    }

    const Vector& mean() const noexcept { return mean_; }
    const Matrix& cov() const noexcept { return cov_; }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(mean_.size()); }

    template <GaussianSource G>
    void sample(G& source, std::span<double> out) const
    {
        const std::size_t d = dim();
        std::vector<double> z(d);
        for (auto& v : z) v = source.gaussian();
        for (std::size_t r = 0; r < d; ++r) {
            double acc = mean_[static_cast<Eigen::Index>(r)];
            for (std::size_t c = 0; c <= r; ++c) acc += chol_(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * z[c];
            out[r] = acc;
        }
    }

    template <GaussianSource G>
    EnsembleState sample_ensemble(std::size_t P, G& source) const
    {
        EnsembleState ens;
        ens.particles.resize(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(dim()));
        for (std::size_t i = 0; i < P; ++i) sample(source, ens.particle(i));
        ens.time_index = 0;
        ens.phase = Phase::Updated;
        return ens;
    }

private:
    Vector mean_;
    Matrix cov_;
    Matrix chol_;
};

/// In-place form of predict().
template <GaussianSource G>
void predict_in_place(EnsembleState& ens, const DynamicsModel& model, std::size_t N, Scheme scheme, G& rng)
{
    if (ens.phase != Phase::Updated) throw std::invalid_argument("predict expects an updated ensemble");
    if (ens.dim() != model.state_dim()) throw std::invalid_argument("ensemble and model dimension differ");
    detail::Stepper stepper(model, N, scheme);
    detail::SampledIncrements<G> next{rng, std::sqrt(stepper.dt())};
    for (std::size_t i = 0; i < ens.size(); ++i) detail::advance(ens.particle(i), stepper, next);
    ens.time_index += 1;
    ens.phase = Phase::Prediction;
}

/// Prediction: every particle advanced one unit of time with a fresh noise path.
template <GaussianSource G>
EnsembleState predict(const EnsembleState& ens, const DynamicsModel& model, std::size_t N, Scheme scheme, G& rng)
{
    if (ens.phase != Phase::Updated) throw std::invalid_argument("predict expects an updated ensemble");
    if (ens.dim() != model.state_dim()) throw std::invalid_argument("ensemble and model dimension differ");
    EnsembleState out = ens;
    predict_in_place(out, model, N, scheme, rng);
    return out;
}

/// Biased: (1/P) sum (v - mean)(v - mean)^T. Unbiased: that times P/(P-1).
inline Matrix sample_covariance(const ParticleMatrix& particles, CovarianceMode mode = CovarianceMode::Biased)
{
    const auto P = particles.rows();
    const auto d = particles.cols();
    if (P < 1) throw std::invalid_argument("sample covariance of an empty ensemble");
    if (mode == CovarianceMode::Unbiased && P < 2) {
        throw std::invalid_argument("unbiased sample covariance needs at least two particles");
    }
    Vector mean = Vector::Zero(d);
    for (Eigen::Index i = 0; i < P; ++i) mean += particles.row(i).transpose();
    mean /= static_cast<double>(P);
    Matrix C = Matrix::Zero(d, d);
    if (d == 1) {
        double acc = 0.0;
        const double m = mean[0];
        for (Eigen::Index i = 0; i < P; ++i) {
            const double c = particles(i, 0) - m;
            acc += c * c;
        }
        C(0, 0) = acc / static_cast<double>(P);
    } else {
        for (Eigen::Index i = 0; i < P; ++i) {
            const Vector c = particles.row(i).transpose() - mean;
            C.noalias() += c * c.transpose();
        }
        C /= static_cast<double>(P);
        C = 0.5 * (C + C.transpose()).eval();
    }
    if (mode == CovarianceMode::Unbiased) {
        C *= static_cast<double>(P) / static_cast<double>(P - 1);
    }
    return C;
}

inline Matrix sample_covariance(const EnsembleState& ens, CovarianceMode mode = CovarianceMode::Biased)
{
    return sample_covariance(ens.particles, mode);
}

/// K = C H^T (H C H^T + Gamma)^{-1}, via a Cholesky solve of the innovation covariance.
inline Matrix kalman_gain(const Matrix& C, const ObservationModel& obs)
{
    if (C.rows() != C.cols() || static_cast<std::size_t>(C.rows()) != obs.state_dim()) {
        throw std::invalid_argument("covariance does not match observation model");
    }
    if (!C.allFinite()) throw std::invalid_argument("non-finite covariance");
    const Matrix& H = obs.H();
    if (obs.obs_dim() == 1) {
        const Vector CHt = C * H.row(0).transpose();
        const double s = H.row(0).dot(CHt) + obs.gamma()(0, 0);
        if (!(s > 0.0)) throw std::runtime_error("innovation covariance is not positive definite");
        return CHt / s;
    }
    const Matrix S = H * C * H.transpose() + obs.gamma();
    Eigen::LLT<Matrix> llt(S);
    if (llt.info() != Eigen::Success) throw std::runtime_error("innovation covariance is not positive definite");
    // S K^T = H C^T
    Matrix K = llt.solve(H * C.transpose()).transpose();
    return K;
}

namespace detail {

/// v_hat = (I - K H) v + K (y + eta), computed particle by particle.
class AffineUpdate {
public:
    AffineUpdate(const Matrix& K, const ObservationModel& obs, const Vector& y)
        : K_(K), A_(Matrix::Identity(K.rows(), K.rows()) - K * obs.H()), y_(y)
    {
        if (static_cast<std::size_t>(y.size()) != obs.obs_dim()) {
            throw std::invalid_argument("observation has the wrong dimension");
        }
        if (static_cast<std::size_t>(K.cols()) != obs.obs_dim()) throw std::invalid_argument("gain has the wrong shape");
        ytilde_.resize(obs.obs_dim());
        tmp_.resize(static_cast<std::size_t>(K.rows()));
    }

    void apply(std::span<double> v, std::span<const double> eta)
    {
        const auto d = A_.rows();
        const auto m = K_.cols();
        for (Eigen::Index k = 0; k < m; ++k) ytilde_[k] = y_[k] + eta[k];
        for (Eigen::Index r = 0; r < d; ++r) {
            double acc = 0.0;
            for (Eigen::Index c = 0; c < d; ++c) acc += A_(r, c) * v[c];
            double obs_part = 0.0;
            for (Eigen::Index k = 0; k < m; ++k) obs_part += K_(r, k) * ytilde_[k];
            tmp_[r] = acc + obs_part;
        }
        for (Eigen::Index r = 0; r < d; ++r) v[r] = tmp_[r];
    }

private:
    Matrix K_;
    Matrix A_;
    Vector y_;
    std::vector<double> ytilde_;
    std::vector<double> tmp_;
};

} // namespace detail

/// In-place analysis step; row i of `eta` perturbs particle i.
inline void update_in_place(EnsembleState& ens, const Matrix& K, const ObservationModel& obs, const Vector& y,
                            const ParticleMatrix& eta)
{
    if (ens.phase != Phase::Prediction) throw std::invalid_argument("update expects a prediction ensemble");
    if (static_cast<std::size_t>(K.rows()) != ens.dim()) throw std::invalid_argument("gain has the wrong shape");
    if (static_cast<std::size_t>(eta.rows()) != ens.size() || static_cast<std::size_t>(eta.cols()) != obs.obs_dim()) {
        throw std::invalid_argument("perturbation matrix has the wrong shape");
    }
    if (static_cast<std::size_t>(y.size()) != obs.obs_dim()) {
        throw std::invalid_argument("observation has the wrong dimension");
    }
    if (K.cols() == 1 && K.rows() == 1) {
        const double k = K(0, 0);
        const double a = 1.0 - k * obs.H()(0, 0);
        const double y0 = y[0];
        for (Eigen::Index i = 0; i < ens.particles.rows(); ++i) {
            ens.particles(i, 0) = a * ens.particles(i, 0) + k * (y0 + eta(i, 0));
        }
    } else {
        detail::AffineUpdate step(K, obs, y);
        for (std::size_t i = 0; i < ens.size(); ++i) {
            step.apply(ens.particle(i), {eta.row(static_cast<Eigen::Index>(i)).data(), obs.obs_dim()});
        }
    }
    ens.phase = Phase::Updated;
}

/// Analysis step with given perturbations; row i of `eta` perturbs particle i.
inline EnsembleState update_with_perturbations(const EnsembleState& ens, const Matrix& K, const ObservationModel& obs,
                                               const Vector& y, const ParticleMatrix& eta)
{
    EnsembleState out = ens;
    update_in_place(out, K, obs, y, eta);
    return out;
}

/// P iid N(0, Gamma) perturbations, one row per particle.
template <GaussianSource G>
ParticleMatrix draw_perturbations(std::size_t P, const ObservationModel& obs, G& rng)
{
    ParticleMatrix eta(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(obs.obs_dim()));
    for (std::size_t i = 0; i < P; ++i) {
        obs.sample_noise(rng, {eta.row(static_cast<Eigen::Index>(i)).data(), obs.obs_dim()});
    }
    return eta;
}

/// Perturbed-observation update with freshly drawn eta_i ~ N(0, Gamma).
/// If `eta_out` is given it receives the perturbations that were used.
template <GaussianSource G>
EnsembleState update(const EnsembleState& ens, const Matrix& K, const ObservationModel& obs, const Vector& y, G& rng,
                     ParticleMatrix* eta_out = nullptr)
{
    ParticleMatrix eta = draw_perturbations(ens.size(), obs, rng);
    EnsembleState out = update_with_perturbations(ens, K, obs, y, eta);
    if (eta_out) *eta_out = std::move(eta);
    return out;
}

/// Empirical average (1/P) sum_i phi(v_i).
inline double empirical_average(const EnsembleState& ens, const Observable& phi)
{
    double acc = 0.0;
    for (std::size_t i = 0; i < ens.size(); ++i) acc += phi(ens.particle(i));
    return acc / static_cast<double>(ens.size());
}

/// Empirical averages of rows [first, first + count).
inline double empirical_average(const ParticleMatrix& particles, Eigen::Index first, Eigen::Index count,
                                const Observable& phi)
{
    double acc = 0.0;
    const auto d = static_cast<std::size_t>(particles.cols());
    for (Eigen::Index i = first; i < first + count; ++i) acc += phi({particles.row(i).data(), d});
    return acc / static_cast<double>(count);
}

/// Output of a filter run: qoi[n][k] = mu_n[phi_k] for n = 0..horizon.
struct EnkfRun {
    std::vector<std::vector<double>> qoi;
    std::vector<EnsembleState> ensembles;
};

template <GaussianSource G>
void enkf_cycle_in_place(EnsembleState& ens, const EnkfConfig& cfg, const DynamicsModel& model,
                         const ObservationModel& obs, const Vector& y, G& rng)
{
    predict_in_place(ens, model, cfg.N, cfg.scheme, rng);
    const Matrix K = kalman_gain(sample_covariance(ens, cfg.covariance_mode), obs);
    update_in_place(ens, K, obs, y, draw_perturbations(ens.size(), obs, rng));
}

/// One predict / covariance / gain / update cycle.
template <GaussianSource G>
EnsembleState enkf_cycle(const EnsembleState& ens, const EnkfConfig& cfg, const DynamicsModel& model,
                         const ObservationModel& obs, const Vector& y, G& rng)
{
    EnsembleState out = ens;
    enkf_cycle_in_place(out, cfg, model, obs, y, rng);
    return out;
}

/// Full EnKF recursion over a fixed observation sequence y_1..y_horizon.
/// All randomness comes from one stream seeded with `cfg.seed`.
template <GaussianSource G>
EnkfRun enkf_run(const EnkfConfig& cfg, const DynamicsModel& model, const ObservationModel& obs,
                 const std::vector<Vector>& observations, const GaussianPrior& prior,
                 const std::vector<Observable>& phis, G& rng, bool keep_ensembles = false)
{
    cfg.validate();
    if (prior.dim() != model.state_dim() || obs.state_dim() != model.state_dim()) {
        throw std::invalid_argument("prior, model and observation dimensions disagree");
    }
    EnkfRun run;
    auto record = [&](const EnsembleState& ens) {
        std::vector<double> row;
        row.reserve(phis.size());
        for (const auto& phi : phis) row.push_back(empirical_average(ens, phi));
        run.qoi.push_back(std::move(row));
        if (keep_ensembles) run.ensembles.push_back(ens);
    };
    EnsembleState ens = prior.sample_ensemble(cfg.P, rng);
    record(ens);
    for (const auto& y : observations) {
        enkf_cycle_in_place(ens, cfg, model, obs, y, rng);
        record(ens);
    }
    return run;
}

inline EnkfRun enkf_run(const EnkfConfig& cfg, const DynamicsModel& model, const ObservationModel& obs,
                        const std::vector<Vector>& observations, const GaussianPrior& prior,
                        const std::vector<Observable>& phis, bool keep_ensembles = false)
{
    RngStream rng(cfg.seed);
    return enkf_run(cfg, model, obs, observations, prior, phis, rng, keep_ensembles);
}

struct EnkfParameters {
    std::size_t N;
    std::size_t P;
};

/// P = Round(8 eps^-2), N = Round(eps^{-1/alpha}).
inline EnkfParameters enkf_parameters(double eps, double alpha = 1.0)
{
    if (!(eps > 0.0) || !(eps < 1.0)) throw std::invalid_argument("accuracy eps must lie in (0, 1)");
    if (!(alpha > 0.0)) throw std::invalid_argument("weak rate alpha must be positive");
    const auto P = round_nearest(8.0 / (eps * eps));
    const auto N = round_nearest(std::pow(eps, -1.0 / alpha));
    return {static_cast<std::size_t>(std::max<long long>(N, 1)), static_cast<std::size_t>(std::max<long long>(P, 1))};
}

} // namespace mlenkf

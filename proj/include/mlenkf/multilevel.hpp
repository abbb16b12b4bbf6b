#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "enkf.hpp"
#include "models.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace mlenkf {

enum class PlanMode {
    /// Fixed constants of the published OU / double-well experiments.
    Paper,
    /// Rate-driven choice of L, s and M_l with a free prefactor.
    Corollary,
};

inline std::string_view to_string(PlanMode m)
{
    return m == PlanMode::Paper ? "paper" : "corollary";
}

inline PlanMode plan_mode_from_name(std::string_view name)
{
    if (name == "paper") return PlanMode::Paper;
    if (name == "corollary") return PlanMode::Corollary;
    throw std::invalid_argument("unknown plan mode '" + std::string(name) + "'");
}

/// Level hierarchy of a multilevel EnKF estimator.
struct MLPlan {
    double eps = 0.0;
    double alpha = 1.0;
    double beta = 2.0;
    double s = 1.0;
    std::string s_case;
    PlanMode mode = PlanMode::Paper;
    std::size_t L = 0;
    std::vector<std::size_t> N_levels;
    std::vector<std::size_t> P_levels;
    std::vector<std::size_t> M_levels;

    std::size_t levels() const noexcept { return L + 1; }

    /// Checks the structural invariants; `runnable` additionally requires the
    /// coarse resolution of every level to divide the fine one.
    void validate(bool runnable = true) const
    {
        if (N_levels.size() != L + 1 || P_levels.size() != L + 1 || M_levels.size() != L + 1) {
            throw std::invalid_argument("plan level sequences must have L + 1 entries");
        }
        for (std::size_t l = 0; l <= L; ++l) {
            if (N_levels[l] < 1 || P_levels[l] < 1 || M_levels[l] < 1) {
                throw std::invalid_argument("plan entries N_l, P_l and M_l must be >= 1");
            }
            if (l > 0) {
                if (P_levels[l] != 2 * P_levels[l - 1]) throw std::invalid_argument("plan must satisfy P_l = 2 P_{l-1}");
                if (runnable && N_levels[l] % N_levels[l - 1] != 0) {
                    throw std::invalid_argument("N_" + std::to_string(l - 1) + " does not divide N_" + std::to_string(l));
                }
            }
        }
    }
};

/// Smallest admissible resolution-growth exponent s for rates (alpha, beta),
/// together with the label of the case that produced it.
inline std::pair<double, std::string> optimal_growth_exponent(double alpha, double beta)
{
    if (beta > 1.0 && alpha > 1.0) return {1.0 / alpha, "beta>1 & alpha>1"};
    if ((beta > 1.0 && alpha == 1.0) || (beta == 1.0 && alpha >= 1.0)) {
        return {1.0 / alpha, beta == 1.0 ? "beta=1 & alpha>=1" : "beta>1 & alpha=1"};
    }
    if ((beta >= 1.0 && alpha < 1.0) || (beta < 1.0 && alpha <= beta)) {
        return {1.0 / alpha, beta >= 1.0 ? "beta>=1 & alpha<1" : "beta<1 & alpha<=beta"};
    }
    return {1.0 / (2.0 * alpha - beta), "beta<1 & alpha>beta"};
}

struct PlanOptions {
    PlanMode mode = PlanMode::Paper;
    std::optional<double> s;
    std::size_t N0 = 2;
    std::size_t P0 = 10;
    /// Constant in front of the corollary-mode sample counts.
    double m_prefactor = 1.0;
};

/// Resolves L, N_l, P_l and M_l for a target accuracy eps.
///
/// Paper mode: L = Round(log2(1/eps)) - 1, N_l = 2^{l+1}, P_l = 10 * 2^l,
/// M_0 = 2 Round(eps^-2 L^2 / 8), M_l = Round(eps^-2 L^2 2^{-2l-3}).
/// Corollary mode follows the three-case rate formula for M_l with
/// N_l = Round(N0 2^{s l}) and P_l = P0 2^l. Every M_l is at least 1.
inline MLPlan ml_plan(double eps, double alpha = 1.0, double beta = 2.0, const PlanOptions& opt = {})
{
    if (!(eps > 0.0) || !(eps < 1.0)) throw std::invalid_argument("accuracy eps must lie in (0, 1)");
    if (!(alpha > 0.0) || !(beta > 0.0)) throw std::invalid_argument("rates alpha and beta must be positive");
    MLPlan plan;
    plan.eps = eps;
    plan.alpha = alpha;
    plan.beta = beta;
    plan.mode = opt.mode;
    const double inv_eps2 = 1.0 / (eps * eps);
    const double log2_inv_eps = std::log2(1.0 / eps);

    if (opt.mode == PlanMode::Paper) {
        plan.s = 1.0;
        plan.s_case = "fixed";
        const long long L = round_nearest(log2_inv_eps) - 1;
        plan.L = static_cast<std::size_t>(std::max<long long>(L, 0));
        const double L2 = static_cast<double>(plan.L * plan.L);
        for (std::size_t l = 0; l <= plan.L; ++l) {
            plan.N_levels.push_back(std::size_t{1} << (l + 1));
            plan.P_levels.push_back(10 * (std::size_t{1} << l));
            long long M = 0;
            if (l == 0) {
                M = 2 * round_nearest(inv_eps2 * L2 / 8.0);
            } else {
                M = round_nearest(inv_eps2 * L2 * std::exp2(-2.0 * static_cast<double>(l) - 3.0));
            }
            plan.M_levels.push_back(static_cast<std::size_t>(std::max<long long>(M, 1)));
        }
        plan.validate();
        return plan;
    }

    if (opt.s) {
        if (!(*opt.s > 0.0)) throw std::invalid_argument("growth exponent s must be positive");
        plan.s = *opt.s;
        plan.s_case = "given";
    } else {
        std::tie(plan.s, plan.s_case) = optimal_growth_exponent(alpha, beta);
    }
    const double s = plan.s;
    const double rate = std::min({1.0, (1.0 + beta * s) / 2.0, alpha * s});
    plan.L = static_cast<std::size_t>(std::ceil(log2_inv_eps / rate - 1e-12));
    const double L2 = static_cast<double>(plan.L * plan.L);
    const double strong = std::min(beta * s, 1.0);
    const double decay = (3.0 + 2.0 * s + strong) / 3.0;
    for (std::size_t l = 0; l <= plan.L; ++l) {
        const double ld = static_cast<double>(l);
        plan.N_levels.push_back(static_cast<std::size_t>(
            std::max<long long>(round_nearest(static_cast<double>(opt.N0) * std::exp2(s * ld)), 1)));
        plan.P_levels.push_back(opt.P0 * (std::size_t{1} << l));
        double term = 0.0;
        if (std::abs(strong - s) <= 1e-12) {
            term = inv_eps2 * L2 * std::exp2(-(1.0 + s) * ld);
        } else if (strong > s) {
            term = inv_eps2 * std::exp2(-decay * ld);
        } else {
            const double extra = 2.0 * (s - strong) / (3.0 * rate);
            term = std::pow(eps, -2.0 - extra) * std::exp2(-decay * ld);
        }
        const long long M = round_nearest(opt.m_prefactor * term) + 1;
        plan.M_levels.push_back(static_cast<std::size_t>(std::max<long long>(M, 1)));
    }
    plan.validate(false);
    return plan;
}

/// Fine ensemble with P_l particles at N_l substeps and, for l >= 1, two
/// coarse ensembles with P_{l-1} particles each at N_{l-1} substeps.
///
/// Fine particle i is paired with coarse1 particle i for i < P_{l-1} and with
/// coarse2 particle i - P_{l-1} otherwise. `swapped` exchanges the roles of
/// the two coarse ensembles in that pairing.
struct CoupledLevelState {
    std::size_t level = 0;
    std::size_t N_fine = 1;
    std::size_t N_coarse = 0;
    EnsembleState fine;
    EnsembleState coarse1;
    EnsembleState coarse2;
    bool swapped = false;

    std::size_t coarse_size() const noexcept { return level == 0 ? 0 : fine.size() / 2; }

    /// Coarse ensemble and local index paired with fine particle i.
    std::pair<EnsembleState*, std::size_t> partner(std::size_t i)
    {
        const std::size_t half = coarse_size();
        const bool first_half = i < half;
        EnsembleState* target = (first_half != swapped) ? &coarse1 : &coarse2;
        return {target, first_half ? i : i - half};
    }
};

/// Initial coupled triple: fine particles iid from the prior, coarse particles
/// exact copies of their fine partners.
template <GaussianSource G>
CoupledLevelState initial_coupled_state(std::size_t level, const MLPlan& plan, const GaussianPrior& prior, G& rng,
                                        bool swapped = false)
{
    if (level > plan.L) throw std::invalid_argument("level exceeds the plan's finest level");
    CoupledLevelState s;
    s.level = level;
    s.swapped = swapped;
    s.N_fine = plan.N_levels[level];
    s.fine = prior.sample_ensemble(plan.P_levels[level], rng);
    if (level == 0) return s;
    s.N_coarse = plan.N_levels[level - 1];
    const auto half = static_cast<Eigen::Index>(plan.P_levels[level - 1]);
    if (static_cast<std::size_t>(2 * half) != s.fine.size()) throw std::invalid_argument("plan must satisfy P_l = 2 P_{l-1}");
    EnsembleState first, second;
    first.particles = s.fine.particles.topRows(half);
    second.particles = s.fine.particles.bottomRows(half);
    s.coarse1 = swapped ? second : first;
    s.coarse2 = swapped ? first : second;
    return s;
}

/// What one coupled prediction/update actually consumed, for audits.
struct CoupledStepTrace {
    std::vector<NoisePath> fine_noise;
    std::vector<NoisePath> coarse_noise;
    ParticleMatrix eta;
    ParticleMatrix eta_coarse1;
    ParticleMatrix eta_coarse2;
    Matrix gain_fine;
    Matrix gain_coarse1;
    Matrix gain_coarse2;
};

/// One prediction/update cycle of a coupled triple, in place.
///
/// Prediction shares each fine noise path with the paired coarse particle.
/// Each ensemble gets its own covariance and Kalman gain. The P_l
/// perturbations are drawn once; fine particle i and its partner use the same
/// one. Level 0 is exactly one plain EnKF cycle.
template <GaussianSource G>
void coupled_step_in_place(CoupledLevelState& state, const DynamicsModel& model, const ObservationModel& obs,
                           const Vector& y, Scheme scheme, G& rng, CovarianceMode mode = CovarianceMode::Biased,
                           CoupledStepTrace* trace = nullptr)
{
    if (state.fine.phase != Phase::Updated) throw std::invalid_argument("coupled_step expects updated ensembles");
    if (state.level == 0) {
        predict_in_place(state.fine, model, state.N_fine, scheme, rng);
        const Matrix K = kalman_gain(sample_covariance(state.fine, mode), obs);
        ParticleMatrix eta = draw_perturbations(state.fine.size(), obs, rng);
        update_in_place(state.fine, K, obs, y, eta);
        if (trace) {
            trace->eta = std::move(eta);
            trace->gain_fine = K;
        }
        return;
    }

    const std::size_t P = state.fine.size();
    const std::size_t half = state.coarse_size();
    if (state.coarse1.size() != half || state.coarse2.size() != half || 2 * half != P) {
        throw std::invalid_argument("coupled state is inconsistent: coarse ensembles must hold P_l / 2 particles");
    }
    detail::Stepper fine_stepper(model, state.N_fine, scheme);
    detail::Stepper coarse_stepper(model, state.N_coarse, scheme);
    detail::SampledIncrements<G> next{rng, std::sqrt(fine_stepper.dt())};
    if (trace) {
        trace->fine_noise.clear();
        trace->coarse_noise.clear();
    }
    const std::size_t d = model.state_dim();
    detail::NoiseRecorder recorder;
    for (std::size_t i = 0; i < P; ++i) {
        auto [coarse, j] = state.partner(i);
        if (trace) {
            recorder.fine.clear();
            recorder.coarse.clear();
        }
        detail::coupled_advance(model, state.fine.particle(i), coarse->particle(j), fine_stepper, coarse_stepper, next,
                                trace ? &recorder : nullptr);
        if (trace) {
            trace->fine_noise.emplace_back(state.N_fine, d, recorder.fine);
            trace->coarse_noise.emplace_back(state.N_coarse, d, recorder.coarse);
        }
    }
    for (EnsembleState* e : {&state.fine, &state.coarse1, &state.coarse2}) {
        e->time_index += 1;
        e->phase = Phase::Prediction;
    }

    const Matrix K_fine = kalman_gain(sample_covariance(state.fine, mode), obs);
    const Matrix K_c1 = kalman_gain(sample_covariance(state.coarse1, mode), obs);
    const Matrix K_c2 = kalman_gain(sample_covariance(state.coarse2, mode), obs);

    const ParticleMatrix eta = draw_perturbations(P, obs, rng);
    const auto h = static_cast<Eigen::Index>(half);
    const ParticleMatrix eta_first = eta.topRows(h);
    const ParticleMatrix eta_second = eta.bottomRows(h);
    const ParticleMatrix& eta_c1 = state.swapped ? eta_second : eta_first;
    const ParticleMatrix& eta_c2 = state.swapped ? eta_first : eta_second;

    update_in_place(state.fine, K_fine, obs, y, eta);
    update_in_place(state.coarse1, K_c1, obs, y, eta_c1);
    update_in_place(state.coarse2, K_c2, obs, y, eta_c2);

    if (trace) {
        trace->eta = eta;
        trace->eta_coarse1 = eta_c1;
        trace->eta_coarse2 = eta_c2;
        trace->gain_fine = K_fine;
        trace->gain_coarse1 = K_c1;
        trace->gain_coarse2 = K_c2;
    }
}

/// Value-returning form of coupled_step_in_place().
template <GaussianSource G>
CoupledLevelState coupled_step(const CoupledLevelState& state, const DynamicsModel& model,
                               const ObservationModel& obs, const Vector& y, Scheme scheme, G& rng,
                               CovarianceMode mode = CovarianceMode::Biased, CoupledStepTrace* trace = nullptr)
{
    CoupledLevelState out = state;
    coupled_step_in_place(out, model, obs, y, scheme, rng, mode, trace);
    return out;
}

/// mu^{l,f}[phi] - mu^{l,c}[phi] with mu^{l,c} = (mu^{l,c1} + mu^{l,c2}) / 2 and mu^{0,c} = 0.
inline double level_difference(const CoupledLevelState& s, const Observable& phi)
{
    const double fine = empirical_average(s.fine, phi);
    if (s.level == 0) return fine;
    return fine - 0.5 * (empirical_average(s.coarse1, phi) + empirical_average(s.coarse2, phi));
}

struct LevelOptions {
    Scheme scheme = Scheme::Milstein;
    CovarianceMode covariance_mode = CovarianceMode::Biased;
    bool swap_coarse = false;
};

/// Level increments out[n][k] for n = 0..horizon and observable k of one
/// independent coupled-triple filter run.
template <GaussianSource G>
std::vector<std::vector<double>> level_increment(std::size_t level, const MLPlan& plan, const DynamicsModel& model,
                                                 const ObservationModel& obs, const std::vector<Vector>& observations,
                                                 const GaussianPrior& prior, const std::vector<Observable>& phis,
                                                 G& rng, const LevelOptions& opt = {})
{
    if (level > plan.L) throw std::invalid_argument("level exceeds the plan's finest level");
    std::vector<std::vector<double>> out;
    out.reserve(observations.size() + 1);
    auto record = [&](const CoupledLevelState& s) {
        std::vector<double> row;
        row.reserve(phis.size());
        for (const auto& phi : phis) row.push_back(level_difference(s, phi));
        out.push_back(std::move(row));
    };
    CoupledLevelState state = initial_coupled_state(level, plan, prior, rng, opt.swap_coarse);
    record(state);
    for (const auto& y : observations) {
        coupled_step_in_place(state, model, obs, y, opt.scheme, rng, opt.covariance_mode);
        record(state);
    }
    return out;
}

/// Stream of sample m on level l under an experiment seed.
inline std::uint64_t level_sample_seed(std::uint64_t seed, std::size_t level, std::size_t m)
{
    return derive_seed(seed, {0x4d4cULL, level, m});
}

inline std::vector<std::vector<double>> level_increment(std::size_t level, std::size_t m, const MLPlan& plan,
                                                        const DynamicsModel& model, const ObservationModel& obs,
                                                        const std::vector<Vector>& observations,
                                                        const GaussianPrior& prior,
                                                        const std::vector<Observable>& phis, std::uint64_t seed,
                                                        const LevelOptions& opt = {})
{
    RngStream rng(level_sample_seed(seed, level, m));
    return level_increment(level, plan, model, obs, observations, prior, phis, rng, opt);
}

/// Samples are reduced in fixed-size chunks so the summation order, and hence
/// every bit of the result, does not depend on the worker count.
inline constexpr std::size_t kReductionChunk = 64;

/// Multilevel estimate out[n][k] = sum_l (1/M_l) sum_m increment_{l,m}[n][k].
inline std::vector<std::vector<double>> mlenkf_estimate(const MLPlan& plan, const DynamicsModel& model,
                                                        const ObservationModel& obs,
                                                        const std::vector<Vector>& observations,
                                                        const GaussianPrior& prior,
                                                        const std::vector<Observable>& phis, std::uint64_t seed,
                                                        const LevelOptions& opt = {}, std::size_t jobs = 1)
{
    plan.validate();
    const std::size_t rows = observations.size() + 1;
    const std::size_t cols = phis.size();
    using Table = std::vector<std::vector<double>>;
    auto zero_table = [&] { return Table(rows, std::vector<double>(cols, 0.0)); };

    struct Chunk {
        std::size_t level, first, last;
    };
    std::vector<Chunk> chunks;
    for (std::size_t l = 0; l <= plan.L; ++l) {
        for (std::size_t m = 0; m < plan.M_levels[l]; m += kReductionChunk) {
            chunks.push_back({l, m, std::min(m + kReductionChunk, plan.M_levels[l])});
        }
    }
    std::vector<Table> partial(chunks.size());
    parallel_for(chunks.size(), jobs, [&](std::size_t c) {
        Table acc = zero_table();
        for (std::size_t m = chunks[c].first; m < chunks[c].last; ++m) {
            const Table inc = level_increment(chunks[c].level, m, plan, model, obs, observations, prior, phis, seed, opt);
            for (std::size_t n = 0; n < rows; ++n) {
                for (std::size_t k = 0; k < cols; ++k) acc[n][k] += inc[n][k];
            }
        }
        partial[c] = std::move(acc);
    });

    Table estimate = zero_table();
    std::size_t c = 0;
    for (std::size_t l = 0; l <= plan.L; ++l) {
        Table level_sum = zero_table();
        for (; c < chunks.size() && chunks[c].level == l; ++c) {
            for (std::size_t n = 0; n < rows; ++n) {
                for (std::size_t k = 0; k < cols; ++k) level_sum[n][k] += partial[c][n][k];
            }
        }
        const double M = static_cast<double>(plan.M_levels[l]);
        for (std::size_t n = 0; n < rows; ++n) {
            for (std::size_t k = 0; k < cols; ++k) estimate[n][k] += level_sum[n][k] / M;
        }
    }
    return estimate;
}

struct MultiIndexOptions {
    std::size_t N0 = 2;
    std::size_t P0 = 10;
    Scheme scheme = Scheme::Milstein;
    CovarianceMode covariance_mode = CovarianceMode::Biased;
};

/// Four-coupled mixed difference over resolution level l1 and ensemble-size
/// level l2 (experimental):
///
///   mu(N_l1, P_l2) - [mu(N_l1, P_l2-1)^1 + mu(N_l1, P_l2-1)^2] / 2
///   - mu(N_l1-1, P_l2) + [mu(N_l1-1, P_l2-1)^1 + mu(N_l1-1, P_l2-1)^2] / 2
///
/// with terms on level -1 taken as zero. All six ensembles share initial
/// conditions, driving noise (coarsened for the N_l1-1 runs) and perturbed
/// observations through the particle index, split across the two halves as in
/// coupled_step(). Returns out[n][k] for n = 0..horizon.
template <GaussianSource G>
std::vector<std::vector<double>> mienkf_delta(std::size_t l1, std::size_t l2, const DynamicsModel& model,
                                              const ObservationModel& obs, const std::vector<Vector>& observations,
                                              const GaussianPrior& prior, const std::vector<Observable>& phis, G& rng,
                                              const MultiIndexOptions& opt = {},
                                              const ParticleMatrix* initial = nullptr)
{
    const std::size_t Nf = opt.N0 << l1;
    const std::size_t Pf = opt.P0 << l2;
    const bool res_diff = l1 > 0;
    const bool size_diff = l2 > 0;
    const std::size_t Nc = res_diff ? Nf / 2 : 0;
    const std::size_t Pc = size_diff ? Pf / 2 : 0;
    if (size_diff && 2 * Pc != Pf) throw std::invalid_argument("ensemble-size levels must double");
    const std::size_t d = model.state_dim();

    // Ensembles: 0 = (Nf, Pf), 1/2 = (Nf, Pc) halves, 3 = (Nc, Pf), 4/5 = (Nc, Pc) halves.
    std::array<EnsembleState, 6> ens;
    if (initial) {
        if (static_cast<std::size_t>(initial->rows()) != Pf || static_cast<std::size_t>(initial->cols()) != d) {
            throw std::invalid_argument("initial ensemble has the wrong shape");
        }
        ens[0].particles = *initial;
    } else {
        ens[0] = prior.sample_ensemble(Pf, rng);
    }
    const auto hc = static_cast<Eigen::Index>(Pc);
    if (size_diff) {
        ens[1].particles = ens[0].particles.topRows(hc);
        ens[2].particles = ens[0].particles.bottomRows(hc);
    }
    if (res_diff) {
        ens[3].particles = ens[0].particles;
        if (size_diff) {
            ens[4].particles = ens[1].particles;
            ens[5].particles = ens[2].particles;
        }
    }
    std::array<bool, 6> active{true, size_diff, size_diff, res_diff, res_diff && size_diff, res_diff && size_diff};

    auto delta = [&](const Observable& phi) {
        double value = empirical_average(ens[0], phi);
        if (size_diff) value -= 0.5 * (empirical_average(ens[1], phi) + empirical_average(ens[2], phi));
        if (res_diff) value -= empirical_average(ens[3], phi);
        if (res_diff && size_diff) value += 0.5 * (empirical_average(ens[4], phi) + empirical_average(ens[5], phi));
        return value;
    };
    std::vector<std::vector<double>> out;
    auto record = [&] {
        std::vector<double> row;
        for (const auto& phi : phis) row.push_back(delta(phi));
        out.push_back(std::move(row));
    };
    record();

    detail::Stepper fine(model, Nf, opt.scheme);
    std::optional<detail::Stepper> coarse;
    if (res_diff) coarse.emplace(model, Nc, opt.scheme);
    for (const auto& y : observations) {
        for (std::size_t i = 0; i < Pf; ++i) {
            const NoisePath path = NoisePath::sample(Nf, d, rng);
            const std::size_t half = (size_diff && i >= Pc) ? 2 : 1;
            const std::size_t j = (size_diff && i >= Pc) ? i - Pc : i;
            if (res_diff) {
                detail::coupled_advance(model, ens[0].particle(i), ens[3].particle(i), fine, *coarse,
                                        detail::PathIncrements{path});
                if (size_diff) {
                    detail::coupled_advance(model, ens[half].particle(j), ens[half + 3].particle(j), fine, *coarse,
                                            detail::PathIncrements{path});
                }
            } else {
                detail::advance(ens[0].particle(i), fine, detail::PathIncrements{path});
                if (size_diff) detail::advance(ens[half].particle(j), fine, detail::PathIncrements{path});
            }
        }
        const ParticleMatrix eta = draw_perturbations(Pf, obs, rng);
        for (std::size_t e = 0; e < ens.size(); ++e) {
            if (!active[e]) continue;
            ens[e].phase = Phase::Prediction;
            const Matrix K = kalman_gain(sample_covariance(ens[e], opt.covariance_mode), obs);
            if (e == 0 || e == 3) {
                ens[e] = update_with_perturbations(ens[e], K, obs, y, eta);
            } else {
                const ParticleMatrix part = (e == 1 || e == 4) ? ParticleMatrix(eta.topRows(hc))
                                                               : ParticleMatrix(eta.bottomRows(hc));
                ens[e] = update_with_perturbations(ens[e], K, obs, y, part);
            }
            ens[e].time_index += 1;
        }
        record();
    }
    return out;
}

} // namespace mlenkf

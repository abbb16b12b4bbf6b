#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include <mlenkf/multilevel.hpp>

#include "support.hpp"

using namespace mlenkf;

namespace {

const DynamicsModel kOu = DynamicsModel::ornstein_uhlenbeck(0.5);
const ObservationModel kObs = ObservationModel::scalar(1.0, 0.1);
const GaussianPrior kPrior = GaussianPrior::scalar(0.0, 0.1);

std::vector<Vector> observations(std::initializer_list<double> ys)
{
    std::vector<Vector> out;
    for (double y : ys) out.push_back(Vector::Constant(1, y));
    return out;
}

MLPlan small_plan(std::size_t L, std::size_t M = 1)
{
    MLPlan p;
    p.eps = 0.1;
    p.L = L;
    for (std::size_t l = 0; l <= L; ++l) {
        p.N_levels.push_back(std::size_t{2} << l);
        p.P_levels.push_back(std::size_t{10} << l);
        p.M_levels.push_back(M);
    }
    return p;
}

} // namespace

TEST(MlPlan, FixedModeConstantsAtEpsTwoToMinusFour)
{
    const MLPlan p = ml_plan(0x1p-4);
    EXPECT_EQ(p.L, 3u);
    EXPECT_EQ(p.N_levels, (std::vector<std::size_t>{2, 4, 8, 16}));
    EXPECT_EQ(p.P_levels, (std::vector<std::size_t>{10, 20, 40, 80}));
    EXPECT_EQ(p.M_levels, (std::vector<std::size_t>{576, 72, 18, 5}));
    EXPECT_EQ(p.s, 1.0);
}

TEST(MlPlan, FixedModeInvariantsOverTheGrid)
{
    for (int k = 2; k <= 10; ++k) {
        const MLPlan p = ml_plan(std::exp2(-k));
        EXPECT_EQ(p.L, static_cast<std::size_t>(k - 1));
        for (std::size_t l = 0; l <= p.L; ++l) {
            EXPECT_GE(p.M_levels[l], 1u);
            EXPECT_EQ(p.P_levels[l], 10u << l);
            EXPECT_EQ(p.N_levels[l], 2u << l);
            if (l > 0) {
                EXPECT_LE(p.M_levels[l], p.M_levels[l - 1]);
            }
        }
    }
}

TEST(MlPlan, Rejections)
{
    EXPECT_THROW(ml_plan(1.0), std::invalid_argument);
    EXPECT_THROW(ml_plan(0.0), std::invalid_argument);
    EXPECT_THROW(ml_plan(0.1, 0.0), std::invalid_argument);
}

TEST(MlPlan, GrowthExponentCases)
{
    const auto [s1, c1] = optimal_growth_exponent(1.0, 2.0);
    EXPECT_EQ(s1, 1.0);
    EXPECT_EQ(c1, "beta>1 & alpha=1");
    const auto [s2, c2] = optimal_growth_exponent(1.0, 0.5);
    EXPECT_DOUBLE_EQ(s2, 2.0 / 3.0);
    EXPECT_EQ(c2, "beta<1 & alpha>beta");
    EXPECT_DOUBLE_EQ(optimal_growth_exponent(2.0, 2.0).first, 0.5);
    EXPECT_DOUBLE_EQ(optimal_growth_exponent(0.5, 1.0).first, 2.0);
    EXPECT_DOUBLE_EQ(optimal_growth_exponent(0.4, 0.5).first, 2.5);
    EXPECT_DOUBLE_EQ(optimal_growth_exponent(1.0, 1.0).first, 1.0);
}

TEST(MlPlan, RateModeClampsAndChoosesS)
{
    PlanOptions opt;
    opt.mode = PlanMode::Corollary;
    for (auto [alpha, beta] : {std::pair{1.0, 2.0}, std::pair{1.0, 0.5}, std::pair{1.0, 1.0}, std::pair{2.0, 3.0},
                               std::pair{0.5, 1.0}}) {
        for (double eps : {0.3, 0.1, 0.01}) {
            const MLPlan p = ml_plan(eps, alpha, beta, opt);
            EXPECT_EQ(p.levels(), p.M_levels.size());
            for (std::size_t l = 0; l <= p.L; ++l) {
                EXPECT_GE(p.M_levels[l], 1u);
                EXPECT_GE(p.N_levels[l], 1u);
                EXPECT_EQ(p.P_levels[l], 10u << l);
            }
        }
    }
    const MLPlan frac = ml_plan(0.01, 1.0, 0.5, opt);
    EXPECT_DOUBLE_EQ(frac.s, 2.0 / 3.0);
    EXPECT_THROW(frac.validate(true), std::invalid_argument);
    opt.s = 1.0;
    EXPECT_NO_THROW(ml_plan(0.01, 1.0, 0.5, opt).validate(true));
}

TEST(CoupledLevel, InitialFineEqualsCoarsePartner)
{
    const MLPlan plan = ml_plan(0x1p-4);
    RngStream rng(1);
    for (bool swapped : {false, true}) {
        auto s = initial_coupled_state(2, plan, kPrior, rng, swapped);
        ASSERT_EQ(s.fine.size(), 40u);
        ASSERT_EQ(s.coarse1.size(), 20u);
        ASSERT_EQ(s.coarse2.size(), 20u);
        for (std::size_t i = 0; i < 40; ++i) {
            auto [c, j] = s.partner(i);
            EXPECT_EQ(s.fine.particle(i)[0], c->particle(j)[0]);
        }
    }
}

TEST(CoupledLevel, LevelZeroIsOnePlainEnkfCycle)
{
    const MLPlan plan = ml_plan(0x1p-4);
    RngStream a(50), b(50);
    auto state = initial_coupled_state(0, plan, kPrior, a);
    EnkfConfig cfg;
    cfg.N = plan.N_levels[0];
    cfg.P = plan.P_levels[0];
    EnsembleState ens = kPrior.sample_ensemble(cfg.P, b);
    const Vector y = Vector::Constant(1, 0.3);
    for (int n = 0; n < 3; ++n) {
        state = coupled_step(state, kOu, kObs, y, Scheme::Milstein, a);
        ens = enkf_cycle(ens, cfg, kOu, kObs, y, b);
        EXPECT_EQ(state.fine.particles, ens.particles);
    }
}

TEST(CoupledLevel, NoiseIsSharedThroughCoarsening)
{
    const MLPlan plan = ml_plan(0x1p-5);
    RngStream rng(3);
    auto state = initial_coupled_state(3, plan, kPrior, rng);
    for (int n = 0; n < 3; ++n) {
        CoupledStepTrace trace;
        state = coupled_step(state, DynamicsModel::double_well(), kObs, Vector::Constant(1, 0.1), Scheme::Milstein,
                             rng, CovarianceMode::Biased, &trace);
        ASSERT_EQ(trace.fine_noise.size(), state.fine.size());
        for (std::size_t i = 0; i < trace.fine_noise.size(); ++i) {
            EXPECT_EQ(trace.fine_noise[i].coarsen(2), trace.coarse_noise[i]);
        }
    }
}

TEST(CoupledLevel, PerturbationsAreSharedWithThePartner)
{
    const MLPlan plan = ml_plan(0x1p-4);
    for (bool swapped : {false, true}) {
        RngStream rng(4);
        auto state = initial_coupled_state(2, plan, kPrior, rng, swapped);
        CoupledStepTrace trace;
        state = coupled_step(state, kOu, kObs, Vector::Constant(1, 0.2), Scheme::Milstein, rng,
                             CovarianceMode::Biased, &trace);
        const std::size_t half = state.coarse_size();
        for (std::size_t i = 0; i < state.fine.size(); ++i) {
            const bool first = i < half;
            const auto& partner_eta = (first != swapped) ? trace.eta_coarse1 : trace.eta_coarse2;
            EXPECT_EQ(trace.eta(static_cast<Eigen::Index>(i), 0),
                      partner_eta(static_cast<Eigen::Index>(first ? i : i - half), 0));
        }
    }
}

TEST(CoupledLevel, ZeroNoiseGapIsTheDeterministicDiscretisationGap)
{
    // Gamma so large that the gain rounds away: the update leaves the prediction untouched.
    const ObservationModel flat = ObservationModel::scalar(1.0, 1e300);
    const MLPlan plan = ml_plan(0x1p-4);
    RngStream init(5);
    const auto start = initial_coupled_state(2, plan, kPrior, init);
    ZeroGaussian zero;
    const Vector y = Vector::Constant(1, 0.0);

    for (Scheme scheme : {Scheme::Milstein, Scheme::Exact}) {
        const auto out = coupled_step(start, kOu, flat, y, scheme, zero);
        auto s = start;
        for (std::size_t i = 0; i < s.fine.size(); ++i) {
            const Vector u = Vector::Constant(1, s.fine.particle(i)[0]);
            const auto [f, c] = simulate_coupled_step(kOu, u, u, NoisePath::zeros(plan.N_levels[2], 1),
                                                      plan.N_levels[1], scheme);
            auto [coarse, j] = s.partner(i);
            const double coarse_out = (coarse == &s.coarse1 ? out.coarse1 : out.coarse2).particle(j)[0];
            EXPECT_EQ(out.fine.particle(i)[0] - coarse_out, f[0] - c[0]);
            if (scheme == Scheme::Exact) {
                EXPECT_NEAR(out.fine.particle(i)[0], coarse_out, 1e-15);
            }
        }
    }
}

TEST(LevelIncrement, LevelZeroEqualsPlainEnkf)
{
    const MLPlan plan = ml_plan(0x1p-4);
    const auto ys = observations({0.1, 0.5, -0.2});
    const std::vector<Observable> phis{observables::first_moment(), observables::second_moment()};
    RngStream a(8), b(8);
    const auto inc = level_increment(0, plan, kOu, kObs, ys, kPrior, phis, a);
    EnkfConfig cfg;
    cfg.N = 2;
    cfg.P = 10;
    const auto run = enkf_run(cfg, kOu, kObs, ys, kPrior, phis, b);
    EXPECT_EQ(inc, run.qoi);
}

TEST(LevelIncrement, ConstantObservableCancels)
{
    const MLPlan plan = ml_plan(0x1p-4);
    const auto ys = observations({0.1, 0.5});
    const std::vector<Observable> phis{observables::constant(1.5)};
    for (std::size_t l = 0; l <= plan.L; ++l) {
        const auto inc = level_increment(l, 0, plan, kOu, kObs, ys, kPrior, phis, 1);
        for (const auto& row : inc) EXPECT_EQ(row[0], l == 0 ? 1.5 : 0.0);
    }
}

TEST(LevelIncrement, SampleRerunIsBitIdentical)
{
    const MLPlan plan = ml_plan(0x1p-4);
    const auto ys = observations({0.1, 0.5});
    const std::vector<Observable> phis{observables::first_moment()};
    const auto a = level_increment(2, 7, plan, kOu, kObs, ys, kPrior, phis, 42);
    const auto b = level_increment(2, 7, plan, kOu, kObs, ys, kPrior, phis, 42);
    const auto c = level_increment(2, 8, plan, kOu, kObs, ys, kPrior, phis, 42);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    EXPECT_THROW(level_increment(4, 0, plan, kOu, kObs, ys, kPrior, phis, 42), std::invalid_argument);
}

TEST(LevelIncrement, CoarsePairSwapLeavesTheMeanUnchanged)
{
    const MLPlan plan = ml_plan(0x1p-4);
    const auto ys = observations({0.3, -0.1, 0.2});
    const std::vector<Observable> phis{observables::first_moment()};
    LevelOptions swapped;
    swapped.swap_coarse = true;
    std::vector<double> a, b;
    for (std::size_t m = 0; m < 10000; ++m) {
        a.push_back(level_increment(1, m, plan, kOu, kObs, ys, kPrior, phis, 100)[3][0]);
        b.push_back(level_increment(1, m, plan, kOu, kObs, ys, kPrior, phis, 200, swapped)[3][0]);
    }
    const double se = std::hypot(testing_support::std_error(a), testing_support::std_error(b));
    EXPECT_LE(std::abs(testing_support::mean(a) - testing_support::mean(b)), 3.0 * se);
}

TEST(MlenkfEstimate, SingleLevelCollapsesToOneEnkfRun)
{
    MLPlan plan = small_plan(0, 1);
    const auto ys = observations({0.1, 0.5, -0.3});
    const std::vector<Observable> phis{observables::first_moment()};
    const auto est = mlenkf_estimate(plan, kOu, kObs, ys, kPrior, phis, 9);
    EnkfConfig cfg;
    cfg.N = 2;
    cfg.P = 10;
    cfg.seed = level_sample_seed(9, 0, 0);
    EXPECT_EQ(est, enkf_run(cfg, kOu, kObs, ys, kPrior, phis).qoi);
}

TEST(MlenkfEstimate, ConstantOneIsPreserved)
{
    const MLPlan plan = ml_plan(0x1p-4);
    const auto est = mlenkf_estimate(plan, kOu, kObs, observations({0.1, 0.2}), kPrior, {observables::constant(1.0)}, 3);
    for (const auto& row : est) EXPECT_DOUBLE_EQ(row[0], 1.0);
}

TEST(MlenkfEstimate, BitIdenticalForAnyWorkerCount)
{
    const MLPlan plan = ml_plan(0x1p-5);
    const auto ys = observations({0.1, 0.2, -0.4});
    const std::vector<Observable> phis{observables::first_moment(), observables::second_moment()};
    const auto one = mlenkf_estimate(plan, kOu, kObs, ys, kPrior, phis, 5, {}, 1);
    const auto eight = mlenkf_estimate(plan, kOu, kObs, ys, kPrior, phis, 5, {}, 8);
    const auto three = mlenkf_estimate(plan, kOu, kObs, ys, kPrior, phis, 5, {}, 3);
    EXPECT_EQ(one, eight);
    EXPECT_EQ(one, three);
}

TEST(MlenkfEstimate, TelescopingMatchesFinestEnkf)
{
    const MLPlan plan = small_plan(2);
    const auto ys = observations({0.4, -0.2, 0.3});
    const std::vector<Observable> phis{observables::second_moment()};
    const std::size_t reps = 10000;
    std::vector<double> telescoped, finest;
    for (std::size_t r = 0; r < reps; ++r) {
        double sum = 0.0;
        for (std::size_t l = 0; l <= plan.L; ++l) sum += level_increment(l, r, plan, kOu, kObs, ys, kPrior, phis, 11).back()[0];
        telescoped.push_back(sum);
        EnkfConfig cfg;
        cfg.N = plan.N_levels[2];
        cfg.P = plan.P_levels[2];
        cfg.seed = derive_seed(12, {r});
        finest.push_back(enkf_run(cfg, kOu, kObs, ys, kPrior, phis).qoi.back()[0]);
    }
    const double se = std::hypot(testing_support::std_error(telescoped), testing_support::std_error(finest));
    EXPECT_LE(std::abs(testing_support::mean(telescoped) - testing_support::mean(finest)), 3.0 * se);
}

TEST(Mienkf, ConstantObservableCancels)
{
    const auto ys = observations({0.2, 0.1});
    RngStream rng(3);
    for (std::size_t l1 : {1u, 2u}) {
        for (std::size_t l2 : {1u, 2u}) {
            const auto d = mienkf_delta(l1, l2, kOu, kObs, ys, kPrior, {observables::constant(2.5)}, rng);
            for (const auto& row : d) EXPECT_EQ(row[0], 0.0);
        }
    }
}

TEST(Mienkf, ResolutionIndependentDynamicsGiveZero)
{
    const auto ys = observations({0.2, 0.1, -0.3});
    RngStream init(4);
    MultiIndexOptions opt;
    opt.scheme = Scheme::Exact;
    const ParticleMatrix start = kPrior.sample_ensemble(opt.P0 << 2, init).particles;
    ZeroGaussian zero;
    const auto d = mienkf_delta(2, 2, kOu, kObs, ys, kPrior, {observables::first_moment()}, zero, opt, &start);
    for (const auto& row : d) EXPECT_NEAR(row[0], 0.0, 1e-14);
}

TEST(Mienkf, DegenerateIndicesReduceToLowerOrderDifferences)
{
    const auto ys = observations({0.2, 0.1});
    const std::vector<Observable> phis{observables::first_moment()};
    RngStream a(6), b(6);
    EnkfConfig cfg;
    cfg.N = 2;
    cfg.P = 10;
    EXPECT_EQ(mienkf_delta(0, 0, kOu, kObs, ys, kPrior, phis, a), enkf_run(cfg, kOu, kObs, ys, kPrior, phis, b).qoi);

    // l2 = 0: a pure resolution difference of one coupled pair of ensembles.
    RngStream c(7);
    const auto res = mienkf_delta(1, 0, kOu, kObs, ys, kPrior, {observables::constant(1.0)}, c);
    for (const auto& row : res) EXPECT_EQ(row[0], 0.0);
}

TEST(Mienkf, MixedDifferenceDecays)
{
    const auto ys = observations({0.4, -0.2});
    const std::vector<Observable> phis{observables::first_moment()};
    std::vector<double> lv, lmean;
    for (std::size_t l = 1; l <= 4; ++l) {
        std::vector<double> samples;
        for (std::size_t m = 0; m < 1000; ++m) {
            auto rng = RngStream::child(21, {l, m});
            samples.push_back(mienkf_delta(l, l, kOu, kObs, ys, kPrior, phis, rng).back()[0]);
        }
        lv.push_back(static_cast<double>(l));
        lmean.push_back(std::log2(std::sqrt(testing_support::mean([&] {
            std::vector<double> sq;
            for (double s : samples) sq.push_back(s * s);
            return sq;
        }()))));
    }
    // Root-mean-square size of the mixed difference.
    EXPECT_LE(testing_support::slope(lv, lmean), -1.0);
}

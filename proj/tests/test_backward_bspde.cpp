// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "bspde/backward_bspde.hpp"
#include "bspde/errors.hpp"

using namespace bspde;

namespace {

constexpr double kPi = std::numbers::pi;

BspdeProblem zero_driver_problem(const TimeGrid& grid, PathField terminal) {
    BspdeProblem p;
    p.grid = grid;
    p.lipschitz = 0.0;
    p.driver = [](const DriverArgs& args) { return PathField(PathField::Zero(1, args.p.cols())); };
    p.terminal = [terminal](const BrownianBatch&) { return terminal; };
    return p;
}

TimeFunction linear_amplitude() {
    return {[](double t) { return 1.0 + 0.5 * t; }, [](double) { return 0.5; }};
}

}  // namespace

TEST(CondExpect, RecoversPolynomialExactly) {
    const TimeGrid grid = make_time_grid(1.0, 4);
    const BrownianBatch batch = sample_brownian(grid, 500, 3);
    const Vector w = batch.W(2);
    Matrix values(w.size(), 2);
    values.col(0) = (2.0 + 3.0 * w.array() - w.array().cube()).matrix();
    values.col(1) = (w.array().square() * w.array().square() - 1.0).matrix();
    RegressionBasis basis;
    const Matrix fit = cond_expect(basis, w, values);
    EXPECT_LT((fit - values).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(CondExpect, ProjectsOutIndependentNoise) {
    const TimeGrid grid = make_time_grid(1.0, 4);
    const BrownianBatch batch = sample_brownian(grid, 20000, 4);
    const Vector w = batch.W(2);
    const Vector noise = batch.dW(3);
    Matrix values(w.size(), 1);
    values.col(0) = (w.array() + 5.0 * noise.array()).matrix();
    RegressionDiagnostics diag;
    const Matrix fit = cond_expect(RegressionBasis{}, w, values, Matrix(), &diag);
    // E[values | W] = w; the RMS fit error is O(noise sd * sqrt(features / n)).
    const double rms = std::sqrt((fit.col(0) - w).squaredNorm() / w.size());
    EXPECT_LT(rms, 0.1);
    EXPECT_GE(diag.condition_number, 1.0);
    EXPECT_EQ(diag.features, 5);
}

TEST(CondExpect, Preconditions) {
    const Vector w = Vector::LinSpaced(5, -1.0, 1.0);
    const Matrix values = Matrix::Ones(5, 1);
    RegressionBasis basis;  // degree 4 needs more than 5 paths
    EXPECT_THROW(cond_expect(basis, w, values), InvalidArgument);

    // Two distinct regressor values cannot support degree 4 without ridge.
    Vector two(40);
    for (int i = 0; i < 40; ++i) two(i) = i % 2 ? 1.0 : -1.0;
    RegressionBasis no_ridge;
    no_ridge.ridge = 0.0;
    EXPECT_THROW(cond_expect(no_ridge, two, Matrix::Ones(40, 1)), NumericFailure);
    EXPECT_NO_THROW(cond_expect(RegressionBasis{}, two, Matrix::Ones(40, 1)));
}

TEST(SolveBackward, DeterministicModeDecay) {
    const FemSystem fem = assemble(build_mesh(2));
    const TimeGrid grid = make_time_grid(0.2, 2);  // tau = 0.1
    const BrownianBatch batch = sample_brownian(grid, 200, 1);
    const PathField v = PathField::Constant(1, 1, std::sqrt(3.0));  // lambda = 12
    RegressionBasis exact;
    exact.ridge = 0.0;
    const BackwardSolution sol = solve_backward(zero_driver_problem(grid, v), fem, batch, exact);
    for (int r = 0; r < batch.n_paths; ++r) {
        EXPECT_NEAR(sol.p[1](r, 0), v(0, 0) / 2.2, 1e-12);
        EXPECT_NEAR(sol.z[1](r, 0), 0.0, 1e-10);
    }
    // The default ridge only adds a small bias.
    const BackwardSolution ridged = solve_backward(zero_driver_problem(grid, v), fem, batch, RegressionBasis{});
    EXPECT_LT((ridged.p[1].array() - v(0, 0) / 2.2).abs().maxCoeff(), 1e-7);
    RegressionBasis plain = exact;
    plain.z_estimator = ZEstimator::Plain;
    const BackwardSolution sol_plain = solve_backward(zero_driver_problem(grid, v), fem, batch, plain);
    EXPECT_NEAR(sol_plain.p[1](0, 0), v(0, 0) / 2.2, 1e-12);
}

TEST(SolveBackward, ZeroDataGivesZeroSolution) {
    const FemSystem fem = assemble(build_mesh(8));
    const TimeGrid grid = make_time_grid(1.0, 8);
    const BrownianBatch batch = sample_brownian(grid, 100, 2);
    const BackwardSolution sol =
        solve_backward(zero_driver_problem(grid, PathField::Zero(1, fem.dofs())), fem, batch, RegressionBasis{});
    for (const auto& p : sol.p) EXPECT_EQ(p.cwiseAbs().maxCoeff(), 0.0);
    for (const auto& z : sol.z) EXPECT_EQ(z.cwiseAbs().maxCoeff(), 0.0);
}

TEST(SolveBackward, RejectsNonContractivePicard) {
    const FemSystem fem = assemble(build_mesh(4));
    const TimeGrid grid = make_time_grid(1.0, 4);  // tau = 0.25
    BspdeProblem p = zero_driver_problem(grid, PathField::Zero(1, fem.dofs()));
    p.lipschitz = 2.0;
    EXPECT_THROW(solve_backward(p, fem, sample_brownian(grid, 50, 1), RegressionBasis{}), InvalidArgument);
    p.lipschitz = 1.9;
    EXPECT_NO_THROW(solve_backward(p, fem, sample_brownian(grid, 50, 1), RegressionBasis{}));
}

TEST(SolveBackward, TerminalAndMeasurability) {
    const FemSystem fem = assemble(build_mesh(8));
    const TimeGrid grid = make_time_grid(1.0, 32);
    BrownianBatch batch = sample_brownian(grid, 400, 5);
    // Paths 0 and 1 share W(t_0..t_16) but differ afterwards.
    const int j = 16;
    for (int c = 0; c < j; ++c) batch.increments(1, c) = batch.increments(0, c);
    accumulate_paths(batch);
    const ManufacturedCase mc = manufactured_problem(linear_amplitude(), 1.0, fem, grid);
    const BackwardSolution sol = solve_backward(mc.problem, fem, batch, RegressionBasis{});
    const PathField terminal = mc.problem.terminal(batch);
    EXPECT_TRUE((sol.p[grid.J].array() == terminal.array()).all());
    EXPECT_LT((sol.p[j].row(0) - sol.p[j].row(1)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((sol.z[j].row(0) - sol.z[j].row(1)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GT((sol.p[j + 1].row(0) - sol.p[j + 1].row(1)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(SolveBackward, PicardDiagnostics) {
    const FemSystem fem = assemble(build_mesh(8));
    const TimeGrid grid = make_time_grid(1.0, 32);
    const ManufacturedCase mc = manufactured_problem(linear_amplitude(), 1.0, fem, grid);
    PicardOptions picard;
    picard.max_iters = 50;
    const BackwardSolution sol = solve_backward(mc.problem, fem, sample_brownian(grid, 300, 6), RegressionBasis{}, picard);
    EXPECT_TRUE(sol.picard_converged);
    // Contraction factor tau*M_lip ~ 0.3 reaches 1e-12 within ~25 iterations.
    for (int it : sol.picard_iterations) {
        EXPECT_GE(it, 2);
        EXPECT_LE(it, 30);
    }
    picard.max_iters = 2;
    const BackwardSolution capped = solve_backward(mc.problem, fem, sample_brownian(grid, 300, 6), RegressionBasis{}, picard);
    EXPECT_FALSE(capped.picard_converged);
    for (int it : capped.picard_iterations) EXPECT_EQ(it, 2);
}

TEST(SolveBackward, LinearSuperposition) {
    const FemSystem fem = assemble(build_mesh(8));
    const TimeGrid grid = make_time_grid(1.0, 16);
    const BrownianBatch batch = sample_brownian(grid, 500, 7);
    const Vector phi1 = l2_project(fem, [](double x) { return std::sin(kPi * x); });
    const Vector phi2 = l2_project(fem, [](double x) { return x * (1 - x) * (x - 0.3); });
    const auto make = [&](double c1, double c2) {
        BspdeProblem p;
        p.grid = grid;
        p.lipschitz = 3.0;
        p.driver = [](const DriverArgs& a) -> PathField { return 2.0 * a.p - 1.0 * a.z; };
        p.terminal = [=](const BrownianBatch& b) -> PathField {
            const Vector w = b.W(b.grid.J);
            return c1 * (1.0 + w.array()).matrix() * phi1.transpose() +
                   c2 * w.array().square().matrix() * phi2.transpose();
        };
        return p;
    };
    const auto a = solve_backward(make(1, 0), fem, batch, RegressionBasis{});
    const auto b = solve_backward(make(0, 1), fem, batch, RegressionBasis{});
    const auto ab = solve_backward(make(1, 1), fem, batch, RegressionBasis{});
    for (int j = 0; j <= grid.J; ++j) EXPECT_LT((ab.p[j] - a.p[j] - b.p[j]).cwiseAbs().maxCoeff(), 1e-8);
    for (int j = 0; j < grid.J; ++j) EXPECT_LT((ab.z[j] - a.z[j] - b.z[j]).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(ManufacturedProblem, RejectsVanishingAmplitude) {
    const FemSystem fem = assemble(build_mesh(8));
    const TimeGrid grid = make_time_grid(1.0, 8);
    const TimeFunction bad{[](double t) { return 0.5 - t; }, [](double) { return -1.0; }};
    EXPECT_THROW(manufactured_problem(bad, 1.0, fem, grid), InvalidArgument);
    const ManufacturedCase mc = manufactured_problem(linear_amplitude(), 1.0, fem, grid);
    EXPECT_NEAR(mc.problem.lipschitz, kPi * kPi - 1.0 / 3.0, 1e-9);
}

TEST(ErrorNorms, ExactSamplesGiveProjectionFloor) {
    const FemSystem fem = assemble(build_mesh(8));
    const TimeGrid grid = make_time_grid(1.0, 8);
    const BrownianBatch batch = sample_brownian(grid, 50, 8);
    const ManufacturedCase mc = manufactured_problem(linear_amplitude(), 1.0, fem, grid);
    const SpatialProfile& prof = mc.p_exact.profile;
    BackwardSolution sol;
    for (int j = 0; j <= grid.J; ++j) {
        Vector s(batch.n_paths), sz(batch.n_paths);
        for (int r = 0; r < batch.n_paths; ++r) {
            s(r) = mc.p_exact.amplitude(grid.t(j), batch.W(j)(r));
            sz(r) = mc.z_exact.amplitude(grid.t(j), batch.W(j)(r));
        }
        sol.p.push_back(s * prof.projection.transpose());
        if (j < grid.J) {
            sol.z.push_back(sz * prof.projection.transpose());
            sol.q.push_back(sol.p.back());
            sol.f.push_back(sol.p.back());
        }
    }
    const ErrorNorms e = error_norms(sol, mc.p_exact, mc.z_exact, fem, grid, batch);
    // ||sin - Q_h sin||^2 = 1/2 - (Q_h sin, sin).
    const double floor = std::sqrt(0.5 - prof.projection.dot(prof.load));
    double sup = 0.0, zsum = 0.0;
    for (int j = 0; j <= grid.J; ++j) {
        double m = 0.0, mz = 0.0;
        for (int r = 0; r < batch.n_paths; ++r) {
            m += std::pow(mc.p_exact.amplitude(grid.t(j), batch.W(j)(r)), 2);
            mz += std::pow(mc.z_exact.amplitude(grid.t(j), batch.W(j)(r)), 2);
        }
        sup = std::max(sup, m / batch.n_paths);
        if (j < grid.J) zsum += grid.tau * mz / batch.n_paths;
    }
    EXPECT_NEAR(e.p_sup_l2, std::sqrt(sup) * floor, 1e-6 * floor);
    EXPECT_NEAR(e.z_l2_l2, std::sqrt(zsum) * floor, 1e-6 * floor);
    EXPECT_LT(floor, 0.01);
}

TEST(ErrorNorms, ZeroVersusZero) {
    const FemSystem fem = assemble(build_mesh(4));
    const TimeGrid grid = make_time_grid(1.0, 4);
    const BrownianBatch batch = sample_brownian(grid, 10, 9);
    SeparableField zero{[](double, double) { return 0.0; }, sine_profile(fem)};
    BackwardSolution sol;
    for (int j = 0; j <= grid.J; ++j) sol.p.push_back(PathField::Zero(10, fem.dofs()));
    for (int j = 0; j < grid.J; ++j) {
        sol.q.push_back(PathField::Zero(10, fem.dofs()));
        sol.z.push_back(PathField::Zero(10, fem.dofs()));
        sol.f.push_back(PathField::Zero(10, fem.dofs()));
    }
    const ErrorNorms e = error_norms(sol, zero, zero, fem, grid, batch);
    EXPECT_EQ(e.p_sup_l2, 0.0);
    EXPECT_EQ(e.p_l2_h1, 0.0);
    EXPECT_EQ(e.z_l2_l2, 0.0);
}

TEST(ErrorNorms, ManufacturedErrorsDecreaseAtLeastFirstOrder) {
    // Theorem-level rate is first order; the energy (H^1) norm attains it,
    // the L2-type norms converge faster on this smooth solution.
    const TimeGrid grid = make_time_grid(1.0, 128);
    const BrownianBatch batch = sample_brownian(grid, 4000, 10);
    std::vector<ErrorNorms> errs;
    for (int cells : {8, 16}) {
        const FemSystem fem = assemble(build_mesh(cells));
        const ManufacturedCase mc = manufactured_problem(linear_amplitude(), 1.0, fem, grid);
        ErrorAccumulator acc(fem, grid, batch, mc.p_exact, mc.z_exact);
        BackwardOptions opt;
        opt.store_fields = false;
        opt.observers.push_back(acc.observer());
        solve_backward(mc.problem, fem, batch, RegressionBasis{}, PicardOptions{}, opt);
        errs.push_back(acc.result());
    }
    const double h1_ratio = errs[0].p_l2_h1 / errs[1].p_l2_h1;
    EXPECT_GE(h1_ratio, 1.6);
    EXPECT_LE(h1_ratio, 2.6);
    EXPECT_GE(errs[0].p_sup_l2 / errs[1].p_sup_l2, 1.6);
    EXPECT_GE(errs[0].z_l2_l2 / errs[1].z_l2_l2, 1.6);
}

TEST(ErrorNorms, StreamingMatchesStored) {
    const FemSystem fem = assemble(build_mesh(8));
    const TimeGrid grid = make_time_grid(1.0, 32);
    const BrownianBatch batch = sample_brownian(grid, 300, 11);
    const ManufacturedCase mc = manufactured_problem(linear_amplitude(), 1.0, fem, grid);
    ErrorAccumulator acc(fem, grid, batch, mc.p_exact, mc.z_exact);
    BackwardOptions opt;
    opt.observers.push_back(acc.observer());
    const BackwardSolution sol = solve_backward(mc.problem, fem, batch, RegressionBasis{}, PicardOptions{}, opt);
    const ErrorNorms stored = error_norms(sol, mc.p_exact, mc.z_exact, fem, grid, batch);
    const ErrorNorms streamed = acc.result();
    EXPECT_EQ(stored.p_sup_l2, streamed.p_sup_l2);
    EXPECT_EQ(stored.p_l2_h1, streamed.p_l2_h1);
    EXPECT_EQ(stored.z_l2_l2, streamed.z_l2_l2);
}

TEST(Transposition, ZeroTestProcesses) {
    const FemSystem fem = assemble(build_mesh(8));
    const SemigroupEvaluator ev(fem);
    const TimeGrid grid = make_time_grid(1.0, 32);
    const BrownianBatch batch = sample_brownian(grid, 200, 12);
    const ManufacturedCase mc = manufactured_problem(linear_amplitude(), 1.0, fem, grid);
    const BackwardSolution sol = solve_backward(mc.problem, fem, batch, RegressionBasis{});
    const int n = fem.dofs();
    const TestProcess zero = [n](int, const BrownianBatch&) { return PathField(PathField::Zero(1, n)); };
    const TranspositionResidual r = transposition_residual(sol, ev, grid, batch, zero, zero, PathField::Zero(1, n), 0);
    EXPECT_EQ(r.lhs, 0.0);
    EXPECT_EQ(r.rhs, 0.0);
    EXPECT_EQ(r.residual, 0.0);
}

TEST(Transposition, DeterministicModeResidualShrinksWithTau) {
    const FemSystem fem = assemble(build_mesh(8));
    const SemigroupEvaluator ev(fem);
    const Vector v1 = ev.spectral().eigenvectors.col(0);
    const int n = fem.dofs();
    const TestProcess g = [v1](int, const BrownianBatch&) { return PathField(v1.transpose()); };
    const TestProcess zero = [n](int, const BrownianBatch&) { return PathField(PathField::Zero(1, n)); };
    std::vector<double> residuals;
    for (int J : {64, 128, 256}) {
        const TimeGrid grid = make_time_grid(0.2, J);
        const BrownianBatch batch = sample_brownian(grid, 100, 13);
        const BackwardSolution sol =
            solve_backward(zero_driver_problem(grid, PathField(v1.transpose())), fem, batch, RegressionBasis{});
        residuals.push_back(transposition_residual(sol, ev, grid, batch, g, zero, PathField::Zero(1, n), 0).relative());
    }
    EXPECT_LT(residuals[1], residuals[0]);
    EXPECT_LT(residuals[2], residuals[1]);
    EXPECT_LT(residuals[2], 0.02);
}

TEST(Transposition, RejectsAnticipatingTestProcess) {
    const FemSystem fem = assemble(build_mesh(4));
    const SemigroupEvaluator ev(fem);
    const TimeGrid grid = make_time_grid(1.0, 8);
    const BrownianBatch batch = sample_brownian(grid, 100, 14);
    const BackwardSolution sol =
        solve_backward(zero_driver_problem(grid, PathField::Ones(1, fem.dofs())), fem, batch, RegressionBasis{});
    const int n = fem.dofs();
    const TestProcess future = [n](int, const BrownianBatch& b) {
        return PathField(b.W(b.grid.J) * Vector::Ones(n).transpose());
    };
    const TestProcess zero = [n](int, const BrownianBatch&) { return PathField(PathField::Zero(1, n)); };
    EXPECT_THROW(transposition_residual(sol, ev, grid, batch, future, zero, PathField::Zero(1, n), 0),
                 InvalidArgument);
    EXPECT_THROW(transposition_residual(sol, ev, grid, batch, zero, future, PathField::Zero(1, n), 0),
                 InvalidArgument);
}

TEST(Transposition, StreamingMatchesStoredAtInteriorStep) {
    const FemSystem fem = assemble(build_mesh(8));
    const SemigroupEvaluator ev(fem);
    const TimeGrid grid = make_time_grid(1.0, 20);
    const BrownianBatch batch = sample_brownian(grid, 300, 15);
    const ManufacturedCase mc = manufactured_problem(linear_amplitude(), 0.5, fem, grid);
    const Vector phi = mc.p_exact.profile.projection;
    const TestProcess g = [phi](int i, const BrownianBatch& b) {
        return PathField((1.0 + b.W(i).array().square()).matrix() * phi.transpose());
    };
    const TestProcess sigma = [phi](int i, const BrownianBatch& b) {
        return PathField(b.W(i) * phi.transpose());
    };
    const int j = 7;
    const PathField v = batch.W(j) * phi.transpose();
    TranspositionAccumulator acc(ev, grid, batch, g, sigma, v, j);
    BackwardOptions opt;
    opt.observers.push_back(acc.observer());
    const BackwardSolution sol = solve_backward(mc.problem, fem, batch, RegressionBasis{}, PicardOptions{}, opt);
    const TranspositionResidual stored = transposition_residual(sol, ev, grid, batch, g, sigma, v, j);
    const TranspositionResidual streamed = acc.result();
    EXPECT_NEAR(stored.lhs, streamed.lhs, 1e-12 * std::abs(stored.lhs));
    EXPECT_NEAR(stored.rhs, streamed.rhs, 1e-12 * std::abs(stored.rhs));
    EXPECT_GT(std::abs(stored.lhs), 0.0);
}

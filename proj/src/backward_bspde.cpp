// SPDX-License-Identifier: Apache-2.0
#include "bspde/backward_bspde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include <Eigen/Eigenvalues>

#include "bspde/errors.hpp"

namespace bspde {

namespace {

constexpr double kMaxCondition = 1e13;

// Probabilists' Hermite polynomials of the standardized regressor. They span
// the same space as (1, w, ..., w^d) and are close to orthogonal under the
// Gaussian law of W(t_j), which keeps the normal equations well conditioned.
Matrix build_features(const RegressionBasis& basis, const Vector& regressor, const Matrix& extra) {
    const Eigen::Index n = regressor.size();
    const double mean = regressor.mean();
    const double sd = std::sqrt((regressor.array() - mean).square().mean());
    const bool degenerate = !(sd > 1e-14 * std::max(1.0, std::abs(mean)));
    const int poly = degenerate ? 1 : basis.degree + 1;

    std::vector<Eigen::Index> extra_cols;
    std::vector<double> extra_mean, extra_sd;
    for (Eigen::Index c = 0; c < extra.cols(); ++c) {
        const double m = extra.col(c).mean();
        const double s = std::sqrt((extra.col(c).array() - m).square().mean());
        if (s > 1e-14 * std::max(1.0, std::abs(m))) {
            extra_cols.push_back(c);
            extra_mean.push_back(m);
            extra_sd.push_back(s);
        }
    }

    Matrix x(n, poly + static_cast<Eigen::Index>(extra_cols.size()));
    x.col(0).setOnes();
    if (poly > 1) {
        const Eigen::ArrayXd s = (regressor.array() - mean) / sd;
        x.col(1) = s.matrix();
        for (int k = 2; k < poly; ++k) {
            x.col(k) = (s * x.col(k - 1).array() - (k - 1) * x.col(k - 2).array()).matrix();
        }
    }
    for (std::size_t e = 0; e < extra_cols.size(); ++e) {
        x.col(poly + static_cast<Eigen::Index>(e)) =
            ((extra.col(extra_cols[e]).array() - extra_mean[e]) / extra_sd[e]).matrix();
    }
    return x;
}

// Ridge least squares; returns the coefficient matrix (features x columns).
Matrix fit_coefficients(const Matrix& x, const Matrix& values, double ridge, RegressionDiagnostics* diag) {
    const double n = static_cast<double>(x.rows());
    Matrix gram = Matrix::Zero(x.cols(), x.cols());
    gram.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose(), 1.0 / n);
    gram = gram.selfadjointView<Eigen::Lower>();
    gram.diagonal().array() += ridge;

    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
    if (diag) {
        diag->condition_number = cond;
        diag->features = static_cast<int>(x.cols());
    }
    if (!(cond < kMaxCondition)) {
        throw NumericFailure("cond_expect: regression design is rank deficient (condition number " +
                             std::to_string(cond) + ")");
    }
    const Matrix rhs = x.transpose() * values / n;
    return gram.ldlt().solve(rhs);
}

PathField broadcast_rows(const PathField& field, int paths, int dofs, const char* name) {
    require(field.cols() == dofs, std::string(name) + ": dimension mismatch");
    if (field.rows() == paths) return field;
    require(field.rows() == 1, std::string(name) + ": path count mismatch");
    return field.replicate(paths, 1);
}

double rms_mass_norm(const FemSystem& fem, const PathField& u) {
    const PathField mu = fem.mass().apply_rows(u);
    return std::sqrt(std::max(0.0, (u.array() * mu.array()).rowwise().sum().mean()));
}

// Per-path (u_r, w_r)_M for every row.
Vector mass_pairing(const FemSystem& fem, const PathField& u, const PathField& w) {
    const PathField mw = fem.mass().apply_rows(w);
    return (u.array() * mw.array()).rowwise().sum().matrix();
}

}  // namespace

Matrix cond_expect(const RegressionBasis& basis, const Vector& regressor, const Matrix& values,
                   const Matrix& extra, RegressionDiagnostics* diagnostics) {
    require(basis.degree >= 0, "cond_expect: degree must be nonnegative");
    require(basis.ridge >= 0.0, "cond_expect: ridge must be nonnegative");
    require(values.rows() == regressor.size(), "cond_expect: values and regressor disagree on path count");
    require(extra.size() == 0 || extra.rows() == regressor.size(),
            "cond_expect: extra regressors disagree on path count");
    require(regressor.size() > basis.degree + 1 + extra.cols(),
            "cond_expect: need more paths than features (n_paths = " + std::to_string(regressor.size()) + ")");
    const Matrix x = build_features(basis, regressor, extra);
    return x * fit_coefficients(x, values, basis.ridge, diagnostics);
}

BackwardSolution solve_backward(const BspdeProblem& problem, const FemSystem& fem, const BrownianBatch& batch,
                                const RegressionBasis& basis, const PicardOptions& picard,
                                const BackwardOptions& options) {
    const TimeGrid& grid = problem.grid;
    const int J = grid.J;
    const int n = fem.dofs();
    const int paths = batch.n_paths;
    const double tau = grid.tau;
    require(static_cast<bool>(problem.driver) && static_cast<bool>(problem.terminal),
            "solve_backward: driver and terminal are required");
    require(problem.lipschitz >= 0.0, "solve_backward: Lipschitz constant must be nonnegative");
    require(tau * problem.lipschitz < 0.5, "solve_backward: Picard iteration needs tau*M_lip < 1/2, got " +
                                               std::to_string(tau * problem.lipschitz));
    require(batch.grid.J == J && batch.grid.tau == tau, "solve_backward: batch and grid disagree");
    require(picard.max_iters >= 1 && picard.tol > 0.0, "solve_backward: invalid Picard options");
    require(basis.degree >= 0 && basis.ridge >= 0.0, "solve_backward: invalid regression basis");

    const auto factor = fem.shifted_factor(tau);
    const double sqrt_tau = std::sqrt(tau);

    BackwardSolution sol;
    sol.picard_iterations.assign(J, 0);
    sol.condition_numbers.assign(J, 0.0);
    if (options.store_fields) {
        sol.p.resize(J + 1);
        sol.q.resize(J);
        sol.z.resize(J);
        sol.f.resize(J);
    }

    PathField next = broadcast_rows(problem.terminal(batch), paths, n, "solve_backward terminal");
    if (!next.allFinite()) throw NumericFailure("solve_backward: non-finite terminal condition");
    for (const auto& obs : options.observers) obs(StepView{J, next});
    if (options.store_fields) sol.p[J] = next;

    for (int j = J - 1; j >= 0; --j) {
        const Vector w = batch.W(j);
        const Matrix extra = basis.extra ? basis.extra(j) : Matrix();
        require(extra.size() == 0 || extra.rows() == paths, "solve_backward: extra regressors path count mismatch");
        require(paths > 2 * (basis.degree + 1 + extra.cols()),
                "solve_backward: too few paths for the regression basis");
        const Matrix x = build_features(basis, w, extra);
        const Eigen::ArrayXd dw = batch.increments.col(j).array();
        RegressionDiagnostics diag;

        PathField q, z;
        if (basis.z_estimator == ZEstimator::Joint) {
            const Eigen::Index k = x.cols();
            Matrix xj(paths, 2 * k);
            xj.leftCols(k) = x;
            xj.rightCols(k) = (x.array().colwise() * (dw / sqrt_tau)).matrix();
            const Matrix coef = fit_coefficients(xj, next, basis.ridge, &diag);
            q.noalias() = x * coef.topRows(k);
            z.noalias() = x * coef.bottomRows(k);
            z /= sqrt_tau;
        } else {
            const Matrix coef_q = fit_coefficients(x, next, basis.ridge, &diag);
            q.noalias() = x * coef_q;
            const Matrix weighted = (next.array().colwise() * dw).matrix();
            z.noalias() = x * fit_coefficients(x, weighted, basis.ridge, nullptr);
            z /= tau;
        }
        sol.condition_numbers[j] = diag.condition_number;

        PathField p = q;
        PathField f;
        int iters = 0;
        bool converged = false;
        while (iters < picard.max_iters) {
            ++iters;
            f = broadcast_rows(problem.driver(DriverArgs{j, grid.t(j), p, q, z, batch}), paths, n,
                               "solve_backward driver");
            PathField p_new = fem.mass().apply_rows(q + tau * f);
            factor->solve_rows_in_place(p_new);
            if (!p_new.allFinite()) {
                throw NumericFailure("solve_backward: non-finite iterate at step " + std::to_string(j));
            }
            const double diff = rms_mass_norm(fem, p_new - p);
            const double scale = rms_mass_norm(fem, p_new);
            p = std::move(p_new);
            if (diff <= picard.tol * std::max(1.0, scale)) {
                converged = true;
                break;
            }
        }
        // Driver value consistent with the accepted iterate.
        f = broadcast_rows(problem.driver(DriverArgs{j, grid.t(j), p, q, z, batch}), paths, n,
                           "solve_backward driver");
        sol.picard_iterations[j] = iters;
        sol.picard_converged = sol.picard_converged && converged;

        for (const auto& obs : options.observers) obs(StepView{j, p, &q, &z, &f});
        if (options.store_fields) {
            sol.p[j] = p;
            sol.q[j] = std::move(q);
            sol.z[j] = std::move(z);
            sol.f[j] = std::move(f);
        }
        next = std::move(p);
    }
    return sol;
}

SpatialProfile sine_profile(const FemSystem& fem) {
    const double pi = std::numbers::pi;
    const auto psi = [pi](double x) { return std::sin(pi * x); };
    SpatialProfile out;
    out.load = load_vector(fem, psi, 6);
    out.projection = fem.mass_factor().solve(out.load);
    // For psi with zero trace, int psi' phi_i' = (A I_h psi)_i exactly.
    out.stiffness_load = fem.stiffness().apply(interpolate(fem, psi));
    out.l2_sq = 0.5;
    out.h1_sq = 0.5 * pi * pi;
    return out;
}

ManufacturedCase manufactured_problem(const TimeFunction& a, double beta, const FemSystem& fem,
                                      const TimeGrid& grid) {
    require(static_cast<bool>(a.value) && static_cast<bool>(a.derivative),
            "manufactured_problem: a and a' are required");
    require(std::isfinite(beta), "manufactured_problem: beta must be finite");
    const double pi2 = std::numbers::pi * std::numbers::pi;

    // Sample a on a fine grid to check positivity and bound the driver.
    constexpr int kSamples = 4096;
    double a_min = std::numeric_limits<double>::infinity();
    double lip = 0.0;
    for (int s = 0; s <= kSamples; ++s) {
        const double t = grid.T * s / kSamples;
        const double av = a.value(t);
        require(std::isfinite(av), "manufactured_problem: a is not finite at t = " + std::to_string(t));
        a_min = std::min(a_min, av);
        if (av > 0.0) lip = std::max(lip, std::abs(pi2 - a.derivative(t) / av));
    }
    if (!(a_min > 1e-12)) {
        throw InvalidArgument("manufactured_problem: a must be bounded away from 0 (min " +
                              std::to_string(a_min) + ")");
    }

    ManufacturedCase out;
    const SpatialProfile profile = sine_profile(fem);
    out.problem.grid = grid;
    out.problem.lipschitz = lip;
    out.problem.driver = [a, pi2](const DriverArgs& args) -> PathField {
        const double c = pi2 - a.derivative(args.t) / a.value(args.t);
        return c * args.p;
    };
    const GridFunction phi = profile.projection;
    const double a_T = a.value(grid.T);
    out.problem.terminal = [phi, a_T, beta](const BrownianBatch& batch) -> PathField {
        const Vector amp = a_T * (1.0 + beta * batch.W(batch.grid.J).array()).matrix();
        return amp * phi.transpose();
    };
    out.p_exact.profile = profile;
    out.p_exact.amplitude = [a, beta](double t, double w) { return a.value(t) * (1.0 + beta * w); };
    out.z_exact.profile = profile;
    out.z_exact.amplitude = [a, beta](double t, double) { return a.value(t) * beta; };
    return out;
}

ErrorAccumulator::ErrorAccumulator(const FemSystem& fem, const TimeGrid& grid, const BrownianBatch& batch,
                                   SeparableField p_exact, SeparableField z_exact)
    : fem_(&fem),
      grid_(grid),
      batch_(&batch),
      p_exact_(std::move(p_exact)),
      z_exact_(std::move(z_exact)),
      sup_mean_(grid.J + 1, 0.0),
      sup_var_(grid.J + 1, 0.0),
      h1_per_path_(Vector::Zero(batch.n_paths)),
      z_per_path_(Vector::Zero(batch.n_paths)) {
    require(batch.grid.J == grid.J, "ErrorAccumulator: batch and grid disagree on J");
    require(p_exact_.profile.load.size() == fem.dofs() && z_exact_.profile.load.size() == fem.dofs(),
            "ErrorAccumulator: exact profile dimension mismatch");
}

namespace {

// Per-path ||s psi - u||^2 using s^2 |psi|^2 - 2 s (u, psi) + (u, u), with the
// pairing either in L2 (load vector, M) or in the H1 seminorm (stiffness load, A).
Vector separable_error_sq(const Vector& s, const PathField& u, const GridFunction& load, double psi_sq,
                          const SymTridiag& gram) {
    const Vector cross = u * load;
    const PathField gu = gram.apply_rows(u);
    const Vector self = (u.array() * gu.array()).rowwise().sum().matrix();
    return (s.array().square() * psi_sq - 2.0 * s.array() * cross.array() + self.array()).max(0.0).matrix();
}

Vector amplitudes(const SeparableField& field, double t, const Vector& w) {
    Vector out(w.size());
    for (Eigen::Index r = 0; r < w.size(); ++r) out(r) = field.amplitude(t, w(r));
    return out;
}

double sample_variance(const Vector& v) {
    if (v.size() < 2) return 0.0;
    const double m = v.mean();
    return (v.array() - m).square().sum() / static_cast<double>(v.size() - 1);
}

}  // namespace

void ErrorAccumulator::observe(const StepView& view) {
    const int j = view.step;
    require(j >= 0 && j <= grid_.J, "ErrorAccumulator: step out of range");
    require(view.p.rows() == batch_->n_paths, "ErrorAccumulator: path count mismatch");
    const double t = grid_.t(j);
    const Vector w = batch_->W(j);
    const Vector sp = amplitudes(p_exact_, t, w);
    const Vector l2 =
        separable_error_sq(sp, view.p, p_exact_.profile.load, p_exact_.profile.l2_sq, fem_->mass());
    sup_mean_[j] = l2.mean();
    sup_var_[j] = sample_variance(l2);
    if (j < grid_.J) {
        h1_per_path_ += grid_.tau * separable_error_sq(sp, view.p, p_exact_.profile.stiffness_load,
                                                       p_exact_.profile.h1_sq, fem_->stiffness());
        require(view.z != nullptr, "ErrorAccumulator: z missing at step " + std::to_string(j));
        const Vector sz = amplitudes(z_exact_, t, w);
        z_per_path_ += grid_.tau * separable_error_sq(sz, *view.z, z_exact_.profile.load,
                                                      z_exact_.profile.l2_sq, fem_->mass());
    }
}

StepObserver ErrorAccumulator::observer() {
    return [this](const StepView& view) { observe(view); };
}

ErrorNorms ErrorAccumulator::result() const {
    ErrorNorms out;
    const double n = static_cast<double>(batch_->n_paths);
    // Delta method: se(sqrt(m)) = se(m) / (2 sqrt(m)).
    const auto root = [n](double mean, double var, double& value, double& se) {
        value = std::sqrt(std::max(0.0, mean));
        se = value > 0.0 ? std::sqrt(var / n) / (2.0 * value) : 0.0;
    };
    const auto it = std::max_element(sup_mean_.begin(), sup_mean_.end());
    const std::size_t k = static_cast<std::size_t>(it - sup_mean_.begin());
    root(*it, sup_var_[k], out.p_sup_l2, out.p_sup_l2_se);
    root(h1_per_path_.mean(), sample_variance(h1_per_path_), out.p_l2_h1, out.p_l2_h1_se);
    root(z_per_path_.mean(), sample_variance(z_per_path_), out.z_l2_l2, out.z_l2_l2_se);
    return out;
}

ErrorNorms error_norms(const BackwardSolution& sol, const SeparableField& p_exact, const SeparableField& z_exact,
                       const FemSystem& fem, const TimeGrid& grid, const BrownianBatch& batch) {
    require(static_cast<int>(sol.p.size()) == grid.J + 1 && static_cast<int>(sol.z.size()) == grid.J,
            "error_norms: solution fields were not stored");
    ErrorAccumulator acc(fem, grid, batch, p_exact, z_exact);
    for (int j = grid.J; j >= 0; --j) {
        if (j == grid.J) {
            acc.observe(StepView{j, sol.p[j]});
        } else {
            acc.observe(StepView{j, sol.p[j], &sol.q[j], &sol.z[j], &sol.f[j]});
        }
    }
    return acc.result();
}

double TranspositionResidual::relative() const {
    const double scale = std::max(std::abs(lhs), std::abs(rhs));
    return scale > 0.0 ? residual / scale : 0.0;
}

void check_adapted(const TestProcess& process, const BrownianBatch& batch, const char* name) {
    const int J = batch.grid.J;
    const int sub = std::min(batch.n_paths, 64);
    if (sub < 2) return;
    BrownianBatch head = batch;
    head.n_paths = sub;
    head.increments = batch.increments.topRows(sub);
    head.cumulative = batch.cumulative.topRows(sub);
    std::vector<int> steps = {0, J / 2, J - 1};
    steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
    for (int i : steps) {
        // Reverse the path order of increments i..J-1; W(t_0..t_i) is untouched.
        BrownianBatch shuffled = head;
        for (int c = i; c < J; ++c) shuffled.increments.col(c) = head.increments.col(c).reverse().eval();
        accumulate_paths(shuffled);
        const PathField a = process(i, head);
        const PathField b = process(i, shuffled);
        const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
        if (a.rows() != b.rows() || (a - b).cwiseAbs().maxCoeff() > 1e-12 * scale) {
            throw InvalidArgument(std::string(name) + " is not adapted: its value at step " + std::to_string(i) +
                                  " depends on later increments");
        }
    }
}

TranspositionAccumulator::TranspositionAccumulator(const SemigroupEvaluator& ev, const TimeGrid& grid,
                                                   const BrownianBatch& batch, TestProcess g, TestProcess sigma,
                                                   PathField v, int j)
    : ev_(&ev), grid_(grid), batch_(&batch), g_(std::move(g)), sigma_(std::move(sigma)), v_(std::move(v)), j_(j) {
    const int n = ev.fem().dofs();
    require(j >= 0 && j <= grid.J, "transposition_residual: step index out of range");
    require(batch.grid.J == grid.J, "transposition_residual: batch and grid disagree on J");
    require(static_cast<bool>(g_) && static_cast<bool>(sigma_), "transposition_residual: g and sigma are required");
    require(v_.cols() == n, "transposition_residual: v dimension mismatch");
    check_adapted(g_, batch, "g");
    check_adapted(sigma_, batch, "sigma");
    v_ = broadcast(v_);
    step_op_ = ev.exp_apply(grid.tau, PathField(Matrix::Identity(n, n)));
    segment_ = std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(grid.J - j + 1)))));

    PathField phi = v_;
    checkpoints_.push_back(phi);
    for (int i = j; i < grid.J; ++i) {
        const PathField gi = broadcast(g_(i, batch));
        const PathField si = broadcast(sigma_(i, batch));
        phi = (phi + grid.tau * gi + (si.array().colwise() * batch.increments.col(i).array()).matrix()) * step_op_;
        if ((i + 1 - j) % segment_ == 0) checkpoints_.push_back(phi);
    }
}

PathField TranspositionAccumulator::broadcast(const PathField& field) const {
    return broadcast_rows(field, batch_->n_paths, ev_->fem().dofs(), "transposition_residual");
}

const PathField& TranspositionAccumulator::phi_at(int i) {
    const int offset = i - j_;
    const int seg = offset / segment_;
    if (seg != cached_segment_) {
        cache_.clear();
        PathField phi = checkpoints_[seg];
        const int start = j_ + seg * segment_;
        const int stop = std::min(grid_.J, start + segment_ - 1);
        cache_.push_back(phi);
        for (int k = start; k < stop; ++k) {
            const PathField gk = broadcast(g_(k, *batch_));
            const PathField sk = broadcast(sigma_(k, *batch_));
            phi = (phi + grid_.tau * gk + (sk.array().colwise() * batch_->increments.col(k).array()).matrix()) *
                  step_op_;
            cache_.push_back(phi);
        }
        cached_segment_ = seg;
    }
    return cache_[offset - seg * segment_];
}

void TranspositionAccumulator::observe(const StepView& view) {
    const int i = view.step;
    if (i < j_) return;
    const FemSystem& fem = ev_->fem();
    if (i == grid_.J) {
        rhs_ += mass_pairing(fem, phi_at(i), view.p).mean();
    } else {
        require(view.z != nullptr && view.f != nullptr, "transposition_residual: z and f are required");
        const PathField gi = broadcast(g_(i, *batch_));
        const PathField si = broadcast(sigma_(i, *batch_));
        lhs_ += grid_.tau * (mass_pairing(fem, view.p, gi) + mass_pairing(fem, *view.z, si)).mean();
        rhs_ += grid_.tau * mass_pairing(fem, *view.f, phi_at(i)).mean();
    }
    if (i == j_) lhs_ += mass_pairing(fem, view.p, v_).mean();
}

StepObserver TranspositionAccumulator::observer() {
    return [this](const StepView& view) { observe(view); };
}

TranspositionResidual TranspositionAccumulator::result() const {
    TranspositionResidual out;
    out.lhs = lhs_;
    out.rhs = rhs_;
    out.residual = std::abs(lhs_ - rhs_);
    return out;
}

TranspositionResidual transposition_residual(const BackwardSolution& sol, const SemigroupEvaluator& ev,
                                             const TimeGrid& grid, const BrownianBatch& batch, const TestProcess& g,
                                             const TestProcess& sigma, const PathField& v, int j) {
    require(static_cast<int>(sol.p.size()) == grid.J + 1 && static_cast<int>(sol.z.size()) == grid.J &&
                static_cast<int>(sol.f.size()) == grid.J,
            "transposition_residual: solution fields were not stored");
    TranspositionAccumulator acc(ev, grid, batch, g, sigma, v, j);
    for (int i = grid.J; i >= j; --i) {
        if (i == grid.J) {
            acc.observe(StepView{i, sol.p[i]});
        } else {
            acc.observe(StepView{i, sol.p[i], &sol.q[i], &sol.z[i], &sol.f[i]});
        }
    }
    return acc.result();
}

}  // namespace bspde

// SPDX-License-Identifier: Apache-2.0
#include "bspde/lq_control.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <string>

#include "bspde/errors.hpp"
#include "bspde/parallel.hpp"

namespace bspde {

DesiredState constant_target(double value) {
    DesiredState y;
    y.name = "constant";
    y.temporal = [value](double, double) { return value; };
    y.spatial = [](double) { return 1.0; };
    return y;
}

DesiredState singular_target() {
    DesiredState y;
    y.name = "x^-0.49";
    y.temporal = [](double, double) { return 1.0; };
    y.spatial = [](double x) { return std::pow(x, -0.49); };
    return y;
}

DesiredState noisy_singular_target() {
    DesiredState y;
    y.name = "(1+W^2) x^-0.49";
    y.temporal = [](double, double w) { return 1.0 + w * w; };
    y.spatial = [](double x) { return std::pow(x, -0.49); };
    y.depends_on_noise = true;
    return y;
}

PathField LqProblem::target(int j, const BrownianBatch& batch) const {
    const double t = grid.t(j);
    if (!y_d.depends_on_noise) return y_d.temporal(t, 0.0) * target_profile.transpose();
    const Vector w = batch.W(j);
    Vector amp(w.size());
    for (Eigen::Index r = 0; r < w.size(); ++r) amp(r) = y_d.temporal(t, w(r));
    return amp * target_profile.transpose();
}

LqProblem make_lq_problem(int n_cells, const TimeGrid& grid, double nu, LinearSpdeCoeffs coeffs, DesiredState y_d) {
    require(std::isfinite(nu) && nu > 0.0, "LqProblem: nu must be positive, got " + std::to_string(nu));
    require(grid.J >= 2 && grid.tau > 0.0, "LqProblem: invalid time grid");
    coeffs.validate(grid.J);
    require(static_cast<bool>(y_d.temporal) && static_cast<bool>(y_d.spatial), "LqProblem: y_d handlers required");
    LqProblem p;
    p.fem = std::make_shared<const FemSystem>(build_mesh(n_cells));
    p.grid = grid;
    p.nu = nu;
    p.coeffs = std::move(coeffs);
    p.y_d = std::move(y_d);
    // x^{-0.49} is integrable; Gauss nodes stay inside each cell.
    p.target_profile = l2_project(*p.fem, p.y_d.spatial, 8);
    require(p.target_profile.allFinite(), "LqProblem: y_d projection is not finite");
    return p;
}

PolicyStack make_policy_stack(int J, const std::vector<int>& hidden, std::uint64_t seed, Precision precision,
                              bool scale_noise) {
    require(J >= 1, "make_policy_stack: J must be positive");
    PolicyStack stack;
    stack.scale_noise = scale_noise;
    stack.nets.reserve(J);
    for (int j = 0; j < J; ++j) {
        std::vector<int> widths{1 + j};
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(1);
        stack.nets.push_back(Mlp::init(widths, derive_seed(seed, static_cast<std::uint64_t>(j))));
        stack.nets.back().precision = precision;
    }
    return stack;
}

Matrix policy_input(const PolicyStack& stack, const FemSystem& fem, const BrownianBatch& batch, int j) {
    require(j >= 0 && j < stack.steps(), "policy_input: step out of range");
    require(batch.grid.J == stack.steps(), "policy_input: stack has " + std::to_string(stack.steps()) +
                                               " nets but the batch has J = " + std::to_string(batch.grid.J));
    require(stack.nets[j].input_dim() == 1 + j && stack.nets[j].output_dim() == 1,
            "policy_input: Net_" + std::to_string(j) + " has the wrong shape");
    const int n = fem.dofs();
    const double scale = stack.scale_noise ? 1.0 / std::sqrt(batch.grid.tau) : 1.0;
    Matrix x(1 + j, static_cast<Eigen::Index>(batch.n_paths) * n);
    for (int r = 0; r < batch.n_paths; ++r) {
        for (int i = 0; i < n; ++i) {
            const Eigen::Index col = static_cast<Eigen::Index>(r) * n + i;
            x(0, col) = fem.mesh().nodes[i];
            for (int k = 0; k < j; ++k) x(1 + k, col) = scale * batch.increments(r, k);
        }
    }
    return x;
}

namespace {

PathField output_to_field(const Matrix& out, int paths, int dofs) {
    return Eigen::Map<const Matrix>(out.data(), dofs, paths).transpose();
}

Vector mass_sq(const FemSystem& fem, const PathField& u) {
    const PathField mu = fem.mass().apply_rows(u);
    return (u.array() * mu.array()).rowwise().sum().matrix();
}

PathField broadcast(const PathField& field, int paths) {
    return field.rows() == paths ? field : PathField(field.replicate(paths, 1));
}

double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace

PathSeries eval_policy(const PolicyStack& stack, const FemSystem& fem, const BrownianBatch& batch) {
    PathSeries u;
    u.reserve(stack.steps());
    for (int j = 0; j < stack.steps(); ++j) {
        const Matrix out = stack.nets[j].forward(policy_input(stack, fem, batch, j));
        u.push_back(output_to_field(out, batch.n_paths, fem.dofs()));
    }
    return u;
}

LossValue loss_terms(const LqProblem& problem, const PathSeries& control, const PathSeries& state,
                     const BrownianBatch& batch) {
    const TimeGrid& grid = problem.grid;
    require(static_cast<int>(control.size()) == grid.J && static_cast<int>(state.size()) >= grid.J,
            "loss: control and state must cover J steps");
    LossValue out;
    for (int j = 0; j < grid.J; ++j) {
        const PathField diff = state[j] - broadcast(problem.target(j, batch), static_cast<int>(state[j].rows()));
        out.tracking += 0.5 * grid.tau * mass_sq(*problem.fem, diff).mean();
        out.penalty += 0.5 * problem.nu * grid.tau * mass_sq(*problem.fem, control[j]).mean();
    }
    return out;
}

double loss(const LqProblem& problem, const PathSeries& control, const BrownianBatch& batch) {
    const StateBatch state = solve_state(*problem.fem, problem.grid, problem.coeffs, control, batch,
                                         GridFunction::Zero(problem.fem->dofs()));
    PathSeries u;
    u.reserve(control.size());
    for (const auto& c : control) u.push_back(broadcast(c, batch.n_paths));
    return loss_terms(problem, u, state.values, batch).total();
}

LossGradient loss_and_gradient(const LqProblem& problem, const PolicyStack& stack, const BrownianBatch& batch) {
    const FemSystem& fem = *problem.fem;
    const TimeGrid& grid = problem.grid;
    const int J = grid.J;
    const int n = fem.dofs();
    const int paths = batch.n_paths;
    const double tau = grid.tau;
    const auto& c = problem.coeffs;
    require(stack.steps() == J, "loss_and_gradient: stack size does not match J");

    std::vector<MlpCache> caches(J);
    PathSeries u(J);
    for (int j = 0; j < J; ++j) {
        const Matrix out = stack.nets[j].forward(policy_input(stack, fem, batch, j), caches[j]);
        u[j] = output_to_field(out, paths, n);
    }
    const StateBatch state = solve_state(fem, grid, c, u, batch, GridFunction::Zero(n));

    LossGradient result;
    result.loss = loss_terms(problem, u, state.values, batch).total();
    result.grads.resize(J);

    // lambda_j = dL/dY_j. Y_J does not enter the loss, so lambda_J = 0.
    // Y_{j+1} = K^{-1} M s_j with K = M + tau A, hence dL/ds_j = M K^{-1} lambda_{j+1}.
    const auto factor = fem.shifted_factor(tau);
    const double inv_b = 1.0 / paths;
    PathField lambda = PathField::Zero(paths, n);
    for (int j = J - 1; j >= 0; --j) {
        const Eigen::ArrayXd dw = batch.increments.col(j).array();
        PathField ds = lambda;
        factor->solve_rows_in_place(ds);
        ds = fem.mass().apply_rows(ds);

        const PathField grad_u = (ds.array().colwise() * (tau * c.alpha1[j] + c.alpha3[j] * dw)).matrix() +
                                 (problem.nu * tau * inv_b) * fem.mass().apply_rows(u[j]);
        const PathField misfit = state.values[j] - broadcast(problem.target(j, batch), paths);
        lambda = (ds.array().colwise() * (1.0 + tau * c.alpha0[j] + c.alpha2[j] * dw)).matrix() +
                 (tau * inv_b) * fem.mass().apply_rows(misfit);

        const Matrix grad_t = grad_u.transpose();
        const Eigen::Map<const Matrix> upstream(grad_t.data(), 1, static_cast<Eigen::Index>(paths) * n);
        result.grads[j] = Vector::Zero(stack.nets[j].parameter_count());
        stack.nets[j].backward(caches[j], upstream, result.grads[j]);
    }
    return result;
}

TrainResult train(const LqProblem& problem, PolicyStack& stack, const TrainConfig& config) {
    require(config.iterations >= 1 && config.batch_size >= 1, "train: iterations and batch size must be positive");
    require(stack.steps() == problem.grid.J, "train: stack size does not match J");
    const auto start = std::chrono::steady_clock::now();
    std::vector<Adam> optimizers;
    optimizers.reserve(stack.steps());
    for (const auto& net : stack.nets) optimizers.emplace_back(net.parameter_count(), config.adam);

    TrainResult result;
    result.loss_trace.reserve(config.iterations);
    for (int it = 0; it < config.iterations; ++it) {
        const BrownianBatch batch =
            sample_brownian(problem.grid, config.batch_size, derive_seed(config.seed, static_cast<std::uint64_t>(it)));
        LossGradient lg = loss_and_gradient(problem, stack, batch);
        if (!std::isfinite(lg.loss)) {
            throw NumericFailure("train: non-finite loss at iteration " + std::to_string(it));
        }
        for (int j = 0; j < stack.steps(); ++j) optimizers[j].step(stack.nets[j].params(), lg.grads[j]);
        result.loss_trace.push_back(lg.loss);
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

DeterministicLqSolution solve_deterministic_lq(const LqProblem& problem, double tol, int max_iters) {
    const FemSystem& fem = *problem.fem;
    const TimeGrid& grid = problem.grid;
    const auto& c = problem.coeffs;
    const int J = grid.J;
    const int n = fem.dofs();
    const double tau = grid.tau;
    for (int j = 0; j < J; ++j) {
        require(c.alpha2[j] == 0.0 && c.alpha3[j] == 0.0, "solve_deterministic_lq: requires alpha2 = alpha3 = 0");
    }
    require(!problem.y_d.depends_on_noise, "solve_deterministic_lq: y_d must be deterministic");

    const Matrix m = fem.mass().dense();
    const Eigen::LLT<Matrix> k_factor(m + tau * fem.stiffness().dense());
    std::vector<Vector> target(J);
    for (int j = 0; j < J; ++j) target[j] = problem.y_d.temporal(grid.t(j), 0.0) * problem.target_profile;

    // Stacked control vector u = (u_0; ...; u_{J-1}).
    const auto states = [&](const Vector& u) {
        std::vector<Vector> y(J + 1, Vector::Zero(n));
        for (int j = 0; j < J; ++j) {
            const Vector s = (1.0 + tau * c.alpha0[j]) * y[j] + tau * c.alpha1[j] * u.segment(j * n, n);
            y[j + 1] = k_factor.solve(m * s);
        }
        return y;
    };
    // Gradient of the reduced cost; with_target = false gives the Hessian action.
    const auto gradient = [&](const Vector& u, bool with_target) {
        const std::vector<Vector> y = states(u);
        Vector g(J * n);
        Vector lambda = Vector::Zero(n);
        for (int j = J - 1; j >= 0; --j) {
            const Vector mu = m * k_factor.solve(lambda);
            g.segment(j * n, n) = tau * c.alpha1[j] * mu + problem.nu * tau * (m * u.segment(j * n, n));
            const Vector misfit = with_target ? Vector(y[j] - target[j]) : y[j];
            lambda = (1.0 + tau * c.alpha0[j]) * mu + tau * (m * misfit);
        }
        return g;
    };

    Vector u = Vector::Zero(J * n);
    Vector r = -gradient(u, true);
    const double r0 = r.norm();
    Vector d = r;
    double rr = r.squaredNorm();
    int it = 0;
    while (it < max_iters && std::sqrt(rr) > tol * std::max(r0, 1e-300)) {
        const Vector hd = gradient(d, false);
        const double alpha = rr / d.dot(hd);
        u += alpha * d;
        r -= alpha * hd;
        const double rr_new = r.squaredNorm();
        d = r + (rr_new / rr) * d;
        rr = rr_new;
        ++it;
    }
    if (std::sqrt(rr) > tol * std::max(r0, 1e-300) && r0 > 0.0) {
        throw NumericFailure("solve_deterministic_lq: conjugate gradients did not converge");
    }

    DeterministicLqSolution out;
    out.iterations = it;
    out.state = states(u);
    for (int j = 0; j < J; ++j) {
        out.control.push_back(u.segment(j * n, n));
        const Vector e = out.state[j] - target[j];
        out.loss += 0.5 * tau * e.dot(m * e) + 0.5 * problem.nu * tau * out.control[j].dot(m * out.control[j]);
    }
    return out;
}

OptimalityResidual optimality_residual(const LqProblem& problem, const PathSeries& control,
                                       const BrownianBatch& batch, const RegressionBasis& basis) {
    const FemSystem& fem = *problem.fem;
    const TimeGrid& grid = problem.grid;
    const auto& c = problem.coeffs;
    const int n = fem.dofs();
    const int paths = batch.n_paths;
    require(static_cast<int>(control.size()) == grid.J, "optimality_residual: control must have J entries");
    PathSeries u;
    u.reserve(grid.J);
    for (const auto& field : control) u.push_back(broadcast(field, paths));
    const StateBatch state = solve_state(fem, grid, c, u, batch, GridFunction::Zero(n));

    // Exact discrete adjoint of the state recursion: the zero-order term acts
    // on E_j p_{j+1} and the optimal control pairs with (E_j p_{j+1}, z_j).
    BspdeProblem adjoint;
    adjoint.grid = grid;
    adjoint.lipschitz = max_abs(c.alpha0) + max_abs(c.alpha2);
    adjoint.terminal = [n](const BrownianBatch&) { return PathField(PathField::Zero(1, n)); };
    adjoint.driver = [&](const DriverArgs& args) -> PathField {
        const int j = args.step;
        return c.alpha0[j] * args.q + c.alpha2[j] * args.z + state.values[j] -
               broadcast(problem.target(j, batch), paths);
    };
    RegressionBasis adj_basis = basis;
    adj_basis.extra = [&](int j) { return Matrix(state.values[j]); };

    double res_sq = 0.0;
    double u_sq = 0.0;
    BackwardOptions options;
    options.store_fields = false;
    options.observers.push_back([&](const StepView& view) {
        if (view.step == grid.J) return;
        const int j = view.step;
        const PathField r = u[j] + (c.alpha1[j] * *view.q + c.alpha3[j] * *view.z) / problem.nu;
        res_sq += grid.tau * mass_sq(fem, r).mean();
        u_sq += grid.tau * mass_sq(fem, u[j]).mean();
    });
    solve_backward(adjoint, fem, batch, adj_basis, PicardOptions{}, options);
    OptimalityResidual out;
    out.residual = std::sqrt(res_sq);
    out.control_norm = std::sqrt(u_sq);
    return out;
}

DualityGap duality_check(const FemSystem& fem, const TimeGrid& grid, const LinearSpdeCoeffs& coeffs,
                         const TestProcess& g, const TestProcess& v, const BrownianBatch& batch,
                         const RegressionBasis& basis) {
    const int n = fem.dofs();
    const int paths = batch.n_paths;
    coeffs.validate(grid.J);
    require(static_cast<bool>(g) && static_cast<bool>(v), "duality_check: g and v are required");
    check_adapted(g, batch, "g");
    check_adapted(v, batch, "v");
    PathSeries control;
    control.reserve(grid.J);
    for (int j = 0; j < grid.J; ++j) control.push_back(broadcast(v(j, batch), paths));
    const StateBatch state = solve_state(fem, grid, coeffs, control, batch, GridFunction::Zero(n));

    BspdeProblem backward;
    backward.grid = grid;
    backward.lipschitz = max_abs(coeffs.alpha0) + max_abs(coeffs.alpha2);
    backward.terminal = [n](const BrownianBatch&) { return PathField(PathField::Zero(1, n)); };
    backward.driver = [&](const DriverArgs& args) -> PathField {
        const int j = args.step;
        return coeffs.alpha0[j] * args.p + broadcast(g(j, batch), paths) + coeffs.alpha2[j] * args.z;
    };

    DualityGap out;
    BackwardOptions options;
    options.store_fields = false;
    options.observers.push_back([&](const StepView& view) {
        if (view.step == grid.J) return;
        const int j = view.step;
        const PathField lhs_field = coeffs.alpha1[j] * view.p + coeffs.alpha3[j] * *view.z;
        const PathField mv = fem.mass().apply_rows(control[j]);
        out.lhs += grid.tau * (lhs_field.array() * mv.array()).rowwise().sum().mean();
        const PathField mg = fem.mass().apply_rows(broadcast(g(j, batch), paths));
        out.rhs += grid.tau * (state.values[j].array() * mg.array()).rowwise().sum().mean();
    });
    solve_backward(backward, fem, batch, basis, PicardOptions{}, options);
    const double scale = std::max({std::abs(out.lhs), std::abs(out.rhs), 1e-300});
    out.gap = std::abs(out.lhs - out.rhs) / scale;
    if (out.lhs == 0.0 && out.rhs == 0.0) out.gap = 0.0;
    return out;
}

DualityInputs duality_inputs(const FemSystem& fem, bool stochastic) {
    const Vector g0 = l2_project(fem, [](double x) { return std::sin(std::numbers::pi * x); });
    const Vector v0 = l2_project(fem, [](double x) { return 4.0 * x * (1.0 - x); });
    DualityInputs in;
    if (stochastic) {
        in.g = [g0](int j, const BrownianBatch& b) {
            return PathField((1.0 + b.W(j).array()).matrix() * g0.transpose());
        };
        in.v = [v0](int j, const BrownianBatch& b) {
            return PathField(b.W(j).array().cos().matrix() * v0.transpose());
        };
    } else {
        in.g = [g0](int j, const BrownianBatch& b) { return PathField((1.0 + b.grid.t(j)) * g0.transpose()); };
        in.v = [v0](int j, const BrownianBatch& b) {
            return PathField(std::cos(5.0 * b.grid.t(j)) * v0.transpose());
        };
    }
    return in;
}

std::vector<double> observed_orders(const std::vector<double>& errors) {
    std::vector<double> out;
    for (std::size_t k = 1; k < errors.size(); ++k) out.push_back(std::log2(errors[k - 1] / errors[k]));
    return out;
}

std::vector<MeshResult> evaluate_against_reference(const std::vector<const LqProblem*>& problems,
                                                   const std::vector<const PolicyStack*>& stacks,
                                                   const LqProblem& reference, const PolicyStack& reference_stack,
                                                   int eval_paths, std::uint64_t eval_seed, int chunk) {
    require(problems.size() == stacks.size(), "evaluate_against_reference: problems and stacks differ in count");
    require(eval_paths >= 2 && chunk >= 1, "evaluate_against_reference: invalid path counts");
    const FemSystem& fine = *reference.fem;
    const TimeGrid& grid = reference.grid;
    const std::size_t m = problems.size();
    std::vector<Matrix> prolong_t(m);
    for (std::size_t k = 0; k < m; ++k) {
        require(problems[k]->grid.J == grid.J, "evaluate_against_reference: time grids differ");
        prolong_t[k] = prolongation_matrix(problems[k]->fem->mesh(), fine.mesh()).transpose();
    }

    // Per chunk, per mesh: sums of the per-path squared errors and of their squares.
    const int n_chunks = (eval_paths + chunk - 1) / chunk;
    struct Partial {
        std::vector<double> u_sum, u_sq, y_sum, y_sq;
    };
    std::vector<Partial> partial(n_chunks);
    parallel_for(static_cast<std::size_t>(n_chunks), [&](std::size_t begin, std::size_t end) {
        for (std::size_t ci = begin; ci < end; ++ci) {
            const int first = static_cast<int>(ci) * chunk;
            const int size = std::min(chunk, eval_paths - first);
            const BrownianBatch batch = sample_brownian(grid, size, eval_seed, false, static_cast<std::uint64_t>(first));
            const PathSeries u_ref = eval_policy(reference_stack, fine, batch);
            const StateBatch y_ref =
                solve_state(fine, grid, reference.coeffs, u_ref, batch, GridFunction::Zero(fine.dofs()));
            Partial& p = partial[ci];
            p.u_sum.assign(m, 0.0);
            p.u_sq.assign(m, 0.0);
            p.y_sum.assign(m, 0.0);
            p.y_sq.assign(m, 0.0);
            for (std::size_t k = 0; k < m; ++k) {
                const FemSystem& fem = *problems[k]->fem;
                const PathSeries u = eval_policy(*stacks[k], fem, batch);
                const StateBatch y = solve_state(fem, grid, problems[k]->coeffs, u, batch, GridFunction::Zero(fem.dofs()));
                Vector eu = Vector::Zero(size);
                Vector ey = Vector::Zero(size);
                for (int j = 0; j < grid.J; ++j) {
                    eu += grid.tau * mass_sq(fine, u[j] * prolong_t[k] - u_ref[j]);
                    ey += grid.tau * mass_sq(fine, y.values[j] * prolong_t[k] - y_ref.values[j]);
                }
                p.u_sum[k] = eu.sum();
                p.u_sq[k] = eu.squaredNorm();
                p.y_sum[k] = ey.sum();
                p.y_sq[k] = ey.squaredNorm();
            }
        }
    });

    std::vector<MeshResult> out(m);
    const double n = eval_paths;
    for (std::size_t k = 0; k < m; ++k) {
        double us = 0, uq = 0, ys = 0, yq = 0;
        for (const auto& p : partial) {
            us += p.u_sum[k];
            uq += p.u_sq[k];
            ys += p.y_sum[k];
            yq += p.y_sq[k];
        }
        const auto finish = [n](double sum, double sq, double& value, double& se) {
            const double mean = sum / n;
            const double var = std::max(0.0, (sq - n * mean * mean) / (n - 1.0));
            value = std::sqrt(std::max(0.0, mean));
            se = value > 0.0 ? std::sqrt(var / n) / (2.0 * value) : 0.0;
        };
        out[k].n_cells = problems[k]->fem->mesh().n_cells;
        finish(us, uq, out[k].u_error, out[k].u_error_se);
        finish(ys, yq, out[k].y_error, out[k].y_error_se);
    }
    return out;
}

ConvergenceReport convergence_study(const LqTemplate& setup, const StudyConfig& config) {
    require(!config.mesh_cells.empty(), "convergence_study: empty mesh list");
    for (int cells : config.mesh_cells) {
        require(cells >= 2 && cells < config.reference_cells && config.reference_cells % cells == 0,
                "convergence_study: reference mesh must be a strict nested refinement of every study mesh");
    }
    ConvergenceReport report;
    report.reference_cells = config.reference_cells;
    report.eval_paths = config.eval_paths;
    report.train_seed = config.train.seed;
    report.eval_seed = config.eval_seed;

    const auto build = [&](int cells) {
        return make_lq_problem(cells, setup.grid, setup.nu, setup.coeffs, setup.y_d);
    };
    const auto tail_mean = [](const std::vector<double>& trace) {
        const std::size_t k = std::min<std::size_t>(100, trace.size());
        double s = 0.0;
        for (std::size_t i = trace.size() - k; i < trace.size(); ++i) s += trace[i];
        return k ? s / k : 0.0;
    };

    std::vector<LqProblem> problems;
    std::vector<PolicyStack> stacks;
    std::vector<TrainResult> trained;
    for (int cells : config.mesh_cells) {
        problems.push_back(build(cells));
        stacks.push_back(make_policy_stack(setup.grid.J, config.policy.hidden, config.policy.init_seed,
                                           config.policy.precision, config.policy.scale_noise));
        trained.push_back(train(problems.back(), stacks.back(), config.train));
    }
    const LqProblem reference = build(config.reference_cells);
    PolicyStack reference_stack = make_policy_stack(setup.grid.J, config.policy.hidden, config.policy.init_seed,
                                                    config.policy.precision, config.policy.scale_noise);
    report.reference_train_seconds = train(reference, reference_stack, config.train).seconds;

    std::vector<const LqProblem*> pp;
    std::vector<const PolicyStack*> sp;
    for (std::size_t k = 0; k < problems.size(); ++k) {
        pp.push_back(&problems[k]);
        sp.push_back(&stacks[k]);
    }
    const auto start = std::chrono::steady_clock::now();
    report.rows = evaluate_against_reference(pp, sp, reference, reference_stack, config.eval_paths,
                                             config.eval_seed, config.eval_chunk);
    report.eval_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    std::vector<double> ue, ye;
    for (std::size_t k = 0; k < report.rows.size(); ++k) {
        report.rows[k].final_loss = tail_mean(trained[k].loss_trace);
        report.rows[k].train_seconds = trained[k].seconds;
        ue.push_back(report.rows[k].u_error);
        ye.push_back(report.rows[k].y_error);
    }
    report.u_orders = observed_orders(ue);
    report.y_orders = observed_orders(ye);
    for (std::size_t k = 1; k < ue.size(); ++k) {
        report.u_monotone = report.u_monotone && ue[k] < ue[k - 1];
        report.y_monotone = report.y_monotone && ye[k] < ye[k - 1];
    }
    return report;
}

}  // namespace bspde

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "bspde/fem.hpp"
#include "bspde/rand_paths.hpp"
#include "bspde/semigroup.hpp"

namespace bspde {

/// Arguments handed to a driver at step j during the Picard loop.
struct DriverArgs {
    int step = 0;
    double t = 0.0;
    const PathField& p;  // current iterate for p(t_j)
    const PathField& q;  // E_j[p(t_{j+1})]
    const PathField& z;  // z(t_j)
    const BrownianBatch& batch;
};

/// Returns the V_h coefficients of Q_h f(t_j, p, z) per path. A single-row
/// result is broadcast to every path.
using Driver = std::function<PathField(const DriverArgs&)>;

/// Returns the V_h coefficients of Q_h p_T per path (single row = deterministic).
using Terminal = std::function<PathField(const BrownianBatch&)>;

struct BspdeProblem {
    Driver driver;
    double lipschitz = 0.0;  // declared Lipschitz constant of the driver in (p, z)
    Terminal terminal;
    TimeGrid grid;
};

/// How z_j is estimated.
///  - Plain: z_j = E_j[p_{j+1} dW_j] / tau with its own regression.
///  - Joint: one least-squares fit of p_{j+1} on [phi(W_j), phi(W_j) dW_j / sqrt(tau)];
///    the first block gives E_j[p_{j+1}], the second gives z_j. Both blocks have
///    the same population limits as the plain estimators, with far smaller
///    sampling variance.
enum class ZEstimator { Plain, Joint };

/// Least-squares conditional expectation given W(t_j) (and optional extra
/// F_{t_j}-measurable regressors entering linearly).
struct RegressionBasis {
    int degree = 4;
    double ridge = 1e-10;
    ZEstimator z_estimator = ZEstimator::Joint;
    /// Extra regressors at step j: n_paths x m, or an empty matrix.
    std::function<Matrix(int step)> extra;
};

struct RegressionDiagnostics {
    double condition_number = 1.0;
    int features = 0;
};

/// Fits every column of `values` on polynomial features of `regressor`
/// (plus `extra` columns) and returns the fitted values per path.
Matrix cond_expect(const RegressionBasis& basis, const Vector& regressor, const Matrix& values,
                   const Matrix& extra = Matrix(), RegressionDiagnostics* diagnostics = nullptr);

struct PicardOptions {
    int max_iters = 100;
    double tol = 1e-12;
};

/// Read-only view of one backward step, handed to observers. For j = J only p
/// is set.
struct StepView {
    int step = 0;
    const PathField& p;
    const PathField* q = nullptr;
    const PathField* z = nullptr;
    const PathField* f = nullptr;
};

using StepObserver = std::function<void(const StepView&)>;

struct BackwardOptions {
    bool store_fields = true;
    std::vector<StepObserver> observers;
};

struct BackwardSolution {
    PathSeries p;  // J+1 entries, empty when fields are not stored
    PathSeries q;  // J entries: E_j[p_{j+1}]
    PathSeries z;  // J entries
    PathSeries f;  // J entries: driver value at the converged p_j
    std::vector<int> picard_iterations;
    std::vector<double> condition_numbers;
    bool picard_converged = true;
};

/// Backward induction j = J-1..0 with regression conditional expectations and
/// a Picard loop for the implicit driver:
///   (M + tau A) p_j = M [E_j p_{j+1} + tau f(t_j, p_j, z_j)],  p_J = Q_h p_T.
BackwardSolution solve_backward(const BspdeProblem& problem, const FemSystem& fem,
                                const BrownianBatch& batch, const RegressionBasis& basis,
                                const PicardOptions& picard = {}, const BackwardOptions& options = {});

/// Smooth scalar function of time with its derivative.
struct TimeFunction {
    std::function<double(double)> value;
    std::function<double(double)> derivative;
};

/// Spatial profile psi with zero trace, with the integrals needed for exact
/// error norms against V_h functions.
struct SpatialProfile {
    GridFunction load;            // int psi phi_i
    GridFunction stiffness_load;  // int psi' phi_i'
    GridFunction projection;      // Q_h psi
    double l2_sq = 0.0;           // int psi^2
    double h1_sq = 0.0;           // int (psi')^2
};

SpatialProfile sine_profile(const FemSystem& fem);

/// Exact field amplitude(t, W(t)) * psi(x).
struct SeparableField {
    std::function<double(double t, double w)> amplitude;
    SpatialProfile profile;
};

struct ManufacturedCase {
    BspdeProblem problem;
    SeparableField p_exact;
    SeparableField z_exact;
};

/// p(t) = a(t)(1 + beta W(t)) sin(pi x), z(t) = a(t) beta sin(pi x) with driver
/// f(t, p, z) = (pi^2 - a'(t)/a(t)) p and terminal p_T = a(T)(1 + beta W(T)) sin(pi x).
ManufacturedCase manufactured_problem(const TimeFunction& a, double beta, const FemSystem& fem,
                                      const TimeGrid& grid);

struct ErrorNorms {
    double p_sup_l2 = 0.0;       // sup_j (E||p - p_h||_H^2)^{1/2}
    double p_sup_l2_se = 0.0;
    double p_l2_h1 = 0.0;        // (sum_{j<J} tau E|p - p_h|_{H^1}^2)^{1/2}
    double p_l2_h1_se = 0.0;
    double z_l2_l2 = 0.0;        // (sum_{j<J} tau E||z - z_h||_H^2)^{1/2}
    double z_l2_l2_se = 0.0;
};

/// Streaming accumulator for ErrorNorms; register observer() with
/// solve_backward to avoid storing the fields.
class ErrorAccumulator {
public:
    ErrorAccumulator(const FemSystem& fem, const TimeGrid& grid, const BrownianBatch& batch,
                     SeparableField p_exact, SeparableField z_exact);

    void observe(const StepView& view);
    StepObserver observer();
    ErrorNorms result() const;

private:
    const FemSystem* fem_;
    TimeGrid grid_;
    const BrownianBatch* batch_;
    SeparableField p_exact_, z_exact_;
    std::vector<double> sup_mean_;
    std::vector<double> sup_var_;
    Vector h1_per_path_;
    Vector z_per_path_;
};

ErrorNorms error_norms(const BackwardSolution& sol, const SeparableField& p_exact,
                       const SeparableField& z_exact, const FemSystem& fem, const TimeGrid& grid,
                       const BrownianBatch& batch);

/// Adapted test process: returns the V_h field at step i (n_paths rows or one row).
using TestProcess = std::function<PathField(int step, const BrownianBatch& batch)>;

struct TranspositionResidual {
    double lhs = 0.0;
    double rhs = 0.0;
    double residual = 0.0;  // |lhs - rhs|
    double relative() const;
};

/// Streaming evaluation of the discrete transposition identity at t_j:
///   sum_{i>=j} tau E[(p_i, g_i) + (z_i, sigma_i)] + E(p_j, v)
///     = sum_{i>=j} tau E(f_i, phi_i) + E(phi_J, p_J)
/// with phi_j = v, phi_{i+1} = e^{tau Delta_h}(phi_i + tau g_i + sigma_i dW_i).
/// The forward test solution is kept as checkpoints and recomputed segment by
/// segment while the backward pass runs.
class TranspositionAccumulator {
public:
    TranspositionAccumulator(const SemigroupEvaluator& ev, const TimeGrid& grid, const BrownianBatch& batch,
                             TestProcess g, TestProcess sigma, PathField v, int j);

    void observe(const StepView& view);
    StepObserver observer();
    TranspositionResidual result() const;

private:
    const PathField& phi_at(int i);
    PathField broadcast(const PathField& field) const;

    const SemigroupEvaluator* ev_;
    TimeGrid grid_;
    const BrownianBatch* batch_;
    TestProcess g_, sigma_;
    PathField v_;
    int j_;
    int segment_;
    Matrix step_op_;
    std::vector<PathField> checkpoints_;
    int cached_segment_ = -1;
    std::vector<PathField> cache_;
    double lhs_ = 0.0;
    double rhs_ = 0.0;
};

/// Rejects test processes whose value at a step changes when increments at or
/// after that step are permuted across paths.
void check_adapted(const TestProcess& process, const BrownianBatch& batch, const char* name);

TranspositionResidual transposition_residual(const BackwardSolution& sol, const SemigroupEvaluator& ev,
                                             const TimeGrid& grid, const BrownianBatch& batch,
                                             const TestProcess& g, const TestProcess& sigma,
                                             const PathField& v, int j);

}  // namespace bspde

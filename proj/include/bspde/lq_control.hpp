// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "bspde/backward_bspde.hpp"
#include "bspde/fem.hpp"
#include "bspde/forward_spde.hpp"
#include "bspde/mlp.hpp"
#include "bspde/rand_paths.hpp"

namespace bspde {

/// Target y_d(t, x) = temporal(t, W(t)) * spatial(x).
struct DesiredState {
    std::string name;
    std::function<double(double t, double w)> temporal;
    std::function<double(double x)> spatial;
    bool depends_on_noise = false;
};

DesiredState constant_target(double value);
/// y_d = x^{-0.49}.
DesiredState singular_target();
/// y_d = (1 + W(t)^2) x^{-0.49}.
DesiredState noisy_singular_target();

/// Discrete LQ problem: minimize
///   1/2 sum_j tau E||Y_j - Q_h y_d(t_j)||^2 + nu/2 sum_j tau E||U_j||^2
/// subject to the semi-implicit state recursion with Y_0 = 0.
struct LqProblem {
    std::shared_ptr<const FemSystem> fem;
    TimeGrid grid;
    double nu = 1e-2;
    LinearSpdeCoeffs coeffs;
    DesiredState y_d;
    GridFunction target_profile;  // Q_h of the spatial factor

    /// Q_h y_d(t_j) per path, or a single row when y_d is deterministic.
    PathField target(int j, const BrownianBatch& batch) const;
};

LqProblem make_lq_problem(int n_cells, const TimeGrid& grid, double nu, LinearSpdeCoeffs coeffs, DesiredState y_d);

/// Net_j maps (x, dW_0..dW_{j-1}) to U(t_j, x) at every interior node.
struct PolicyStack {
    std::vector<Mlp> nets;
    /// Feed dW / sqrt(tau) instead of dW, a fixed rescaling absorbed by the
    /// first layer.
    bool scale_noise = true;

    int steps() const { return static_cast<int>(nets.size()); }
};

PolicyStack make_policy_stack(int J, const std::vector<int>& hidden, std::uint64_t seed,
                              Precision precision = Precision::Double, bool scale_noise = true);

/// Input matrix of Net_j: (1 + j) x (n_paths * dofs), column r*dofs + i holds
/// (x_i, dW_0^r, ..., dW_{j-1}^r).
Matrix policy_input(const PolicyStack& stack, const FemSystem& fem, const BrownianBatch& batch, int j);

/// Control field U(t_j) for j = 0..J-1.
PathSeries eval_policy(const PolicyStack& stack, const FemSystem& fem, const BrownianBatch& batch);

struct LossValue {
    double tracking = 0.0;
    double penalty = 0.0;
    double total() const { return tracking + penalty; }
};

LossValue loss_terms(const LqProblem& problem, const PathSeries& control, const PathSeries& state,
                     const BrownianBatch& batch);
double loss(const LqProblem& problem, const PathSeries& control, const BrownianBatch& batch);

struct LossGradient {
    double loss = 0.0;
    std::vector<Vector> grads;  // one per net
};

/// Batch loss of the policy and its exact gradient with respect to every
/// network parameter, by reverse accumulation through the state recursion.
LossGradient loss_and_gradient(const LqProblem& problem, const PolicyStack& stack, const BrownianBatch& batch);

struct TrainConfig {
    int iterations = 2000;
    int batch_size = 128;
    AdamOptions adam;
    std::uint64_t seed = 1;
};

struct TrainResult {
    std::vector<double> loss_trace;
    double seconds = 0.0;
};

/// Adam on fresh batches; iteration k uses seed derive_seed(config.seed, k).
TrainResult train(const LqProblem& problem, PolicyStack& stack, const TrainConfig& config);

/// Exact minimizer of the discrete deterministic problem (alpha2 = alpha3 = 0,
/// deterministic y_d) by conjugate gradients on the reduced quadratic.
struct DeterministicLqSolution {
    std::vector<GridFunction> control;  // J entries
    std::vector<GridFunction> state;    // J+1 entries
    double loss = 0.0;
    int iterations = 0;
};

DeterministicLqSolution solve_deterministic_lq(const LqProblem& problem, double tol = 1e-12, int max_iters = 5000);

struct OptimalityResidual {
    double residual = 0.0;      // ||U + (alpha1 q + alpha3 z)/nu||_{L2(0,T;H)}
    double control_norm = 0.0;  // ||U||_{L2(0,T;H)}
    double relative() const { return control_norm > 0.0 ? residual / control_norm : residual; }
};

/// Adjoint (p, z) from solve_backward with driver alpha0 E_j p_{j+1} + alpha2 z + (Y_j - Q_h y_d),
/// zero terminal value, and the state coefficients Y_j as extra regressors.
OptimalityResidual optimality_residual(const LqProblem& problem, const PathSeries& control,
                                       const BrownianBatch& batch, const RegressionBasis& basis);

struct DualityGap {
    double lhs = 0.0;  // sum_j tau E(alpha1 p_j + alpha3 z_j, v_j)
    double rhs = 0.0;  // sum_j tau E(g_j, y_j)
    double gap = 0.0;
};

/// Relative gap of the duality identity between the backward equation with
/// driver alpha0 p + g + alpha2 z (zero terminal) and the state driven by v.
DualityGap duality_check(const FemSystem& fem, const TimeGrid& grid, const LinearSpdeCoeffs& coeffs,
                         const TestProcess& g, const TestProcess& v, const BrownianBatch& batch,
                         const RegressionBasis& basis);

/// Fixed adapted inputs for duality checks. Deterministic:
/// g = (1 + t) Q_h sin(pi x), v = cos(5t) Q_h 4x(1-x). Stochastic:
/// g = (1 + W(t)) Q_h sin(pi x), v = cos(W(t)) Q_h 4x(1-x).
struct DualityInputs {
    TestProcess g;
    TestProcess v;
};

DualityInputs duality_inputs(const FemSystem& fem, bool stochastic);

struct LqTemplate {
    TimeGrid grid;
    double nu = 1e-2;
    LinearSpdeCoeffs coeffs;
    DesiredState y_d;
};

struct PolicyOptions {
    std::vector<int> hidden{32, 32, 32, 32};
    Precision precision = Precision::Double;
    bool scale_noise = true;
    std::uint64_t init_seed = 11;
};

struct StudyConfig {
    std::vector<int> mesh_cells{4, 8, 16};
    int reference_cells = 32;
    TrainConfig train;
    PolicyOptions policy;
    int eval_paths = 100000;
    std::uint64_t eval_seed = 2024;
    int eval_chunk = 2048;
};

struct MeshResult {
    int n_cells = 0;
    double u_error = 0.0, u_error_se = 0.0;
    double y_error = 0.0, y_error_se = 0.0;
    double final_loss = 0.0;  // mean of the last 100 batch losses
    double train_seconds = 0.0;
};

struct ConvergenceReport {
    std::vector<MeshResult> rows;
    std::vector<double> u_orders, y_orders;
    bool u_monotone = true;
    bool y_monotone = true;
    int reference_cells = 0;
    int eval_paths = 0;
    std::uint64_t train_seed = 0, eval_seed = 0;
    double reference_train_seconds = 0.0;
    double eval_seconds = 0.0;
};

/// Observed order log2(e_{k-1} / e_k) between successive entries.
std::vector<double> observed_orders(const std::vector<double>& errors);

/// ||U - U*||, ||Y - Y*|| in L2(0,T;H) on common evaluation paths, coarse
/// fields prolongated to the reference mesh. Returns one MeshResult per stack
/// (only the error fields are set).
std::vector<MeshResult> evaluate_against_reference(const std::vector<const LqProblem*>& problems,
                                                   const std::vector<const PolicyStack*>& stacks,
                                                   const LqProblem& reference, const PolicyStack& reference_stack,
                                                   int eval_paths, std::uint64_t eval_seed, int chunk);

/// Trains one stack per mesh and on the reference mesh with common training
/// noise and initialization seeds, then evaluates errors against the reference.
ConvergenceReport convergence_study(const LqTemplate& setup, const StudyConfig& config);

}  // namespace bspde

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include <Eigen/Dense>

namespace bspde {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Nodal coefficients of an element of V_h (interior nodes only).
using GridFunction = Eigen::VectorXd;

/// One V_h element per Monte Carlo path: row r holds the coefficients of path r.
using PathField = Eigen::MatrixXd;

/// Uniform partition of (0, 1) with homogeneous Dirichlet ends.
struct Mesh1D {
    int n_cells = 0;
    double h = 0.0;
    std::vector<double> nodes;  // interior nodes x_i = i*h, i = 1..n_cells-1

    int dofs() const { return n_cells - 1; }
};

Mesh1D build_mesh(int n_cells);

/// Symmetric tridiagonal matrix stored as diagonal and first off-diagonal.
struct SymTridiag {
    Vector diag;
    Vector off;  // off(i) couples rows i and i+1

    int size() const { return static_cast<int>(diag.size()); }
    Vector apply(const Vector& u) const;
    /// Applies the matrix to every row of a path field.
    PathField apply_rows(const PathField& u) const;
    Matrix dense() const;
    double quadratic(const Vector& u) const { return u.dot(apply(u)); }
};

/// LDL^T factorization of a symmetric positive definite tridiagonal matrix.
class TridiagFactor {
public:
    explicit TridiagFactor(const SymTridiag& matrix);

    void solve_in_place(Eigen::Ref<Vector> rhs) const;
    /// Solves for every row of the field (each row is one right-hand side).
    void solve_rows_in_place(PathField& rhs) const;
    Vector solve(const Vector& rhs) const;

private:
    Vector d_;  // pivots
    Vector l_;  // unit lower bidiagonal multipliers
};

/// P1 mass and stiffness operators on a uniform mesh.
///
/// The system is immutable after construction except for a cache of
/// factorizations of M + tau*A, which is guarded by a mutex so the object can
/// be shared across threads.
class FemSystem {
public:
    explicit FemSystem(Mesh1D mesh);

    const Mesh1D& mesh() const { return mesh_; }
    int dofs() const { return mesh_.dofs(); }
    double h() const { return mesh_.h; }
    const SymTridiag& mass() const { return mass_; }
    const SymTridiag& stiffness() const { return stiffness_; }
    const TridiagFactor& mass_factor() const { return mass_factor_; }

    /// Cached factorization of M + tau*A.
    std::shared_ptr<const TridiagFactor> shifted_factor(double tau) const;
    SymTridiag shifted(double tau) const;

private:
    Mesh1D mesh_;
    SymTridiag mass_;
    SymTridiag stiffness_;
    TridiagFactor mass_factor_;
    mutable std::mutex cache_mutex_;
    mutable std::map<double, std::shared_ptr<const TridiagFactor>> shifted_cache_;
};

FemSystem assemble(const Mesh1D& mesh);

/// b_i = \int g phi_i with composite Gauss-Legendre quadrature of the given
/// order on every cell. Quadrature nodes are interior to each cell, so g is
/// never evaluated at x = 0 or x = 1.
Vector load_vector(const FemSystem& fem, const std::function<double(double)>& g,
                   int quadrature_order = 4);

/// L2 projection Q_h g: solves M c = b.
GridFunction l2_project(const FemSystem& fem, const std::function<double(double)>& g,
                        int quadrature_order = 4);

/// Nodal interpolant I_h g.
GridFunction interpolate(const FemSystem& fem, const std::function<double(double)>& g);

/// w = Delta_h u, i.e. M w = -A u.
GridFunction apply_discrete_laplacian(const FemSystem& fem, const GridFunction& u);

/// Value of the piecewise-linear function with coefficients u at x.
double evaluate(const Mesh1D& mesh, const GridFunction& u, double x);

/// Nodal values of a coarse V_h function at the interior nodes of a nested
/// finer mesh (n_fine must be a multiple of n_coarse).
Matrix prolongation_matrix(const Mesh1D& coarse, const Mesh1D& fine);

/// Generalized eigenpairs of (A, M): A v_k = lambda_k M v_k, v_i^T M v_j = delta_ij.
struct SpectralDecomp {
    Vector eigenvalues;  // ascending
    Matrix eigenvectors; // column k is v_k
    double max_residual = 0.0;       // max_k |A v_k - lambda_k M v_k| / lambda_k
    double orthonormality_error = 0.0;  // max |V^T M V - I|
};

SpectralDecomp spectral(const FemSystem& fem);

/// Closed-form k-th eigenvalue of the P1 Dirichlet pencil on a uniform mesh.
double p1_dirichlet_eigenvalue(double h, int k);

/// Discrete fractional norm ||(-Delta_h)^{gamma/2} u||, gamma in {-2,-1,0,1,2}.
/// gamma = 0 and gamma = 1 do not need the spectral decomposition.
double norm(const FemSystem& fem, const SpectralDecomp* spec, const GridFunction& u,
            int gamma);

}  // namespace bspde

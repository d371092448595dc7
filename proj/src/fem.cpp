// SPDX-License-Identifier: Apache-2.0
#include "bspde/fem.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Eigenvalues>

#include "bspde/errors.hpp"

namespace bspde {

namespace {

struct GaussRule {
    Vector nodes;    // on [-1, 1]
    Vector weights;
};

// Golub-Welsch: eigenvalues of the Jacobi matrix of the Legendre recurrence.
GaussRule gauss_legendre(int points) {
    Matrix jacobi = Matrix::Zero(points, points);
    for (int k = 1; k < points; ++k) {
        double beta = k / std::sqrt(4.0 * k * k - 1.0);
        jacobi(k, k - 1) = beta;
        jacobi(k - 1, k) = beta;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> solver(jacobi);
    GaussRule rule;
    rule.nodes = solver.eigenvalues();
    rule.weights = 2.0 * solver.eigenvectors().row(0).transpose().array().square();
    return rule;
}

}  // namespace

Mesh1D build_mesh(int n_cells) {
    require(n_cells >= 2, "build_mesh: n_cells must be at least 2, got " + std::to_string(n_cells));
    Mesh1D mesh;
    mesh.n_cells = n_cells;
    mesh.h = 1.0 / n_cells;
    mesh.nodes.resize(n_cells - 1);
    for (int i = 1; i < n_cells; ++i) mesh.nodes[i - 1] = static_cast<double>(i) / n_cells;
    return mesh;
}

Vector SymTridiag::apply(const Vector& u) const {
    const int n = size();
    require(u.size() == n, "SymTridiag::apply: dimension mismatch");
    Vector out = diag.cwiseProduct(u);
    for (int i = 0; i + 1 < n; ++i) {
        out(i) += off(i) * u(i + 1);
        out(i + 1) += off(i) * u(i);
    }
    return out;
}

PathField SymTridiag::apply_rows(const PathField& u) const {
    const int n = size();
    require(u.cols() == n, "SymTridiag::apply_rows: dimension mismatch");
    PathField out(u.rows(), n);
    for (int i = 0; i < n; ++i) {
        out.col(i) = diag(i) * u.col(i);
        if (i > 0) out.col(i) += off(i - 1) * u.col(i - 1);
        if (i + 1 < n) out.col(i) += off(i) * u.col(i + 1);
    }
    return out;
}

Matrix SymTridiag::dense() const {
    const int n = size();
    Matrix m = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        m(i, i) = diag(i);
        if (i + 1 < n) {
            m(i, i + 1) = off(i);
            m(i + 1, i) = off(i);
        }
    }
    return m;
}

TridiagFactor::TridiagFactor(const SymTridiag& matrix) {
    const int n = matrix.size();
    d_.resize(n);
    l_.resize(n > 0 ? n - 1 : 0);
    for (int i = 0; i < n; ++i) {
        double pivot = matrix.diag(i);
        if (i > 0) pivot -= l_(i - 1) * l_(i - 1) * d_(i - 1);
        if (!(pivot > 0.0) || !std::isfinite(pivot)) {
            throw NumericFailure("TridiagFactor: non-positive pivot at row " + std::to_string(i));
        }
        d_(i) = pivot;
        if (i + 1 < n) l_(i) = matrix.off(i) / pivot;
    }
}

void TridiagFactor::solve_in_place(Eigen::Ref<Vector> rhs) const {
    const int n = static_cast<int>(d_.size());
    require(rhs.size() == n, "TridiagFactor::solve: dimension mismatch");
    for (int i = 1; i < n; ++i) rhs(i) -= l_(i - 1) * rhs(i - 1);
    for (int i = 0; i < n; ++i) rhs(i) /= d_(i);
    for (int i = n - 2; i >= 0; --i) rhs(i) -= l_(i) * rhs(i + 1);
}

void TridiagFactor::solve_rows_in_place(PathField& rhs) const {
    const int n = static_cast<int>(d_.size());
    require(rhs.cols() == n, "TridiagFactor::solve_rows: dimension mismatch");
    for (int i = 1; i < n; ++i) rhs.col(i) -= l_(i - 1) * rhs.col(i - 1);
    for (int i = 0; i < n; ++i) rhs.col(i) /= d_(i);
    for (int i = n - 2; i >= 0; --i) rhs.col(i) -= l_(i) * rhs.col(i + 1);
}

Vector TridiagFactor::solve(const Vector& rhs) const {
    Vector x = rhs;
    solve_in_place(x);
    return x;
}

namespace {

SymTridiag p1_mass(const Mesh1D& mesh) {
    const int n = mesh.dofs();
    SymTridiag m;
    m.diag = Vector::Constant(n, 4.0 * mesh.h / 6.0);
    m.off = Vector::Constant(n - 1, mesh.h / 6.0);
    return m;
}

SymTridiag p1_stiffness(const Mesh1D& mesh) {
    const int n = mesh.dofs();
    SymTridiag a;
    a.diag = Vector::Constant(n, 2.0 / mesh.h);
    a.off = Vector::Constant(n - 1, -1.0 / mesh.h);
    return a;
}

}  // namespace

FemSystem::FemSystem(Mesh1D mesh)
    : mesh_(std::move(mesh)),
      mass_(p1_mass(mesh_)),
      stiffness_(p1_stiffness(mesh_)),
      mass_factor_(mass_) {}

SymTridiag FemSystem::shifted(double tau) const {
    SymTridiag s;
    s.diag = mass_.diag + tau * stiffness_.diag;
    s.off = mass_.off + tau * stiffness_.off;
    return s;
}

std::shared_ptr<const TridiagFactor> FemSystem::shifted_factor(double tau) const {
    require(tau >= 0.0 && std::isfinite(tau), "shifted_factor: tau must be finite and nonnegative");
    std::lock_guard<std::mutex> lock(cache_mutex_);
    auto it = shifted_cache_.find(tau);
    if (it != shifted_cache_.end()) return it->second;
    auto factor = std::make_shared<const TridiagFactor>(shifted(tau));
    shifted_cache_.emplace(tau, factor);
    return factor;
}

FemSystem assemble(const Mesh1D& mesh) {
    require(mesh.n_cells >= 2, "assemble: mesh needs at least two cells");
    return FemSystem(mesh);
}

Vector load_vector(const FemSystem& fem, const std::function<double(double)>& g,
                   int quadrature_order) {
    require(quadrature_order >= 1, "load_vector: quadrature_order must be >= 1");
    const Mesh1D& mesh = fem.mesh();
    const GaussRule rule = gauss_legendre(quadrature_order);
    const double h = mesh.h;
    Vector b = Vector::Zero(mesh.dofs());
    for (int cell = 0; cell < mesh.n_cells; ++cell) {
        const double left = cell * h;
        for (int q = 0; q < quadrature_order; ++q) {
            const double s = 0.5 * (rule.nodes(q) + 1.0);  // local coordinate in (0,1)
            const double x = left + s * h;
            const double w = 0.5 * h * rule.weights(q) * g(x);
            // cell spans nodes cell (left) and cell+1 (right); interior dof index = node - 1
            if (cell >= 1) b(cell - 1) += w * (1.0 - s);
            if (cell + 1 <= mesh.dofs()) b(cell) += w * s;
        }
    }
    return b;
}

GridFunction l2_project(const FemSystem& fem, const std::function<double(double)>& g,
                        int quadrature_order) {
    return fem.mass_factor().solve(load_vector(fem, g, quadrature_order));
}

GridFunction interpolate(const FemSystem& fem, const std::function<double(double)>& g) {
    const auto& nodes = fem.mesh().nodes;
    GridFunction u(fem.dofs());
    for (int i = 0; i < fem.dofs(); ++i) u(i) = g(nodes[i]);
    return u;
}

GridFunction apply_discrete_laplacian(const FemSystem& fem, const GridFunction& u) {
    require(u.size() == fem.dofs(), "apply_discrete_laplacian: dimension mismatch");
    return fem.mass_factor().solve(-fem.stiffness().apply(u));
}

double evaluate(const Mesh1D& mesh, const GridFunction& u, double x) {
    if (x <= 0.0 || x >= 1.0) return 0.0;
    const double pos = x / mesh.h;
    int cell = static_cast<int>(std::floor(pos));
    if (cell >= mesh.n_cells) cell = mesh.n_cells - 1;
    const double s = pos - cell;
    const double left = cell >= 1 ? u(cell - 1) : 0.0;
    const double right = cell + 1 <= mesh.dofs() ? u(cell) : 0.0;
    return (1.0 - s) * left + s * right;
}

Matrix prolongation_matrix(const Mesh1D& coarse, const Mesh1D& fine) {
    require(fine.n_cells % coarse.n_cells == 0,
            "prolongation_matrix: meshes are not nested");
    const int ratio = fine.n_cells / coarse.n_cells;
    Matrix p = Matrix::Zero(fine.dofs(), coarse.dofs());
    for (int f = 1; f < fine.n_cells; ++f) {
        const int cell = f / ratio;
        const double s = static_cast<double>(f % ratio) / ratio;
        if (cell >= 1) p(f - 1, cell - 1) += 1.0 - s;
        if (s > 0.0 && cell + 1 <= coarse.dofs()) p(f - 1, cell) += s;
    }
    return p;
}

SpectralDecomp spectral(const FemSystem& fem) {
    const Matrix a = fem.stiffness().dense();
    const Matrix m = fem.mass().dense();
    Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> solver(a, m, Eigen::ComputeEigenvectors | Eigen::Ax_lBx);
    if (solver.info() != Eigen::Success) {
        throw NumericFailure("spectral: generalized eigensolver did not converge");
    }
    SpectralDecomp out;
    out.eigenvalues = solver.eigenvalues();
    out.eigenvectors = solver.eigenvectors();
    // Sign convention: first nonzero component positive.
    for (int k = 0; k < out.eigenvectors.cols(); ++k) {
        int i = 0;
        while (i < out.eigenvectors.rows() && std::abs(out.eigenvectors(i, k)) < 1e-14) ++i;
        if (i < out.eigenvectors.rows() && out.eigenvectors(i, k) < 0.0) out.eigenvectors.col(k) *= -1.0;
    }
    const Matrix residual = a * out.eigenvectors - m * out.eigenvectors * out.eigenvalues.asDiagonal();
    for (int k = 0; k < residual.cols(); ++k) {
        out.max_residual = std::max(out.max_residual, residual.col(k).norm() / out.eigenvalues(k));
    }
    const Matrix gram = out.eigenvectors.transpose() * m * out.eigenvectors;
    out.orthonormality_error = (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
    if (out.eigenvalues.minCoeff() <= 0.0 || out.max_residual > 1e-10 || out.orthonormality_error > 1e-12) {
        throw NumericFailure("spectral: residual " + std::to_string(out.max_residual) +
                             ", orthonormality error " + std::to_string(out.orthonormality_error));
    }
    return out;
}

double p1_dirichlet_eigenvalue(double h, int k) {
    const double c = std::cos(k * std::numbers::pi * h);
    return 6.0 / (h * h) * (1.0 - c) / (2.0 + c);
}

double norm(const FemSystem& fem, const SpectralDecomp* spec, const GridFunction& u, int gamma) {
    require(u.size() == fem.dofs(), "norm: dimension mismatch");
    require(gamma >= -2 && gamma <= 2, "norm: gamma must be one of -2, -1, 0, 1, 2");
    if (gamma == 0) return std::sqrt(std::max(0.0, fem.mass().quadratic(u)));
    if (gamma == 1) return std::sqrt(std::max(0.0, fem.stiffness().quadratic(u)));
    if (spec == nullptr) throw InvalidState("norm: spectral decomposition required for gamma " + std::to_string(gamma));
    const Vector modal = spec->eigenvectors.transpose() * fem.mass().apply(u);
    const Vector weights = spec->eigenvalues.array().pow(static_cast<double>(gamma));
    return std::sqrt((weights.array() * modal.array().square()).sum());
}

}  // namespace bspde

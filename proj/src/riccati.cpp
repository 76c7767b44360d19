#include "pfda/transport_filters.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <cmath>
#include <complex>

namespace pfda {

namespace {

using CMatrix = Eigen::MatrixXcd;

/// Solves AᵀX + XA = C through the complex Schur form of A.
Matrix lyapunov(const Matrix& a, const Matrix& c) {
    const Index n = a.rows();
    Eigen::ComplexSchur<Matrix> schur(a);
    const CMatrix& u = schur.matrixU();
    const CMatrix& t = schur.matrixT();
    // Aᴴ = Aᵀ for real A:  Tᴴ Y + Y T = Uᴴ C U with Y = Uᴴ X U
    CMatrix rhs = u.adjoint() * c.cast<std::complex<double>>() * u;
    CMatrix y = CMatrix::Zero(n, n);
    const CMatrix th = t.adjoint();
    for (Index k = 0; k < n; ++k) {
        Eigen::VectorXcd b = rhs.col(k);
        for (Index l = 0; l < k; ++l) b -= y.col(l) * t(l, k);
        // (Tᴴ + t_kk I) is lower triangular
        CMatrix lower = th;
        lower.diagonal().array() += t(k, k);
        y.col(k) = lower.triangularView<Eigen::Lower>().solve(b);
    }
    Matrix x = (u * y * u.adjoint()).real();
    return 0.5 * (x + x.transpose());
}

Matrix care_residual(const Matrix& a, const Matrix& g, const Matrix& q, const Matrix& x) {
    return a.transpose() * x + x * a - x * g * x + q;
}

}  // namespace

Matrix solve_care(const Matrix& a, const Matrix& g, const Matrix& q, int max_iterations, double tol) {
    const Index n = a.rows();
    if (n == 0) return Matrix(0, 0);
    Matrix h(2 * n, 2 * n);
    h << a, -g, -q, -a.transpose();

    // Matrix sign function with determinant scaling
    Matrix z = h;
    bool scaling = true;
    int it = 0;
    for (;; ++it) {
        if (it >= max_iterations) throw Error(ErrorCode::RiccatiNoConvergence, "sign iteration did not converge");
        Eigen::PartialPivLU<Matrix> lu(z);
        Matrix zinv = lu.inverse();
        if (!zinv.allFinite()) throw Error(ErrorCode::RiccatiNoConvergence, "Hamiltonian has imaginary-axis eigenvalues");
        double c = 1.0;
        if (scaling) {
            const double logdet = lu.matrixLU().diagonal().array().abs().log().sum();
            c = std::exp(logdet / static_cast<double>(2 * n));
        }
        Matrix next = 0.5 * (z / c + c * zinv);
        const double change = (next - z).lpNorm<1>() / std::max(1.0, next.lpNorm<1>());
        z = next;
        if (change < 1e-2) scaling = false;
        if (change < 1e-14) break;
    }
    const Matrix w11 = z.topLeftCorner(n, n), w12 = z.topRightCorner(n, n);
    const Matrix w21 = z.bottomLeftCorner(n, n), w22 = z.bottomRightCorner(n, n);
    Matrix lhs(2 * n, n), rhs(2 * n, n);
    const Matrix id = Matrix::Identity(n, n);
    lhs << w12, w22 + id;
    rhs << -(w11 + id), -w21;
    Matrix x = lhs.colPivHouseholderQr().solve(rhs);
    x = 0.5 * (x + x.transpose());

    // Newton refinement on the residual
    const double scale = std::max({1.0, q.cwiseAbs().maxCoeff(), a.cwiseAbs().maxCoeff()});
    for (int k = 0; k < 20; ++k) {
        Matrix r = care_residual(a, g, q, x);
        if (r.cwiseAbs().maxCoeff() <= tol * scale) break;
        const Matrix ak = a - g * x;
        Matrix dx = lyapunov(ak, -r);
        if (!dx.allFinite()) break;
        Matrix trial = x + dx;
        if (care_residual(a, g, q, trial).cwiseAbs().maxCoeff() >= r.cwiseAbs().maxCoeff()) break;
        x = trial;
    }
    return x;
}

Matrix etpf_second_order_correction(const Matrix& d, const Vector& w, RiccatiReport* report) {
    const Index n = w.size();
    if (d.rows() != n || d.cols() != n) throw Error(ErrorCode::DimensionMismatch, "transform must be N×N");
    const double nd = static_cast<double>(n);
    std::vector<Index> support;
    for (Index i = 0; i < n; ++i)
        if (w[i] > 1e-15) support.push_back(i);
    const Index s = static_cast<Index>(support.size());

    Matrix out = d;
    if (s >= 2) {
        Matrix b = d - w * Vector::Ones(n).transpose();
        Matrix bs(s, n);
        Vector ws(s);
        for (Index k = 0; k < s; ++k) {
            bs.row(k) = b.row(support[static_cast<std::size_t>(k)]);
            ws[k] = w[support[static_cast<std::size_t>(k)]];
        }
        Matrix bss(s, s);
        for (Index k = 0; k < s; ++k) bss.col(k) = bs.col(support[static_cast<std::size_t>(k)]);
        Matrix c = nd * (Matrix(ws.asDiagonal()) - ws * ws.transpose());
        // Orthonormal basis of the complement of 1 in the support
        Eigen::HouseholderQR<Matrix> qr(Matrix::Ones(s, 1));
        Matrix full = qr.householderQ() * Matrix::Identity(s, s);
        Matrix u = full.rightCols(s - 1);
        Matrix at = -u.transpose() * bss.transpose() * u;
        Matrix qt = u.transpose() * (c - bs * bs.transpose()) * u;
        qt = 0.5 * (qt + qt.transpose());
        Matrix y = solve_care(at, Matrix::Identity(s - 1, s - 1), qt);
        Matrix delta = u * y * u.transpose();
        delta = 0.5 * (delta + delta.transpose());
        for (Index k = 0; k < s; ++k)
            for (Index l = 0; l < s; ++l)
                out(support[static_cast<std::size_t>(k)], support[static_cast<std::size_t>(l)]) += delta(k, l);
    }
    Matrix bt = out - w * Vector::Ones(n).transpose();
    Matrix lhs = bt * bt.transpose() / nd;
    Matrix target = Matrix(w.asDiagonal()) - w * w.transpose();
    const double residual = (lhs - target).cwiseAbs().maxCoeff();
    if (report) report->residual = residual;
    if (!(residual <= 1e-8)) throw Error(ErrorCode::RiccatiNoConvergence, "second-order correction residual too large");
    return out;
}

}  // namespace pfda

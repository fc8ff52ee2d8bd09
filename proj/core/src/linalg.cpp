#include "attnflow/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace attnflow {

const char* errc_name(Errc c) noexcept {
  switch (c) {
    case Errc::NotSymmetric: return "NotSymmetric";
    case Errc::NotPsd: return "NotPsd";
    case Errc::NotSpd: return "NotSpd";
    case Errc::IllConditioned: return "IllConditioned";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::MissingKernel: return "MissingKernel";
    case Errc::NotConverged: return "NotConverged";
    case Errc::UnsupportedVariant: return "UnsupportedVariant";
    case Errc::SingularA: return "SingularA";
    case Errc::SingularSigma: return "SingularSigma";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::SizeMismatch: return "SizeMismatch";
    case Errc::TooLarge: return "TooLarge";
    case Errc::MarginalMismatch: return "MarginalMismatch";
    case Errc::OutOfDomain: return "OutOfDomain";
    case Errc::Overflow: return "Overflow";
    case Errc::CommutationViolated: return "CommutationViolated";
    case Errc::ConfigError: return "ConfigError";
    case Errc::StepFailure: return "StepFailure";
    case Errc::InvalidArgument: return "InvalidArgument";
  }
  return "UnknownError";
}

bool is_symmetric(const Matrix& s, double rel_tol) {
  if (s.rows() != s.cols()) return false;
  return (s - s.transpose()).norm() <= rel_tol * (1.0 + s.norm());
}

SymEig sym_eig(const Matrix& s) {
  if (s.rows() != s.cols()) fail(Errc::DimensionMismatch, "sym_eig needs a square matrix");
  if (!is_symmetric(s)) fail(Errc::NotSymmetric, "sym_eig input fails the 1e-10 symmetry test");

  const int n = static_cast<int>(s.rows());
  Matrix a = 0.5 * (s + s.transpose());
  Matrix u = Matrix::Identity(n, n);
  const double stop = 1e-15 * std::max(a.norm(), 1e-300);

  for (int sweep = 0; sweep < 64 && n > 1; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(2.0 * off) <= stop) break;

    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (int k = 0; k < n; ++k) {  // A <- A J
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {  // A <- J^T A
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {  // U <- U J
          const double ukp = u(k, p), ukq = u(k, q);
          u(k, p) = c * ukp - sn * ukq;
          u(k, q) = sn * ukp + c * ukq;
        }
      }
    }
  }

  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int i, int j) { return a(i, i) > a(j, j); });

  SymEig out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (int k = 0; k < n; ++k) {
    out.eigenvalues(k) = a(idx[k], idx[k]);
    out.eigenvectors.col(k) = u.col(idx[k]);
  }
  return out;
}

Matrix psd_sqrt(const Matrix& s) {
  SymEig e = sym_eig(s);
  const double lmax = std::max(e.eigenvalues(0), 0.0);
  Vector w = e.eigenvalues;
  for (int i = 0; i < w.size(); ++i) {
    if (w(i) < -1e-10 * lmax) fail(Errc::NotPsd, "psd_sqrt: eigenvalue below -1e-10*lambda_max");
    w(i) = std::sqrt(std::max(w(i), 0.0));
  }
  return e.eigenvectors * w.asDiagonal() * e.eigenvectors.transpose();
}

int rank_eps(const Matrix& s, double rel_tol) {
  SymEig e = sym_eig(s);
  const double cutoff = rel_tol * std::max(e.eigenvalues(0), 1e-300);
  int r = 0;
  for (int i = 0; i < e.eigenvalues.size(); ++i)
    if (e.eigenvalues(i) > cutoff) ++r;
  return r;
}

namespace {

SymEig spd_eig_checked(const Matrix& s) {
  SymEig e = sym_eig(s);
  const int n = static_cast<int>(e.eigenvalues.size());
  const double lmin = e.eigenvalues(n - 1);
  const double lmax = e.eigenvalues(0);
  if (!(lmin > 0.0) || lmax / lmin >= 1e12)
    fail(Errc::IllConditioned, "SPD solve: condition number >= 1e12 or non-positive spectrum");
  return e;
}

}  // namespace

Vector solve_spd(const Matrix& s, const Vector& b) {
  if (s.rows() != b.size()) fail(Errc::DimensionMismatch, "solve_spd: size mismatch");
  SymEig e = spd_eig_checked(s);
  return e.eigenvectors *
         ((e.eigenvectors.transpose() * b).array() / e.eigenvalues.array()).matrix();
}

Matrix inverse_spd(const Matrix& s) {
  SymEig e = spd_eig_checked(s);
  return e.eigenvectors * e.eigenvalues.cwiseInverse().asDiagonal() * e.eigenvectors.transpose();
}

double log_det_spd(const Matrix& s) {
  SymEig e = sym_eig(s);
  double acc = 0.0;
  for (int i = 0; i < e.eigenvalues.size(); ++i) {
    if (!(e.eigenvalues(i) > 0.0)) fail(Errc::NotSpd, "log_det_spd: non-positive eigenvalue");
    acc += std::log(e.eigenvalues(i));
  }
  return acc;
}

double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  SymEig e = sym_eig(Matrix(m.transpose() * m));
  return std::sqrt(std::max(e.eigenvalues(0), 0.0));
}

}  // namespace attnflow

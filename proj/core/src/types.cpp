#include "attnflow/types.hpp"

#include <cmath>

namespace attnflow {

const char* variant_name(Variant v) noexcept {
  switch (v) {
    case Variant::Softmax: return "softmax";
    case Variant::Linear: return "linear";
    case Variant::LinearEps: return "linear_eps";
    case Variant::L2: return "l2";
    case Variant::Sinkhorn: return "sinkhorn";
    case Variant::Sigmoid: return "sigmoid";
    case Variant::ReLU: return "relu";
    case Variant::Exp: return "exp";
    case Variant::MultiHead: return "multihead";
    case Variant::Masked: return "masked";
  }
  return "unknown";
}

EmpiricalMeasure::EmpiricalMeasure(std::vector<Vector> toks, std::optional<std::vector<double>> pos)
    : tokens(std::move(toks)), positions(std::move(pos)) {
  if (tokens.empty()) fail(Errc::InvalidArgument, "empirical measure needs n >= 1 tokens");
  const auto d = tokens.front().size();
  for (const auto& x : tokens)
    if (x.size() != d) fail(Errc::DimensionMismatch, "tokens have mixed dimensions");
  if (positions) {
    if (positions->size() != tokens.size())
      fail(Errc::DimensionMismatch, "positions count differs from token count");
    for (double tau : *positions)
      if (!(tau >= 0.0 && tau <= 1.0)) fail(Errc::InvalidArgument, "position outside [0,1]");
  }
}

Vector EmpiricalMeasure::mean() const {
  Vector m = Vector::Zero(dim());
  for (const auto& x : tokens) m += x;
  return m / size();
}

Matrix EmpiricalMeasure::covariance() const {
  const Vector m = mean();
  Matrix c = Matrix::Zero(dim(), dim());
  for (const auto& x : tokens) c += (x - m) * (x - m).transpose();
  return c / size();
}

Matrix EmpiricalMeasure::second_moment() const {
  Matrix c = Matrix::Zero(dim(), dim());
  for (const auto& x : tokens) c += x * x.transpose();
  return c / size();
}

EmpiricalMeasure EmpiricalMeasure::space_marginal() const {
  return EmpiricalMeasure(tokens);
}

GaussianMeasure::GaussianMeasure(Vector mean, Matrix covariance)
    : alpha(std::move(mean)), sigma(std::move(covariance)) {
  if (sigma.rows() != sigma.cols() || sigma.rows() != alpha.size())
    fail(Errc::DimensionMismatch, "covariance shape does not match mean");
  if (!is_symmetric(sigma)) fail(Errc::NotSymmetric, "covariance fails the 1e-10 symmetry test");
  SymEig e = sym_eig(sigma);
  const double lmax = std::max(e.eigenvalues(0), 0.0);
  if (e.eigenvalues(dim() - 1) < -1e-10 * lmax)
    fail(Errc::NotPsd, "covariance has an eigenvalue below -1e-10*lambda_max");
}

void AttentionParams::validate(int d) const {
  if (variant == Variant::MultiHead) {
    if (heads.empty()) fail(Errc::InvalidArgument, "multi-head params need at least one head");
    const auto h = static_cast<int>(heads.size());
    if (d % h != 0) fail(Errc::InvalidArgument, "head count must divide d");
    for (const auto& head : heads) {
      if (head.Q.rows() != d / h || head.Q.cols() != d || head.K.rows() != d / h ||
          head.K.cols() != d || head.V.rows() != d || head.V.cols() != d)
        fail(Errc::DimensionMismatch, "head matrices must be (d/H) x d with V d x d");
    }
    return;
  }
  const auto k = Q.rows();
  if (k > d) fail(Errc::InvalidArgument, "Q must have k <= d rows");
  if (Q.cols() != d || K.rows() != k || K.cols() != d)
    fail(Errc::DimensionMismatch, "Q, K must be k x d");
  if (V.rows() != d || V.cols() != d) fail(Errc::DimensionMismatch, "V must be d x d");
  if ((variant == Variant::Sinkhorn || variant == Variant::LinearEps ||
       (variant == Variant::Masked && masked_inner == Variant::Sinkhorn)) &&
      !(eps > 0.0))
    fail(Errc::InvalidArgument, "eps must be positive");
}

AttentionParams AttentionParams::softmax(Matrix Q, Matrix K, Matrix V) {
  AttentionParams p;
  p.variant = Variant::Softmax;
  p.Q = std::move(Q);
  p.K = std::move(K);
  p.V = std::move(V);
  return p;
}

AttentionParams AttentionParams::softmax_a(const Matrix& A, Matrix V) {
  return softmax(A, Matrix::Identity(A.rows(), A.cols()), std::move(V));
}

AttentionParams AttentionParams::linear(Matrix Q, Matrix K, Matrix V) {
  AttentionParams p = softmax(std::move(Q), std::move(K), std::move(V));
  p.variant = Variant::Linear;
  return p;
}

AttentionParams AttentionParams::linear_eps(Matrix Q, Matrix K, Matrix V, double eps) {
  AttentionParams p = softmax(std::move(Q), std::move(K), std::move(V));
  p.variant = Variant::LinearEps;
  p.eps = eps;
  return p;
}

AttentionParams AttentionParams::l2(Matrix Q, Matrix K, Matrix V) {
  AttentionParams p = softmax(std::move(Q), std::move(K), std::move(V));
  p.variant = Variant::L2;
  return p;
}

AttentionParams AttentionParams::sinkhorn(Matrix Q, Matrix K, Matrix V, double eps) {
  AttentionParams p = softmax(std::move(Q), std::move(K), std::move(V));
  p.variant = Variant::Sinkhorn;
  p.eps = eps;
  return p;
}

AttentionParams AttentionParams::unnormalized(Variant v, Matrix Q, Matrix K, Matrix V) {
  if (v != Variant::Exp && v != Variant::ReLU && v != Variant::Sigmoid)
    fail(Errc::InvalidArgument, "unnormalized() expects exp, relu or sigmoid");
  AttentionParams p = softmax(std::move(Q), std::move(K), std::move(V));
  p.variant = v;
  return p;
}

AttentionParams AttentionParams::multi_head(std::vector<AttentionHead> heads) {
  AttentionParams p;
  p.variant = Variant::MultiHead;
  p.heads = std::move(heads);
  return p;
}

AttentionParams AttentionParams::masked(AttentionParams inner) {
  if (inner.variant == Variant::Masked) fail(Errc::InvalidArgument, "cannot mask a masked variant");
  AttentionParams p = inner;
  p.masked_inner = inner.variant;
  p.variant = Variant::Masked;
  return p;
}

ParameterSchedule::ParameterSchedule(AttentionParams constant) {
  pieces_.emplace_back(0.0, std::move(constant));
}

ParameterSchedule::ParameterSchedule(std::vector<std::pair<double, AttentionParams>> pieces)
    : pieces_(std::move(pieces)) {
  if (pieces_.empty()) fail(Errc::InvalidArgument, "schedule needs at least one segment");
  if (pieces_.front().first != 0.0) fail(Errc::InvalidArgument, "first breakpoint must be 0");
  for (std::size_t i = 1; i < pieces_.size(); ++i)
    if (!(pieces_[i].first > pieces_[i - 1].first))
      fail(Errc::InvalidArgument, "breakpoints must be strictly increasing");
}

const AttentionParams& ParameterSchedule::at(double t) const {
  std::size_t k = 0;
  while (k + 1 < pieces_.size() && pieces_[k + 1].first <= t) ++k;
  return pieces_[k].second;
}

bool Trajectory::holds_moments() const {
  return !states.empty() && std::holds_alternative<MomentState>(states.front());
}

}  // namespace attnflow

#include "rimae/canonicalize.hpp"

#include <algorithm>
#include <cmath>

namespace rimae {

namespace {

constexpr double kEigenTieTol = 1e-9;  // relative to the largest eigenvalue
constexpr double kSkewTol = 1e-9;      // on dimensionless skewness

void jacobi_rotate(Eigen::Matrix3d& a, Eigen::Matrix3d& v, int p, int q) {
  if (a(p, q) == 0.0) return;
  const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
  const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
  const double c = 1.0 / std::sqrt(t * t + 1.0);
  const double s = t * c;

  Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
  rot(p, p) = c;
  rot(q, q) = c;
  rot(p, q) = s;
  rot(q, p) = -s;
  a = rot.transpose() * a * rot;
  a(p, q) = 0.0;
  a(q, p) = 0.0;
  v = v * rot;
}

double offdiag_norm(const Eigen::Matrix3d& a) {
  return std::sqrt(a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2)) * std::sqrt(2.0);
}

}  // namespace

EigenSystem3 jacobi_eigen3(const Mat3& sym) {
  Eigen::Matrix3d a = sym.cast<double>();
  Eigen::Matrix3d v = Eigen::Matrix3d::Identity();
  const double scale = std::max(a.norm(), 1.0);
  for (int sweep = 0; sweep < 64 && offdiag_norm(a) > 1e-14 * scale; ++sweep) {
    jacobi_rotate(a, v, 0, 1);
    jacobi_rotate(a, v, 0, 2);
    jacobi_rotate(a, v, 1, 2);
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return a(x, x) > a(y, y); });
  EigenSystem3 out;
  for (int k = 0; k < 3; ++k) {
    out.values[static_cast<std::size_t>(k)] = a(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(k)]);
    out.vectors.col(k) = v.col(order[static_cast<std::size_t>(k)]).cast<Real>();
  }
  return out;
}

CanonicalPatch pca_canonicalize(const Patch& patch) {
  const Index k = patch.points.rows();
  if (k < 3) throw ArgumentError("pca_canonicalize: at least 3 points required");

  CanonicalPatch out;
  out.center = patch.center;
  out.centroid = patch.points.colwise().mean();
  Points centered = patch.points.rowwise() - out.centroid;

  const Mat3 cov = (centered.transpose() * centered) / static_cast<Real>(k);
  EigenSystem3 eig = jacobi_eigen3(cov);

  const double lmax = std::max(eig.values[0], 0.0);
  std::array<double, 3> skew{};  // dimensionless, per principal axis
  Points proj = centered * eig.vectors;
  for (int axis = 0; axis < 3; ++axis) {
    const double m2 = eig.values[static_cast<std::size_t>(axis)];
    double m3 = 0.0;
    for (Index i = 0; i < k; ++i) {
      const double p = static_cast<double>(proj(i, axis));
      m3 += p * p * p;
    }
    m3 /= static_cast<double>(k);
    skew[static_cast<std::size_t>(axis)] = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  }

  if (lmax <= 0.0)
    throw DegenerateFrame("zero covariance", eig.values, skew);
  if (eig.values[0] - eig.values[1] <= kEigenTieTol * lmax || eig.values[1] - eig.values[2] <= kEigenTieTol * lmax)
    throw DegenerateFrame("eigenvalue tie", eig.values, skew);
  for (int axis = 0; axis < 3; ++axis)
    if (std::abs(skew[static_cast<std::size_t>(axis)]) < kSkewTol)
      throw DegenerateFrame("zero skewness on axis " + std::to_string(axis), eig.values, skew);

  Mat3 frame = eig.vectors;
  for (int axis = 0; axis < 3; ++axis)
    if (skew[static_cast<std::size_t>(axis)] < 0.0) frame.col(axis) = -frame.col(axis);

  if (frame.determinant() < 0.0) {
    int weakest = 0;
    for (int axis = 1; axis < 3; ++axis)
      if (std::abs(skew[static_cast<std::size_t>(axis)]) < std::abs(skew[static_cast<std::size_t>(weakest)]))
        weakest = axis;
    frame.col(weakest) = -frame.col(weakest);
  }

  out.rotation = frame.transpose();  // p_centered = canonical * rotation
  out.canonical_points = centered * frame;
  return out;
}

EquivarianceReport equivariance_check(const Patch& patch, const Mat3& r) {
  if (!is_rotation(r)) throw ArgumentError("equivariance_check: not a proper rotation");
  const CanonicalPatch base = pca_canonicalize(patch);
  Patch rotated;
  rotated.points = patch.points * r;
  rotated.center = patch.center * r;
  rotated.indices = patch.indices;
  const CanonicalPatch rot = pca_canonicalize(rotated);
  EquivarianceReport rep;
  rep.canonical_residual = (rot.canonical_points - base.canonical_points).cwiseAbs().maxCoeff();
  rep.rotation_residual = (rot.rotation - base.rotation * r).norm();
  return rep;
}

}  // namespace rimae

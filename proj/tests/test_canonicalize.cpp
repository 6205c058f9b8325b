#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cstring>

#include "rimae/canonicalize.hpp"

using namespace rimae;

namespace {

Patch patch_from(std::vector<std::array<Real, 3>> pts, RowVec3 center = RowVec3::Zero()) {
  Patch p;
  p.points.resize(static_cast<Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int d = 0; d < 3; ++d) p.points(static_cast<Index>(i), d) = pts[i][static_cast<std::size_t>(d)];
  p.center = center;
  for (Index i = 0; i < p.points.rows(); ++i) p.indices.push_back(i);
  return p;
}

Patch random_patch(Index k, Rng& rng, double scale = 1.0) {
  std::vector<std::array<Real, 3>> pts;
  for (Index i = 0; i < k; ++i)
    pts.push_back({static_cast<Real>(scale * rng.normal()), static_cast<Real>(scale * rng.normal()),
                   static_cast<Real>(scale * rng.normal())});
  Patch p = patch_from(std::move(pts));
  p.center = p.points.row(0);
  return p;
}

// Independent reference: Eigen's solver for the spectrum, the same documented
// skew/determinant sign rule applied on top.
CanonicalPatch canonicalize_oracle(const Patch& patch) {
  const Index k = patch.points.rows();
  CanonicalPatch out;
  out.center = patch.center;
  out.centroid = patch.points.colwise().mean();
  Points centered = patch.points.rowwise() - out.centroid;
  Eigen::Matrix3d cov = (centered.transpose() * centered).cast<double>() / static_cast<double>(k);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  Eigen::Matrix3d v;
  Eigen::Vector3d lam;
  for (int i = 0; i < 3; ++i) {  // Eigen sorts ascending; we want descending
    lam[i] = es.eigenvalues()[2 - i];
    v.col(i) = es.eigenvectors().col(2 - i);
  }
  Eigen::Vector3d skew = Eigen::Vector3d::Zero();
  for (int axis = 0; axis < 3; ++axis) {
    for (Index i = 0; i < k; ++i) {
      const double p = centered.row(i).cast<double>().dot(v.col(axis));
      skew[axis] += p * p * p;
    }
    skew[axis] /= static_cast<double>(k);
    if (skew[axis] < 0) v.col(axis) = -v.col(axis);
  }
  if (v.determinant() < 0) {
    int weakest = 0;
    Eigen::Vector3d nskew = skew.cwiseAbs().array() / lam.array().pow(1.5);
    for (int axis = 1; axis < 3; ++axis)
      if (nskew[axis] < nskew[weakest]) weakest = axis;
    v.col(weakest) = -v.col(weakest);
  }
  out.rotation = v.transpose().cast<Real>();
  out.canonical_points = centered * v.cast<Real>();
  return out;
}

}  // namespace

TEST_CASE("jacobi eigensolver matches Eigen's solver") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    Mat3 m;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) m(i, j) = static_cast<Real>(rng.normal());
    Mat3 sym = (m + m.transpose()) / 2;
    EigenSystem3 got = jacobi_eigen3(sym);

    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(sym.cast<double>());
    for (int i = 0; i < 3; ++i)
      CHECK(std::abs(got.values[static_cast<std::size_t>(i)] - es.eigenvalues()[2 - i]) < 1e-12);

    // reconstruction and orthonormality
    Mat3 lam = Mat3::Zero();
    for (int i = 0; i < 3; ++i) lam(i, i) = static_cast<Real>(got.values[static_cast<std::size_t>(i)]);
    CHECK((got.vectors * lam * got.vectors.transpose() - sym).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((got.vectors.transpose() * got.vectors - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("symmetric patch raises DegenerateFrame with diagnostics") {
  Patch p = patch_from({{2, 0, 0}, {-2, 0, 0}, {0, 1, 0}, {0, -1, 0}});
  try {
    pca_canonicalize(p);
    FAIL("expected DegenerateFrame");
  } catch (const DegenerateFrame& e) {
    CHECK(std::abs(e.eigenvalues[0] - 2.0) < 1e-12);
    CHECK(std::abs(e.eigenvalues[1] - 0.5) < 1e-12);
    CHECK(std::abs(e.eigenvalues[2]) < 1e-12);
    CHECK(std::abs(e.skewness[0]) < 1e-12);
  }

  // eigenvalue tie: a square in the xy plane
  Patch square = patch_from({{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}});
  CHECK_THROWS_AS(pca_canonicalize(square), DegenerateFrame);

  Patch two = patch_from({{1, 0, 0}, {0, 1, 0}});
  CHECK_THROWS_AS(pca_canonicalize(two), ArgumentError);
}

TEST_CASE("canonicalization matches the eigendecomposition oracle") {
  Patch spec = patch_from({{0, 0, 0}, {1, 0, 0}, {0, 2, 0}, {0, 0, 3}, {2, 1, 1}});
  CanonicalPatch got = pca_canonicalize(spec);
  CanonicalPatch want = canonicalize_oracle(spec);
  CHECK((got.canonical_points - want.canonical_points).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((got.rotation - want.rotation).cwiseAbs().maxCoeff() < 1e-9);

  // reconstruction: canonical * R + centroid == input
  Points rec = (got.canonical_points * got.rotation).rowwise() + got.centroid;
  CHECK((rec - spec.points).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(std::abs(got.rotation.determinant() - 1.0) < 1e-12);

  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    Patch p = random_patch(12, rng);
    CanonicalPatch a = pca_canonicalize(p);
    CanonicalPatch b = canonicalize_oracle(p);
    CHECK((a.canonical_points - b.canonical_points).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((a.rotation - b.rotation).cwiseAbs().maxCoeff() < 1e-9);
    Points rec2 = (a.canonical_points * a.rotation).rowwise() + a.centroid;
    CHECK((rec2 - p.points).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("canonical output has sorted diagonal covariance and is a fixed point") {
  Rng rng(3);
  Patch p = random_patch(16, rng);
  CanonicalPatch c = pca_canonicalize(p);

  Mat3 cov = (c.canonical_points.transpose() * c.canonical_points) / static_cast<Real>(16);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) CHECK(std::abs(cov(i, j)) < 1e-10);
  CHECK(cov(0, 0) >= cov(1, 1));
  CHECK(cov(1, 1) >= cov(2, 2));

  Patch canonical_patch;
  canonical_patch.points = c.canonical_points;
  canonical_patch.center = RowVec3::Zero();
  CanonicalPatch again = pca_canonicalize(canonical_patch);
  CHECK((again.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((again.canonical_points - c.canonical_points).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("equivariance under 100 random rotations") {
  Rng rng(4);
  Patch p = random_patch(20, rng);
  for (int trial = 0; trial < 100; ++trial) {
    Mat3 r = random_rotation(rng);
    EquivarianceReport rep = equivariance_check(p, r);
    CHECK(rep.canonical_residual < 1e-9);
    CHECK(rep.rotation_residual < 1e-9);
  }

  EquivarianceReport id = equivariance_check(p, Mat3::Identity());
  CHECK(id.canonical_residual == 0.0);
  CHECK(id.rotation_residual == 0.0);

  Patch sym = patch_from({{2, 0, 0}, {-2, 0, 0}, {0, 1, 0}, {0, -1, 0}});
  CHECK_THROWS_AS(equivariance_check(sym, Mat3::Identity()), DegenerateFrame);
}

TEST_CASE("relative rotation examples and invariance") {
  Mat3 a = z_rotation(M_PI / 6), b = z_rotation(M_PI / 2);
  CHECK((relative_rotation(a, a) - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((relative_rotation(a, b) - z_rotation(M_PI / 3)).cwiseAbs().maxCoeff() < 1e-12);

  Rng rng(5);
  Mat3 ri = random_rotation(rng), rj = random_rotation(rng);
  for (int trial = 0; trial < 100; ++trial) {
    Mat3 r = random_rotation(rng);
    Mat3 moved = relative_rotation(Mat3(ri * r), Mat3(rj * r));
    CHECK((moved - relative_rotation(ri, rj)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(is_rotation(moved, 1e-12));
  }
}

TEST_CASE("canonicalization is bitwise deterministic") {
  Rng rng(6);
  Patch p = random_patch(10, rng);
  CanonicalPatch a = pca_canonicalize(p);
  CanonicalPatch b = pca_canonicalize(p);
  CHECK(std::memcmp(a.canonical_points.data(), b.canonical_points.data(),
                    sizeof(Real) * static_cast<std::size_t>(a.canonical_points.size())) == 0);
  CHECK(std::memcmp(a.rotation.data(), b.rotation.data(), sizeof(Real) * 9) == 0);
}

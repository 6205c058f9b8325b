#pragma once

#include "rimae/pointcloud.hpp"

namespace rimae {

// A patch split into rotation-invariant content and its orientation:
// canonical_points * rotation reproduces the centroid-centered input.
struct CanonicalPatch {
  Points canonical_points;  // centered, principal axes aligned, K x 3
  Mat3 rotation;            // proper rotation taking canonical back to input pose
  RowVec3 center;           // the patch's FPS center, absolute
  RowVec3 centroid;         // centroid removed before alignment
};

struct EigenSystem3 {
  std::array<double, 3> values;  // descending
  Mat3 vectors;                  // columns are eigenvectors, matching order
};

// Cyclic Jacobi on a symmetric 3x3, iterated until the off-diagonal norm
// drops below 1e-14 relative to the matrix norm. Deterministic sweep order.
EigenSystem3 jacobi_eigen3(const Mat3& sym);

// PCA alignment with skewness-sign disambiguation. Throws DegenerateFrame
// when the spectrum has a tie or any axis has (near) zero skewness; such
// frames cannot be made rotation-equivariant.
CanonicalPatch pca_canonicalize(const Patch& patch);

struct EquivarianceReport {
  double canonical_residual;  // max abs diff of canonical points
  double rotation_residual;   // ||R_i' - R_i R||_F
};

// Canonicalizes both the patch and its rotated copy and reports how far the
// pair is from exact equivariance.
EquivarianceReport equivariance_check(const Patch& patch, const Mat3& r);

// R_ij = R_j * R_i^T; invariant to any global rotation applied to both.
inline Mat3 relative_rotation(const Mat3& ri, const Mat3& rj) { return rj * ri.transpose(); }

}  // namespace rimae

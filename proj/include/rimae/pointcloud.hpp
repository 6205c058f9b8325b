#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include "rimae/core.hpp"

namespace rimae {

using Mat3 = Eigen::Matrix<Real, 3, 3>;
using RowVec3 = Eigen::Matrix<Real, 1, 3>;
using Points = Eigen::Matrix<Real, Eigen::Dynamic, 3, Eigen::RowMajor>;

// Row-vector convention throughout: a rotation acts as points * R.
struct PointCloud {
  Points points;
  std::optional<int> label;

  Index size() const { return points.rows(); }
};

struct Patch {
  Points points;              // absolute coordinates, ordered by (distance, index)
  RowVec3 center;             // the FPS-selected point
  std::vector<Index> indices; // source indices into the cloud
};

inline bool is_rotation(const Mat3& r, double tol = 1e-9) {
  return (r.transpose() * r - Mat3::Identity()).norm() < tol && std::abs(r.determinant() - 1.0) < tol;
}

// Center at the centroid and scale to unit max norm. Both operations commute
// with rotation, so normalized clouds stay comparable across poses.
inline PointCloud normalize_cloud(PointCloud cloud) {
  if (cloud.size() < 1) throw ArgumentError("normalize_cloud: empty cloud");
  if (!cloud.points.allFinite()) throw ArgumentError("normalize_cloud: non-finite coordinates");
  cloud.points.rowwise() -= cloud.points.colwise().mean();
  const Real m = cloud.points.rowwise().norm().maxCoeff();
  if (m > Real(0)) cloud.points /= m;
  return cloud;
}

// Farthest point sampling. Deterministic: starts at seed_index, ties broken
// by lowest index.
inline std::vector<Index> fps(const PointCloud& cloud, Index g, Index seed_index = 0) {
  const Index n = cloud.size();
  if (g < 1 || g > n) throw ArgumentError("fps: need 1 <= g <= N");
  if (seed_index < 0 || seed_index >= n) throw ArgumentError("fps: seed index out of range");
  std::vector<Index> picked;
  picked.reserve(static_cast<std::size_t>(g));
  picked.push_back(seed_index);
  Eigen::Matrix<Real, Eigen::Dynamic, 1> best =
      (cloud.points.rowwise() - cloud.points.row(seed_index)).rowwise().squaredNorm();
  for (Index step = 1; step < g; ++step) {
    Index arg = 0;
    Real far = Real(-1);
    for (Index i = 0; i < n; ++i) {
      if (best[i] > far) {
        far = best[i];
        arg = i;
      }
    }
    picked.push_back(arg);
    const auto d = (cloud.points.rowwise() - cloud.points.row(arg)).rowwise().squaredNorm();
    best = best.cwiseMin(d);
  }
  return picked;
}

// K nearest points to the given center (the center itself included), ordered
// by (squared distance, index).
inline Patch knn_patch(const PointCloud& cloud, Index center_index, Index k) {
  const Index n = cloud.size();
  if (k < 1 || k > n) throw ArgumentError("knn_patch: need 1 <= k <= N");
  if (center_index < 0 || center_index >= n) throw ArgumentError("knn_patch: center index out of range");
  std::vector<std::pair<Real, Index>> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    order[static_cast<std::size_t>(i)] = {(cloud.points.row(i) - cloud.points.row(center_index)).squaredNorm(), i};
  std::partial_sort(order.begin(), order.begin() + k, order.end());
  Patch patch;
  patch.center = cloud.points.row(center_index);
  patch.points.resize(k, 3);
  patch.indices.resize(static_cast<std::size_t>(k));
  for (Index i = 0; i < k; ++i) {
    patch.indices[static_cast<std::size_t>(i)] = order[static_cast<std::size_t>(i)].second;
    patch.points.row(i) = cloud.points.row(order[static_cast<std::size_t>(i)].second);
  }
  return patch;
}

// FPS centers then a KNN patch around each; patches may overlap.
inline std::vector<Patch> make_patches(const PointCloud& cloud, Index g = 64, Index k = 32, Index seed_index = 0) {
  const std::vector<Index> centers = fps(cloud, g, seed_index);
  std::vector<Patch> patches;
  patches.reserve(static_cast<std::size_t>(g));
  for (Index c : centers) patches.push_back(knn_patch(cloud, c, k));
  return patches;
}

// Uniform SO(3) sample via normalized quaternion.
inline Mat3 random_rotation(Rng& rng) {
  double q[4];
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (double& v : q) {
      v = rng.normal();
      norm2 += v * v;
    }
  } while (norm2 < 1e-12);
  const double s = 1.0 / std::sqrt(norm2);
  const double w = q[0] * s, x = q[1] * s, y = q[2] * s, z = q[3] * s;
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

inline Mat3 z_rotation(double angle) {
  Mat3 r;
  const double c = std::cos(angle), s = std::sin(angle);
  r << c, s, 0,
      -s, c, 0,
       0, 0, 1;
  return r;
}

inline Mat3 random_z_rotation(Rng& rng) { return z_rotation(rng.uniform(0.0, 2.0 * M_PI)); }

inline PointCloud apply_rotation(const PointCloud& cloud, const Mat3& r) {
  if (!is_rotation(r)) throw ArgumentError("apply_rotation: matrix is not a proper rotation");
  PointCloud out;
  out.points = cloud.points * r;
  out.label = cloud.label;
  return out;
}

// ---- file formats (XYZ text, RIPC binary) ----

PointCloud read_xyz(const std::string& path);
void write_xyz(const std::string& path, const PointCloud& cloud);
PointCloud read_ripc(const std::string& path);
void write_ripc(const std::string& path, const PointCloud& cloud);
// Dispatch on extension (.xyz / .ripc).
PointCloud read_cloud(const std::string& path);

struct LabeledFile {
  std::string filename;
  int label;
};

std::vector<LabeledFile> read_labels_csv(const std::string& path);
void write_labels_csv(const std::string& path, const std::vector<LabeledFile>& rows);

}  // namespace rimae

#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmc::geom {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

constexpr double kPi = std::numbers::pi_v<double>;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

/// Ordered set of 3D points, optionally with per-point unit normals.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;  // empty, or one unit vector per point

  std::size_t size() const { return points.size(); }
  bool has_normals() const { return !normals.empty(); }

  void validate() const {
    if (points.empty()) throw std::invalid_argument("PointCloud: empty");
    if (!normals.empty() && normals.size() != points.size())
      throw std::invalid_argument("PointCloud: normal count mismatch");
    for (const Vec3& p : points)
      if (!p.allFinite()) throw std::invalid_argument("PointCloud: non-finite point");
    for (const Vec3& n : normals)
      if (std::abs(n.norm() - 1.0) > 1e-6)
        throw std::invalid_argument("PointCloud: non-unit normal");
  }
};

/// Element of SE(3): rotation then translation, p' = R*p + t.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(rotation.transpose() * translation);
    return inv;
  }

  /// Composition: (a * b).apply(p) == a.apply(b.apply(p)).
  RigidTransform operator*(const RigidTransform& other) const {
    RigidTransform out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  bool is_valid(double tol = 1e-9) const {
    Mat3 rtr = rotation.transpose() * rotation;
    return (rtr - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol &&
           translation.allFinite();
  }
};

/// KNN adjacency: per center, k neighbor indices into the owning cloud.
struct NeighborGraph {
  std::vector<std::size_t> center_indices;
  std::vector<std::size_t> neighbor_indices;  // center_count * k, row-major
  std::size_t k = 0;

  std::size_t center_count() const { return center_indices.size(); }
  std::size_t neighbor(std::size_t c, std::size_t j) const {
    return neighbor_indices[c * k + j];
  }
};

inline Vec3 centroid(const PointCloud& cloud) {
  Vec3 c = Vec3::Zero();
  for (const Vec3& p : cloud.points) c += p;
  return c / static_cast<double>(cloud.size());
}

/// Translate so the centroid sits at the origin. Normals untouched.
inline PointCloud center_at_origin(const PointCloud& cloud) {
  Vec3 c = centroid(cloud);
  PointCloud out = cloud;
  for (Vec3& p : out.points) p -= c;
  return out;
}

inline PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const Vec3& p : cloud.points) out.points.push_back(t.apply(p));
  out.normals.reserve(cloud.normals.size());
  for (const Vec3& n : cloud.normals) out.normals.push_back(t.rotation * n);
  return out;
}

/// Uniform random element of SE(3): axis uniform on S^2, magnitude uniform in
/// rot_range_deg, translation components uniform in trans_range.
inline RigidTransform random_se3(std::pair<double, double> rot_range_deg,
                                 std::pair<double, double> trans_range,
                                 std::mt19937_64& rng) {
  auto [rlo, rhi] = rot_range_deg;
  if (!(0.0 <= rlo && rlo <= rhi && rhi <= 180.0))
    throw std::invalid_argument("random_se3: rotation range must satisfy 0 <= lo <= hi <= 180");
  if (trans_range.first > trans_range.second)
    throw std::invalid_argument("random_se3: translation range inverted");

  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec3 axis;
  do {
    axis = Vec3(gauss(rng), gauss(rng), gauss(rng));
  } while (axis.norm() < 1e-12);
  axis.normalize();

  std::uniform_real_distribution<double> uang(rlo, rhi);
  double angle = deg2rad(rlo == rhi ? rlo : uang(rng));

  RigidTransform t;
  t.rotation = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  std::uniform_real_distribution<double> ut(trans_range.first, trans_range.second);
  for (int i = 0; i < 3; ++i)
    t.translation[i] = trans_range.first == trans_range.second ? trans_range.first : ut(rng);
  return t;
}

/// Greedy max-min subset selection. Deterministic: ties go to the lower index.
inline std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud,
                                                      std::size_t k,
                                                      std::size_t start_index = 0) {
  const std::size_t n = cloud.size();
  if (k < 1 || k > n) throw std::invalid_argument("farthest_point_sample: need 1 <= k <= N");
  if (start_index >= n) throw std::invalid_argument("farthest_point_sample: start index out of range");

  std::vector<std::size_t> selected;
  selected.reserve(k);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::size_t current = start_index;
  selected.push_back(current);
  for (std::size_t step = 1; step < k; ++step) {
    for (std::size_t i = 0; i < n; ++i) {
      double d = (cloud.points[i] - cloud.points[current]).squaredNorm();
      if (d < min_dist[i]) min_dist[i] = d;
    }
    min_dist[current] = -1.0;
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_dist[i] > best_d) {
        best_d = min_dist[i];
        best = i;
      }
    }
    current = best;
    min_dist[current] = -1.0;
    selected.push_back(current);
  }
  return selected;
}

/// Brute-force KNN over Euclidean distance; self excluded, ties by lower index.
inline NeighborGraph knn_graph(const PointCloud& cloud,
                               const std::vector<std::size_t>& centers,
                               std::size_t k) {
  const std::size_t n = cloud.size();
  if (k >= n) throw std::invalid_argument("knn_graph: need k < N (self is excluded)");
  if (k < 1) throw std::invalid_argument("knn_graph: need k >= 1");

  NeighborGraph g;
  g.center_indices = centers;
  g.k = k;
  g.neighbor_indices.resize(centers.size() * k);

  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(n - 1);
  for (std::size_t ci = 0; ci < centers.size(); ++ci) {
    const std::size_t c = centers[ci];
    if (c >= n) throw std::invalid_argument("knn_graph: center index out of range");
    cand.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (i == c) continue;
      cand.emplace_back((cloud.points[i] - cloud.points[c]).squaredNorm(), i);
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t j = 0; j < k; ++j) g.neighbor_indices[ci * k + j] = cand[j].second;
  }
  return g;
}

inline NeighborGraph knn_graph(const PointCloud& cloud, std::size_t k) {
  std::vector<std::size_t> centers(cloud.size());
  for (std::size_t i = 0; i < centers.size(); ++i) centers[i] = i;
  return knn_graph(cloud, centers, k);
}

/// PCA normals over the k-NN neighborhood (center included), oriented toward
/// the coordinate origin. Degenerate neighborhoods fall back to (0,0,1).
inline PointCloud estimate_normals(const PointCloud& cloud, std::size_t k,
                                   int* degenerate_count = nullptr) {
  if (k < 3) throw std::invalid_argument("estimate_normals: need k >= 3");
  const std::size_t n = cloud.size();
  const std::size_t kk = std::min(k, n - 1);
  NeighborGraph g = knn_graph(cloud, kk);

  PointCloud out = cloud;
  out.normals.assign(n, Vec3(0, 0, 1));
  int degenerate = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 mean = cloud.points[i];
    for (std::size_t j = 0; j < kk; ++j) mean += cloud.points[g.neighbor(i, j)];
    mean /= static_cast<double>(kk + 1);

    Mat3 cov = Mat3::Zero();
    Vec3 d = cloud.points[i] - mean;
    cov += d * d.transpose();
    for (std::size_t j = 0; j < kk; ++j) {
      d = cloud.points[g.neighbor(i, j)] - mean;
      cov += d * d.transpose();
    }
    if (cov.cwiseAbs().maxCoeff() < 1e-24) {
      ++degenerate;
      continue;  // keep (0,0,1) fallback
    }
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    Vec3 normal = es.eigenvectors().col(0);  // smallest eigenvalue first
    if (normal.dot(cloud.points[i]) > 0.0) normal = -normal;
    out.normals[i] = normal.normalized();
  }
  if (degenerate_count) *degenerate_count = degenerate;
  return out;
}

// ---------------------------------------------------------------------------
// File I/O: ASCII .xyz, binary .pcb, and 12-number transform files.

inline void write_xyz(const PointCloud& cloud, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_xyz: cannot open " + path);
  f.precision(17);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    f << p.x() << ' ' << p.y() << ' ' << p.z();
    if (cloud.has_normals()) {
      const Vec3& nrm = cloud.normals[i];
      f << ' ' << nrm.x() << ' ' << nrm.y() << ' ' << nrm.z();
    }
    f << '\n';
  }
  if (!f) throw std::runtime_error("write_xyz: write failed for " + path);
}

inline PointCloud read_xyz(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_xyz: cannot open " + path);
  PointCloud cloud;
  std::string line;
  int fields = -1;
  while (std::getline(f, line)) {
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    double v[6];
    int got = 0;
    while (got < 6 && (ss >> v[got])) ++got;
    if (got == 0) continue;  // blank or comment-only line
    if (got != 3 && got != 6)
      throw std::runtime_error("read_xyz: expected 3 or 6 numbers per line in " + path);
    if (fields == -1) fields = got;
    if (fields != got) throw std::runtime_error("read_xyz: inconsistent field count in " + path);
    cloud.points.emplace_back(v[0], v[1], v[2]);
    if (got == 6) cloud.normals.emplace_back(v[3], v[4], v[5]);
  }
  if (cloud.points.empty()) throw std::runtime_error("read_xyz: no points in " + path);
  return cloud;
}

// .pcb: magic "PCB1", u32 point count, u8 has_normals, then f32 rows.
inline void write_pcb(const PointCloud& cloud, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pcb: cannot open " + path);
  f.write("PCB1", 4);
  std::uint32_t n = static_cast<std::uint32_t>(cloud.size());
  std::uint8_t has_n = cloud.has_normals() ? 1 : 0;
  f.write(reinterpret_cast<const char*>(&n), 4);
  f.write(reinterpret_cast<const char*>(&has_n), 1);
  auto put = [&f](const Vec3& v) {
    float row[3] = {static_cast<float>(v.x()), static_cast<float>(v.y()),
                    static_cast<float>(v.z())};
    f.write(reinterpret_cast<const char*>(row), 12);
  };
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    put(cloud.points[i]);
    if (has_n) put(cloud.normals[i]);
  }
  if (!f) throw std::runtime_error("write_pcb: write failed for " + path);
}

inline PointCloud read_pcb(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pcb: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "PCB1")
    throw std::runtime_error("read_pcb: bad magic in " + path);
  std::uint32_t n = 0;
  std::uint8_t has_n = 0;
  f.read(reinterpret_cast<char*>(&n), 4);
  f.read(reinterpret_cast<char*>(&has_n), 1);
  if (!f || n == 0) throw std::runtime_error("read_pcb: bad header in " + path);
  PointCloud cloud;
  cloud.points.reserve(n);
  if (has_n) cloud.normals.reserve(n);
  auto get = [&f]() {
    float row[3];
    f.read(reinterpret_cast<char*>(row), 12);
    return Vec3(row[0], row[1], row[2]);
  };
  for (std::uint32_t i = 0; i < n; ++i) {
    cloud.points.push_back(get());
    if (has_n) cloud.normals.push_back(get());
  }
  if (!f) throw std::runtime_error("read_pcb: truncated file " + path);
  return cloud;
}

inline PointCloud read_point_cloud(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".pcb") return read_pcb(path);
  return read_xyz(path);
}

/// Transform file: 12 whitespace-separated numbers, row-major R then t.
inline void write_transform(const RigidTransform& t, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_transform: cannot open " + path);
  f.precision(17);
  for (int r = 0; r < 3; ++r)
    f << t.rotation(r, 0) << ' ' << t.rotation(r, 1) << ' ' << t.rotation(r, 2) << '\n';
  f << t.translation.x() << ' ' << t.translation.y() << ' ' << t.translation.z() << '\n';
}

inline RigidTransform read_transform(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_transform: cannot open " + path);
  double v[12];
  for (int i = 0; i < 12; ++i)
    if (!(f >> v[i])) throw std::runtime_error("read_transform: expected 12 numbers in " + path);
  RigidTransform t;
  t.rotation << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
  t.translation = Vec3(v[9], v[10], v[11]);
  return t;
}

}  // namespace gmc::geom

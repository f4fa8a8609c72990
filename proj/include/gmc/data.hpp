#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "gmc/geom.hpp"

namespace gmc::data {

using geom::Mat3;
using geom::PointCloud;
using geom::RigidTransform;
using geom::Vec3;

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::size_t, 3>> triangles;

  double triangle_area(std::size_t t) const {
    const auto& tr = triangles[t];
    return 0.5 * (vertices[tr[1]] - vertices[tr[0]]).cross(vertices[tr[2]] - vertices[tr[0]]).norm();
  }

  double max_vertex_norm() const {
    double m = 0;
    for (const Vec3& v : vertices) m = std::max(m, v.norm());
    return m;
  }

  void validate() const {
    for (const auto& t : triangles)
      for (std::size_t i : t)
        if (i >= vertices.size()) throw std::invalid_argument("TriMesh: index out of range");
  }
};

enum class ShapeKind { Box, Cylinder, Torus, Capsule, Composite };

inline const char* shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Box: return "box";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::Torus: return "torus";
    case ShapeKind::Capsule: return "capsule";
    case ShapeKind::Composite: return "composite";
  }
  return "?";
}

inline ShapeKind parse_shape(const std::string& s) {
  if (s == "box") return ShapeKind::Box;
  if (s == "cylinder") return ShapeKind::Cylinder;
  if (s == "torus") return ShapeKind::Torus;
  if (s == "capsule") return ShapeKind::Capsule;
  if (s == "composite") return ShapeKind::Composite;
  throw std::invalid_argument("unknown shape '" + s + "'");
}

struct ShapeParams {
  Vec3 box_extents{1.0, 1.0, 1.0};
  double cyl_radius = 0.4;
  double cyl_height = 1.2;
  int cyl_segments = 24;
  double torus_major = 0.4;
  double torus_minor = 0.15;
  int torus_u = 32;
  int torus_v = 16;
  double cap_radius = 0.3;
  double cap_height = 0.9;
  int cap_segments = 16;
  int cap_rings = 6;
};

namespace detail {

inline void push_quad(TriMesh& m, std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
  m.triangles.push_back({a, b, c});
  m.triangles.push_back({a, c, d});
}

inline TriMesh make_box(const Vec3& extents) {
  if (extents.minCoeff() <= 0) throw std::invalid_argument("make_shape: box extents must be positive");
  TriMesh m;
  Vec3 h = extents / 2.0;
  for (int x : {-1, 1})
    for (int y : {-1, 1})
      for (int z : {-1, 1}) m.vertices.emplace_back(x * h.x(), y * h.y(), z * h.z());
  // vertex order: index bit2=x, bit1=y, bit0=z
  push_quad(m, 0, 1, 3, 2);  // -x
  push_quad(m, 4, 6, 7, 5);  // +x
  push_quad(m, 0, 4, 5, 1);  // -y
  push_quad(m, 2, 3, 7, 6);  // +y
  push_quad(m, 0, 2, 6, 4);  // -z
  push_quad(m, 1, 5, 7, 3);  // +z
  return m;
}

inline TriMesh make_cylinder(double radius, double height, int segments) {
  if (radius <= 0 || height <= 0 || segments < 3)
    throw std::invalid_argument("make_shape: bad cylinder parameters");
  TriMesh m;
  const double half = height / 2.0;
  for (int i = 0; i < segments; ++i) {
    double a = 2.0 * geom::kPi * i / segments;
    m.vertices.emplace_back(radius * std::cos(a), radius * std::sin(a), -half);
    m.vertices.emplace_back(radius * std::cos(a), radius * std::sin(a), half);
  }
  std::size_t bottom_center = m.vertices.size();
  m.vertices.emplace_back(0, 0, -half);
  std::size_t top_center = m.vertices.size();
  m.vertices.emplace_back(0, 0, half);
  for (int i = 0; i < segments; ++i) {
    std::size_t a0 = static_cast<std::size_t>(2 * i);
    std::size_t a1 = a0 + 1;
    std::size_t b0 = static_cast<std::size_t>(2 * ((i + 1) % segments));
    std::size_t b1 = b0 + 1;
    m.triangles.push_back({a0, b0, b1});
    m.triangles.push_back({a0, b1, a1});
    m.triangles.push_back({bottom_center, b0, a0});
    m.triangles.push_back({top_center, a1, b1});
  }
  return m;
}

inline TriMesh make_torus(double major, double minor, int u_segments, int v_segments) {
  if (major <= 0 || minor <= 0 || minor >= major || u_segments < 3 || v_segments < 3)
    throw std::invalid_argument("make_shape: bad torus parameters");
  TriMesh m;
  for (int u = 0; u < u_segments; ++u) {
    double a = 2.0 * geom::kPi * u / u_segments;
    for (int v = 0; v < v_segments; ++v) {
      double b = 2.0 * geom::kPi * v / v_segments;
      double r = major + minor * std::cos(b);
      m.vertices.emplace_back(r * std::cos(a), r * std::sin(a), minor * std::sin(b));
    }
  }
  auto idx = [&](int u, int v) {
    return static_cast<std::size_t>((u % u_segments) * v_segments + (v % v_segments));
  };
  for (int u = 0; u < u_segments; ++u)
    for (int v = 0; v < v_segments; ++v)
      push_quad(m, idx(u, v), idx(u + 1, v), idx(u + 1, v + 1), idx(u, v + 1));
  return m;
}

inline TriMesh make_capsule(double radius, double height, int segments, int rings) {
  if (radius <= 0 || height <= 0 || segments < 3 || rings < 2)
    throw std::invalid_argument("make_shape: bad capsule parameters");
  TriMesh m;
  const double half = height / 2.0;
  // latitude rows from south pole to north pole; cylinder section in between
  std::vector<std::vector<std::size_t>> rows;
  auto add_row = [&](double lat, double zc) {
    std::vector<std::size_t> row;
    double r = radius * std::cos(lat);
    double z = zc + radius * std::sin(lat);
    for (int i = 0; i < segments; ++i) {
      double a = 2.0 * geom::kPi * i / segments;
      row.push_back(m.vertices.size());
      m.vertices.emplace_back(r * std::cos(a), r * std::sin(a), z);
    }
    rows.push_back(row);
  };
  std::size_t south = m.vertices.size();
  m.vertices.emplace_back(0, 0, -half - radius);
  for (int r = rings - 1; r >= 0; --r) add_row(-geom::kPi / 2 * r / rings, -half);
  for (int r = 1; r < rings; ++r) add_row(geom::kPi / 2 * r / rings, half);
  std::size_t north = m.vertices.size();
  m.vertices.emplace_back(0, 0, half + radius);

  for (int i = 0; i < segments; ++i) {
    int j = (i + 1) % segments;
    m.triangles.push_back({south, rows[0][static_cast<std::size_t>(j)],
                           rows[0][static_cast<std::size_t>(i)]});
    m.triangles.push_back({north, rows.back()[static_cast<std::size_t>(i)],
                           rows.back()[static_cast<std::size_t>(j)]});
  }
  for (std::size_t r = 0; r + 1 < rows.size(); ++r)
    for (int i = 0; i < segments; ++i) {
      int j = (i + 1) % segments;
      push_quad(m, rows[r][static_cast<std::size_t>(i)], rows[r][static_cast<std::size_t>(j)],
                rows[r + 1][static_cast<std::size_t>(j)], rows[r + 1][static_cast<std::size_t>(i)]);
    }
  return m;
}

inline void append_mesh(TriMesh& dst, const TriMesh& src, const RigidTransform& pose,
                        double scale) {
  std::size_t base = dst.vertices.size();
  for (const Vec3& v : src.vertices) dst.vertices.push_back(pose.apply(v * scale));
  for (const auto& t : src.triangles)
    dst.triangles.push_back({t[0] + base, t[1] + base, t[2] + base});
}

}  // namespace detail

/// Watertight triangulated primitive, rescaled to fit the unit sphere.
/// Composite shapes union several posed primitives (seeded, asymmetric).
inline TriMesh make_shape(ShapeKind kind, const ShapeParams& params = {},
                          std::uint64_t seed = 0) {
  TriMesh m;
  switch (kind) {
    case ShapeKind::Box: m = detail::make_box(params.box_extents); break;
    case ShapeKind::Cylinder:
      m = detail::make_cylinder(params.cyl_radius, params.cyl_height, params.cyl_segments);
      break;
    case ShapeKind::Torus:
      m = detail::make_torus(params.torus_major, params.torus_minor, params.torus_u,
                             params.torus_v);
      break;
    case ShapeKind::Capsule:
      m = detail::make_capsule(params.cap_radius, params.cap_height, params.cap_segments,
                               params.cap_rings);
      break;
    case ShapeKind::Composite: {
      std::mt19937_64 rng(seed * 2654435761ULL + 17);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      ShapeParams p;
      p.box_extents = Vec3(0.5 + 0.7 * u(rng), 0.3 + 0.5 * u(rng), 0.2 + 0.4 * u(rng));
      detail::append_mesh(m, detail::make_box(p.box_extents), RigidTransform::identity(), 1.0);

      RigidTransform cyl_pose;
      cyl_pose.rotation =
          Eigen::AngleAxisd(u(rng) * geom::kPi, Vec3(u(rng), u(rng), 1 + u(rng)).normalized())
              .toRotationMatrix();
      cyl_pose.translation = Vec3(0.25 + 0.3 * u(rng), 0.2 + 0.3 * u(rng), 0.15 * u(rng));
      detail::append_mesh(m, detail::make_cylinder(0.12 + 0.15 * u(rng), 0.7 + 0.5 * u(rng), 16),
                          cyl_pose, 1.0);

      RigidTransform cap_pose;
      cap_pose.rotation =
          Eigen::AngleAxisd(u(rng) * geom::kPi, Vec3(1 + u(rng), u(rng), u(rng)).normalized())
              .toRotationMatrix();
      cap_pose.translation = Vec3(-0.3 - 0.2 * u(rng), -0.15 - 0.25 * u(rng), 0.2 + 0.2 * u(rng));
      detail::append_mesh(m, detail::make_capsule(0.1 + 0.1 * u(rng), 0.35 + 0.3 * u(rng), 12, 4),
                          cap_pose, 1.0);
      break;
    }
  }

  // drop degenerate triangles, then rescale into the unit sphere
  std::vector<std::array<std::size_t, 3>> kept;
  for (std::size_t t = 0; t < m.triangles.size(); ++t)
    if (m.triangle_area(t) > 1e-12) kept.push_back(m.triangles[t]);
  m.triangles = std::move(kept);

  double scale = m.max_vertex_norm();
  if (scale <= 0) throw std::invalid_argument("make_shape: degenerate mesh");
  for (Vec3& v : m.vertices) v /= scale;
  m.validate();
  return m;
}

/// Primitive with seeded dimension jitter, for varied dataset instances.
inline TriMesh make_varied_shape(ShapeKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ShapeParams p;
  p.box_extents = Vec3(0.6 + 0.8 * u(rng), 0.4 + 0.7 * u(rng), 0.3 + 0.6 * u(rng));
  p.cyl_radius = 0.25 + 0.3 * u(rng);
  p.cyl_height = 0.8 + 0.6 * u(rng);
  p.torus_major = 0.35 + 0.15 * u(rng);
  p.torus_minor = 0.08 + 0.1 * u(rng);
  p.cap_radius = 0.2 + 0.2 * u(rng);
  p.cap_height = 0.6 + 0.5 * u(rng);
  return make_shape(kind, p, seed);
}

/// Area-weighted uniform surface sampling with barycentric jitter.
inline PointCloud surface_sample(const TriMesh& mesh, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("surface_sample: need n >= 1");
  std::vector<double> cumulative(mesh.triangles.size());
  double total = 0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    total += mesh.triangle_area(t);
    cumulative[t] = total;
  }
  if (total <= 0) throw std::invalid_argument("surface_sample: zero-area mesh");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PointCloud cloud;
  cloud.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double pick = u(rng) * total;
    std::size_t t = static_cast<std::size_t>(
        std::lower_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
    t = std::min(t, mesh.triangles.size() - 1);
    double r1 = std::sqrt(u(rng)), r2 = u(rng);
    const auto& tr = mesh.triangles[t];
    Vec3 p = (1 - r1) * mesh.vertices[tr[0]] + r1 * (1 - r2) * mesh.vertices[tr[1]] +
             r1 * r2 * mesh.vertices[tr[2]];
    cloud.points.push_back(p);
  }
  return cloud;
}

/// Camera poses on a radius-2 sphere looking at the origin. Two poses are
/// antipodal; more use a golden-angle lattice.
inline std::vector<RigidTransform> camera_ring(std::size_t count) {
  if (count < 2) throw std::invalid_argument("camera_ring: need count >= 2");
  std::vector<Vec3> centers;
  if (count == 2) {
    centers = {Vec3(0, 0, 2), Vec3(0, 0, -2)};
  } else {
    const double golden = geom::kPi * (3.0 - std::sqrt(5.0));
    for (std::size_t i = 0; i < count; ++i) {
      double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(count);
      double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      double phi = golden * static_cast<double>(i);
      centers.emplace_back(2.0 * r * std::cos(phi), 2.0 * r * std::sin(phi), 2.0 * z);
    }
  }
  std::vector<RigidTransform> poses;
  for (const Vec3& c : centers) {
    Vec3 forward = (-c).normalized();  // optical axis through the origin
    Vec3 up_hint = std::abs(forward.z()) > 0.99 ? Vec3(1, 0, 0) : Vec3(0, 0, 1);
    Vec3 right = up_hint.cross(forward).normalized();
    Vec3 down = forward.cross(right);
    RigidTransform pose;
    pose.rotation.col(0) = right;
    pose.rotation.col(1) = down;
    pose.rotation.col(2) = forward;
    pose.translation = c;
    poses.push_back(pose);
  }
  return poses;
}

namespace detail {

// Moller-Trumbore ray/triangle intersection
inline bool ray_triangle(const Vec3& origin, const Vec3& dir, const Vec3& v0, const Vec3& v1,
                         const Vec3& v2, double& t_hit) {
  const double eps = 1e-12;
  Vec3 e1 = v1 - v0, e2 = v2 - v0;
  Vec3 p = dir.cross(e2);
  double det = e1.dot(p);
  if (std::abs(det) < eps) return false;
  double inv = 1.0 / det;
  Vec3 s = origin - v0;
  // slightly inclusive bounds so shared edges cannot open numeric cracks
  const double slack = 1e-10;
  double u = s.dot(p) * inv;
  if (u < -slack || u > 1.0 + slack) return false;
  Vec3 q = s.cross(e1);
  double v = dir.dot(q) * inv;
  if (v < -slack || u + v > 1.0 + slack) return false;
  double t = e2.dot(q) * inv;
  if (t <= eps) return false;
  t_hit = t;
  return true;
}

}  // namespace detail

/// Raw z-buffer back-projection: nearest triangle hit per pixel, returned in
/// the model frame without resampling.
inline PointCloud scan_hits(const TriMesh& mesh, const RigidTransform& camera,
                            std::size_t width, std::size_t height, double fov_deg = 70.0) {
  if (width < 32 || height < 32)
    throw std::invalid_argument("virtual_scan: resolution must be at least 32x32");
  if (camera.translation.norm() <= mesh.max_vertex_norm())
    throw std::invalid_argument("virtual_scan: camera inside the mesh bounding sphere");

  const double tan_half = std::tan(geom::deg2rad(fov_deg / 2.0));
  PointCloud hits;
  for (std::size_t py = 0; py < height; ++py) {
    for (std::size_t px = 0; px < width; ++px) {
      double ndc_x = (2.0 * (static_cast<double>(px) + 0.5) / static_cast<double>(width) - 1.0);
      double ndc_y = (2.0 * (static_cast<double>(py) + 0.5) / static_cast<double>(height) - 1.0);
      Vec3 dir_cam(ndc_x * tan_half, ndc_y * tan_half, 1.0);
      Vec3 dir = (camera.rotation * dir_cam).normalized();
      double best = std::numeric_limits<double>::infinity();
      for (const auto& tr : mesh.triangles) {
        double t;
        if (detail::ray_triangle(camera.translation, dir, mesh.vertices[tr[0]],
                                 mesh.vertices[tr[1]], mesh.vertices[tr[2]], t) &&
            t < best)
          best = t;
      }
      if (std::isfinite(best)) hits.points.push_back(camera.translation + best * dir);
    }
  }
  return hits;
}

/// Pinhole z-buffer scan: scan_hits followed by farthest-point sampling down
/// to n_out points.
inline PointCloud virtual_scan(const TriMesh& mesh, const RigidTransform& camera,
                               std::size_t width, std::size_t height, std::size_t n_out,
                               double fov_deg = 70.0) {
  PointCloud hits = scan_hits(mesh, camera, width, height, fov_deg);
  if (hits.points.size() < n_out) {
    std::ostringstream msg;
    msg << "virtual_scan: view from (" << camera.translation.transpose() << ") hit only "
        << hits.points.size() << " pixels, need " << n_out;
    throw std::runtime_error(msg.str());
  }
  std::vector<std::size_t> picked = geom::farthest_point_sample(hits, n_out, 0);
  PointCloud out;
  out.points.reserve(n_out);
  for (std::size_t i : picked) out.points.push_back(hits.points[i]);
  return out;
}

/// Keep the `keep` points nearest to the given anchor.
inline PointCloud crop_partial(const PointCloud& cloud, std::size_t keep, const Vec3& anchor) {
  if (keep >= cloud.size()) throw std::invalid_argument("crop_partial: need keep < N");
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i)
    dist.emplace_back((cloud.points[i] - anchor).squaredNorm(), i);
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(keep), dist.end());
  PointCloud out;
  out.points.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    out.points.push_back(cloud.points[dist[i].second]);
    if (cloud.has_normals()) out.normals.push_back(cloud.normals[dist[i].second]);
  }
  return out;
}

/// Crop around a random anchor on a radius-1.1 sphere.
inline PointCloud crop_partial(const PointCloud& cloud, std::size_t keep, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Vec3 anchor;
  do {
    anchor = Vec3(g(rng), g(rng), g(rng));
  } while (anchor.norm() < 1e-12);
  return crop_partial(cloud, keep, Vec3(anchor.normalized() * 1.1));
}

/// Per-coordinate Gaussian noise clamped to [-clip, clip]. Normals are
/// invalidated and must be re-estimated.
inline PointCloud add_noise(const PointCloud& cloud, double sigma, double clip,
                            std::mt19937_64& rng) {
  if (sigma < 0 || clip < 0) throw std::invalid_argument("add_noise: sigma and clip must be >= 0");
  PointCloud out;
  out.points.reserve(cloud.size());
  if (sigma == 0) {
    out.points = cloud.points;
    return out;
  }
  std::normal_distribution<double> g(0.0, sigma);
  for (const Vec3& p : cloud.points) {
    Vec3 d(g(rng), g(rng), g(rng));
    for (int c = 0; c < 3; ++c) d[c] = std::clamp(d[c], -clip, clip);
    out.points.push_back(p + d);
  }
  return out;
}

struct RegPair {
  PointCloud source;
  PointCloud target;
  RigidTransform gt;  // source -> target
  double overlap_ratio = 0.0;
  std::string shape_id;
  std::string category;
};

/// Fraction of source points whose ground-truth-aligned nearest target
/// neighbor lies within tau.
inline double overlap_ratio(const PointCloud& source, const PointCloud& target,
                            const RigidTransform& gt, double tau = 0.05) {
  std::size_t hits = 0;
  for (const Vec3& p : source.points) {
    Vec3 q = gt.apply(p);
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& t : target.points) best = std::min(best, (t - q).squaredNorm());
    if (best <= tau * tau) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(source.size());
}

struct ScanPairOptions {
  std::size_t views = 26;               // camera ring size
  std::size_t views_per_mesh = 4;
  std::size_t resolution = 160;
  std::size_t points_per_scan = 2048;
  double min_overlap = 0.4;
  double tau = 0.05;
  std::pair<double, double> rot_range{0.0, 180.0};
  std::pair<double, double> trans_range{-0.5, 0.5};
  std::size_t threads = 1;
};

/// Virtual-scan pair protocol: scan each mesh from several ring poses, pose
/// every observation with an independent random SE(3), keep pairs with enough
/// overlap. Meshes with no qualifying pair are skipped with a warning entry.
/// Each mesh draws from its own seeded stream, so results do not depend on
/// the thread count.
inline std::vector<RegPair> build_pairs(const std::vector<TriMesh>& meshes,
                                        const std::vector<std::string>& names,
                                        const ScanPairOptions& opt, std::uint64_t seed,
                                        std::vector<std::string>* warnings = nullptr) {
  if (opt.views_per_mesh < 2)
    throw std::invalid_argument("build_pairs: need at least 2 views per mesh");
  std::vector<RigidTransform> ring = camera_ring(opt.views);

  std::vector<std::vector<RegPair>> per_mesh(meshes.size());
  std::vector<std::string> per_mesh_warning(meshes.size());

  auto process_mesh = [&](std::size_t mi) {
    std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * (mi + 1)));
    std::vector<std::size_t> view_ids(ring.size());
    for (std::size_t i = 0; i < view_ids.size(); ++i) view_ids[i] = i;
    std::shuffle(view_ids.begin(), view_ids.end(), rng);
    view_ids.resize(opt.views_per_mesh);

    std::vector<PointCloud> observations;
    std::vector<RigidTransform> poses;
    for (std::size_t v : view_ids) {
      PointCloud scan = virtual_scan(meshes[mi], ring[v], opt.resolution, opt.resolution,
                                     opt.points_per_scan);
      RigidTransform pose = geom::random_se3(opt.rot_range, opt.trans_range, rng);
      observations.push_back(geom::apply_transform(scan, pose));
      poses.push_back(pose);
    }

    for (std::size_t a = 0; a < observations.size(); ++a)
      for (std::size_t b = a + 1; b < observations.size(); ++b) {
        RigidTransform gt = poses[b] * poses[a].inverse();
        double ol = overlap_ratio(observations[a], observations[b], gt, opt.tau);
        if (ol < opt.min_overlap) continue;
        RegPair pair;
        pair.source = observations[a];
        pair.target = observations[b];
        pair.gt = gt;
        pair.overlap_ratio = ol;
        pair.shape_id = names.size() > mi ? names[mi] : "shape" + std::to_string(mi);
        pair.category = pair.shape_id.substr(0, pair.shape_id.find_first_of("0123456789"));
        per_mesh[mi].push_back(std::move(pair));
      }
    if (per_mesh[mi].empty())
      per_mesh_warning[mi] = "mesh " + (names.size() > mi ? names[mi] : std::to_string(mi)) +
                             ": no pair met the overlap threshold, skipped";
  };

  if (opt.threads <= 1 || meshes.size() <= 1) {
    for (std::size_t mi = 0; mi < meshes.size(); ++mi) process_mesh(mi);
  } else {
    std::vector<std::thread> workers;
    std::atomic<std::size_t> next{0};
    for (std::size_t t = 0; t < std::min(opt.threads, meshes.size()); ++t)
      workers.emplace_back([&] {
        for (std::size_t mi = next.fetch_add(1); mi < meshes.size(); mi = next.fetch_add(1))
          process_mesh(mi);
      });
    for (auto& w : workers) w.join();
  }

  std::vector<RegPair> pairs;
  for (std::size_t mi = 0; mi < meshes.size(); ++mi) {
    for (RegPair& p : per_mesh[mi]) pairs.push_back(std::move(p));
    if (warnings && !per_mesh_warning[mi].empty()) warnings->push_back(per_mesh_warning[mi]);
  }
  return pairs;
}

struct CropPairOptions {
  std::size_t sample_points = 1024;
  std::size_t keep_points = 768;
  std::pair<double, double> rot_range{0.0, 180.0};
  std::pair<double, double> trans_range{-0.5, 0.5};
  double noise_sigma = 0.0;
  double noise_clip = 0.05;
  double tau = 0.05;
};

/// Nearest-region crop protocol: sample the surface once, crop two partials
/// around independent random anchors, pose the target with a random SE(3).
inline RegPair crop_protocol_pair(const TriMesh& mesh, const CropPairOptions& opt,
                                  std::uint64_t seed, const std::string& shape_id = "") {
  std::mt19937_64 rng(seed);
  PointCloud base = surface_sample(mesh, opt.sample_points, rng());
  PointCloud source = crop_partial(base, opt.keep_points, rng);
  PointCloud target = crop_partial(base, opt.keep_points, rng);
  RigidTransform gt = geom::random_se3(opt.rot_range, opt.trans_range, rng);
  target = geom::apply_transform(target, gt);
  if (opt.noise_sigma > 0) {
    source = add_noise(source, opt.noise_sigma, opt.noise_clip, rng);
    target = add_noise(target, opt.noise_sigma, opt.noise_clip, rng);
  }
  RegPair pair;
  pair.source = std::move(source);
  pair.target = std::move(target);
  pair.gt = gt;
  pair.overlap_ratio = overlap_ratio(pair.source, pair.target, gt, opt.tau);
  pair.shape_id = shape_id;
  pair.category = shape_id.substr(0, shape_id.find_first_of("0123456789"));
  return pair;
}

// ---------------------------------------------------------------------------
// dataset directory layout: pairs/<id>/{source.pcb,target.pcb,gt.txt,meta.txt}
// plus a top-level manifest.csv

inline void write_dataset(const std::vector<RegPair>& pairs, const std::string& dir,
                          std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "pairs");
  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw std::runtime_error("write_dataset: cannot open manifest in " + dir);
  manifest << "id,shape,category,overlap\n";
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::ostringstream id;
    id << std::setw(5) << std::setfill('0') << i;
    fs::path pdir = fs::path(dir) / "pairs" / id.str();
    fs::create_directories(pdir);
    geom::write_pcb(pairs[i].source, (pdir / "source.pcb").string());
    geom::write_pcb(pairs[i].target, (pdir / "target.pcb").string());
    geom::write_transform(pairs[i].gt, (pdir / "gt.txt").string());
    std::ofstream meta(pdir / "meta.txt");
    meta << "shape=" << pairs[i].shape_id << '\n';
    meta << "category=" << pairs[i].category << '\n';
    meta.precision(6);
    meta << "overlap=" << std::fixed << pairs[i].overlap_ratio << '\n';
    meta << "seed=" << seed << '\n';
    manifest << id.str() << ',' << pairs[i].shape_id << ',' << pairs[i].category << ','
             << std::fixed << std::setprecision(6) << pairs[i].overlap_ratio << '\n';
  }
}

inline std::vector<RegPair> read_dataset(const std::string& dir,
                                         std::vector<std::string>* ids_out = nullptr) {
  namespace fs = std::filesystem;
  fs::path root = fs::path(dir) / "pairs";
  if (!fs::exists(root)) throw std::runtime_error("read_dataset: no pairs directory in " + dir);
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) ids.push_back(entry.path().filename().string());
  std::sort(ids.begin(), ids.end());
  if (ids_out) *ids_out = ids;
  std::vector<RegPair> pairs;
  for (const std::string& id : ids) {
    fs::path pdir = root / id;
    RegPair pair;
    pair.source = geom::read_pcb((pdir / "source.pcb").string());
    pair.target = geom::read_pcb((pdir / "target.pcb").string());
    pair.gt = geom::read_transform((pdir / "gt.txt").string());
    std::ifstream meta(pdir / "meta.txt");
    std::string line;
    while (std::getline(meta, line)) {
      auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      if (key == "shape") pair.shape_id = val;
      else if (key == "category") pair.category = val;
      else if (key == "overlap") pair.overlap_ratio = std::stod(val);
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

}  // namespace gmc::data

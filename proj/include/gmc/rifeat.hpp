#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmc/geom.hpp"

namespace gmc::rifeat {

using geom::NeighborGraph;
using geom::PointCloud;
using geom::Vec3;

enum class ChannelLayout { RRI8, PPF4, FPFH33, XYZ3, DXYZ3K, CONCAT };

inline const char* layout_name(ChannelLayout l) {
  switch (l) {
    case ChannelLayout::RRI8: return "RRI8";
    case ChannelLayout::PPF4: return "PPF4";
    case ChannelLayout::FPFH33: return "FPFH33";
    case ChannelLayout::XYZ3: return "XYZ3";
    case ChannelLayout::DXYZ3K: return "DXYZ3K";
    case ChannelLayout::CONCAT: return "CONCAT";
  }
  return "?";
}

/// Dense rows-by-channels feature block. PPF4 rows are edge-major
/// (point-count * k rows); every other layout is one row per point.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  ChannelLayout layout = ChannelLayout::CONCAT;
  std::size_t edge_k = 0;  // neighbors per point for edge-derived layouts
  std::vector<double> values;  // row-major

  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct PPFQuadruple {
  double dist = 0.0;
  double angle_n1_d = 0.0;
  double angle_n2_d = 0.0;
  double angle_n1_n2 = 0.0;
};

inline double clamped_acos(double x) { return std::acos(std::clamp(x, -1.0, 1.0)); }

/// Point-pair feature of Drost et al.: (|d|, angle(d,n1), angle(d,n2), angle(n1,n2)).
/// Coincident points give dist 0 with the direction angles defined as 0.
inline PPFQuadruple ppf_pair(const Vec3& p1, const Vec3& n1, const Vec3& p2,
                             const Vec3& n2) {
  PPFQuadruple q;
  Vec3 d = p2 - p1;
  q.dist = d.norm();
  q.angle_n1_n2 = clamped_acos(n1.dot(n2));
  if (q.dist < 1e-15) return q;
  Vec3 dn = d / q.dist;
  q.angle_n1_d = clamped_acos(dn.dot(n1));
  q.angle_n2_d = clamped_acos(dn.dot(n2));
  return q;
}

/// One PPF quadruple per graph edge, edge-major rows (layout PPF4).
inline FeatureMatrix ppf_features(const PointCloud& cloud, const NeighborGraph& graph) {
  if (!cloud.has_normals()) throw std::invalid_argument("ppf_features: cloud has no normals");
  FeatureMatrix fm;
  fm.layout = ChannelLayout::PPF4;
  fm.edge_k = graph.k;
  fm.rows = graph.center_count() * graph.k;
  fm.cols = 4;
  fm.values.resize(fm.rows * 4);
  for (std::size_t c = 0; c < graph.center_count(); ++c) {
    const std::size_t i = graph.center_indices[c];
    for (std::size_t j = 0; j < graph.k; ++j) {
      const std::size_t nb = graph.neighbor(c, j);
      PPFQuadruple q = ppf_pair(cloud.points[i], cloud.normals[i], cloud.points[nb],
                                cloud.normals[nb]);
      double* row = &fm.values[(c * graph.k + j) * 4];
      row[0] = q.dist;
      row[1] = q.angle_n1_d;
      row[2] = q.angle_n2_d;
      row[3] = q.angle_n1_n2;
    }
  }
  return fm;
}

/// Rotation-invariant per-point features around the coordinate origin:
/// for each of the k nearest neighbors j of point i, the quadruple
/// (|p_i|, |p_j|, angle(p_i,p_j), azimuth of p_j in p_i's tangent plane
/// relative to the first neighbor). Neighbors are ordered by increasing
/// angle then index; the azimuth is signed in (-pi, pi]. Centering is the
/// caller's responsibility. A cloud of fewer than k+1 points wraps its
/// neighbor list cyclically.
inline FeatureMatrix rri_features(const PointCloud& cloud, std::size_t k,
                                  int* degenerate_count = nullptr) {
  if (k < 2) throw std::invalid_argument("rri_features: need k >= 2");
  const std::size_t n = cloud.size();
  if (n < 2) throw std::invalid_argument("rri_features: need at least 2 points");

  const std::size_t kk = std::min(k, n - 1);
  NeighborGraph g = geom::knn_graph(cloud, kk);

  FeatureMatrix fm;
  fm.layout = ChannelLayout::RRI8;
  fm.edge_k = k;
  fm.rows = n;
  fm.cols = 4 * k;
  fm.values.assign(n * fm.cols, 0.0);
  int degenerate = 0;

  std::vector<std::pair<double, std::size_t>> order;  // (theta, neighbor index)
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& pi = cloud.points[i];
    const double ri = pi.norm();
    const bool at_origin = ri < 1e-12;
    if (at_origin) ++degenerate;
    Vec3 ui = at_origin ? Vec3(0, 0, 1) : Vec3(pi / ri);

    order.clear();
    for (std::size_t j = 0; j < kk; ++j) {
      const Vec3& pj = cloud.points[g.neighbor(i, j)];
      double rj = pj.norm();
      double theta = (at_origin || rj < 1e-12) ? 0.0 : clamped_acos(ui.dot(pj / rj));
      order.emplace_back(theta, g.neighbor(i, j));
    }
    std::sort(order.begin(), order.end());

    // tangent-plane projection of the reference (first) neighbor
    Vec3 ref = Vec3::Zero();
    {
      const Vec3& p0 = cloud.points[order[0].second];
      Vec3 proj = p0 - p0.dot(ui) * ui;
      if (proj.norm() > 1e-12) ref = proj.normalized();
    }

    for (std::size_t slot = 0; slot < k; ++slot) {
      const auto& [theta, nb] = order[slot % kk];
      const Vec3& pj = cloud.points[nb];
      double rj = pj.norm();
      double phi = 0.0;
      if (!at_origin && ref.norm() > 0.5) {
        Vec3 proj = pj - pj.dot(ui) * ui;
        if (proj.norm() > 1e-12) {
          Vec3 pn = proj.normalized();
          phi = std::atan2(ref.cross(pn).dot(ui), ref.dot(pn));
        }
      }
      double* out = &fm.values[i * fm.cols + slot * 4];
      out[0] = ri;
      out[1] = rj;
      out[2] = at_origin ? 0.0 : theta;
      out[3] = phi;
    }
  }
  if (degenerate_count) *degenerate_count = degenerate;
  return fm;
}

/// Per-edge RRI quadruples over a given graph, edge-major rows like
/// ppf_features. The azimuth reference is the first listed neighbor of each
/// center with a usable tangent-plane projection.
inline FeatureMatrix rri_edge_features(const PointCloud& cloud, const NeighborGraph& graph) {
  FeatureMatrix fm;
  fm.layout = ChannelLayout::CONCAT;
  fm.edge_k = graph.k;
  fm.rows = graph.center_count() * graph.k;
  fm.cols = 4;
  fm.values.assign(fm.rows * 4, 0.0);
  for (std::size_t c = 0; c < graph.center_count(); ++c) {
    const Vec3& pi = cloud.points[graph.center_indices[c]];
    const double ri = pi.norm();
    const bool at_origin = ri < 1e-12;
    Vec3 ui = at_origin ? Vec3(0, 0, 1) : Vec3(pi / ri);

    Vec3 ref = Vec3::Zero();
    if (!at_origin) {
      for (std::size_t j = 0; j < graph.k && ref.norm() < 0.5; ++j) {
        const Vec3& pj = cloud.points[graph.neighbor(c, j)];
        Vec3 proj = pj - pj.dot(ui) * ui;
        if (proj.norm() > 1e-12) ref = proj.normalized();
      }
    }
    for (std::size_t j = 0; j < graph.k; ++j) {
      const Vec3& pj = cloud.points[graph.neighbor(c, j)];
      double rj = pj.norm();
      double theta = (at_origin || rj < 1e-12) ? 0.0 : clamped_acos(ui.dot(pj / rj));
      double phi = 0.0;
      if (!at_origin && ref.norm() > 0.5) {
        Vec3 proj = pj - pj.dot(ui) * ui;
        if (proj.norm() > 1e-12) {
          Vec3 pn = proj.normalized();
          phi = std::atan2(ref.cross(pn).dot(ui), ref.dot(pn));
        }
      }
      double* out = &fm.values[(c * graph.k + j) * 4];
      out[0] = ri;
      out[1] = rj;
      out[2] = theta;
      out[3] = phi;
    }
  }
  return fm;
}

namespace detail {

// Darboux-frame angles for an ordered (source, target) pair. Returns false
// when the frame is degenerate (coincident points or d parallel to n_s).
inline bool darboux_angles(const Vec3& ps, const Vec3& ns, const Vec3& pt,
                           const Vec3& nt, double& alpha, double& phi, double& theta,
                           double& dist) {
  Vec3 d = pt - ps;
  dist = d.norm();
  if (dist < 1e-12) return false;
  Vec3 dn = d / dist;
  Vec3 v = ns.cross(dn);
  double vn = v.norm();
  if (vn < 1e-12) return false;
  v /= vn;
  Vec3 w = ns.cross(v);
  alpha = v.dot(nt);
  phi = ns.dot(dn);
  theta = std::atan2(w.dot(nt), ns.dot(nt));
  return true;
}

inline void histogram_add(std::vector<double>& h, std::size_t base, double f,
                          double lo, double hi, double weight) {
  int bin = static_cast<int>(std::floor((f - lo) / (hi - lo) * 11.0));
  bin = std::clamp(bin, 0, 10);
  h[base + static_cast<std::size_t>(bin)] += weight;
}

}  // namespace detail

/// Fast point feature histograms: three 11-bin blocks of Darboux angles,
/// neighbor-weighted per Rusu's scheme, each block normalized to sum 100.
inline FeatureMatrix fpfh_features(const PointCloud& cloud, std::size_t k) {
  if (!cloud.has_normals()) throw std::invalid_argument("fpfh_features: cloud has no normals");
  if (k < 5) throw std::invalid_argument("fpfh_features: need k >= 5");
  for (const Vec3& nrm : cloud.normals)
    if (std::abs(nrm.norm() - 1.0) > 1e-6)
      throw std::invalid_argument("fpfh_features: degenerate normals");

  const std::size_t n = cloud.size();
  const std::size_t kk = std::min(k, n - 1);
  NeighborGraph g = geom::knn_graph(cloud, kk);

  // simplified point feature histograms, one 33-wide row per point
  std::vector<double> spfh(n * 33, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < kk; ++j) {
      const std::size_t nb = g.neighbor(i, j);
      double a, p, t, dist;
      if (!detail::darboux_angles(cloud.points[i], cloud.normals[i], cloud.points[nb],
                                  cloud.normals[nb], a, p, t, dist))
        continue;
      detail::histogram_add(spfh, i * 33 + 0, a, -1.0, 1.0, 1.0);
      detail::histogram_add(spfh, i * 33 + 11, p, -1.0, 1.0, 1.0);
      detail::histogram_add(spfh, i * 33 + 22, t, -geom::kPi, geom::kPi, 1.0);
    }
  }

  FeatureMatrix fm;
  fm.layout = ChannelLayout::FPFH33;
  fm.rows = n;
  fm.cols = 33;
  fm.values.assign(n * 33, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 33; ++c) fm.at(i, c) = spfh[i * 33 + c];
    for (std::size_t j = 0; j < kk; ++j) {
      const std::size_t nb = g.neighbor(i, j);
      double dist = (cloud.points[nb] - cloud.points[i]).norm();
      double w = 1.0 / (static_cast<double>(kk) * std::max(dist, 1e-12));
      for (std::size_t c = 0; c < 33; ++c) fm.at(i, c) += w * spfh[nb * 33 + c];
    }
    for (std::size_t block = 0; block < 3; ++block) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 11; ++c) sum += fm.at(i, block * 11 + c);
      if (sum > 0.0)
        for (std::size_t c = 0; c < 11; ++c) fm.at(i, block * 11 + c) *= 100.0 / sum;
    }
  }
  return fm;
}

inline FeatureMatrix xyz_features(const PointCloud& cloud) {
  FeatureMatrix fm;
  fm.layout = ChannelLayout::XYZ3;
  fm.rows = cloud.size();
  fm.cols = 3;
  fm.values.resize(fm.rows * 3);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) fm.at(i, c) = cloud.points[i][static_cast<int>(c)];
  return fm;
}

/// Per-point relative offsets p_j - p_i over the graph, 3k channels per point.
inline FeatureMatrix dxyz_features(const PointCloud& cloud, const NeighborGraph& graph) {
  FeatureMatrix fm;
  fm.layout = ChannelLayout::DXYZ3K;
  fm.edge_k = graph.k;
  fm.rows = graph.center_count();
  fm.cols = 3 * graph.k;
  fm.values.resize(fm.rows * fm.cols);
  for (std::size_t c = 0; c < graph.center_count(); ++c) {
    const Vec3& pi = cloud.points[graph.center_indices[c]];
    for (std::size_t j = 0; j < graph.k; ++j) {
      Vec3 d = cloud.points[graph.neighbor(c, j)] - pi;
      for (std::size_t a = 0; a < 3; ++a) fm.at(c, j * 3 + a) = d[static_cast<int>(a)];
    }
  }
  return fm;
}

/// Absolute coordinates followed by the per-edge offsets (layout CONCAT).
inline FeatureMatrix xyz_dxyz_features(const PointCloud& cloud,
                                       const NeighborGraph& graph) {
  FeatureMatrix xyz = xyz_features(cloud);
  FeatureMatrix dxyz = dxyz_features(cloud, graph);
  FeatureMatrix fm;
  fm.layout = ChannelLayout::CONCAT;
  fm.edge_k = graph.k;
  fm.rows = graph.center_count();
  fm.cols = 3 + dxyz.cols;
  fm.values.resize(fm.rows * fm.cols);
  for (std::size_t c = 0; c < fm.rows; ++c) {
    const std::size_t i = graph.center_indices[c];
    for (std::size_t a = 0; a < 3; ++a) fm.at(c, a) = xyz.at(i, a);
    for (std::size_t a = 0; a < dxyz.cols; ++a) fm.at(c, 3 + a) = dxyz.at(c, a);
  }
  return fm;
}

/// Fold an edge-major matrix (n*k rows) into one row of k*cols per point.
inline FeatureMatrix fold_edges(const FeatureMatrix& fm, std::size_t n_points) {
  if (n_points == 0 || fm.rows % n_points != 0)
    throw std::invalid_argument("fold_edges: row count not divisible by point count");
  const std::size_t k = fm.rows / n_points;
  FeatureMatrix out;
  out.layout = ChannelLayout::CONCAT;
  out.edge_k = k;
  out.rows = n_points;
  out.cols = fm.cols * k;
  out.values.resize(out.rows * out.cols);
  for (std::size_t i = 0; i < n_points; ++i)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < fm.cols; ++c)
        out.at(i, j * fm.cols + c) = fm.at(i * k + j, c);
  return out;
}

inline void write_csv(const FeatureMatrix& fm, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_csv: cannot open " + path);
  f << "index";
  for (std::size_t c = 0; c < fm.cols; ++c) f << ",c" << c;
  f << '\n';
  f.precision(9);
  for (std::size_t r = 0; r < fm.rows; ++r) {
    f << r;
    for (std::size_t c = 0; c < fm.cols; ++c) f << ',' << fm.at(r, c);
    f << '\n';
  }
}

}  // namespace gmc::rifeat

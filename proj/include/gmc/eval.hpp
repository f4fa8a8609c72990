#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmc/data.hpp"
#include "gmc/geom.hpp"
#include "gmc/match.hpp"
#include "gmc/rifeat.hpp"

namespace gmc::eval {

using geom::Mat3;
using geom::PointCloud;
using geom::RigidTransform;
using geom::Vec3;

/// Isotropic rotation error arccos((tr(R_gt^-1 R_pred) - 1)/2), radians.
inline double rotation_error(const Mat3& r_gt, const Mat3& r_pred) {
  double arg = ((r_gt.transpose() * r_pred).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(arg, -1.0, 1.0));
}

inline double translation_error(const Vec3& t_gt, const Vec3& t_pred) {
  return (t_gt - t_pred).norm();
}

/// Root-of-sum form with the 1/N prefactor outside the root: the reported
/// value is sqrt(sum of squared residuals) / N.
inline double rmse_error(const PointCloud& source, const RigidTransform& gt,
                         const RigidTransform& pred) {
  double acc = 0;
  for (const Vec3& p : source.points) acc += (gt.apply(p) - pred.apply(p)).squaredNorm();
  return std::sqrt(acc) / static_cast<double>(source.size());
}

struct MetricReport {
  struct Row {
    std::string pair_id;
    double lr_rad = 0, lt = 0, lrmse = 0;
  };
  std::vector<Row> rows;

  double mean_lr() const {
    double s = 0;
    for (const Row& r : rows) s += r.lr_rad;
    return s / static_cast<double>(rows.size());
  }
  double mean_lt() const {
    double s = 0;
    for (const Row& r : rows) s += r.lt;
    return s / static_cast<double>(rows.size());
  }
  double mean_lrmse() const {
    double s = 0;
    for (const Row& r : rows) s += r.lrmse;
    return s / static_cast<double>(rows.size());
  }
  double median_lr() const { return median([](const Row& r) { return r.lr_rad; }); }
  double median_lrmse() const { return median([](const Row& r) { return r.lrmse; }); }

 private:
  template <typename F>
  double median(F f) const {
    std::vector<double> v;
    for (const Row& r : rows) v.push_back(f(r));
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
};

inline void write_metric_csv(const MetricReport& report, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_metric_csv: cannot open " + path);
  f << "pair_id,LR_deg,Lt,LRMSE\n";
  f.precision(15);
  for (const auto& r : report.rows)
    f << r.pair_id << ',' << geom::rad2deg(r.lr_rad) << ',' << r.lt << ',' << r.lrmse << '\n';
}

inline void write_metric_json(const MetricReport& report, const std::string& path) {
  nlohmann::json j;
  j["pairs"] = report.rows.size();
  j["mean_LR_deg"] = geom::rad2deg(report.mean_lr());
  j["mean_Lt"] = report.mean_lt();
  j["mean_LRMSE"] = report.mean_lrmse();
  j["median_LR_deg"] = geom::rad2deg(report.median_lr());
  j["median_LRMSE"] = report.median_lrmse();
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_metric_json: cannot open " + path);
  f << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// feature robustness laboratory

enum class FeatureKind { RRI, PPF, FPFH, XYZ, DXYZ };

inline const char* feature_name(FeatureKind k) {
  switch (k) {
    case FeatureKind::RRI: return "rri";
    case FeatureKind::PPF: return "ppf";
    case FeatureKind::FPFH: return "fpfh";
    case FeatureKind::XYZ: return "xyz";
    case FeatureKind::DXYZ: return "dxyz";
  }
  return "?";
}

inline FeatureKind parse_feature(const std::string& s) {
  if (s == "rri") return FeatureKind::RRI;
  if (s == "ppf") return FeatureKind::PPF;
  if (s == "fpfh") return FeatureKind::FPFH;
  if (s == "xyz") return FeatureKind::XYZ;
  if (s == "dxyz") return FeatureKind::DXYZ;
  throw std::invalid_argument("unknown feature '" + s + "' (expected rri|ppf|fpfh|xyz|dxyz)");
}

enum class SweepMode { RotationOnly, SE3 };

struct SweepOptions {
  SweepMode mode = SweepMode::RotationOnly;
  bool random_axis = false;  // default: fixed Z axis
  std::uint64_t seed = 0;
  std::size_t graph_k = 16;  // edge features and DXYZ neighborhoods
  std::size_t rri_k = 2;     // RRI neighbors in the lab
  std::size_t fpfh_k = 10;
  std::size_t normals_k = 16;
  double crop_fraction = 0.75;  // SE3 mode partial crops
  std::pair<double, double> trans_range{-0.5, 0.5};
};

struct RobustnessCurve {
  std::vector<double> magnitudes;
  std::vector<std::string> feature_names;
  std::vector<std::vector<double>> series;  // series[f][m]

  void validate() const {
    for (std::size_t i = 1; i < magnitudes.size(); ++i)
      if (magnitudes[i] <= magnitudes[i - 1])
        throw std::invalid_argument("RobustnessCurve: sweep must be strictly increasing");
    for (const auto& s : series)
      if (s.size() != magnitudes.size())
        throw std::invalid_argument("RobustnessCurve: series length mismatch");
  }
};

inline void write_curve_csv(const RobustnessCurve& curve, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_curve_csv: cannot open " + path);
  f << "magnitude";
  for (const std::string& name : curve.feature_names) f << ',' << name;
  f << '\n';
  f.precision(9);
  for (std::size_t m = 0; m < curve.magnitudes.size(); ++m) {
    f << curve.magnitudes[m];
    for (const auto& s : curve.series) f << ',' << s[m];
    f << '\n';
  }
}

namespace detail {

/// Per-point feature rows for one cloud. The cloud must already carry the
/// normals the caller wants (transported or re-estimated).
inline rifeat::FeatureMatrix features_of(const PointCloud& cloud, FeatureKind kind,
                                         const SweepOptions& opt) {
  switch (kind) {
    case FeatureKind::RRI:
      return rifeat::rri_features(geom::center_at_origin(cloud), opt.rri_k);
    case FeatureKind::PPF: {
      geom::NeighborGraph g = geom::knn_graph(cloud, std::min(opt.graph_k, cloud.size() - 1));
      return rifeat::fold_edges(rifeat::ppf_features(cloud, g), cloud.size());
    }
    case FeatureKind::FPFH:
      return rifeat::fpfh_features(cloud, opt.fpfh_k);
    case FeatureKind::XYZ:
      return rifeat::xyz_features(cloud);
    case FeatureKind::DXYZ: {
      geom::NeighborGraph g = geom::knn_graph(cloud, std::min(opt.graph_k, cloud.size() - 1));
      return rifeat::dxyz_features(cloud, g);  // already one row per point
    }
  }
  throw std::invalid_argument("features_of: bad feature kind");
}

inline double row_cosine(const rifeat::FeatureMatrix& a, std::size_t ra,
                         const rifeat::FeatureMatrix& b, std::size_t rb) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t c = 0; c < a.cols; ++c) {
    dot += a.at(ra, c) * b.at(rb, c);
    na += a.at(ra, c) * a.at(ra, c);
    nb += b.at(rb, c) * b.at(rb, c);
  }
  if (na == 0 || nb == 0) return 1.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace detail

/// Mean per-point cosine similarity between features before and after a
/// transform of growing rotation magnitude. RotationOnly keeps complete
/// clouds with transported normals; SE3 compares two different partial crops
/// with re-estimated normals and per-crop centers.
inline RobustnessCurve similarity_sweep(const std::vector<PointCloud>& corpus,
                                        const std::vector<FeatureKind>& kinds,
                                        const std::vector<double>& magnitudes_deg,
                                        const SweepOptions& opt) {
  if (corpus.empty() || kinds.empty() || magnitudes_deg.empty())
    throw std::invalid_argument("similarity_sweep: empty input");
  RobustnessCurve curve;
  curve.magnitudes = magnitudes_deg;
  for (FeatureKind k : kinds) curve.feature_names.push_back(feature_name(k));
  curve.series.assign(kinds.size(), std::vector<double>(magnitudes_deg.size(), 0.0));
  curve.validate();

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> gauss;

  for (const PointCloud& raw : corpus) {
    PointCloud base = geom::center_at_origin(raw);

    // per-cloud randomness fixed across magnitudes
    Vec3 axis(0, 0, 1);
    if (opt.random_axis) {
      do {
        axis = Vec3(gauss(rng), gauss(rng), gauss(rng));
      } while (axis.norm() < 1e-12);
      axis.normalize();
    }
    std::uniform_real_distribution<double> ut(opt.trans_range.first, opt.trans_range.second);
    Vec3 translation(ut(rng), ut(rng), ut(rng));
    std::uint64_t crop_seed = rng();

    PointCloud ref_cloud;                       // what the "before" side sees
    std::vector<std::size_t> ref_rows, posed_rows;  // index correspondence
    PointCloud posed_base;                      // canonical "after" geometry
    if (opt.mode == SweepMode::RotationOnly) {
      ref_cloud = geom::estimate_normals(base, opt.normals_k);
      posed_base = ref_cloud;
      ref_rows.resize(base.size());
      posed_rows.resize(base.size());
      for (std::size_t i = 0; i < base.size(); ++i) ref_rows[i] = posed_rows[i] = i;
    } else {
      std::mt19937_64 crop_rng(crop_seed);
      std::size_t keep = static_cast<std::size_t>(opt.crop_fraction *
                                                  static_cast<double>(base.size()));
      // two different crops of the same shape: shifted centers, different
      // neighborhoods near the crop boundaries
      std::normal_distribution<double> g;
      Vec3 a1(g(crop_rng), g(crop_rng), g(crop_rng));
      Vec3 a2 = a1 + 0.6 * Vec3(g(crop_rng), g(crop_rng), g(crop_rng));
      a1 = a1.normalized() * 1.1;
      a2 = a2.normalized() * 1.1;

      std::vector<std::pair<double, std::size_t>> d1, d2;
      for (std::size_t i = 0; i < base.size(); ++i) {
        d1.emplace_back((base.points[i] - a1).squaredNorm(), i);
        d2.emplace_back((base.points[i] - a2).squaredNorm(), i);
      }
      std::partial_sort(d1.begin(), d1.begin() + static_cast<std::ptrdiff_t>(keep), d1.end());
      std::partial_sort(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(keep), d2.end());
      std::vector<std::size_t> in1(base.size(), base.size()), in2(base.size(), base.size());
      PointCloud crop1, crop2;
      for (std::size_t i = 0; i < keep; ++i) {
        in1[d1[i].second] = i;
        crop1.points.push_back(base.points[d1[i].second]);
        in2[d2[i].second] = i;
        crop2.points.push_back(base.points[d2[i].second]);
      }
      for (std::size_t i = 0; i < base.size(); ++i)
        if (in1[i] < base.size() && in2[i] < base.size()) {
          ref_rows.push_back(in1[i]);
          posed_rows.push_back(in2[i]);
        }
      if (ref_rows.empty()) continue;  // disjoint crops, nothing to compare
      ref_cloud = geom::estimate_normals(crop1, opt.normals_k);
      posed_base = crop2;  // normals re-estimated after posing
    }

    for (std::size_t f = 0; f < kinds.size(); ++f) {
      rifeat::FeatureMatrix ref = detail::features_of(ref_cloud, kinds[f], opt);
      for (std::size_t m = 0; m < magnitudes_deg.size(); ++m) {
        RigidTransform t;
        t.rotation =
            Eigen::AngleAxisd(geom::deg2rad(magnitudes_deg[m]), axis).toRotationMatrix();
        if (opt.mode == SweepMode::SE3) t.translation = translation;

        PointCloud posed = geom::apply_transform(posed_base, t);
        if (opt.mode == SweepMode::SE3 &&
            (kinds[f] == FeatureKind::PPF || kinds[f] == FeatureKind::FPFH)) {
          posed.normals.clear();
          posed = geom::estimate_normals(posed, opt.normals_k);
        }
        rifeat::FeatureMatrix after = detail::features_of(posed, kinds[f], opt);

        double acc = 0;
        for (std::size_t i = 0; i < ref_rows.size(); ++i)
          acc += detail::row_cosine(ref, ref_rows[i], after, posed_rows[i]);
        curve.series[f][m] += acc / static_cast<double>(ref_rows.size());
      }
    }
  }
  for (auto& s : curve.series)
    for (double& v : s) v /= static_cast<double>(corpus.size());
  return curve;
}

namespace detail {

/// Noise-lab features: edge features are evaluated over the clean cloud's
/// graph so the statistic isolates value sensitivity under index
/// correspondence (the edge slots correspond one-to-one).
inline rifeat::FeatureMatrix noise_lab_features(const PointCloud& cloud,
                                                const geom::NeighborGraph& clean_graph,
                                                FeatureKind kind, const SweepOptions& opt) {
  switch (kind) {
    case FeatureKind::RRI:
      return rifeat::fold_edges(
          rifeat::rri_edge_features(geom::center_at_origin(cloud), clean_graph), cloud.size());
    case FeatureKind::PPF:
      return rifeat::fold_edges(rifeat::ppf_features(cloud, clean_graph), cloud.size());
    case FeatureKind::FPFH:
      return rifeat::fpfh_features(cloud, opt.fpfh_k);
    case FeatureKind::XYZ:
      return rifeat::xyz_features(cloud);
    case FeatureKind::DXYZ:
      return rifeat::dxyz_features(cloud, clean_graph);
  }
  throw std::invalid_argument("noise_lab_features: bad feature kind");
}

}  // namespace detail

/// Mean per-channel absolute difference between clean and noised features,
/// channels min-max normalized per feature kind unless disabled. Noisy
/// normals are re-estimated; edge features keep the clean graph.
inline RobustnessCurve noise_sweep(const std::vector<PointCloud>& corpus,
                                   const std::vector<FeatureKind>& kinds,
                                   const std::vector<double>& sigmas, const SweepOptions& opt,
                                   bool normalized = true,
                                   double clip = std::numeric_limits<double>::infinity()) {
  if (corpus.empty() || kinds.empty() || sigmas.empty())
    throw std::invalid_argument("noise_sweep: empty input");
  RobustnessCurve curve;
  curve.magnitudes = sigmas;
  for (FeatureKind k : kinds) curve.feature_names.push_back(feature_name(k));
  curve.series.assign(kinds.size(), std::vector<double>(sigmas.size(), 0.0));

  std::mt19937_64 rng(opt.seed);
  for (const PointCloud& raw : corpus) {
    PointCloud base = geom::estimate_normals(geom::center_at_origin(raw), opt.normals_k);
    geom::NeighborGraph graph = geom::knn_graph(base, std::min(opt.graph_k, base.size() - 1));
    std::uint64_t noise_seed = rng();
    for (std::size_t s = 0; s < sigmas.size(); ++s) {
      std::mt19937_64 noise_rng(noise_seed + s);
      PointCloud noisy = data::add_noise(base, sigmas[s], clip, noise_rng);
      noisy = geom::estimate_normals(noisy, opt.normals_k);
      for (std::size_t f = 0; f < kinds.size(); ++f) {
        rifeat::FeatureMatrix clean_f = detail::noise_lab_features(base, graph, kinds[f], opt);
        rifeat::FeatureMatrix noisy_f = detail::noise_lab_features(noisy, graph, kinds[f], opt);
        double mae = 0;
        std::size_t used = 0;
        if (normalized) {
          for (std::size_t c = 0; c < clean_f.cols; ++c) {
            double lo = std::numeric_limits<double>::infinity(), hi = -lo;
            for (std::size_t r = 0; r < clean_f.rows; ++r) {
              lo = std::min({lo, clean_f.at(r, c), noisy_f.at(r, c)});
              hi = std::max({hi, clean_f.at(r, c), noisy_f.at(r, c)});
            }
            double range = hi - lo;
            if (range < 1e-12) continue;  // constant channel carries no signal
            for (std::size_t r = 0; r < clean_f.rows; ++r)
              mae += std::abs(clean_f.at(r, c) - noisy_f.at(r, c)) / range;
            used += clean_f.rows;
          }
        } else {
          for (std::size_t i = 0; i < clean_f.values.size(); ++i)
            mae += std::abs(clean_f.values[i] - noisy_f.values[i]);
          used = clean_f.values.size();
        }
        if (used > 0) curve.series[f][s] += mae / static_cast<double>(used);
      }
    }
  }
  for (auto& s : curve.series)
    for (double& v : s) v /= static_cast<double>(corpus.size());
  return curve;
}

/// Point-to-point ICP with an SVD update; converges to whatever basin the
/// identity initialization falls into.
inline RigidTransform icp_baseline(const PointCloud& source, const PointCloud& target,
                                   int max_iters = 50, double tol = 1e-8) {
  RigidTransform current;
  for (int iter = 0; iter < max_iters; ++iter) {
    PointCloud moved = geom::apply_transform(source, current);
    match::Correspondences corr;
    for (const Vec3& p : moved.points) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t j = 0; j < target.size(); ++j) {
        double d = (target.points[j] - p).squaredNorm();
        if (d < best) {
          best = d;
          arg = j;
        }
      }
      corr.mapped.push_back(target.points[arg]);
      corr.confidence.push_back(1.0);
      corr.valid.push_back(1);
    }
    RigidTransform next = match::weighted_procrustes(source, corr);
    double delta = rotation_error(current.rotation, next.rotation) +
                   (current.translation - next.translation).norm();
    current = next;
    if (delta < tol) break;
  }
  return current;
}

}  // namespace gmc::eval

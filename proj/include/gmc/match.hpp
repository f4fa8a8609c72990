#pragma once

#include <Eigen/SVD>

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmc/autodiff.hpp"
#include "gmc/geom.hpp"
#include "gmc/net.hpp"

namespace gmc::match {

using geom::PointCloud;
using geom::RigidTransform;
using geom::Vec3;

struct MatchConfig {
  int sinkhorn_iters = 5;
  bool slack = true;
  double slack_alpha = 1.0;  // slack bins start at exp(-alpha)
  double lambda_u = 1.0;
  double lambda_s = 1.0;
};

/// Numeric snapshot of the soft assignment. With slack the stored block is
/// (n+1) x (m+1); the extra row/column are outlier bins.
struct MatchMatrix {
  std::size_t n = 0, m = 0;  // non-slack extents
  bool slack = false;
  std::vector<double> weights;  // row-major, rows() x cols()

  std::size_t rows() const { return n + (slack ? 1 : 0); }
  std::size_t cols() const { return m + (slack ? 1 : 0); }
  double at(std::size_t i, std::size_t j) const { return weights[i * cols() + j]; }
};

struct Correspondences {
  std::vector<Vec3> mapped;         // confidence-weighted target barycenters
  std::vector<double> confidence;   // c_i = sum_j m(x_i, y_j), non-slack
  std::vector<std::uint8_t> valid;  // zero-confidence rows are flagged invalid
};

namespace detail {

inline ad::Tensor points_tensor(const PointCloud& cloud) {
  std::vector<double> v;
  v.reserve(cloud.size() * 3);
  for (const Vec3& p : cloud.points)
    for (int a = 0; a < 3; ++a) v.push_back(p[a]);
  return ad::Tensor::constant(cloud.size(), 3, std::move(v));
}

// lambda * squared pairwise distances / sqrt(channels)
inline ad::Tensor block_cost(const ad::Tensor& x, const ad::Tensor& y, double lambda) {
  ad::Tensor x2 = ad::row_sums(ad::square(x));            // N x 1
  ad::Tensor y2 = ad::transpose(ad::row_sums(ad::square(y)));  // 1 x M
  ad::Tensor cross = ad::scale(ad::matmul_nt(x, y), -2.0);
  ad::Tensor d = ad::add_rowvec(ad::add_colvec(cross, x2), y2);
  return ad::scale(d, lambda / std::sqrt(static_cast<double>(x.cols())));
}

}  // namespace detail

/// Matching cost: per-block squared feature distances between corresponding
/// descriptor terms, each scaled by 1/sqrt(block channels) and its weight.
inline ad::Tensor match_cost(const net::Descriptor& dx, const net::Descriptor& dy,
                             double lambda_u = 1.0, double lambda_s = 1.0) {
  if (dx.smooth.size() != dy.smooth.size() || dx.unary.cols() != dy.unary.cols())
    throw std::invalid_argument("match_cost: descriptor layout mismatch");
  for (std::size_t i = 0; i < dx.smooth.size(); ++i)
    if (dx.smooth[i].cols() != dy.smooth[i].cols())
      throw std::invalid_argument("match_cost: smoothness block layout mismatch");

  ad::Tensor total = detail::block_cost(dx.unary, dy.unary, lambda_u);
  for (std::size_t i = 0; i < dx.smooth.size(); ++i)
    total = ad::add(total, detail::block_cost(dx.smooth[i], dy.smooth[i], lambda_s));
  return total;
}

/// Initial assignment exp(-E), with slack row/column at exp(-alpha) and an
/// untouched zero corner cell.
inline ad::Tensor init_assignment(const ad::Tensor& cost, const MatchConfig& cfg) {
  ad::Tensor scores = ad::exp(ad::neg(cost));
  if (!cfg.slack) return scores;
  const std::size_t n = cost.rows(), m = cost.cols();
  const double s = std::exp(-cfg.slack_alpha);
  ad::Tensor top = ad::concat_cols({scores, ad::Tensor::full(n, 1, s)});
  std::vector<double> bottom(m + 1, s);
  bottom[m] = 0.0;  // corner bin stays empty
  return ad::concat_rows({top, ad::Tensor::constant(1, m + 1, std::move(bottom))});
}

/// Alternating row/column renormalization. With slack, the slack row only
/// joins column sweeps and the slack column only joins row sweeps.
inline ad::Tensor sinkhorn(const ad::Tensor& m, int iters, bool slack) {
  if (iters < 1) throw std::invalid_argument("sinkhorn: need iters >= 1");
  ad::Tensor cur = m;
  for (int i = 0; i < iters; ++i) {
    cur = ad::row_normalize(cur, slack);
    cur = ad::col_normalize(cur, slack);
  }
  return cur;
}

struct SoftCorrT {
  ad::Tensor targets;  // N x 3 barycenters
  ad::Tensor conf;     // N x 1
};

/// Differentiable confidence-weighted barycenters over the non-slack block.
inline SoftCorrT soft_correspondences_t(const ad::Tensor& assignment, bool slack,
                                        const PointCloud& target) {
  ad::Tensor block = slack ? ad::slice_cols(ad::slice_rows(assignment, 0, assignment.rows() - 1),
                                            0, assignment.cols() - 1)
                           : assignment;
  if (block.cols() != target.size())
    throw std::invalid_argument("soft_correspondences: target size mismatch");
  ad::Tensor conf = ad::row_sums(block);
  ad::Tensor weighted = ad::matmul(block, detail::points_tensor(target));
  ad::Tensor safe = ad::add(conf, ad::Tensor::full(conf.rows(), 1, 1e-12));
  return {ad::div_colvec(weighted, safe), conf};
}

inline MatchMatrix snapshot(const ad::Tensor& assignment, bool slack) {
  MatchMatrix mm;
  mm.slack = slack;
  mm.n = assignment.rows() - (slack ? 1 : 0);
  mm.m = assignment.cols() - (slack ? 1 : 0);
  mm.weights = assignment.values();
  return mm;
}

/// Numeric counterpart of soft_correspondences_t, exact division.
inline Correspondences soft_correspondences(const MatchMatrix& m, const PointCloud& target) {
  if (m.m != target.size())
    throw std::invalid_argument("soft_correspondences: target size mismatch");
  Correspondences corr;
  corr.mapped.resize(m.n, Vec3::Zero());
  corr.confidence.resize(m.n, 0.0);
  corr.valid.resize(m.n, 0);
  for (std::size_t i = 0; i < m.n; ++i) {
    double c = 0.0;
    Vec3 acc = Vec3::Zero();
    for (std::size_t j = 0; j < m.m; ++j) {
      double w = m.at(i, j);
      c += w;
      acc += w * target.points[j];
    }
    corr.confidence[i] = c;
    if (c > 1e-12) {
      corr.mapped[i] = acc / c;
      corr.valid[i] = 1;
    }
  }
  return corr;
}

/// Confidence-weighted Kabsch solve: R = V diag(1,1,det(VU^T)) U^T from the
/// SVD of the confidence-weighted cross-covariance, t = ybar - R xbar.
inline RigidTransform weighted_procrustes(const PointCloud& source,
                                          const Correspondences& corr) {
  if (corr.mapped.size() != source.size())
    throw std::invalid_argument("weighted_procrustes: correspondence count mismatch");
  double total = 0.0;
  std::size_t effective = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (!corr.valid[i]) continue;
    total += corr.confidence[i];
    ++effective;
  }
  if (total <= 0.0) throw std::invalid_argument("weighted_procrustes: zero total confidence");
  if (effective < 3)
    throw std::invalid_argument("weighted_procrustes: fewer than 3 effective correspondences");

  Vec3 xbar = Vec3::Zero(), ybar = Vec3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (!corr.valid[i]) continue;
    double ch = corr.confidence[i] / total;
    xbar += ch * source.points[i];
    ybar += ch * corr.mapped[i];
  }
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (!corr.valid[i]) continue;
    h += corr.confidence[i] * (source.points[i] - xbar) * (corr.mapped[i] - ybar).transpose();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s = svd.singularValues();
  if (s(1) <= 1e-12 * std::max(s(0), 1e-300))
    throw std::invalid_argument(
        "weighted_procrustes: degenerate cross-covariance (effective correspondences are "
        "collinear or collapsed)");
  Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
  double d = (v * u.transpose()).determinant() >= 0.0 ? 1.0 : -1.0;
  RigidTransform t;
  t.rotation = v * Eigen::Vector3d(1, 1, d).asDiagonal() * u.transpose();
  t.translation = ybar - t.rotation * xbar;
  return t;
}

struct TransformT {
  ad::Tensor rotation;     // 3 x 3
  ad::Tensor translation;  // 1 x 3

  RigidTransform numeric() const {
    RigidTransform t;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        t.rotation(r, c) = rotation.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    for (int c = 0; c < 3; ++c) t.translation[c] = translation.at(0, static_cast<std::size_t>(c));
    return t;
  }
};

/// Differentiable weighted Procrustes; gradients reach the assignment through
/// the confidences and barycenters and through the SVD solve.
inline TransformT weighted_procrustes_t(const PointCloud& source, const SoftCorrT& corr) {
  const std::size_t n = source.size();
  ad::Tensor x = detail::points_tensor(source);
  ad::Tensor total = ad::reduce_sum(corr.conf);
  ad::Tensor chat = ad::div_by_scalar(corr.conf, total);
  ad::Tensor xbar = ad::matmul_tn(chat, x);             // 1 x 3
  ad::Tensor ybar = ad::matmul_tn(chat, corr.targets);  // 1 x 3
  ad::Tensor xc = ad::sub(x, ad::broadcast_rows(xbar, n));
  ad::Tensor yc = ad::sub(corr.targets, ad::broadcast_rows(ybar, n));
  ad::Tensor h = ad::matmul_tn(ad::mul_colvec(xc, corr.conf), yc);
  ad::Tensor r = ad::kabsch(h);
  ad::Tensor t = ad::sub(ybar, ad::matmul_nt(xbar, r));
  return {r, t};
}

/// Transformed source as rows: X R^T + t.
inline ad::Tensor apply_transform_t(const ad::Tensor& points, const TransformT& t) {
  return ad::add_rowvec(ad::matmul_nt(points, t.rotation), t.translation);
}

struct RegisterGraph {
  TransformT transform;
  ad::Tensor assignment;  // post-sinkhorn, slack included when enabled
  SoftCorrT corr;
  net::Descriptor desc_source, desc_target;
};

/// One-shot pipeline on the tape: per-cloud descriptors with shared weights,
/// cost, initialization, sinkhorn, soft correspondences, weighted SVD solve.
inline RegisterGraph register_graph(const PointCloud& source, const PointCloud& target,
                                    const net::HGMConfig& hgm_cfg, ad::ParamStore& store,
                                    const MatchConfig& cfg) {
  RegisterGraph g;
  g.desc_source = net::hgm_forward(source, hgm_cfg, store);
  g.desc_target = net::hgm_forward(target, hgm_cfg, store);
  ad::Tensor cost = match_cost(g.desc_source, g.desc_target, cfg.lambda_u, cfg.lambda_s);
  ad::Tensor init = init_assignment(cost, cfg);
  g.assignment = sinkhorn(init, cfg.sinkhorn_iters, cfg.slack);
  g.corr = soft_correspondences_t(g.assignment, cfg.slack, target);
  g.transform = weighted_procrustes_t(source, g.corr);
  return g;
}

struct RegisterResult {
  RigidTransform transform;
  MatchMatrix matches;
};

inline RegisterResult register_pair(const PointCloud& source, const PointCloud& target,
                                    const net::HGMConfig& hgm_cfg, ad::ParamStore& store,
                                    const MatchConfig& cfg) {
  RegisterGraph g = register_graph(source, target, hgm_cfg, store, cfg);
  return {g.transform.numeric(), snapshot(g.assignment, cfg.slack)};
}

/// Correspondence dump: `i,j,weight` for non-slack weights above threshold.
inline void write_match_csv(const MatchMatrix& m, const std::string& path,
                            double threshold = 1e-3) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_match_csv: cannot open " + path);
  f << "i,j,weight\n";
  f.precision(9);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.m; ++j)
      if (m.at(i, j) > threshold) f << i << ',' << j << ',' << m.at(i, j) << '\n';
}

}  // namespace gmc::match

#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmc/data.hpp"
#include "gmc/match.hpp"

namespace gmc::train {

using geom::PointCloud;
using geom::RigidTransform;
using geom::Vec3;

struct TrainConfig {
  int epochs = 200;
  int batch_size = 8;
  double lr = 0.001;
  double omega = 0.01;  // inlier-loss weight
  std::pair<double, double> rot_range{0.0, 180.0};
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (lr < 0) throw std::invalid_argument("TrainConfig: lr must be >= 0");
    if (omega < 0) throw std::invalid_argument("TrainConfig: omega must be >= 0");
    if (!(0 <= rot_range.first && rot_range.first <= rot_range.second &&
          rot_range.second <= 180))
      throw std::invalid_argument("TrainConfig: rotation range must lie in [0, 180]");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be >= 1");
  }
};

struct EpochStats {
  int epoch = 0;
  double loss = 0, loss_rg = 0, loss_il = 0;
  double val_lr = 0, val_lt = 0, val_rmse = 0;  // filled by the caller's validation
};

/// Mean over points of the l1 residual between the two transforms applied to
/// the source.
inline double registration_loss(const PointCloud& source, const RigidTransform& pred,
                                const RigidTransform& gt) {
  double acc = 0;
  for (const Vec3& p : source.points) acc += (pred.apply(p) - gt.apply(p)).cwiseAbs().sum();
  return acc / static_cast<double>(source.size());
}

inline ad::Tensor registration_loss_t(const PointCloud& source, const match::TransformT& pred,
                                      const RigidTransform& gt) {
  const std::size_t n = source.size();
  std::vector<double> xs, gts;
  xs.reserve(n * 3);
  gts.reserve(n * 3);
  for (const Vec3& p : source.points) {
    Vec3 q = gt.apply(p);
    for (int c = 0; c < 3; ++c) {
      xs.push_back(p[c]);
      gts.push_back(q[c]);
    }
  }
  ad::Tensor pred_pts = match::apply_transform_t(ad::Tensor::constant(n, 3, std::move(xs)), pred);
  ad::Tensor diff = ad::sub(pred_pts, ad::Tensor::constant(n, 3, std::move(gts)));
  return ad::scale(ad::reduce_sum(ad::abs(diff)), 1.0 / static_cast<double>(n));
}

/// (1/M) sum_j (1 - col mass) + (1/N) sum_i (1 - row mass) over the
/// non-slack block.
inline double inlier_loss(const match::MatchMatrix& m) {
  double row_part = 0, col_part = 0;
  for (std::size_t i = 0; i < m.n; ++i) {
    double rs = 0;
    for (std::size_t j = 0; j < m.m; ++j) rs += m.at(i, j);
    row_part += 1.0 - rs;
  }
  for (std::size_t j = 0; j < m.m; ++j) {
    double cs = 0;
    for (std::size_t i = 0; i < m.n; ++i) cs += m.at(i, j);
    col_part += 1.0 - cs;
  }
  return col_part / static_cast<double>(m.m) + row_part / static_cast<double>(m.n);
}

inline ad::Tensor inlier_loss_t(const ad::Tensor& assignment, bool slack) {
  ad::Tensor block = slack ? ad::slice_cols(ad::slice_rows(assignment, 0, assignment.rows() - 1),
                                            0, assignment.cols() - 1)
                           : assignment;
  const double n = static_cast<double>(block.rows());
  const double m = static_cast<double>(block.cols());
  ad::Tensor row_gap = ad::sub(ad::Tensor::full(block.rows(), 1, 1.0), ad::row_sums(block));
  ad::Tensor col_gap = ad::sub(ad::Tensor::full(1, block.cols(), 1.0), ad::col_sums(block));
  return ad::add(ad::scale(ad::reduce_sum(row_gap), 1.0 / n),
                 ad::scale(ad::reduce_sum(col_gap), 1.0 / m));
}

struct PairLossParts {
  ad::Tensor total, rg, il;
};

/// Cycle loss for one pair: both directions as independent forward passes
/// sharing weights, plus the weighted inlier terms.
inline PairLossParts pair_loss(const data::RegPair& pair, const net::HGMConfig& hgm_cfg,
                               const match::MatchConfig& match_cfg, ad::ParamStore& store,
                               double omega) {
  match::RegisterGraph fwd = match::register_graph(pair.source, pair.target, hgm_cfg, store,
                                                   match_cfg);
  match::RegisterGraph bwd = match::register_graph(pair.target, pair.source, hgm_cfg, store,
                                                   match_cfg);
  ad::Tensor rg = ad::add(registration_loss_t(pair.source, fwd.transform, pair.gt),
                          registration_loss_t(pair.target, bwd.transform, pair.gt.inverse()));
  ad::Tensor il = ad::add(inlier_loss_t(fwd.assignment, match_cfg.slack),
                          inlier_loss_t(bwd.assignment, match_cfg.slack));
  PairLossParts parts;
  parts.rg = rg;
  parts.il = il;
  parts.total = ad::add(rg, ad::scale(il, omega));
  return parts;
}

/// One pass over the dataset: shuffled order, gradients averaged per batch,
/// one Adam step per batch. Throws on a non-finite loss naming the pair.
inline EpochStats train_epoch(const std::vector<data::RegPair>& pairs,
                              const net::HGMConfig& hgm_cfg,
                              const match::MatchConfig& match_cfg, ad::ParamStore& store,
                              ad::AdamState& adam, const TrainConfig& cfg, int epoch) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("train_epoch: empty dataset");

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(cfg.seed + 1000003ULL * static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);

  ad::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;

  EpochStats stats;
  stats.epoch = epoch;
  std::size_t cursor = 0;
  while (cursor < order.size()) {
    std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                              order.size() - cursor);
    store.zero_grads();
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t idx = order[cursor + b];
      PairLossParts parts = pair_loss(pairs[idx], hgm_cfg, match_cfg, store, cfg.omega);
      double total = parts.total.item();
      if (!std::isfinite(total))
        throw std::runtime_error("train_epoch: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", pair " + std::to_string(idx) +
                                 (pairs[idx].shape_id.empty() ? "" : " (" + pairs[idx].shape_id + ")"));
      ad::backward(parts.total);
      stats.loss += total;
      stats.loss_rg += parts.rg.item();
      stats.loss_il += parts.il.item();
    }
    store.scale_grads(1.0 / static_cast<double>(batch));
    ad::adam_step(store, adam, adam_cfg);
    cursor += batch;
  }
  stats.loss /= static_cast<double>(pairs.size());
  stats.loss_rg /= static_cast<double>(pairs.size());
  stats.loss_il /= static_cast<double>(pairs.size());
  return stats;
}

inline void write_record_header(std::ostream& os) {
  os << "epoch,loss,loss_rg,loss_il,val_LR,val_Lt,val_RMSE\n";
}

inline void write_record_row(std::ostream& os, const EpochStats& s) {
  os.precision(9);
  os << s.epoch << ',' << s.loss << ',' << s.loss_rg << ',' << s.loss_il << ',' << s.val_lr
     << ',' << s.val_lt << ',' << s.val_rmse << '\n';
}

}  // namespace gmc::train

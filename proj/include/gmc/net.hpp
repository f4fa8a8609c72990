#pragma once

#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmc/autodiff.hpp"
#include "gmc/geom.hpp"
#include "gmc/rifeat.hpp"

namespace gmc::net {

using geom::NeighborGraph;
using geom::PointCloud;

enum class RIKind { RRI, PPF, FPFH };

inline const char* ri_kind_name(RIKind k) {
  switch (k) {
    case RIKind::RRI: return "rri";
    case RIKind::PPF: return "ppf";
    case RIKind::FPFH: return "fpfh";
  }
  return "?";
}

inline RIKind parse_ri_kind(const std::string& s) {
  if (s == "rri") return RIKind::RRI;
  if (s == "ppf") return RIKind::PPF;
  if (s == "fpfh") return RIKind::FPFH;
  throw std::invalid_argument("unknown ri_kind '" + s + "' (expected rri|ppf|fpfh)");
}

/// One attention layer: neighbor count, channel sizes, the r1/r2 reduction
/// divisors of the attention branch, and which positional inputs feed eta.
struct TPTConfig {
  std::size_t k = 16;
  std::size_t c_in = 64;
  std::size_t c_out = 64;
  std::size_t r1 = 4;
  std::size_t r2 = 8;
  bool pos_xyz = true;
  bool pos_dxyz = true;
  bool pos_ri = true;
  RIKind ri_edge_kind = RIKind::PPF;
  std::size_t mlp_depth = 2;

  void validate() const {
    if (k < 1) throw std::invalid_argument("TPTConfig: k must be >= 1");
    if (c_out % r1 != 0 || c_out % r2 != 0)
      throw std::invalid_argument("TPTConfig: c_out must be divisible by r1 and r2");
    if (!pos_xyz && !pos_dxyz && !pos_ri)
      throw std::invalid_argument("TPTConfig: positional layout is empty");
  }

  std::size_t rho_channels() const {
    return (pos_xyz ? 3u : 0u) + (pos_dxyz ? 3u : 0u) + (pos_ri ? 4u : 0u);
  }
};

/// Hierarchy settings: level sizes, per-level channels, unary channels and
/// which handcrafted feature family feeds the unary term.
struct HGMConfig {
  std::array<std::size_t, 3> levels{768, 384, 192};
  std::size_t k = 16;
  RIKind ri_kind = RIKind::PPF;
  std::size_t cu = 64;
  std::array<std::size_t, 3> cs{64, 64, 64};
  std::size_t r1 = 4;
  std::size_t r2 = 8;
  std::size_t mlp_depth = 2;
  bool pos_xyz = true;
  bool pos_dxyz = true;
  bool pos_ri = true;
  bool use_layer_norm = true;
  std::size_t rri_k = 2;      // neighbors per point for RRI input features
  std::size_t fpfh_k = 10;
  std::size_t normals_k = 16;

  void validate() const {
    if (!(levels[0] >= levels[1] && levels[1] >= levels[2] && levels[2] >= 8))
      throw std::invalid_argument("HGMConfig: need N1 >= N2 >= N3 >= 8");
    if (cu == 0 || cs[0] == 0 || cs[1] == 0 || cs[2] == 0)
      throw std::invalid_argument("HGMConfig: channel sizes must be positive");
    for (std::size_t c : cs)
      if (c % r1 != 0 || c % r2 != 0)
        throw std::invalid_argument("HGMConfig: smoothness channels must divide by r1 and r2");
  }

  std::size_t unary_input_channels() const {
    switch (ri_kind) {
      case RIKind::RRI: return 4 * rri_k;
      case RIKind::PPF: return 4 * k;
      case RIKind::FPFH: return 33;
    }
    return 0;
  }

  // RRI mode uses origin-centered geometry everywhere and no normals.
  bool needs_normals() const { return ri_kind != RIKind::RRI; }
};

// key=value config file ------------------------------------------------------

inline void save_config(const HGMConfig& cfg, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_config: cannot open " + path);
  f << "levels=" << cfg.levels[0] << ',' << cfg.levels[1] << ',' << cfg.levels[2] << '\n';
  f << "k=" << cfg.k << '\n';
  f << "ri_kind=" << ri_kind_name(cfg.ri_kind) << '\n';
  f << "cu=" << cfg.cu << '\n';
  f << "cs1=" << cfg.cs[0] << '\n';
  f << "cs2=" << cfg.cs[1] << '\n';
  f << "cs3=" << cfg.cs[2] << '\n';
  f << "r1=" << cfg.r1 << '\n';
  f << "r2=" << cfg.r2 << '\n';
  f << "mlp_depth=" << cfg.mlp_depth << '\n';
  f << "pos_xyz=" << (cfg.pos_xyz ? 1 : 0) << '\n';
  f << "pos_dxyz=" << (cfg.pos_dxyz ? 1 : 0) << '\n';
  f << "pos_ri=" << (cfg.pos_ri ? 1 : 0) << '\n';
  f << "layer_norm=" << (cfg.use_layer_norm ? 1 : 0) << '\n';
  f << "rri_k=" << cfg.rri_k << '\n';
  f << "fpfh_k=" << cfg.fpfh_k << '\n';
  f << "normals_k=" << cfg.normals_k << '\n';
}

inline HGMConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_config: cannot open " + path);
  HGMConfig cfg;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("load_config: bad line '" + line + "'");
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "levels") {
      std::istringstream ss(val);
      char comma;
      if (!(ss >> cfg.levels[0] >> comma >> cfg.levels[1] >> comma >> cfg.levels[2]))
        throw std::runtime_error("load_config: bad levels '" + val + "'");
    } else if (key == "k") cfg.k = std::stoul(val);
    else if (key == "ri_kind") cfg.ri_kind = parse_ri_kind(val);
    else if (key == "cu") cfg.cu = std::stoul(val);
    else if (key == "cs1") cfg.cs[0] = std::stoul(val);
    else if (key == "cs2") cfg.cs[1] = std::stoul(val);
    else if (key == "cs3") cfg.cs[2] = std::stoul(val);
    else if (key == "r1") cfg.r1 = std::stoul(val);
    else if (key == "r2") cfg.r2 = std::stoul(val);
    else if (key == "mlp_depth") cfg.mlp_depth = std::stoul(val);
    else if (key == "pos_xyz") cfg.pos_xyz = val != "0";
    else if (key == "pos_dxyz") cfg.pos_dxyz = val != "0";
    else if (key == "pos_ri") cfg.pos_ri = val != "0";
    else if (key == "layer_norm") cfg.use_layer_norm = val != "0";
    else if (key == "rri_k") cfg.rri_k = std::stoul(val);
    else if (key == "fpfh_k") cfg.fpfh_k = std::stoul(val);
    else if (key == "normals_k") cfg.normals_k = std::stoul(val);
    else throw std::runtime_error("load_config: unknown key '" + key + "'");
  }
  return cfg;
}

// parameter construction ------------------------------------------------------

namespace detail {

inline void build_mlp_params(ad::ParamStore& store, const std::string& prefix,
                             std::size_t c_in, std::size_t c_out, std::size_t depth) {
  std::size_t in = c_in;
  for (std::size_t l = 0; l < depth; ++l) {
    std::string base = prefix + "/l" + std::to_string(l);
    store.create(base + "/w", in, c_out);
    store.create_zeros(base + "/b", 1, c_out);
    in = c_out;
  }
}

inline ad::Tensor mlp_forward(const ad::Tensor& x, ad::ParamStore& store,
                              const std::string& prefix, std::size_t depth) {
  ad::Tensor h = x;
  for (std::size_t l = 0; l < depth; ++l) {
    std::string base = prefix + "/l" + std::to_string(l);
    h = ad::add_rowvec(ad::matmul(h, store.get(base + "/w")), store.get(base + "/b"));
    if (l + 1 < depth) h = ad::relu(h);
  }
  return h;
}

// gamma maps pre-attention vectors to c_out / r2 grouped weights through a
// c_out / r1 bottleneck
inline void build_gamma_params(ad::ParamStore& store, const std::string& prefix,
                               std::size_t c_out, std::size_t r1, std::size_t r2) {
  store.create(prefix + "/l0/w", c_out, c_out / r1);
  store.create_zeros(prefix + "/l0/b", 1, c_out / r1);
  store.create(prefix + "/l1/w", c_out / r1, c_out / r2);
  store.create_zeros(prefix + "/l1/b", 1, c_out / r2);
}

inline ad::Tensor gamma_forward(const ad::Tensor& x, ad::ParamStore& store,
                                const std::string& prefix) {
  ad::Tensor h = ad::relu(
      ad::add_rowvec(ad::matmul(x, store.get(prefix + "/l0/w")), store.get(prefix + "/l0/b")));
  return ad::add_rowvec(ad::matmul(h, store.get(prefix + "/l1/w")), store.get(prefix + "/l1/b"));
}

inline ad::Tensor ln_affine(const ad::Tensor& x, ad::ParamStore& store,
                            const std::string& prefix) {
  return ad::add_rowvec(ad::mul_rowvec(ad::layer_norm(x), store.get(prefix + "/g")),
                        store.get(prefix + "/b"));
}

}  // namespace detail

inline void build_tpt_params(const TPTConfig& cfg, ad::ParamStore& store,
                             const std::string& prefix) {
  cfg.validate();
  detail::build_mlp_params(store, prefix + "/beta", cfg.c_in, cfg.c_out, cfg.mlp_depth);
  detail::build_mlp_params(store, prefix + "/zeta", cfg.c_in, cfg.c_out, cfg.mlp_depth);
  detail::build_mlp_params(store, prefix + "/xi", cfg.c_in, cfg.c_out, cfg.mlp_depth);
  detail::build_mlp_params(store, prefix + "/eta", cfg.rho_channels(), cfg.c_out, 2);
  detail::build_gamma_params(store, prefix + "/gamma", cfg.c_out, cfg.r1, cfg.r2);
}

/// Per-edge positional features for eta, in graph-edge order.
inline ad::Tensor positional_features(const PointCloud& cloud, const NeighborGraph& graph,
                                      const TPTConfig& cfg) {
  const std::size_t edges = graph.center_count() * graph.k;
  std::vector<ad::Tensor> parts;
  if (cfg.pos_xyz || cfg.pos_dxyz) {
    std::vector<double> xyz, dxyz;
    xyz.reserve(edges * 3);
    dxyz.reserve(edges * 3);
    for (std::size_t c = 0; c < graph.center_count(); ++c) {
      const geom::Vec3& pi = cloud.points[graph.center_indices[c]];
      for (std::size_t j = 0; j < graph.k; ++j) {
        const geom::Vec3& pj = cloud.points[graph.neighbor(c, j)];
        for (int a = 0; a < 3; ++a) xyz.push_back(pj[a]);
        for (int a = 0; a < 3; ++a) dxyz.push_back(pj[a] - pi[a]);
      }
    }
    if (cfg.pos_xyz) parts.push_back(ad::Tensor::constant(edges, 3, std::move(xyz)));
    if (cfg.pos_dxyz) parts.push_back(ad::Tensor::constant(edges, 3, std::move(dxyz)));
  }
  if (cfg.pos_ri) {
    rifeat::FeatureMatrix ri = cfg.ri_edge_kind == RIKind::RRI
                                   ? rifeat::rri_edge_features(cloud, graph)
                                   : rifeat::ppf_features(cloud, graph);
    parts.push_back(ad::Tensor::constant(edges, 4, std::move(ri.values)));
  }
  return parts.size() == 1 ? parts[0] : ad::concat_cols(parts);
}

/// Attention aggregation over a KNN graph: for each center i,
/// sum_j (beta(x_j) + eta(rho_ij)) * softmax_j(gamma(zeta(x_i) - xi(x_j) + eta(rho_ij))),
/// with the grouped attention weights shared across r2-wide channel groups.
inline ad::Tensor tpt_forward(const ad::Tensor& x, const PointCloud& cloud,
                              const NeighborGraph& graph, const TPTConfig& cfg,
                              ad::ParamStore& store, const std::string& prefix) {
  cfg.validate();
  if (x.rows() != graph.center_count() || x.cols() != cfg.c_in)
    throw std::invalid_argument("tpt_forward: feature shape mismatch [" +
                                std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                                "] for " + std::to_string(graph.center_count()) + " centers, c_in " +
                                std::to_string(cfg.c_in));

  std::vector<std::size_t> edge_center(graph.center_count() * graph.k);
  std::vector<std::size_t> edge_neighbor(graph.center_count() * graph.k);
  for (std::size_t c = 0; c < graph.center_count(); ++c)
    for (std::size_t j = 0; j < graph.k; ++j) {
      edge_center[c * graph.k + j] = c;
      edge_neighbor[c * graph.k + j] = graph.neighbor(c, j);
    }

  ad::Tensor beta = detail::mlp_forward(x, store, prefix + "/beta", cfg.mlp_depth);
  ad::Tensor zeta = detail::mlp_forward(x, store, prefix + "/zeta", cfg.mlp_depth);
  ad::Tensor xi = detail::mlp_forward(x, store, prefix + "/xi", cfg.mlp_depth);
  ad::Tensor rho = positional_features(cloud, graph, cfg);
  ad::Tensor eta = detail::mlp_forward(rho, store, prefix + "/eta", 2);

  ad::Tensor pre = ad::add(
      ad::sub(ad::gather_rows(zeta, edge_center), ad::gather_rows(xi, edge_neighbor)), eta);
  ad::Tensor logits = detail::gamma_forward(pre, store, prefix + "/gamma");
  ad::Tensor weights = ad::softmax_over_neighbors(logits, graph.k);
  ad::Tensor values = ad::add(ad::gather_rows(beta, edge_neighbor), eta);
  return ad::sum_neighbors(ad::mul(values, ad::repeat_cols(weights, cfg.r2)), graph.k);
}

/// Nearest-sampled-point copy of coarse features onto every full point
/// (ties by lower coarse position).
inline ad::Tensor upsample_features(const ad::Tensor& coarse,
                                    const std::vector<std::size_t>& coarse_indices,
                                    const PointCloud& full_cloud) {
  if (coarse_indices.empty()) throw std::invalid_argument("upsample_features: empty coarse set");
  if (coarse.rows() != coarse_indices.size())
    throw std::invalid_argument("upsample_features: row/index count mismatch");
  std::vector<std::size_t> assign(full_cloud.size());
  for (std::size_t i = 0; i < full_cloud.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < coarse_indices.size(); ++j) {
      double d = (full_cloud.points[i] - full_cloud.points[coarse_indices[j]]).squaredNorm();
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    assign[i] = arg;
  }
  return ad::gather_rows(coarse, assign);
}

struct Descriptor {
  ad::Tensor unary;                  // N x cu
  std::vector<ad::Tensor> smooth;    // three N x cs[n] blocks

  ad::Tensor concat() const {
    std::vector<ad::Tensor> parts{unary};
    parts.insert(parts.end(), smooth.begin(), smooth.end());
    return ad::concat_cols(parts);
  }
};

inline TPTConfig level_tpt_config(const HGMConfig& cfg, std::size_t level,
                                  std::size_t c_in, std::size_t n_level) {
  TPTConfig t;
  t.k = std::min(cfg.k, n_level - 1);
  t.c_in = c_in;
  t.c_out = cfg.cs[level];
  t.r1 = cfg.r1;
  t.r2 = cfg.r2;
  t.pos_xyz = cfg.pos_xyz;
  t.pos_dxyz = cfg.pos_dxyz;
  t.pos_ri = cfg.pos_ri;
  t.ri_edge_kind = cfg.ri_kind == RIKind::RRI ? RIKind::RRI : RIKind::PPF;
  t.mlp_depth = cfg.mlp_depth;
  return t;
}

inline void build_params(const HGMConfig& cfg, ad::ParamStore& store) {
  cfg.validate();
  detail::build_mlp_params(store, "hgm/omega", cfg.unary_input_channels(), cfg.cu,
                           cfg.mlp_depth);
  if (cfg.use_layer_norm) {
    store.create_full("hgm/omega/ln/g", 1, cfg.cu, 1.0);
    store.create_zeros("hgm/omega/ln/b", 1, cfg.cu);
  }
  std::size_t c_in = cfg.cu;
  for (std::size_t level = 0; level < 3; ++level) {
    std::string base = "hgm/lam" + std::to_string(level + 1);
    TPTConfig t = level_tpt_config(cfg, level, c_in, cfg.levels[level]);
    build_tpt_params(t, store, base + "/tpt");
    store.create(base + "/out/w", cfg.cs[level], cfg.cs[level]);
    store.create_zeros(base + "/out/b", 1, cfg.cs[level]);
    if (c_in != cfg.cs[level]) store.create(base + "/proj/w", c_in, cfg.cs[level]);
    if (cfg.use_layer_norm) {
      store.create_full(base + "/ln/g", 1, cfg.cs[level], 1.0);
      store.create_zeros(base + "/ln/b", 1, cfg.cs[level]);
    }
    c_in = cfg.cs[level];
  }
}

/// Per-point descriptors for one cloud: a unary block over handcrafted
/// rotation-invariant features plus three attention blocks at shrinking
/// scales, each propagated back to full resolution.
inline Descriptor hgm_forward(const PointCloud& cloud, const HGMConfig& cfg,
                              ad::ParamStore& store, std::size_t fps_start = 0) {
  cfg.validate();
  const std::size_t n = cloud.size();
  if (n < cfg.levels[2]) throw std::invalid_argument("hgm_forward: cloud smaller than N3");

  PointCloud work = cloud;
  if (cfg.ri_kind == RIKind::RRI) work = geom::center_at_origin(work);
  if (cfg.needs_normals() && !work.has_normals())
    work = geom::estimate_normals(work, cfg.normals_k);

  // unary term over handcrafted rotation-invariant inputs
  ad::Tensor x_ri;
  NeighborGraph graph1 = geom::knn_graph(work, std::min(cfg.k, n - 1));
  switch (cfg.ri_kind) {
    case RIKind::RRI: {
      rifeat::FeatureMatrix fm = rifeat::rri_features(work, cfg.rri_k);
      x_ri = ad::Tensor::constant(fm.rows, fm.cols, std::move(fm.values));
      break;
    }
    case RIKind::PPF: {
      rifeat::FeatureMatrix fm =
          rifeat::fold_edges(rifeat::ppf_features(work, graph1), n);
      x_ri = ad::Tensor::constant(fm.rows, fm.cols, std::move(fm.values));
      break;
    }
    case RIKind::FPFH: {
      rifeat::FeatureMatrix fm = rifeat::fpfh_features(work, cfg.fpfh_k);
      x_ri = ad::Tensor::constant(fm.rows, fm.cols, std::move(fm.values));
      break;
    }
  }
  ad::Tensor unary = detail::mlp_forward(x_ri, store, "hgm/omega", cfg.mlp_depth);
  if (cfg.use_layer_norm) unary = detail::ln_affine(unary, store, "hgm/omega/ln");

  Descriptor desc;
  desc.unary = unary;

  // smoothness stacks over the shrinking hierarchy
  PointCloud level_cloud = work;
  std::vector<std::size_t> level_global(n);
  for (std::size_t i = 0; i < n; ++i) level_global[i] = i;
  ad::Tensor feats = unary;
  std::size_t c_in = cfg.cu;

  for (std::size_t level = 0; level < 3; ++level) {
    std::string base = "hgm/lam" + std::to_string(level + 1);
    if (level > 0) {
      std::size_t target = std::min(cfg.levels[level], level_cloud.size());
      // fps_start addresses the input ordering; deeper levels run in the
      // canonical selection order of the previous level
      std::vector<std::size_t> picked = geom::farthest_point_sample(
          level_cloud, target, level == 1 ? fps_start : 0);
      PointCloud sub;
      sub.points.reserve(picked.size());
      for (std::size_t p : picked) {
        sub.points.push_back(level_cloud.points[p]);
        if (level_cloud.has_normals()) sub.normals.push_back(level_cloud.normals[p]);
      }
      std::vector<std::size_t> global(picked.size());
      for (std::size_t i = 0; i < picked.size(); ++i) global[i] = level_global[picked[i]];
      feats = ad::gather_rows(feats, picked);
      level_cloud = std::move(sub);
      level_global = std::move(global);
    }
    NeighborGraph graph = geom::knn_graph(level_cloud, std::min(cfg.k, level_cloud.size() - 1));
    TPTConfig t = level_tpt_config(cfg, level, c_in, level_cloud.size());
    ad::Tensor attn = tpt_forward(feats, level_cloud, graph, t, store, base + "/tpt");
    ad::Tensor out = ad::add_rowvec(ad::matmul(attn, store.get(base + "/out/w")),
                                    store.get(base + "/out/b"));
    ad::Tensor base_feats =
        c_in == cfg.cs[level] ? feats : ad::matmul(feats, store.get(base + "/proj/w"));
    ad::Tensor y = ad::add(base_feats, out);
    if (cfg.use_layer_norm) y = detail::ln_affine(y, store, base + "/ln");

    desc.smooth.push_back(level == 0 ? y : upsample_features(y, level_global, work));
    feats = y;
    c_in = cfg.cs[level];
  }
  return desc;
}

}  // namespace gmc::net

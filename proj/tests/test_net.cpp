#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "gmc/net.hpp"
#include "helpers.hpp"

namespace ad = gmc::ad;
using namespace gmc::geom;
using namespace gmc::net;
using test_helpers::fibonacci_sphere;
using test_helpers::random_cloud;

namespace {

HGMConfig tiny_config(RIKind kind, std::size_t n) {
  HGMConfig cfg;
  cfg.levels = {n, n / 2, std::max<std::size_t>(n / 4, 8)};
  cfg.k = 4;
  cfg.ri_kind = kind;
  cfg.cu = 16;
  cfg.cs = {16, 16, 16};
  cfg.r1 = 4;
  cfg.r2 = 8;
  cfg.fpfh_k = 6;
  cfg.normals_k = 6;
  return cfg;
}

double max_abs(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("tpt_forward with a single neighbor reduces to beta + eta") {
  std::mt19937_64 rng(201);
  PointCloud cloud = estimate_normals(random_cloud(6, rng), 3);
  NeighborGraph graph = knn_graph(cloud, 1);

  TPTConfig cfg;
  cfg.k = 1;
  cfg.c_in = 4;
  cfg.c_out = 8;
  cfg.r1 = 4;
  cfg.r2 = 8;
  ad::ParamStore store(11);
  build_tpt_params(cfg, store, "tpt");

  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> xv(6 * 4);
  for (double& v : xv) v = u(rng);
  ad::Tensor x = ad::Tensor::constant(6, 4, xv);

  ad::Tensor out = tpt_forward(x, cloud, graph, cfg, store, "tpt");

  // expected: attention weight is exactly 1, so out_i = beta(x_j) + eta(rho_ij)
  ad::Tensor beta = gmc::net::detail::mlp_forward(x, store, "tpt/beta", cfg.mlp_depth);
  ad::Tensor rho = positional_features(cloud, graph, cfg);
  ad::Tensor eta = gmc::net::detail::mlp_forward(rho, store, "tpt/eta", 2);
  for (std::size_t i = 0; i < 6; ++i) {
    std::size_t j = graph.neighbor(i, 0);
    for (std::size_t c = 0; c < 8; ++c)
      REQUIRE(std::abs(out.at(i, c) - (beta.at(j, c) + eta.at(i, c))) < 1e-12);
  }
}

TEST_CASE("tpt_forward RI-only positional layout is pose invariant") {
  std::mt19937_64 rng(203);
  PointCloud cloud = estimate_normals(fibonacci_sphere(48), 6);
  NeighborGraph graph = knn_graph(cloud, 4);

  TPTConfig cfg;
  cfg.k = 4;
  cfg.c_in = 8;
  cfg.c_out = 16;
  cfg.pos_xyz = false;
  cfg.pos_dxyz = false;
  cfg.pos_ri = true;
  ad::ParamStore store(13);
  build_tpt_params(cfg, store, "tpt");

  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> xv(48 * 8);
  for (double& v : xv) v = u(rng);
  ad::Tensor x = ad::Tensor::constant(48, 8, xv);

  ad::Tensor a = tpt_forward(x, cloud, graph, cfg, store, "tpt");
  RigidTransform t = random_se3({0, 180}, {-0.5, 0.5}, rng);
  PointCloud moved = apply_transform(cloud, t);  // transported normals
  ad::Tensor b = tpt_forward(x, moved, knn_graph(moved, 4), cfg, store, "tpt");
  REQUIRE(max_abs(a.values(), b.values()) < 1e-6);

  // with XYZ in the layout the output must differ under rotation
  cfg.pos_xyz = true;
  ad::ParamStore store2(13);
  build_tpt_params(cfg, store2, "tpt");
  ad::Tensor a2 = tpt_forward(x, cloud, graph, cfg, store2, "tpt");
  ad::Tensor b2 = tpt_forward(x, moved, knn_graph(moved, 4), cfg, store2, "tpt");
  REQUIRE(max_abs(a2.values(), b2.values()) > 1e-6);
}

TEST_CASE("upsample_features identity, single point, and brute-force oracle") {
  std::mt19937_64 rng(207);
  PointCloud cloud = random_cloud(40, rng);

  std::vector<std::size_t> full(40);
  for (std::size_t i = 0; i < 40; ++i) full[i] = i;
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> fv(40 * 3);
  for (double& v : fv) v = u(rng);
  ad::Tensor feats = ad::Tensor::constant(40, 3, fv);

  ad::Tensor same = upsample_features(feats, full, cloud);
  REQUIRE(max_abs(same.values(), feats.values()) == 0.0);

  ad::Tensor one = upsample_features(ad::slice_rows(feats, 3, 4), {3}, cloud);
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t c = 0; c < 3; ++c) REQUIRE(one.at(i, c) == feats.at(3, c));

  std::vector<std::size_t> coarse = {5, 11, 17, 23, 31};
  ad::Tensor cf = ad::gather_rows(feats, coarse);
  ad::Tensor up = upsample_features(cf, coarse, cloud);
  for (std::size_t i = 0; i < 40; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < coarse.size(); ++j)
      if ((cloud.points[i] - cloud.points[coarse[j]]).norm() <
          (cloud.points[i] - cloud.points[coarse[best]]).norm())
        best = j;
    for (std::size_t c = 0; c < 3; ++c) REQUIRE(up.at(i, c) == cf.at(best, c));
  }

  REQUIRE_THROWS_AS(upsample_features(cf, {}, cloud), std::invalid_argument);
}

TEST_CASE("hgm plumbing identity with zeroed output projections") {
  std::mt19937_64 rng(211);
  PointCloud cloud = random_cloud(16, rng);

  HGMConfig cfg;
  cfg.levels = {16, 16, 16};  // no subsampling
  cfg.k = 4;
  cfg.ri_kind = RIKind::RRI;
  cfg.rri_k = 2;
  cfg.cu = 8;
  cfg.cs = {8, 8, 8};
  cfg.r1 = 4;
  cfg.r2 = 8;
  cfg.mlp_depth = 1;
  cfg.use_layer_norm = false;

  ad::ParamStore store(17);
  build_params(cfg, store);

  // identity unary, zero attention output projections
  std::vector<double> eye(8 * 8, 0.0);
  for (int i = 0; i < 8; ++i) eye[static_cast<std::size_t>(i * 8 + i)] = 1.0;
  store.set_values("hgm/omega/l0/w", eye);
  for (int level = 1; level <= 3; ++level)
    store.set_values("hgm/lam" + std::to_string(level) + "/out/w",
                     std::vector<double>(8 * 8, 0.0));

  Descriptor desc = hgm_forward(cloud, cfg, store);
  gmc::rifeat::FeatureMatrix ri = gmc::rifeat::rri_features(center_at_origin(cloud), 2);

  ad::Tensor all = desc.concat();
  REQUIRE(all.cols() == 32);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t c = 0; c < 8; ++c) {
      double want = ri.at(i, c);
      REQUIRE(all.at(i, c) == want);
      REQUIRE(all.at(i, 8 + c) == want);
      REQUIRE(all.at(i, 16 + c) == want);
      REQUIRE(all.at(i, 24 + c) == want);
    }
}

TEST_CASE("hgm descriptor is pose invariant on the RI-only path") {
  std::mt19937_64 rng(213);
  PointCloud cloud = center_at_origin(fibonacci_sphere(64));

  HGMConfig cfg = tiny_config(RIKind::RRI, 64);
  cfg.pos_xyz = false;
  cfg.pos_dxyz = false;
  cfg.pos_ri = true;

  ad::ParamStore store(19);
  build_params(cfg, store);

  Descriptor a = hgm_forward(cloud, cfg, store);
  for (int trial = 0; trial < 3; ++trial) {
    RigidTransform t = random_se3({0, 180}, {-0.5, 0.5}, rng);
    Descriptor b = hgm_forward(apply_transform(cloud, t), cfg, store);
    REQUIRE(max_abs(a.concat().values(), b.concat().values()) < 1e-5);
  }

  // PPF unary with consistently transported normals is pose invariant too
  PointCloud with_normals = estimate_normals(cloud, 6);
  HGMConfig cfg2 = tiny_config(RIKind::PPF, 64);
  cfg2.pos_xyz = false;
  cfg2.pos_dxyz = false;
  ad::ParamStore store2(23);
  build_params(cfg2, store2);
  Descriptor c = hgm_forward(with_normals, cfg2, store2);
  RigidTransform t = random_se3({0, 180}, {-0.5, 0.5}, rng);
  Descriptor d = hgm_forward(apply_transform(with_normals, t), cfg2, store2);
  REQUIRE(max_abs(c.concat().values(), d.concat().values()) < 1e-5);
}

TEST_CASE("hgm descriptor changes under rotation when XYZ enters eta") {
  std::mt19937_64 rng(217);
  PointCloud cloud = center_at_origin(random_cloud(64, rng));
  HGMConfig cfg = tiny_config(RIKind::RRI, 64);
  cfg.pos_xyz = true;
  ad::ParamStore store(29);
  build_params(cfg, store);
  Descriptor a = hgm_forward(cloud, cfg, store);
  RigidTransform t = random_se3({120, 120}, {0, 0}, rng);
  Descriptor b = hgm_forward(apply_transform(cloud, t), cfg, store);
  REQUIRE(max_abs(a.concat().values(), b.concat().values()) > 1e-6);
}

TEST_CASE("hgm descriptor is permutation equivariant") {
  std::mt19937_64 rng(219);
  PointCloud cloud = estimate_normals(random_cloud(48, rng), 6);

  HGMConfig cfg = tiny_config(RIKind::PPF, 48);
  ad::ParamStore store(31);
  build_params(cfg, store);
  Descriptor a = hgm_forward(cloud, cfg, store, 0);

  std::vector<std::size_t> perm(48);
  for (std::size_t i = 0; i < 48; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  PointCloud shuffled;
  shuffled.points.resize(48);
  shuffled.normals.resize(48);
  std::size_t start = 0;
  for (std::size_t i = 0; i < 48; ++i) {
    shuffled.points[i] = cloud.points[perm[i]];
    shuffled.normals[i] = cloud.normals[perm[i]];
    if (perm[i] == 0) start = i;
  }
  Descriptor b = hgm_forward(shuffled, cfg, store, start);

  ad::Tensor ca = a.concat(), cb = b.concat();
  for (std::size_t i = 0; i < 48; ++i)
    for (std::size_t c = 0; c < ca.cols(); ++c)
      REQUIRE(cb.at(i, c) == ca.at(perm[i], c));
}

TEST_CASE("hgm determinism and fps start sensitivity") {
  std::mt19937_64 rng(223);
  PointCloud cloud = random_cloud(40, rng);
  HGMConfig cfg = tiny_config(RIKind::RRI, 40);
  ad::ParamStore store(37);
  build_params(cfg, store);
  Descriptor a = hgm_forward(cloud, cfg, store, 0);
  Descriptor b = hgm_forward(cloud, cfg, store, 0);
  REQUIRE(a.concat().values() == b.concat().values());  // bitwise
}

TEST_CASE("hgm gradient check on a small cloud") {
  std::mt19937_64 rng(227);
  PointCloud cloud = random_cloud(32, rng);
  HGMConfig cfg = tiny_config(RIKind::RRI, 32);
  ad::ParamStore store(41);
  build_params(cfg, store);

  auto loss_of = [&]() {
    Descriptor d = hgm_forward(cloud, cfg, store);
    ad::Tensor all = d.concat();
    std::vector<double> w(all.size());
    for (std::size_t i = 0; i < w.size(); ++i)
      w[i] = std::cos(0.31 * static_cast<double>(i) + 0.5);
    return ad::reduce_sum(ad::mul(all, ad::Tensor::constant(all.rows(), all.cols(), std::move(w))));
  };

  store.zero_grads();
  ad::backward(loss_of());

  // probe a sample of parameters with central differences
  std::vector<std::string> names;
  for (const auto& [name, t] : store.map()) names.push_back(name);
  std::uniform_int_distribution<std::size_t> pick(0, names.size() - 1);
  const double h = 1e-5;
  double worst = 0;
  for (int probe = 0; probe < 25; ++probe) {
    ad::Tensor t = store.get(names[pick(rng)]);
    std::uniform_int_distribution<std::size_t> el(0, t.size() - 1);
    std::size_t i = el(rng);
    double keep = t.mutable_values()[i];
    t.mutable_values()[i] = keep + h;
    double lp = loss_of().item();
    t.mutable_values()[i] = keep - h;
    double lm = loss_of().item();
    t.mutable_values()[i] = keep;
    double fd = (lp - lm) / (2 * h);
    // directions where both sides vanish (softmax shift invariance makes
    // some logits dead) carry only finite-difference rounding noise
    if (std::max(std::abs(t.grad()[i]), std::abs(fd)) < 1e-5) continue;
    double denom = std::max(std::abs(t.grad()[i]), std::abs(fd));
    worst = std::max(worst, std::abs(t.grad()[i] - fd) / denom);
  }
  REQUIRE(worst < 1e-4);
}

TEST_CASE("hgm rejects clouds smaller than the coarsest level") {
  std::mt19937_64 rng(229);
  PointCloud cloud = random_cloud(6, rng);
  HGMConfig cfg = tiny_config(RIKind::RRI, 32);
  ad::ParamStore store(43);
  build_params(cfg, store);
  REQUIRE_THROWS_AS(hgm_forward(cloud, cfg, store), std::invalid_argument);
}

TEST_CASE("hgm config file round trip and unknown key rejection") {
  HGMConfig cfg;
  cfg.levels = {512, 256, 128};
  cfg.k = 12;
  cfg.ri_kind = RIKind::FPFH;
  cfg.cu = 48;
  cfg.cs = {32, 32, 16};
  cfg.r1 = 4;
  cfg.r2 = 8;
  cfg.pos_xyz = false;

  auto dir = std::filesystem::temp_directory_path();
  std::string path = (dir / "gmc_hgm.config").string();
  save_config(cfg, path);
  HGMConfig back = load_config(path);
  REQUIRE(back.levels == cfg.levels);
  REQUIRE(back.k == cfg.k);
  REQUIRE(back.ri_kind == cfg.ri_kind);
  REQUIRE(back.cu == cfg.cu);
  REQUIRE(back.cs == cfg.cs);
  REQUIRE(back.pos_xyz == false);

  {
    std::ofstream f(path, std::ios::app);
    f << "mystery=1\n";
  }
  REQUIRE_THROWS_AS(load_config(path), std::runtime_error);
  std::remove(path.c_str());
}

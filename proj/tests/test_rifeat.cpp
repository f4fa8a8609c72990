#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "gmc/rifeat.hpp"
#include "helpers.hpp"

using namespace gmc::geom;
using namespace gmc::rifeat;
using test_helpers::fibonacci_sphere;
using test_helpers::random_cloud;

namespace {

// Independent angle route for the oracle: atan2 of cross/dot instead of
// clamped arccos of the dot product.
double angle_oracle(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 1.0;
  return dot / std::sqrt(na * nb);
}

double mean_row_cosine(const FeatureMatrix& a, const FeatureMatrix& b) {
  REQUIRE(a.rows == b.rows);
  REQUIRE(a.cols == b.cols);
  double total = 0;
  for (std::size_t r = 0; r < a.rows; ++r) {
    std::vector<double> ra(a.values.begin() + static_cast<std::ptrdiff_t>(r * a.cols),
                           a.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * a.cols));
    std::vector<double> rb(b.values.begin() + static_cast<std::ptrdiff_t>(r * b.cols),
                           b.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * b.cols));
    total += cosine(ra, rb);
  }
  return total / static_cast<double>(a.rows);
}

double max_abs_diff(const FeatureMatrix& a, const FeatureMatrix& b) {
  REQUIRE(a.values.size() == b.values.size());
  double m = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i)
    m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

PointCloud crop_nearest(const PointCloud& cloud, const Vec3& anchor, std::size_t keep) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    d.emplace_back((cloud.points[i] - anchor).norm(), i);
  std::sort(d.begin(), d.end());
  PointCloud out;
  for (std::size_t i = 0; i < keep; ++i) out.points.push_back(cloud.points[d[i].second]);
  return out;
}

// Straightforward double-loop FPFH reference, written independently of the
// library implementation (different neighbor search and angle arithmetic).
FeatureMatrix fpfh_oracle(const PointCloud& cloud, std::size_t k) {
  const std::size_t n = cloud.size();
  auto neighbors_of = [&](std::size_t i) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) d.emplace_back((cloud.points[j] - cloud.points[i]).norm(), j);
    std::sort(d.begin(), d.end());
    d.resize(k);
    return d;
  };

  auto spfh_of = [&](std::size_t i) {
    std::vector<double> h(33, 0.0);
    for (auto [dist, j] : neighbors_of(i)) {
      Vec3 diff = cloud.points[j] - cloud.points[i];
      if (diff.norm() < 1e-12) continue;
      Vec3 dn = diff.normalized();
      const Vec3& u = cloud.normals[i];
      Vec3 vraw = u.cross(dn);
      if (vraw.norm() < 1e-12) continue;
      Vec3 v = vraw / vraw.norm();
      Vec3 w = u.cross(v);
      double alpha = v.dot(cloud.normals[j]);
      double phi = u.dot(dn);
      double theta = std::atan2(w.dot(cloud.normals[j]), u.dot(cloud.normals[j]));
      auto bin01 = [](double f, double lo, double hi) {
        int b = static_cast<int>(std::floor((f - lo) / (hi - lo) * 11.0));
        return std::clamp(b, 0, 10);
      };
      h[static_cast<std::size_t>(bin01(alpha, -1, 1))] += 1.0;
      h[11 + static_cast<std::size_t>(bin01(phi, -1, 1))] += 1.0;
      h[22 + static_cast<std::size_t>(bin01(theta, -gmc::geom::kPi, gmc::geom::kPi))] += 1.0;
    }
    return h;
  };

  FeatureMatrix fm;
  fm.layout = ChannelLayout::FPFH33;
  fm.rows = n;
  fm.cols = 33;
  fm.values.assign(n * 33, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> acc = spfh_of(i);
    for (auto [dist, j] : neighbors_of(i)) {
      std::vector<double> hj = spfh_of(j);
      for (std::size_t c = 0; c < 33; ++c)
        acc[c] += hj[c] / (static_cast<double>(k) * std::max(dist, 1e-12));
    }
    for (int block = 0; block < 3; ++block) {
      double s = 0;
      for (int c = 0; c < 11; ++c) s += acc[static_cast<std::size_t>(block * 11 + c)];
      for (int c = 0; c < 11; ++c) {
        std::size_t idx = static_cast<std::size_t>(block * 11 + c);
        fm.at(i, idx) = s > 0 ? acc[idx] * 100.0 / s : 0.0;
      }
    }
  }
  return fm;
}

}  // namespace

TEST_CASE("ppf_pair axis-aligned example") {
  PPFQuadruple q = ppf_pair(Vec3(0, 0, 0), Vec3(0, 0, 1), Vec3(1, 0, 0), Vec3(0, 0, 1));
  REQUIRE(q.dist == 1.0);
  REQUIRE(std::abs(q.angle_n1_d - gmc::geom::kPi / 2) < 1e-15);
  REQUIRE(std::abs(q.angle_n2_d - gmc::geom::kPi / 2) < 1e-15);
  REQUIRE(q.angle_n1_n2 == 0.0);
}

TEST_CASE("ppf_pair coincident points") {
  PPFQuadruple q = ppf_pair(Vec3(1, 1, 1), Vec3(0, 0, 1), Vec3(1, 1, 1), Vec3(1, 0, 0));
  REQUIRE(q.dist == 0.0);
  REQUIRE(q.angle_n1_d == 0.0);
  REQUIRE(q.angle_n2_d == 0.0);
  REQUIRE(std::abs(q.angle_n1_n2 - gmc::geom::kPi / 2) < 1e-15);
}

TEST_CASE("ppf_pair invariant under SE(3) applied to both points and normals") {
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 200; ++trial) {
    Vec3 p1(u(rng), u(rng), u(rng)), p2(u(rng), u(rng), u(rng));
    Vec3 n1 = Vec3(g(rng), g(rng), g(rng)).normalized();
    Vec3 n2 = Vec3(g(rng), g(rng), g(rng)).normalized();
    RigidTransform t = random_se3({0, 180}, {-2, 2}, rng);
    PPFQuadruple a = ppf_pair(p1, n1, p2, n2);
    PPFQuadruple b = ppf_pair(t.apply(p1), t.rotation * n1, t.apply(p2), t.rotation * n2);
    REQUIRE(std::abs(a.dist - b.dist) < 1e-9);
    REQUIRE(std::abs(a.angle_n1_d - b.angle_n1_d) < 1e-9);
    REQUIRE(std::abs(a.angle_n2_d - b.angle_n2_d) < 1e-9);
    REQUIRE(std::abs(a.angle_n1_n2 - b.angle_n1_n2) < 1e-9);
  }
}

TEST_CASE("ppf_pair matches independent formula oracle") {
  std::mt19937_64 rng(67);
  std::uniform_real_distribution<double> u(-1, 1);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 1000; ++trial) {
    Vec3 p1(u(rng), u(rng), u(rng)), p2(u(rng), u(rng), u(rng));
    Vec3 n1 = Vec3(g(rng), g(rng), g(rng)).normalized();
    Vec3 n2 = Vec3(g(rng), g(rng), g(rng)).normalized();
    PPFQuadruple q = ppf_pair(p1, n1, p2, n2);
    Vec3 d = p2 - p1;
    REQUIRE(std::abs(q.dist - d.norm()) < 1e-12);
    REQUIRE(std::abs(q.angle_n1_d - angle_oracle(d, n1)) < 1e-12);
    REQUIRE(std::abs(q.angle_n2_d - angle_oracle(d, n2)) < 1e-12);
    REQUIRE(std::abs(q.angle_n1_n2 - angle_oracle(n1, n2)) < 1e-12);
  }
}

TEST_CASE("ppf_features planar grid has zero normal-normal angles") {
  PointCloud grid;
  for (int x = -3; x <= 3; ++x)
    for (int y = -3; y <= 3; ++y) grid.points.emplace_back(0.2 * x, 0.2 * y, 1.0);
  grid = estimate_normals(grid, 8);
  NeighborGraph g = knn_graph(grid, 6);
  FeatureMatrix fm = ppf_features(grid, g);
  for (std::size_t r = 0; r < fm.rows; ++r) REQUIRE(std::abs(fm.at(r, 3)) < 1e-9);
}

TEST_CASE("ppf_features rigid invariance with transported normals") {
  std::mt19937_64 rng(71);
  PointCloud cloud = estimate_normals(fibonacci_sphere(256), 8);
  RigidTransform t = random_se3({0, 180}, {-1, 1}, rng);
  NeighborGraph g = knn_graph(cloud, 8);
  FeatureMatrix a = ppf_features(cloud, g);
  PointCloud moved = apply_transform(cloud, t);
  FeatureMatrix b = ppf_features(moved, knn_graph(moved, 8));
  REQUIRE(max_abs_diff(a, b) < 1e-9);
}

TEST_CASE("ppf_features requires normals") {
  PointCloud cloud;
  cloud.points.emplace_back(0, 0, 0);
  cloud.points.emplace_back(1, 0, 0);
  cloud.points.emplace_back(0, 1, 0);
  NeighborGraph g = knn_graph(cloud, 1);
  REQUIRE_THROWS_AS(ppf_features(cloud, g), std::invalid_argument);
}

TEST_CASE("ppf_features degrade when normals are re-estimated after SE(3)") {
  PointCloud base = crop_nearest(fibonacci_sphere(512), Vec3(0, 0, 2), 300);
  PointCloud cloud = estimate_normals(base, 8);
  // large translation so the toward-origin orientation flips differently
  RigidTransform t;
  t.rotation = Eigen::AngleAxisd(gmc::geom::kPi / 2, Vec3::UnitZ()).toRotationMatrix();
  t.translation = Vec3(2.0, 0.5, -1.0);
  PointCloud moved = estimate_normals(apply_transform(base, t), 8);  // re-estimated
  FeatureMatrix a = fold_edges(ppf_features(cloud, knn_graph(cloud, 8)), cloud.size());
  FeatureMatrix b = fold_edges(ppf_features(moved, knn_graph(moved, 8)), moved.size());
  double sim = mean_row_cosine(a, b);
  REQUIRE(sim < 1.0);
}

TEST_CASE("rri_features two-point cloud wraps and gives orthogonal angle") {
  PointCloud two;
  two.points.emplace_back(1, 0, 0);
  two.points.emplace_back(0, 1, 0);
  FeatureMatrix fm = rri_features(two, 2);
  REQUIRE(fm.cols == 8);
  // point 0: both wrapped slots describe neighbor 1
  REQUIRE(std::abs(fm.at(0, 2) - gmc::geom::kPi / 2) < 1e-15);
  REQUIRE(std::abs(fm.at(0, 6) - gmc::geom::kPi / 2) < 1e-15);
  REQUIRE(fm.at(0, 0) == 1.0);
  REQUIRE(fm.at(0, 1) == 1.0);
}

TEST_CASE("rri_features rotation invariance about the origin") {
  std::mt19937_64 rng(79);
  PointCloud cloud = center_at_origin(random_cloud(200, rng));
  for (int trial = 0; trial < 5; ++trial) {
    RigidTransform t = random_se3({0, 180}, {0, 0}, rng);  // rotation only
    FeatureMatrix a = rri_features(cloud, 2);
    FeatureMatrix b = rri_features(apply_transform(cloud, t), 2);
    REQUIRE(max_abs_diff(a, b) < 1e-9);
  }
}

TEST_CASE("rri_features sensitive to center shift from cropping") {
  PointCloud complete = center_at_origin(fibonacci_sphere(512));
  PointCloud partial = crop_nearest(complete, Vec3(0, 0, 1.2), 300);

  FeatureMatrix before = rri_features(partial, 2);                    // shape center
  FeatureMatrix after = rri_features(center_at_origin(partial), 2);   // crop center
  double mae = 0;
  for (std::size_t i = 0; i < before.values.size(); ++i)
    mae += std::abs(before.values[i] - after.values[i]);
  mae /= static_cast<double>(before.values.size());
  REQUIRE(mae > 0.0);
}

TEST_CASE("rri_features degenerate origin point") {
  PointCloud cloud;
  cloud.points.emplace_back(0, 0, 0);
  cloud.points.emplace_back(1, 0, 0);
  cloud.points.emplace_back(0, 1, 0);
  int degenerate = 0;
  FeatureMatrix fm = rri_features(cloud, 2, &degenerate);
  REQUIRE(degenerate == 1);
  REQUIRE(fm.at(0, 2) == 0.0);  // theta for the origin point
  REQUIRE(fm.at(0, 3) == 0.0);  // phi

  REQUIRE_THROWS_AS(rri_features(cloud, 1), std::invalid_argument);
}

TEST_CASE("fpfh_features rigid invariance with transported normals") {
  std::mt19937_64 rng(83);
  PointCloud cloud = estimate_normals(fibonacci_sphere(200), 8);
  RigidTransform t = random_se3({0, 180}, {-1, 1}, rng);
  FeatureMatrix a = fpfh_features(cloud, 8);
  FeatureMatrix b = fpfh_features(apply_transform(cloud, t), 8);
  REQUIRE(max_abs_diff(a, b) < 1e-6);
}

TEST_CASE("fpfh_features plane concentrates mass in the zero-angle bins") {
  PointCloud grid;
  for (int x = -4; x <= 4; ++x)
    for (int y = -4; y <= 4; ++y) grid.points.emplace_back(0.2 * x, 0.2 * y, 1.0);
  grid = estimate_normals(grid, 8);
  FeatureMatrix fm = fpfh_features(grid, 8);
  for (std::size_t i = 0; i < fm.rows; ++i) {
    REQUIRE(fm.at(i, 5) == 100.0);   // alpha = 0 bin
    REQUIRE(fm.at(i, 16) == 100.0);  // phi = 0 bin
    REQUIRE(fm.at(i, 27) == 100.0);  // theta = 0 bin
  }
}

TEST_CASE("fpfh_features matches double-loop oracle") {
  std::mt19937_64 rng(89);
  PointCloud cloud = estimate_normals(random_cloud(256, rng), 8);
  FeatureMatrix got = fpfh_features(cloud, 8);
  FeatureMatrix want = fpfh_oracle(cloud, 8);
  REQUIRE(max_abs_diff(got, want) < 1e-9);
}

TEST_CASE("fpfh_features error paths") {
  std::mt19937_64 rng(97);
  PointCloud cloud = random_cloud(32, rng);
  REQUIRE_THROWS_AS(fpfh_features(cloud, 8), std::invalid_argument);  // no normals
  cloud = estimate_normals(cloud, 6);
  REQUIRE_THROWS_AS(fpfh_features(cloud, 4), std::invalid_argument);  // k too small
  cloud.normals[0] = Vec3(0, 0, 0.5);
  REQUIRE_THROWS_AS(fpfh_features(cloud, 8), std::invalid_argument);  // bad normal
}

TEST_CASE("xyz and dxyz feature behavior") {
  std::mt19937_64 rng(101);
  PointCloud cloud = center_at_origin(random_cloud(64, rng));
  NeighborGraph g = knn_graph(cloud, 4);

  FeatureMatrix xyz = xyz_features(cloud);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int c = 0; c < 3; ++c)
      REQUIRE(xyz.at(i, static_cast<std::size_t>(c)) == cloud.points[i][c]);

  RigidTransform shift;
  shift.translation = Vec3(0.3, -0.2, 0.7);
  PointCloud moved = apply_transform(cloud, shift);
  FeatureMatrix d1 = dxyz_features(cloud, g);
  FeatureMatrix d2 = dxyz_features(moved, knn_graph(moved, 4));
  REQUIRE(max_abs_diff(d1, d2) < 1e-15);

  FeatureMatrix xyz2 = xyz_features(moved);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int c = 0; c < 3; ++c)
      REQUIRE(std::abs(xyz2.at(i, static_cast<std::size_t>(c)) - xyz.at(i, static_cast<std::size_t>(c)) -
                       shift.translation[c]) < 1e-15);
}

TEST_CASE("xyz rotation error matches closed-form statistics") {
  std::mt19937_64 rng(103);
  PointCloud cloud = random_cloud(128, rng);
  RigidTransform rot = random_se3({60, 60}, {0, 0}, rng);
  PointCloud moved = apply_transform(cloud, rot);
  FeatureMatrix a = xyz_features(cloud);
  FeatureMatrix b = xyz_features(moved);
  double mae_feature = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i)
    mae_feature += std::abs(a.values[i] - b.values[i]);
  mae_feature /= static_cast<double>(a.values.size());

  double mae_direct = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    Vec3 d = (rot.rotation - Mat3::Identity()) * cloud.points[i];
    mae_direct += d.cwiseAbs().sum();
  }
  mae_direct /= static_cast<double>(cloud.size() * 3);
  REQUIRE(std::abs(mae_feature - mae_direct) < 1e-12);
}

TEST_CASE("xyz_dxyz_features concatenates blocks") {
  std::mt19937_64 rng(107);
  PointCloud cloud = random_cloud(32, rng);
  NeighborGraph g = knn_graph(cloud, 3);
  FeatureMatrix fm = xyz_dxyz_features(cloud, g);
  REQUIRE(fm.rows == 32);
  REQUIRE(fm.cols == 3 + 9);
  REQUIRE(fm.at(5, 0) == cloud.points[5].x());
}

TEST_CASE("feature csv dump") {
  std::mt19937_64 rng(109);
  PointCloud cloud = random_cloud(8, rng);
  FeatureMatrix fm = xyz_features(cloud);
  auto path = (std::filesystem::temp_directory_path() / "gmc_feat.csv").string();
  write_csv(fm, path);
  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  REQUIRE(header == "index,c0,c1,c2");
  int lines = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++lines;
  REQUIRE(lines == 8);
  std::remove(path.c_str());
}

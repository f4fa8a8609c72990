#pragma once

#include <random>
#include <vector>

#include "gmc/geom.hpp"

namespace test_helpers {

inline gmc::geom::PointCloud random_cloud(std::size_t n, std::mt19937_64& rng,
                                          double radius = 1.0) {
  std::uniform_real_distribution<double> u(-radius, radius);
  gmc::geom::PointCloud cloud;
  cloud.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    cloud.points.emplace_back(u(rng), u(rng), u(rng));
  return cloud;
}

inline gmc::geom::PointCloud sphere_cloud(std::size_t n, std::mt19937_64& rng,
                                          double radius = 1.0) {
  std::normal_distribution<double> g(0.0, 1.0);
  gmc::geom::PointCloud cloud;
  cloud.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    gmc::geom::Vec3 p(g(rng), g(rng), g(rng));
    cloud.points.push_back(p.normalized() * radius);
  }
  return cloud;
}

// Deterministic near-uniform sphere sampling (golden-angle lattice).
inline gmc::geom::PointCloud fibonacci_sphere(std::size_t n, double radius = 1.0) {
  const double golden = gmc::geom::kPi * (3.0 - std::sqrt(5.0));
  gmc::geom::PointCloud cloud;
  cloud.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n);
    double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    double phi = golden * static_cast<double>(i);
    cloud.points.emplace_back(radius * r * std::cos(phi), radius * r * std::sin(phi),
                              radius * z);
  }
  return cloud;
}

}  // namespace test_helpers

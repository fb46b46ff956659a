#pragma once

#include "moex/autodiff.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

namespace moex::test {

template <typename Scalar = double>
Tensor4<Scalar> random_tensor(Shape4 s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor4<Scalar> t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = Scalar(u(rng));
  return t;
}

inline Tensor4<double> random_normal(Shape4 s, std::mt19937_64& rng, double mean = 0.0, double sd = 1.0) {
  std::normal_distribution<double> g(mean, sd);
  Tensor4<double> t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = g(rng);
  return t;
}

/// Random probability rows (N,K,1,1).
inline Tensor4<double> random_distribution_rows(Index n, Index k, std::mt19937_64& rng) {
  auto t = random_tensor(Shape4{n, k, 1, 1}, rng, 0.01, 1.0);
  for (Index i = 0; i < n; ++i) {
    double s = 0;
    for (Index j = 0; j < k; ++j) s += t(i, j, 0, 0);
    for (Index j = 0; j < k; ++j) t(i, j, 0, 0) /= s;
  }
  return t;
}

/// A fresh directory under the system temp dir, named after the running test.
inline std::filesystem::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = std::filesystem::temp_directory_path() / "moex_tests" /
             (std::string(info->test_suite_name()) + "." + info->name());
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream(path, std::ios::binary) << bytes;
}

}  // namespace moex::test

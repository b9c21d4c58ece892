#pragma once

// Shared helpers for the test suite: a scratch directory that cleans itself
// up, and a central-difference gradient checker that validates backward()
// results against numeric derivatives.

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rmroute/rng.hpp"
#include "rmroute/tensor.hpp"

namespace testutil {

class TempDir {
 public:
  TempDir() {
    static std::atomic<uint64_t> counter{0};
    auto base = std::filesystem::temp_directory_path();
    path_ = base / ("rmroute_test_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

struct GradCheckOptions {
  float h = 1e-3f;
  double rel_tol = 2e-2;
  double abs_tol = 5e-4;               // float32 central-difference noise floor
  int max_elems_per_tensor = 64;       // sample large tensors instead of sweeping
};

// `build` must rebuild the loss graph from the current contents of `params`
// on every call, with no internal randomness. Checks d(loss)/d(param) for
// every (or a sampled subset of) parameter entries.
template <class BuildLoss>
void expect_gradients_match(std::map<std::string, rmroute::TensorPtr>& params,
                            BuildLoss build, GradCheckOptions opt = {}) {
  for (auto& [name, p] : params) p->zero_grad();
  auto loss = build();
  rmroute::backward(loss);
  std::map<std::string, std::vector<float>> analytic;
  for (auto& [name, p] : params) analytic[name] = p->grad;

  rmroute::Rng pick(0x9e3779b9u);
  for (auto& [name, p] : params) {
    const int n = static_cast<int>(p->data.size());
    std::vector<int> idx;
    if (n <= opt.max_elems_per_tensor) {
      for (int i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (int i = 0; i < opt.max_elems_per_tensor; ++i) idx.push_back(pick.uniform_int(n));
    }
    for (int i : idx) {
      const float keep = p->data[i];
      p->data[i] = keep + opt.h;
      const double lp = build()->item();
      p->data[i] = keep - opt.h;
      const double lm = build()->item();
      p->data[i] = keep;
      const double fd = (lp - lm) / (2.0 * opt.h);
      const double an = analytic[name][i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      const double rel = std::abs(fd - an) / denom;
      EXPECT_TRUE(rel <= opt.rel_tol || std::abs(fd - an) <= opt.abs_tol)
          << name << "[" << i << "]: analytic=" << an << " numeric=" << fd
          << " rel=" << rel;
    }
  }
}

inline void expect_all_near(const std::vector<float>& got, const std::vector<float>& want,
                            float tol, const std::string& what = "values") {
  ASSERT_EQ(got.size(), want.size()) << what;
  for (size_t i = 0; i < got.size(); ++i)
    EXPECT_NEAR(got[i], want[i], tol) << what << "[" << i << "]";
}

}  // namespace testutil

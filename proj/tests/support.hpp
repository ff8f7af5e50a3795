#pragma once

// Shared helpers for the unit and acceptance tests: brute-force metric
// oracles, a central-difference gradient checker and small fixtures.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "pavlm/pavlm.hpp"

namespace testing_support {

using pavlm::Index;
using pavlm::Matrix;
namespace ad = pavlm::ad;
namespace fs = std::filesystem;

// ------------------------------------------------------------ metric oracles

// AP by explicit enumeration: one PR point per distinct score value.
inline double oracle_ap(const std::vector<double>& s, const std::vector<int>& g) {
  std::set<double, std::greater<>> levels(s.begin(), s.end());
  double npos = 0;
  for (int v : g) npos += v;
  double ap = 0, prev_r = 0;
  for (double t : levels) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) (g[i] ? tp : fp) += 1;
    const double r = tp / npos, p = tp / (tp + fp);
    ap += (r - prev_r) * p;
    prev_r = r;
  }
  return ap;
}

inline double oracle_auc(const std::vector<double>& s, const std::vector<int>& g) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (g[i] == 1 && g[j] == 0) {
        pairs += 1;
        if (s[i] > s[j]) wins += 1;
        else if (s[i] == s[j]) wins += 0.5;
      }
  return wins / pairs;
}

inline double oracle_iou_at(const std::vector<double>& s, const std::vector<int>& g, double t) {
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool p = s[i] > t;
    inter += (p && g[i]) ? 1 : 0;
    uni += (p || g[i]) ? 1 : 0;
  }
  return inter / uni;
}

inline double oracle_aiou(const std::vector<double>& s, const std::vector<int>& g) {
  double total = 0;
  for (int k = 0; k <= 99; ++k) total += oracle_iou_at(s, g, k / 100.0);
  return total / 100.0;
}

inline double oracle_mse_sum(const std::vector<std::vector<double>>& p, const std::vector<std::vector<double>>& t) {
  double total = 0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    double s = 0;
    for (std::size_t i = 0; i < p[c].size(); ++i) s += (p[c][i] - t[c][i]) * (p[c][i] - t[c][i]);
    total += s / static_cast<double>(p[c].size());
  }
  return total;
}

// ------------------------------------------------------------ gradient check

struct GradCheck {
  long checked = 0;
  long failures = 0;
  double worst_error = 0;  // |analytic - numeric| / (atol + rtol |numeric|), <= 1 passes
  std::string worst;
};

// Compares tape gradients of every trainable parameter (optionally only those
// whose name starts with `prefix`) against central differences.
template <class F>
GradCheck check_gradients(pavlm::ParamStore<double>& store, F&& loss_fn, const std::string& prefix = "",
                          double h = 1e-5, double rtol = 1e-4, double atol = 1e-8) {
  store.zero_grad();
  {
    ad::Tape<double> tape;
    auto l = loss_fn(tape);
    tape.backward(l);
  }
  auto eval = [&] {
    ad::Tape<double> tape;
    return loss_fn(tape).scalar();
  };
  GradCheck out;
  for (auto& [name, p] : store) {
    if (!p.trainable || !name.starts_with(prefix)) continue;
    const Matrix<double> analytic = p.grad.size() ? p.grad : Matrix<double>::Zero(p.value.rows(), p.value.cols());
    for (Index i = 0; i < p.value.size(); ++i) {
      double& v = p.value.data()[i];
      const double saved = v;
      v = saved + h;
      const double up = eval();
      v = saved - h;
      const double down = eval();
      v = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.data()[i];
      const double err = std::abs(a - numeric) / (atol + rtol * std::abs(numeric));
      ++out.checked;
      if (err > 1.0) ++out.failures;
      if (err > out.worst_error) {
        out.worst_error = err;
        out.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(a) + " numeric " +
                    std::to_string(numeric);
      }
    }
  }
  return out;
}

// Moves every trainable parameter off zero so ReLU kinks and zero gates do not
// hide gradient paths.
inline void randomize(pavlm::ParamStore<double>& store, pavlm::Rng& rng, double scale = 0.3) {
  for (auto& [name, p] : store) {
    if (!p.trainable) continue;
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += rng.uniform(-scale, scale);
  }
}

// ------------------------------------------------------------ fixtures

inline pavlm::PointCloud random_cloud(Index n, pavlm::Rng& rng) {
  pavlm::PointCloud pc;
  pc.points.resize(n, 3);
  for (Index i = 0; i < pc.points.size(); ++i) pc.points.data()[i] = rng.uniform(-1, 1);
  return pc;
}

inline Matrix<double> random_matrix(Index r, Index c, pavlm::Rng& rng, double lo = -1, double hi = 1) {
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = fs::temp_directory_path() / ("pavlm_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// Tiny architecture used by unit tests.
inline pavlm::TrainConfig toy_config() {
  pavlm::TrainConfig c;
  c.model_dim = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_groups = 4;
  c.group_size = 8;
  c.propagation_knn = 4;
  c.out_dim = 8;
  c.patch_hidden = 8;
  c.query_dim = 4;
  c.text_dim = 8;
  c.token_dim = 8;
  c.align_dim = 8;
  c.vocab_size = 64;
  c.classifier_hidden = 8;
  c.align_steps = 1;
  c.label_steps = 1;
  c.affordance_steps = 1;
  c.batch_size = 2;
  return c;
}

}  // namespace testing_support

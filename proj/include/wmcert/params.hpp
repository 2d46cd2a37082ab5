/* Copyright 2026 The wmcert Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Layered parameter vectors, layer-adaptive Gaussian noise and the
// sensitivity-guided noise allocation.

#ifndef WMCERT_PARAMS_HPP_
#define WMCERT_PARAMS_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wmcert/error.hpp"
#include "wmcert/rng.hpp"

namespace wmcert {

/// Block structure (L, d_1..d_L) of a parameter vector.
class Layout {
 public:
  Layout() = default;
  explicit Layout(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    require(!dims_.empty(), "layout needs at least one block");
    offsets_.reserve(dims_.size() + 1);
    offsets_.push_back(0);
    for (std::size_t d : dims_) {
      require(d >= 1, "layout blocks must have dimension >= 1");
      offsets_.push_back(offsets_.back() + d);
    }
  }

  std::size_t num_blocks() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t l) const { return dims_.at(l); }
  std::size_t offset(std::size_t l) const { return offsets_.at(l); }
  std::size_t total_dim() const noexcept {
    return offsets_.empty() ? 0 : offsets_.back();
  }
  const std::vector<std::size_t>& dims() const noexcept { return dims_; }

  bool operator==(const Layout&) const = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<std::size_t> offsets_;
};

/// A real parameter vector partitioned into layer blocks, stored contiguously.
class LayeredParams {
 public:
  LayeredParams() = default;
  explicit LayeredParams(Layout layout)
      : layout_(std::move(layout)), data_(layout_.total_dim(), 0.0) {}
  LayeredParams(Layout layout, std::vector<double> data)
      : layout_(std::move(layout)), data_(std::move(data)) {
    require(data_.size() == layout_.total_dim(),
            "parameter data does not match layout size");
  }
  /// Builds from explicit per-block vectors.
  static LayeredParams from_blocks(const std::vector<std::vector<double>>& blocks) {
    std::vector<std::size_t> dims;
    std::vector<double> flat;
    for (const auto& b : blocks) {
      dims.push_back(b.size());
      flat.insert(flat.end(), b.begin(), b.end());
    }
    return LayeredParams(Layout(std::move(dims)), std::move(flat));
  }

  const Layout& layout() const noexcept { return layout_; }
  std::size_t num_blocks() const noexcept { return layout_.num_blocks(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> block(std::size_t l) {
    return {data_.data() + layout_.offset(l), layout_.dim(l)};
  }
  std::span<const double> block(std::size_t l) const {
    return {data_.data() + layout_.offset(l), layout_.dim(l)};
  }
  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  LayeredParams& operator+=(const LayeredParams& o) {
    check_same_layout(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  LayeredParams& operator-=(const LayeredParams& o) {
    check_same_layout(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  LayeredParams& operator*=(double c) {
    for (double& v : data_) v *= c;
    return *this;
  }
  /// this += c * o
  LayeredParams& axpy(double c, const LayeredParams& o) {
    check_same_layout(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += c * o.data_[i];
    return *this;
  }

  friend LayeredParams operator+(LayeredParams a, const LayeredParams& b) { return a += b; }
  friend LayeredParams operator-(LayeredParams a, const LayeredParams& b) { return a -= b; }
  friend LayeredParams operator*(double c, LayeredParams a) { return a *= c; }

  double dot(const LayeredParams& o) const {
    check_same_layout(o);
    double s = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) s += data_[i] * o.data_[i];
    return s;
  }
  double l2_norm() const { return std::sqrt(dot(*this)); }
  double block_l2_norm(std::size_t l) const {
    double s = 0.0;
    for (double v : block(l)) s += v * v;
    return std::sqrt(s);
  }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  bool operator==(const LayeredParams&) const = default;

 private:
  void check_same_layout(const LayeredParams& o) const {
    require(layout_ == o.layout_, "parameter layouts differ");
  }

  Layout layout_;
  std::vector<double> data_;
};

/// Per-layer Gaussian noise levels sigma_l with global scale k.
/// The effective standard deviation of block l is k * sigma_l.
struct NoiseSpec {
  Layout layout;
  std::vector<double> sigma;
  double scale = 1.0;

  NoiseSpec() = default;
  NoiseSpec(Layout lay, std::vector<double> sig, double k = 1.0)
      : layout(std::move(lay)), sigma(std::move(sig)), scale(k) {
    validate();
  }

  static NoiseSpec uniform(const Layout& lay, double sigma_u, double k = 1.0) {
    return NoiseSpec(lay, std::vector<double>(lay.num_blocks(), sigma_u), k);
  }

  void validate() const {
    require(sigma.size() == layout.num_blocks(),
            "noise spec needs one sigma per layout block");
    require(scale > 0.0 && std::isfinite(scale), "noise scale k must be positive");
    for (double s : sigma)
      require(s >= 0.0 && std::isfinite(s), "noise sigma must be finite and >= 0");
  }

  double scaled(std::size_t l) const { return scale * sigma.at(l); }

  NoiseSpec with_scale(double k) const { return NoiseSpec(layout, sigma, k); }

  /// Dimension-weighted mean of sigma_l^2; equals sigma_u^2 for a
  /// budget-matched spec.
  double budget_variance() const {
    double num = 0.0, den = 0.0;
    for (std::size_t l = 0; l < sigma.size(); ++l) {
      const double d = static_cast<double>(layout.dim(l));
      num += d * sigma[l] * sigma[l];
      den += d;
    }
    return num / den;
  }

  /// Relative deviation from the budget-equivalence identity against sigma_u.
  double budget_gap(double sigma_u) const {
    return std::abs(budget_variance() - sigma_u * sigma_u) / (sigma_u * sigma_u);
  }

  bool operator==(const NoiseSpec&) const = default;
};

/// Snapshot of parameters at a training step.
struct Snapshot {
  std::int64_t step = 0;
  LayeredParams params;
};

/// Ordered checkpoints of one fine-tuning run.
class TrainingTrajectory {
 public:
  TrainingTrajectory() = default;
  TrainingTrajectory(std::vector<Snapshot> snapshots, std::string dataset_tag = {},
                     double learning_rate = 0.0)
      : snapshots_(std::move(snapshots)),
        dataset_tag_(std::move(dataset_tag)),
        learning_rate_(learning_rate) {
    validate();
  }

  void append(std::int64_t step, LayeredParams params) {
    if (!snapshots_.empty()) {
      require(step > snapshots_.back().step, "trajectory steps must increase");
      require(params.layout() == snapshots_.front().params.layout(),
              "trajectory snapshots must share one layout");
    }
    snapshots_.push_back({step, std::move(params)});
  }

  const std::vector<Snapshot>& snapshots() const noexcept { return snapshots_; }
  const Layout& layout() const { return snapshots_.at(0).params.layout(); }
  const std::string& dataset_tag() const noexcept { return dataset_tag_; }
  double learning_rate() const noexcept { return learning_rate_; }
  void set_metadata(std::string tag, double lr) {
    dataset_tag_ = std::move(tag);
    learning_rate_ = lr;
  }
  std::int64_t first_step() const { return snapshots_.at(0).step; }
  std::int64_t last_step() const { return snapshots_.at(snapshots_.size() - 1).step; }

  const LayeredParams& at_step(std::int64_t step) const {
    auto it = std::lower_bound(
        snapshots_.begin(), snapshots_.end(), step,
        [](const Snapshot& s, std::int64_t v) { return s.step < v; });
    require(it != snapshots_.end() && it->step == step,
            "step " + std::to_string(step) + " is not recorded in the trajectory");
    return it->params;
  }

 private:
  void validate() const {
    require(!snapshots_.empty(), "trajectory needs at least one snapshot");
    for (std::size_t i = 1; i < snapshots_.size(); ++i) {
      require(snapshots_[i].step > snapshots_[i - 1].step,
              "trajectory steps must increase");
      require(snapshots_[i].params.layout() == snapshots_[0].params.layout(),
              "trajectory snapshots must share one layout");
    }
  }

  std::vector<Snapshot> snapshots_;
  std::string dataset_tag_;
  double learning_rate_ = 0.0;
};

/// ||theta^l(t2) - theta^l(t1)||_2 / sqrt(d_l).
inline double avg_l2_norm(const TrainingTrajectory& traj, std::size_t layer,
                          std::int64_t t1, std::int64_t t2) {
  require(layer < traj.layout().num_blocks(), "layer index out of range");
  const auto a = traj.at_step(t1).block(layer);
  const auto b = traj.at_step(t2).block(layer);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = b[i] - a[i];
    s += d * d;
  }
  return std::sqrt(s) / std::sqrt(static_cast<double>(a.size()));
}

/// Per-layer average update magnitude between the first and last snapshot.
inline std::vector<double> layer_update_magnitudes(const TrainingTrajectory& traj) {
  const std::size_t L = traj.layout().num_blocks();
  std::vector<double> out(L);
  for (std::size_t l = 0; l < L; ++l)
    out[l] = avg_l2_norm(traj, l, traj.first_step(), traj.last_step());
  return out;
}

/// Layer fine-tuning sensitivity: each layer's update magnitude divided by the
/// mean magnitude over layers. Layers that did not move get 0.
inline std::vector<double> lfs(const TrainingTrajectory& traj) {
  require(traj.snapshots().size() >= 2, "lfs needs at least two snapshots");
  std::vector<double> mag = layer_update_magnitudes(traj);
  const double mean =
      std::accumulate(mag.begin(), mag.end(), 0.0) / static_cast<double>(mag.size());
  if (!(mean > 0.0))
    fail(ErrorKind::kDegenerate, "degenerate trajectory: no layer was updated");
  for (double& v : mag) v /= mean;
  return mag;
}

/// Noise levels proportional to LFS, rescaled so the dimension-weighted
/// variance equals sigma_u^2.
inline NoiseSpec allocate(std::span<const double> lfs_values,
                          std::span<const std::size_t> dims, double sigma_u,
                          double k = 1.0) {
  require(lfs_values.size() == dims.size() && !dims.empty(),
          "lfs and dims must have the same nonzero length");
  require(sigma_u > 0.0 && std::isfinite(sigma_u), "sigma_u must be positive");
  double sum_d = 0.0, sum_d_lfs2 = 0.0;
  for (std::size_t l = 0; l < dims.size(); ++l) {
    require(lfs_values[l] > 0.0 && std::isfinite(lfs_values[l]),
            "allocation requires every LFS value to be positive (layer " +
                std::to_string(l) + ")");
    const double d = static_cast<double>(dims[l]);
    sum_d += d;
    sum_d_lfs2 += d * lfs_values[l] * lfs_values[l];
  }
  const double factor = std::sqrt(sum_d / sum_d_lfs2);
  std::vector<double> sigma(dims.size());
  for (std::size_t l = 0; l < dims.size(); ++l)
    sigma[l] = sigma_u * lfs_values[l] * factor;
  return NoiseSpec(Layout(std::vector<std::size_t>(dims.begin(), dims.end())),
                   std::move(sigma), k);
}

/// One draw of layer-adaptive noise. Element e of block l is addressed by the
/// key (seed, draw, l, e), so draws are independent of evaluation order.
inline LayeredParams sample_noise(const NoiseSpec& spec, std::uint64_t seed,
                                  std::uint64_t draw = 0) {
  LayeredParams out(spec.layout);
  for (std::size_t l = 0; l < spec.layout.num_blocks(); ++l) {
    const double sd = spec.scaled(l);
    if (sd == 0.0) continue;
    auto blk = out.block(l);
    const std::uint64_t base = derive(seed, {draw, l});
    for (std::size_t e = 0; e < blk.size(); ++e) blk[e] = sd * standard_normal(base, e);
  }
  return out;
}

/// sqrt(sum_l ||delta^l||^2 / (k sigma_l)^2).
inline double mahalanobis_norm(const LayeredParams& delta, const NoiseSpec& spec) {
  require(delta.layout() == spec.layout, "delta layout does not match noise spec");
  double s = 0.0;
  for (std::size_t l = 0; l < spec.layout.num_blocks(); ++l) {
    const double n = delta.block_l2_norm(l);
    const double sd = spec.scaled(l);
    if (sd == 0.0) {
      if (n != 0.0)
        fail(ErrorKind::kSingularGeometry,
             "block " + std::to_string(l) + " has zero noise but nonzero perturbation");
      continue;
    }
    s += (n * n) / (sd * sd);
  }
  return std::sqrt(s);
}

/// Scales delta so that its Mahalanobis norm is at most radius.
inline LayeredParams project_mahalanobis(LayeredParams delta, const NoiseSpec& spec,
                                         double radius) {
  const double n = mahalanobis_norm(delta, spec);
  if (n > radius && n > 0.0) delta *= radius / n;
  return delta;
}

/// Fractional (average) ranks, rank 1 = largest value.
inline std::vector<double> fractional_ranks_desc(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t q = i; q <= j; ++q) ranks[idx[q]] = avg;
    i = j + 1;
  }
  return ranks;
}

struct EcdfPoint {
  double value = 0.0;
  double cumulative = 0.0;
};

/// Empirical CDF as sorted (value, fraction <= value) pairs over distinct values.
inline std::vector<EcdfPoint> ecdf(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  std::vector<EcdfPoint> out;
  const double n = static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i + 1 < values.size() && values[i + 1] == values[i]) continue;
    out.push_back({values[i], static_cast<double>(i + 1) / n});
  }
  return out;
}

struct RankStability {
  std::vector<double> rank_dispersion;  // RD(l)
  std::vector<double> stability;        // S(l)
  std::vector<EcdfPoint> rd_ecdf;
  std::vector<EcdfPoint> stability_ecdf;
  std::vector<std::vector<double>> ranks;  // ranks[i][l] for trajectory i

  double fraction_stable(double threshold = 0.5) const {
    const auto n = std::count_if(stability.begin(), stability.end(),
                                 [&](double s) { return s > threshold; });
    return static_cast<double>(n) / static_cast<double>(stability.size());
  }
};

/// Cross-run consistency of the per-layer update ranking.
inline RankStability rank_dispersion_and_stability(
    std::span<const TrainingTrajectory> trajs) {
  require(trajs.size() >= 2, "rank dispersion needs at least two trajectories");
  const Layout& layout = trajs[0].layout();
  for (const auto& t : trajs)
    require(t.layout() == layout, "trajectories must share one layout");
  const std::size_t L = layout.num_blocks();

  RankStability out;
  for (const auto& t : trajs) {
    const auto mag = layer_update_magnitudes(t);
    out.ranks.push_back(fractional_ranks_desc(mag));
  }
  out.rank_dispersion.assign(L, 0.0);
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    for (std::size_t j = i + 1; j < trajs.size(); ++j) {
      ++pairs;
      for (std::size_t l = 0; l < L; ++l)
        out.rank_dispersion[l] += std::abs(out.ranks[i][l] - out.ranks[j][l]);
    }
  }
  out.stability.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    out.rank_dispersion[l] /= static_cast<double>(pairs);
    out.stability[l] =
        L > 1 ? 1.0 - out.rank_dispersion[l] / static_cast<double>(L - 1) : 1.0;
  }
  out.rd_ecdf = ecdf(out.rank_dispersion);
  out.stability_ecdf = ecdf(out.stability);
  return out;
}

}  // namespace wmcert

#endif  // WMCERT_PARAMS_HPP_

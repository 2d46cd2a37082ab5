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

// Desk-scale conditional generator and energy-based classifier.
//
// The generator maps (latent z, prompt embedding) through dense tanh layers to
// a sigmoid image; every dense layer (weights + bias) and the prompt embedding
// table is one parameter block. The classifier scores an image against each
// label by the expected denoising error of a class-conditional noise
// predictor and turns the energies into a Gibbs posterior.

#ifndef WMCERT_TOYMODEL_HPP_
#define WMCERT_TOYMODEL_HPP_

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wmcert/error.hpp"
#include "wmcert/image.hpp"
#include "wmcert/params.hpp"
#include "wmcert/rng.hpp"

namespace wmcert {

using Label = std::size_t;

struct GeneratorArch {
  std::size_t latent_dim = 8;
  std::size_t embed_dim = 4;
  std::size_t num_labels = 2;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<std::size_t> hidden = {32, 64};

  std::size_t input_dim() const { return latent_dim + embed_dim; }
  std::size_t output_dim() const { return height * width; }
  std::size_t num_dense() const { return hidden.size() + 1; }
  std::size_t layer_in(std::size_t k) const { return k == 0 ? input_dim() : hidden[k - 1]; }
  std::size_t layer_out(std::size_t k) const {
    return k == hidden.size() ? output_dim() : hidden[k];
  }

  Layout layout() const {
    std::vector<std::size_t> dims{num_labels * embed_dim};
    for (std::size_t k = 0; k < num_dense(); ++k)
      dims.push_back(layer_out(k) * layer_in(k) + layer_out(k));
    return Layout(std::move(dims));
  }

  void validate() const {
    require(latent_dim >= 1 && embed_dim >= 1, "generator needs latent and embedding dims");
    require(num_labels >= 2, "generator needs at least two prompts");
    require(height >= 1 && width >= 1, "generator output must be non-empty");
    require(hidden.size() >= 1 && hidden.size() <= 4,
            "generator supports one to four hidden layers");
    for (auto h : hidden) require(h >= 1, "hidden width must be positive");
  }

  bool operator==(const GeneratorArch&) const = default;
};

/// Activations kept by a forward pass for backpropagation.
struct GeneratorTrace {
  Label prompt = 0;
  std::vector<std::vector<double>> inputs;  // input to dense layer k
  std::vector<double> output;               // sigmoid output
};

class ToyGenerator {
 public:
  ToyGenerator() = default;
  ToyGenerator(GeneratorArch arch, LayeredParams params)
      : arch_(std::move(arch)), params_(std::move(params)) {
    arch_.validate();
    require(params_.layout() == arch_.layout(),
            "generator parameters do not match the architecture layout");
  }

  /// Scaled Gaussian initialisation (1/sqrt(fan_in)).
  static ToyGenerator random_init(const GeneratorArch& arch, std::uint64_t seed) {
    arch.validate();
    LayeredParams p(arch.layout());
    Stream s(derive(seed, {0x1417}));
    for (double& v : p.block(0)) v = s.normal();
    for (std::size_t k = 0; k < arch.num_dense(); ++k) {
      auto blk = p.block(k + 1);
      const std::size_t nin = arch.layer_in(k), nout = arch.layer_out(k);
      const double sd = 1.0 / std::sqrt(static_cast<double>(nin));
      for (std::size_t i = 0; i < nout * nin; ++i) blk[i] = sd * s.normal();
      for (std::size_t i = 0; i < nout; ++i) blk[nout * nin + i] = 0.0;
    }
    return ToyGenerator(arch, std::move(p));
  }

  const GeneratorArch& arch() const noexcept { return arch_; }
  const LayeredParams& params() const noexcept { return params_; }
  const Layout& layout() const noexcept { return params_.layout(); }
  void set_params(LayeredParams p) {
    require(p.layout() == arch_.layout(), "parameter layout mismatch");
    params_ = std::move(p);
  }
  ToyGenerator with_params(LayeredParams p) const {
    return ToyGenerator(arch_, std::move(p));
  }
  std::size_t num_labels() const noexcept { return arch_.num_labels; }

  std::vector<double> latent(std::uint64_t seed) const {
    Stream s(derive(seed, {0x7a7e}));
    std::vector<double> z(arch_.latent_dim);
    for (double& v : z) v = s.normal();
    return z;
  }

  Image generate(Label prompt, std::uint64_t seed) const {
    return forward(params_, prompt, seed, nullptr);
  }

  /// Generation with explicit parameters (e.g. theta + noise).
  Image generate_with(const LayeredParams& p, Label prompt, std::uint64_t seed) const {
    return forward(p, prompt, seed, nullptr);
  }

  Image forward(const LayeredParams& p, Label prompt, std::uint64_t seed,
                GeneratorTrace* trace) const {
    if (prompt >= arch_.num_labels)
      fail(ErrorKind::kInvalidArgument, "unknown prompt " + std::to_string(prompt));
    std::vector<double> h = latent(seed);
    const auto emb = p.block(0);
    for (std::size_t e = 0; e < arch_.embed_dim; ++e)
      h.push_back(emb[prompt * arch_.embed_dim + e]);
    if (trace) {
      trace->prompt = prompt;
      trace->inputs.clear();
    }
    const std::size_t nd = arch_.num_dense();
    for (std::size_t k = 0; k < nd; ++k) {
      if (trace) trace->inputs.push_back(h);
      const std::size_t nin = arch_.layer_in(k), nout = arch_.layer_out(k);
      const auto blk = p.block(k + 1);
      std::vector<double> out(nout);
      for (std::size_t o = 0; o < nout; ++o) {
        const double* w = blk.data() + o * nin;
        double s = blk[nout * nin + o];
        for (std::size_t i = 0; i < nin; ++i) s += w[i] * h[i];
        out[o] = (k + 1 < nd) ? std::tanh(s) : 1.0 / (1.0 + std::exp(-s));
      }
      h = std::move(out);
    }
    Image img(arch_.height, arch_.width);
    for (std::size_t i = 0; i < h.size(); ++i) img.pixels[i] = std::clamp(h[i], 0.0, 1.0);
    if (trace) trace->output = std::move(h);
    return img;
  }

  /// Accumulates d(loss)/d(params) into grad given d(loss)/d(image).
  void backward(const LayeredParams& p, const GeneratorTrace& trace, const Image& dimg,
                LayeredParams& grad) const {
    const std::size_t nd = arch_.num_dense();
    // Through the sigmoid.
    std::vector<double> delta(trace.output.size());
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const double y = trace.output[i];
      delta[i] = dimg.pixels[i] * y * (1.0 - y);
    }
    for (std::size_t k = nd; k-- > 0;) {
      const std::size_t nin = arch_.layer_in(k), nout = arch_.layer_out(k);
      const auto blk = p.block(k + 1);
      auto gblk = grad.block(k + 1);
      const auto& in = trace.inputs[k];
      std::vector<double> din(nin, 0.0);
      for (std::size_t o = 0; o < nout; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        double* gw = gblk.data() + o * nin;
        const double* w = blk.data() + o * nin;
        for (std::size_t i = 0; i < nin; ++i) {
          gw[i] += d * in[i];
          din[i] += d * w[i];
        }
        gblk[nout * nin + o] += d;
      }
      if (k > 0) {
        // Input of layer k is tanh output of layer k-1.
        for (std::size_t i = 0; i < nin; ++i) din[i] *= 1.0 - in[i] * in[i];
      } else {
        auto gemb = grad.block(0);
        for (std::size_t e = 0; e < arch_.embed_dim; ++e)
          gemb[trace.prompt * arch_.embed_dim + e] += din[arch_.latent_dim + e];
      }
      delta = std::move(din);
    }
  }

 private:
  GeneratorArch arch_;
  LayeredParams params_;
};

// ---------------------------------------------------------------------------
// Energy-based classifier

/// Noise predictor eps(x_t, y) evaluated at a timestep with x_t = a x + b eta.
template <class P>
concept NoisePredictor = requires(const P& p, std::span<const double> in, std::size_t y,
                                  double a, double b, std::span<double> out) {
  { p.num_labels() } -> std::convertible_to<std::size_t>;
  p.predict(in, y, a, b, out);
  // out = J^T v where J = d eps / d x_t
  p.vjp(in, y, a, b, in, out);
};

/// Class-conditional linear denoiser. For a Gaussian class prior
/// N(mu_y, s^2 I) the posterior-mean noise estimate is
/// eps = b (x_t - a mu_y) / (a^2 s^2 + b^2). Parameters: block 0 holds the
/// label prototypes mu_y, block 1 holds log s^2.
class PrototypeDenoiser {
 public:
  PrototypeDenoiser() = default;
  PrototypeDenoiser(std::size_t num_labels, std::size_t dim, LayeredParams phi)
      : num_labels_(num_labels), dim_(dim), phi_(std::move(phi)) {
    require(phi_.num_blocks() == 2 && phi_.layout().dim(0) == num_labels * dim &&
                phi_.layout().dim(1) == 1,
            "prototype denoiser parameters have the wrong layout");
  }

  std::size_t num_labels() const noexcept { return num_labels_; }
  std::size_t dim() const noexcept { return dim_; }
  const LayeredParams& params() const noexcept { return phi_; }
  double prior_variance() const { return std::exp(phi_.block(1)[0]); }

  double gain(double a, double b) const { return b / (a * a * prior_variance() + b * b); }

  void predict(std::span<const double> xt, std::size_t y, double a, double b,
               std::span<double> out) const {
    const double g = gain(a, b);
    const auto mu = phi_.block(0).subspan(y * dim_, dim_);
    for (std::size_t i = 0; i < dim_; ++i) out[i] = g * (xt[i] - a * mu[i]);
  }

  void vjp(std::span<const double>, std::size_t, double a, double b,
           std::span<const double> v, std::span<double> out) const {
    const double g = gain(a, b);
    for (std::size_t i = 0; i < dim_; ++i) out[i] = g * v[i];
  }

 private:
  std::size_t num_labels_ = 0;
  std::size_t dim_ = 0;
  LayeredParams phi_;
};

struct ClassifierConfig {
  /// Noise scales b_t of the timestep grid; a_t = sqrt(1 - b_t^2).
  std::vector<double> noise_levels = {0.1, 0.2, 0.4, 0.8};
  std::size_t mc_draws = 32;

  void validate() const {
    require(!noise_levels.empty(), "classifier needs at least one timestep");
    for (double b : noise_levels)
      require(b > 0.0 && b < 1.0, "timestep noise levels must lie in (0, 1)");
    require(mc_draws >= 1, "classifier needs at least one Monte-Carlo draw");
  }
  bool operator==(const ClassifierConfig&) const = default;
};

/// Energies E(x, y) = E_{t, eta} ||eta - eps(x_t, y)||^2 estimated with
/// mc_draws (t, eta) pairs; the same pairs are shared across labels.
template <NoisePredictor Predictor>
class BasicEnergyClassifier {
 public:
  BasicEnergyClassifier() = default;
  BasicEnergyClassifier(Predictor predictor, ClassifierConfig config)
      : predictor_(std::move(predictor)), config_(std::move(config)) {
    config_.validate();
  }

  const Predictor& predictor() const noexcept { return predictor_; }
  const ClassifierConfig& config() const noexcept { return config_; }
  std::size_t num_labels() const { return predictor_.num_labels(); }

  /// Energies for every label; if grads is non-null, grads[y] = dE_y/dx.
  std::vector<double> energies(const Image& x, std::uint64_t seed,
                               std::vector<Image>* grads = nullptr) const {
    const std::size_t n_labels = num_labels();
    const std::size_t dim = x.size();
    std::vector<double> e(n_labels, 0.0);
    if (grads) grads->assign(n_labels, Image(x.height, x.width));
    std::vector<double> eta(dim), xt(dim), eps(dim), r(dim), jt(dim);
    const double inv_n = 1.0 / static_cast<double>(config_.mc_draws);
    for (std::size_t d = 0; d < config_.mc_draws; ++d) {
      Stream s(derive(seed, {0xe4e6, d}));
      const double b = config_.noise_levels[s.below(config_.noise_levels.size())];
      const double a = std::sqrt(1.0 - b * b);
      for (std::size_t i = 0; i < dim; ++i) {
        eta[i] = s.normal();
        xt[i] = a * x.pixels[i] + b * eta[i];
      }
      for (std::size_t y = 0; y < n_labels; ++y) {
        predictor_.predict(xt, y, a, b, eps);
        double sq = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
          r[i] = eta[i] - eps[i];
          sq += r[i] * r[i];
        }
        e[y] += sq * inv_n;
        if (grads) {
          predictor_.vjp(xt, y, a, b, r, jt);
          auto& g = (*grads)[y].pixels;
          for (std::size_t i = 0; i < dim; ++i) g[i] += -2.0 * a * jt[i] * inv_n;
        }
      }
    }
    return e;
  }

  double energy(const Image& x, Label y, std::uint64_t seed) const {
    require(y < num_labels(), "unknown label");
    return energies(x, seed)[y];
  }

  std::vector<double> posterior(const Image& x, std::uint64_t seed) const {
    return gibbs_posterior(energies(x, seed));
  }

  Label predict(const Image& x, std::uint64_t seed) const {
    return argmax_label(posterior(x, seed));
  }

  /// Gibbs posterior softmax(-E), computed with the max-shift.
  static std::vector<double> gibbs_posterior(std::span<const double> energies) {
    const double mn = *std::min_element(energies.begin(), energies.end());
    std::vector<double> p(energies.size());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = std::exp(-(energies[i] - mn));
      z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
  }

  /// Lowest index wins ties.
  static Label argmax_label(std::span<const double> p) {
    return static_cast<Label>(std::max_element(p.begin(), p.end()) - p.begin());
  }

 private:
  Predictor predictor_;
  ClassifierConfig config_;
};

using EnergyClassifier = BasicEnergyClassifier<PrototypeDenoiser>;

/// Builds the private classifier from a frozen reference generator: label
/// prototypes are mean generated images, the prior variance is the pooled
/// per-pixel variance.
inline EnergyClassifier classifier_from_generator(const ToyGenerator& gen,
                                                  std::size_t samples_per_label,
                                                  std::uint64_t seed,
                                                  ClassifierConfig config = {}) {
  require(samples_per_label >= 2, "need at least two samples per label");
  const std::size_t L = gen.num_labels();
  const std::size_t D = gen.arch().output_dim();
  std::vector<double> mu(L * D, 0.0);
  double var = 0.0;
  for (Label y = 0; y < L; ++y) {
    std::vector<Image> imgs;
    for (std::size_t s = 0; s < samples_per_label; ++s)
      imgs.push_back(gen.generate(y, derive(seed, {y, s})));
    for (const auto& im : imgs)
      for (std::size_t i = 0; i < D; ++i) mu[y * D + i] += im.pixels[i];
    for (std::size_t i = 0; i < D; ++i) mu[y * D + i] /= static_cast<double>(imgs.size());
    for (const auto& im : imgs)
      for (std::size_t i = 0; i < D; ++i) {
        const double d = im.pixels[i] - mu[y * D + i];
        var += d * d;
      }
  }
  var /= static_cast<double>(L * D * (samples_per_label - 1));
  var = std::max(var, 1e-6);
  LayeredParams phi(Layout({L * D, 1}));
  std::copy(mu.begin(), mu.end(), phi.block(0).begin());
  phi.block(1)[0] = std::log(var);
  return EnergyClassifier(PrototypeDenoiser(L, D, std::move(phi)), std::move(config));
}

// ---------------------------------------------------------------------------
// Differentiation

/// A scalar objective of generator parameters. Implementations return the
/// value and, when grad is non-null, overwrite *grad with the gradient.
template <class O>
concept ParamObjective = requires(const O& o, const ToyGenerator& g, const LayeredParams& p,
                                  LayeredParams* grad) {
  { o(g, p, grad) } -> std::convertible_to<double>;
};

struct GenerationRequest {
  Label prompt = 0;
  std::uint64_t seed = 0;
};

/// Objective defined on generated images. ImageLoss is called as
/// loss(index, image, dimage_or_null) and returns the per-image loss; the
/// objective is the mean over requests.
template <class ImageLoss>
class ImageObjective {
 public:
  ImageObjective(std::vector<GenerationRequest> requests, ImageLoss loss)
      : requests_(std::move(requests)), loss_(std::move(loss)) {}

  double operator()(const ToyGenerator& gen, const LayeredParams& p,
                    LayeredParams* grad) const {
    if (grad) *grad = LayeredParams(p.layout());
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(requests_.size());
    GeneratorTrace trace;
    for (std::size_t i = 0; i < requests_.size(); ++i) {
      const auto& rq = requests_[i];
      if (grad) {
        Image img = gen.forward(p, rq.prompt, rq.seed, &trace);
        Image dimg(img.height, img.width);
        total += loss_(i, img, &dimg);
        for (double& v : dimg.pixels) v *= inv;
        gen.backward(p, trace, dimg, *grad);
      } else {
        Image img = gen.forward(p, rq.prompt, rq.seed, nullptr);
        total += loss_(i, img, nullptr);
      }
    }
    return total * inv;
  }

  const std::vector<GenerationRequest>& requests() const noexcept { return requests_; }

 private:
  std::vector<GenerationRequest> requests_;
  ImageLoss loss_;
};

/// ||theta - theta0||^2.
struct QuadraticObjective {
  LayeredParams center;
  double operator()(const ToyGenerator&, const LayeredParams& p, LayeredParams* grad) const {
    LayeredParams d = p - center;
    if (grad) *grad = 2.0 * d;
    return d.dot(d);
  }
};

/// w_a * A + w_b * B.
template <ParamObjective A, ParamObjective B>
struct WeightedSum {
  A a;
  B b;
  double weight_a = 1.0;
  double weight_b = 1.0;
  double operator()(const ToyGenerator& g, const LayeredParams& p, LayeredParams* grad) const {
    if (!grad) return weight_a * a(g, p, nullptr) + weight_b * b(g, p, nullptr);
    LayeredParams gb;
    const double va = a(g, p, grad);
    const double vb = b(g, p, &gb);
    *grad *= weight_a;
    grad->axpy(weight_b, gb);
    return weight_a * va + weight_b * vb;
  }
};

/// Gradient of objective at the generator's current parameters (or `at`).
/// Non-finite values raise a numeric error.
template <ParamObjective O>
LayeredParams grad_params(const O& objective, const ToyGenerator& gen,
                          double* value = nullptr, const LayeredParams* at = nullptr) {
  const LayeredParams& p = at ? *at : gen.params();
  LayeredParams g;
  const double v = objective(gen, p, &g);
  if (!std::isfinite(v) || !g.all_finite())
    fail(ErrorKind::kNumeric, "objective or gradient is not finite");
  if (value) *value = v;
  return g;
}

/// Central finite difference of the objective along coordinate i.
template <ParamObjective O>
double finite_difference(const O& objective, const ToyGenerator& gen, std::size_t i,
                         double h = 1e-5, const LayeredParams* at = nullptr) {
  LayeredParams p = at ? *at : gen.params();
  const double orig = p[i];
  p[i] = orig + h;
  const double fp = objective(gen, p, nullptr);
  p[i] = orig - h;
  const double fm = objective(gen, p, nullptr);
  return (fp - fm) / (2.0 * h);
}

}  // namespace wmcert

#endif  // WMCERT_TOYMODEL_HPP_

#pragma once

// Image-quality metrics. Embedding-based metrics use the pipeline's own image
// encoder as the feature extractor, so the FID and perceptual numbers are
// analogues and are not comparable with Inception- or VGG-based values.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "vfd/conditioning.hpp"
#include "vfd/errors.hpp"
#include "vfd/nn.hpp"
#include "vfd/tensor.hpp"

namespace vfd {

struct Psnr {
  double db = 0;
  bool infinite = false;  // identical images
};

inline Psnr psnr(const Tensor<float>& a, const Tensor<float>& b, double max_val = 1.0) {
  if (a.shape() != b.shape()) throw ShapeMismatch("psnr: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  double se = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  if (se == 0) return {std::numeric_limits<double>::infinity(), true};
  return {10.0 * std::log10(max_val * max_val / (se / static_cast<double>(a.numel()))), false};
}

// Encoder weights evaluated in double precision.
class ImageEncoder {
 public:
  template <typename T>
  ImageEncoder(const ParamSet<T>& params, const ModelConfig& cfg) : cfg_(cfg) {
    for (const auto& [name, t] : params)
      if (name.rfind("enc.", 0) == 0) params_.add(name, t.template cast<double>());
  }

  const ModelConfig& config() const noexcept { return cfg_; }

  std::vector<double> embed(const Tensor<float>& image) const {
    Tape<double> tape;
    Binder<double> p(tape, params_, false);
    const auto& v = encode_image(p, cfg_, tape.constant(image.cast<double>())).pooled.value();
    return {v.data().begin(), v.data().end()};
  }

  std::vector<Tensor<double>> features(const Tensor<float>& image) const {
    Tape<double> tape;
    Binder<double> p(tape, params_, false);
    std::vector<Tensor<double>> out;
    for (const auto& f : encode_image(p, cfg_, tape.constant(image.cast<double>())).features) out.push_back(f.value());
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamSet<double> params_;
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return std::equal(a.begin(), a.end(), b.begin(), b.end()) ? 1.0 : 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

inline double embed_similarity(const Tensor<float>& a, const Tensor<float>& b, const ImageEncoder& enc) {
  if (a == b) return 1.0;
  return cosine(enc.embed(a), enc.embed(b));
}

// Mean over encoder layers of the spatially averaged squared distance between
// unit-normalised channel vectors.
inline double perceptual_distance(const Tensor<float>& a, const Tensor<float>& b, const ImageEncoder& enc) {
  if (a.shape() != b.shape()) throw ShapeMismatch("perceptual_distance: shapes differ");
  const auto fa = enc.features(a);
  const auto fb = enc.features(b);
  double total = 0;
  for (std::size_t l = 0; l < fa.size(); ++l) {
    const std::size_t c = fa[l].dim(1), hw = fa[l].dim(2) * fa[l].dim(3);
    double layer = 0;
    for (std::size_t p = 0; p < hw; ++p) {
      double na = 0, nb = 0;
      for (std::size_t k = 0; k < c; ++k) {
        na += fa[l][k * hw + p] * fa[l][k * hw + p];
        nb += fb[l][k * hw + p] * fb[l][k * hw + p];
      }
      na = std::sqrt(na) + 1e-10;
      nb = std::sqrt(nb) + 1e-10;
      for (std::size_t k = 0; k < c; ++k) {
        const double d = fa[l][k * hw + p] / na - fb[l][k * hw + p] / nb;
        layer += d * d;
      }
    }
    total += layer / static_cast<double>(hw);
  }
  return total / static_cast<double>(fa.size());
}

// Frechet distance between Gaussian fits of two feature sets (rows are samples).
inline double fid_from_features(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::Index d = a.cols();
  if (b.cols() != d) throw ShapeMismatch("fid: feature dimensions differ");
  if (a.rows() < d + 1 || b.rows() < d + 1)
    throw TooFewSamples("fid needs at least " + std::to_string(d + 1) + " samples per set, got " +
                        std::to_string(a.rows()) + " and " + std::to_string(b.rows()));
  auto moments = [](const Eigen::MatrixXd& x) {
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Eigen::MatrixXd centred = x.rowwise() - mu;
    Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(x.rows() - 1);
    return std::pair{mu, Eigen::MatrixXd(0.5 * (cov + cov.transpose()))};
  };
  const auto [mu_a, cov_a] = moments(a);
  const auto [mu_b, cov_b] = moments(b);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  const Eigen::VectorXd root_vals = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * root_vals.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = sqrt_a * cov_b * sqrt_a;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(value, 0.0);
}

inline Eigen::MatrixXd embedding_matrix(std::span<const Tensor<float>> images, const ImageEncoder& enc) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(enc.config().d_embed));
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto e = enc.embed(images[i]);
    for (std::size_t j = 0; j < e.size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = e[j];
  }
  return out;
}

inline double fid(std::span<const Tensor<float>> set_a, std::span<const Tensor<float>> set_b, const ImageEncoder& enc) {
  const auto d = enc.config().d_embed;
  if (set_a.size() < d + 1 || set_b.size() < d + 1)
    throw TooFewSamples("fid needs at least " + std::to_string(d + 1) + " images per set");
  return fid_from_features(embedding_matrix(set_a, enc), embedding_matrix(set_b, enc));
}

}  // namespace vfd

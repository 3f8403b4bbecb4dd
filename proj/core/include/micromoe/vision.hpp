#pragma once

#include <cstddef>

#include "micromoe/graph.hpp"
#include "micromoe/param.hpp"
#include "micromoe/tensor.hpp"

namespace micromoe {

/// Single-channel grayscale image with values in [0, 1].
struct SyntheticImage {
  Tensor pixels;  // (height, width)

  std::size_t height() const { return pixels.rows(); }
  std::size_t width() const { return pixels.cols(); }
};

/// Linear patch embedding. Splits the image into non-overlapping
/// patch_size x patch_size patches (row-major patch order) and maps each
/// flattened patch to a d_v-dimensional token.
struct VisionEncoder {
  std::size_t patch_size = 4;
  std::shared_ptr<Tensor> weight;  // (patch_size^2, d_v)
  std::shared_ptr<Tensor> bias;    // (1, d_v)

  std::size_t token_count(const SyntheticImage& img) const;
  std::size_t output_dim() const { return weight->cols(); }
};

/// Two linear layers with a GeLU in between, mapping d_v to d_model.
struct Projector {
  std::shared_ptr<Tensor> w1, b1;  // (d_v, hidden), (1, hidden)
  std::shared_ptr<Tensor> w2, b2;  // (hidden, d_model), (1, d_model)
};

/// Flattens the image into a (n_patches, patch_size^2) matrix.
Tensor extract_patches(const SyntheticImage& img, std::size_t patch_size);

/// Image tokens (n_patches, d_v) on the tape. Image dimensions must be
/// divisible by the patch size.
Val encode_image(Graph& g, const SyntheticImage& img, const VisionEncoder& enc);

/// Projected tokens (n_patches, d_model) on the tape.
Val project(Graph& g, Val tokens, const Projector& proj);

// Plain-value variants for inspection and tests.
Tensor encode_image(const SyntheticImage& img, const VisionEncoder& enc);
Tensor project(const Tensor& tokens, const Projector& proj);

}  // namespace micromoe

#include "micromoe/vision.hpp"

#include <stdexcept>

namespace micromoe {

std::size_t VisionEncoder::token_count(const SyntheticImage& img) const {
  return (img.height() / patch_size) * (img.width() / patch_size);
}

Tensor extract_patches(const SyntheticImage& img, std::size_t patch_size) {
  if (patch_size == 0 || img.height() % patch_size != 0 ||
      img.width() % patch_size != 0)
    throw std::invalid_argument(
        "image dimensions must be divisible by the patch size");
  std::size_t py = img.height() / patch_size;
  std::size_t px = img.width() / patch_size;
  Tensor out(py * px, patch_size * patch_size);
  for (std::size_t gy = 0; gy < py; ++gy) {
    for (std::size_t gx = 0; gx < px; ++gx) {
      double* row = out.row(gy * px + gx);
      for (std::size_t y = 0; y < patch_size; ++y)
        for (std::size_t x = 0; x < patch_size; ++x)
          row[y * patch_size + x] =
              img.pixels.at(gy * patch_size + y, gx * patch_size + x);
    }
  }
  return out;
}

Val encode_image(Graph& g, const SyntheticImage& img,
                 const VisionEncoder& enc) {
  Tensor patches = extract_patches(img, enc.patch_size);
  if (patches.cols() != enc.weight->rows())
    throw std::invalid_argument("encode_image: patch/weight dim mismatch");
  Val p = g.constant(std::move(patches));
  return g.add_rowvec(g.matmul(p, g.param(enc.weight)), g.param(enc.bias));
}

Val project(Graph& g, Val tokens, const Projector& proj) {
  if (g.value(tokens).cols() != proj.w1->rows())
    throw std::invalid_argument("project: input dim mismatch");
  Val h = g.add_rowvec(g.matmul(tokens, g.param(proj.w1)), g.param(proj.b1));
  return g.add_rowvec(g.matmul(g.gelu(h), g.param(proj.w2)), g.param(proj.b2));
}

Tensor encode_image(const SyntheticImage& img, const VisionEncoder& enc) {
  Graph g;
  return g.value(encode_image(g, img, enc));
}

Tensor project(const Tensor& tokens, const Projector& proj) {
  Graph g;
  return g.value(project(g, g.constant(tokens), proj));
}

}  // namespace micromoe

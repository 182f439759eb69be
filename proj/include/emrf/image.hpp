#pragma once

#include "emrf/tensor.hpp"

namespace emrf {

enum class ImageRole { Clean, Streak, Rainy, Derained, GroundTruth };

// 3 x H x W pixels in [0,1].
struct Image {
  Tensor pixels;
  ImageRole role = ImageRole::Clean;

  int64_t height() const { return pixels.extent(1); }
  int64_t width() const { return pixels.extent(2); }
  int64_t channels() const { return pixels.extent(0); }
};

inline Image make_image(Tensor pixels, ImageRole role = ImageRole::Clean) {
  EMRF_CHECK(pixels.rank() == 3, "image: pixels must be C x H x W, got ",
             shape_str(pixels.shape()));
  return Image{std::move(pixels), role};
}

}  // namespace emrf

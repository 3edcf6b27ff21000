#pragma once

#include <string>

#include "spine3d/tensor.hpp"

namespace spine3d {

// Images are plain (h,w,c) tensors with values in [0,1]; these utilities do
// not participate in differentiation.

/// Binary PGM (P5, maxval 255) for single-channel maps.
void write_pgm(const std::string& path, const Tensor& map);
Tensor read_pgm(const std::string& path);

/// Binary PPM (P6, maxval 255) for RGB images.
void write_ppm(const std::string& path, const Tensor& rgb);
Tensor read_ppm(const std::string& path);

Tensor resize_bilinear(const Tensor& x, int oh, int ow);
Tensor resize_nearest(const Tensor& x, int oh, int ow);

/// Rotate about the image center by `deg` (counterclockwise in pixel
/// coordinates), bilinear sampling, zero outside the source.
Tensor rotate_bilinear(const Tensor& x, double deg);

Tensor hflip(const Tensor& x);

/// Write bytes to path via a temp file + rename so readers never observe a
/// partial file.
void atomic_write_file(const std::string& path, const std::string& bytes);

}  // namespace spine3d

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lape/config.hpp"

namespace lape {

/// Grayscale images as rows of image*image pixels (row-major) with labels.
struct Dataset {
  Index image = 28;
  Mat<float> images;
  std::vector<int> labels;

  Index size() const { return images.rows(); }
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

/// Quadrant task: normal(0, noise) background and one patch-aligned
/// patch x patch block of 1.0 + noise inside the quadrant given by the label
/// (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right). The block sits on
/// a uniformly chosen patch of that quadrant. Labels are i mod 4, shuffled.
Dataset make_quadrant_set(const DatasetSpec& spec, Index n, std::uint64_t seed);

/// Train and test sets from independent streams derived from `seed`.
DatasetSplit gen_dataset(const DatasetSpec& spec, std::uint64_t seed);

/// Top-left pixel of the block in sample `i` (row, col), recomputed from the
/// pixels: the patch with the largest mean.
std::pair<Index, Index> locate_block(const Dataset& d, Index i, Index patch);

/// "LAPD", u32 version, u32 image, u64 count, then per sample an i32 label
/// and image*image little-endian f32 pixels.
std::string encode_dataset(const Dataset& d);
Dataset decode_dataset(const std::string& bytes, const std::string& origin = "<memory>");
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace lape

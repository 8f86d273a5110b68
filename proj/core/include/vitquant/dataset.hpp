#pragma once

#include <cstdint>
#include <vector>

#include "vitquant/tensor.hpp"

namespace vitquant {

// Labeled image set; images are [count, H, W, C] with values in [0, 1].
struct ToyDataset {
  Tensor images;
  std::vector<int> labels;

  int count() const { return images.defined() ? images.dim(0) : 0; }
};

// Procedurally generated four-class pattern dataset (bars, checkers, blobs,
// gradients). `num_classes` may be lower than four to restrict the label set.
ToyDataset make_shapes_dataset(int count, int image_size, int channels, int num_classes,
                               std::uint64_t seed);

// Row gather along the first axis; plain value copy, no gradient tracking.
Tensor gather_rows(const Tensor& t, const std::vector<int>& indices);

}  // namespace vitquant

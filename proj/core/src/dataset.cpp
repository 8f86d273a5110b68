#include "vitquant/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vitquant/errors.hpp"
#include "vitquant/rng.hpp"

namespace vitquant {

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Each generator writes one H x W plane in [0, 1].
void draw_bars(std::vector<double>& plane, int n, Rng& rng) {
  const int period = rng.uniform_int(2, 4);
  const bool horizontal = rng.uniform() < 0.5;
  const int phase = rng.uniform_int(0, period - 1);
  const double lo = rng.uniform(0.0, 0.25);
  const double hi = rng.uniform(0.7, 1.0);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const int t = horizontal ? r : c;
      plane[r * n + c] = ((t + phase) / period) % 2 == 0 ? hi : lo;
    }
  }
}

void draw_checkers(std::vector<double>& plane, int n, Rng& rng) {
  const int cell = rng.uniform_int(2, 4);
  const int pr = rng.uniform_int(0, cell - 1);
  const int pc = rng.uniform_int(0, cell - 1);
  const double lo = rng.uniform(0.0, 0.25);
  const double hi = rng.uniform(0.7, 1.0);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const bool on = (((r + pr) / cell) + ((c + pc) / cell)) % 2 == 0;
      plane[r * n + c] = on ? hi : lo;
    }
  }
}

void draw_blobs(std::vector<double>& plane, int n, Rng& rng) {
  const double bg = rng.uniform(0.0, 0.15);
  std::fill(plane.begin(), plane.end(), bg);
  const int blobs = rng.uniform_int(1, 2);
  for (int b = 0; b < blobs; ++b) {
    const double cr = rng.uniform(0.25, 0.75) * n;
    const double cc = rng.uniform(0.25, 0.75) * n;
    const double sigma = rng.uniform(1.5, 3.0);
    const double peak = rng.uniform(0.75, 1.0);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        const double d2 = (r - cr) * (r - cr) + (c - cc) * (c - cc);
        plane[r * n + c] = clamp01(plane[r * n + c] + peak * std::exp(-d2 / (2 * sigma * sigma)));
      }
    }
  }
}

void draw_gradient(std::vector<double>& plane, int n, Rng& rng) {
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(theta), dy = std::sin(theta);
  double lo = 1e300, hi = -1e300;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double v = r * dy + c * dx;
      plane[r * n + c] = v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
  for (auto& v : plane) v = (v - lo) / span;
}

}  // namespace

ToyDataset make_shapes_dataset(int count, int image_size, int channels, int num_classes,
                               std::uint64_t seed) {
  if (count <= 0) throw ContractError("make_shapes_dataset: count must be positive");
  if (num_classes < 1 || num_classes > 4) {
    throw ContractError("make_shapes_dataset: supports 1 to 4 classes");
  }
  Rng rng(Rng::derive(seed, "shapes-dataset"));
  const int n = image_size;
  const std::size_t plane_size = static_cast<std::size_t>(n) * n;
  std::vector<double> data(static_cast<std::size_t>(count) * plane_size * channels);
  std::vector<int> labels(count);
  std::vector<double> plane(plane_size);

  for (int i = 0; i < count; ++i) {
    const int label = i % num_classes;  // balanced classes
    labels[i] = label;
    switch (label) {
      case 0: draw_bars(plane, n, rng); break;
      case 1: draw_checkers(plane, n, rng); break;
      case 2: draw_blobs(plane, n, rng); break;
      default: draw_gradient(plane, n, rng); break;
    }
    double tint[3] = {1.0, 1.0, 1.0};
    for (int ch = 1; ch < channels && ch < 3; ++ch) tint[ch] = rng.uniform(0.7, 1.0);
    double* img = data.data() + static_cast<std::size_t>(i) * plane_size * channels;
    for (std::size_t p = 0; p < plane_size; ++p) {
      for (int ch = 0; ch < channels; ++ch) {
        const double noise = rng.uniform(-0.03, 0.03);
        img[p * channels + ch] = clamp01(plane[p] * tint[std::min(ch, 2)] + noise);
      }
    }
  }

  ToyDataset ds;
  ds.images = Tensor::from_data({count, n, n, channels}, std::move(data));
  ds.labels = std::move(labels);
  return ds;
}

Tensor gather_rows(const Tensor& t, const std::vector<int>& indices) {
  const auto& shape = t.shape();
  if (shape.empty()) throw DimensionError("gather_rows: rank-0 tensor");
  std::size_t row = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) row *= static_cast<std::size_t>(shape[i]);
  std::vector<double> out(indices.size() * row);
  auto src = t.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int r = indices[i];
    if (r < 0 || r >= shape[0]) throw DimensionError("gather_rows: index out of range");
    std::copy(src.begin() + r * row, src.begin() + (r + 1) * row, out.begin() + i * row);
  }
  std::vector<int> out_shape = shape;
  out_shape[0] = static_cast<int>(indices.size());
  return Tensor::from_data(std::move(out_shape), std::move(out));
}

}  // namespace vitquant

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rfa/tensor.hpp"

namespace rfa {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Images in [0,1], shape [n, c, h, w]; integer labels in [0, num_classes).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  /// Row-subset by index list.
  Dataset subset(const std::vector<std::size_t>& indices) const;
  /// First n samples.
  Dataset take(std::size_t n) const;
};

struct BatchPlan {
  std::size_t batch_size = 64;
  std::uint64_t shuffle_seed = 0;
  bool drop_last = false;
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

/// Big-endian IDX files; magics 0x00000803 (images) and 0x00000801 (labels).
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Gaussian clusters at fixed seeded centers, clipped to [0,1],
/// shaped [n, 1, 1, dim].
Dataset synth_blobs(std::uint64_t seed, std::size_t n_per_class, int num_classes,
                    std::size_t dim, double spread);

/// Seeded permutation partitioned into consecutive batches.
std::vector<Batch> batches(const Dataset& dataset, const BatchPlan& plan);

}  // namespace rfa

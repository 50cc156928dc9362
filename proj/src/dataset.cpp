#include "rfa/dataset.hpp"

#include <algorithm>
#include <fstream>

namespace rfa {

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw DataError("truncated IDX file: " + path);
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  std::size_t per = images.size() / size();
  std::vector<double> data(indices.size() * per);
  std::vector<int> labs(indices.size());
  auto src = images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(src.data() + indices[i] * per, per, data.data() + i * per);
    labs[i] = labels[indices[i]];
  }
  std::vector<std::size_t> shape = images.shape();
  shape[0] = indices.size();
  return Dataset{Tensor(shape, std::move(data)), std::move(labs), num_classes,
                 name};
}

Dataset Dataset::take(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return subset(idx);
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgf(images_path, std::ios::binary);
  if (!imgf) throw DataError("cannot open IDX file: " + images_path);
  std::ifstream labf(labels_path, std::ios::binary);
  if (!labf) throw DataError("cannot open IDX file: " + labels_path);

  std::uint32_t img_magic = read_be32(imgf, images_path);
  if (img_magic != 0x00000803u) {
    throw DataError("unsupported IDX type in " + images_path +
                    " (expected image magic 0x00000803)");
  }
  std::uint32_t n = read_be32(imgf, images_path);
  std::uint32_t h = read_be32(imgf, images_path);
  std::uint32_t w = read_be32(imgf, images_path);

  std::uint32_t lab_magic = read_be32(labf, labels_path);
  if (lab_magic != 0x00000801u) {
    throw DataError("unsupported IDX type in " + labels_path +
                    " (expected label magic 0x00000801)");
  }
  std::uint32_t n_labels = read_be32(labf, labels_path);
  if (n != n_labels) {
    throw DataError("count mismatch: " + std::to_string(n) + " images vs " +
                    std::to_string(n_labels) + " labels");
  }

  std::vector<unsigned char> raw(std::size_t(n) * h * w);
  if (!imgf.read(reinterpret_cast<char*>(raw.data()),
                 static_cast<std::streamsize>(raw.size()))) {
    throw DataError("truncated IDX file: " + images_path);
  }
  std::vector<unsigned char> raw_labels(n);
  if (!labf.read(reinterpret_cast<char*>(raw_labels.data()), n)) {
    throw DataError("truncated IDX file: " + labels_path);
  }

  std::vector<double> pixels(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) pixels[i] = raw[i] / 255.0;
  std::vector<int> labels(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = raw_labels[i];
    max_label = std::max(max_label, labels[i]);
  }
  return Dataset{Tensor({n, 1, h, w}, std::move(pixels)), std::move(labels),
                 max_label + 1, "idx"};
}

Dataset synth_blobs(std::uint64_t seed, std::size_t n_per_class, int num_classes,
                    std::size_t dim, double spread) {
  if (dim < 2) throw DataError("synth_blobs: dim must be >= 2");
  if (spread < 0.0) throw DataError("synth_blobs: spread must be >= 0");
  if (num_classes < 2) throw DataError("synth_blobs: need at least 2 classes");

  Rng rng(seed);
  Rng center_rng = rng.split("centers");
  // Center box scales with the noise so the class margin stays proportional
  // to spread: tight spread means tightly packed (still distinct) centers.
  double half_box = std::max(3.0 * spread, 0.025);
  std::vector<std::vector<double>> centers(num_classes, std::vector<double>(dim));
  for (auto& c : centers) {
    for (double& v : c) v = center_rng.uniform(0.5 - half_box, 0.5 + half_box);
  }

  std::size_t n = n_per_class * static_cast<std::size_t>(num_classes);
  std::vector<double> data(n * dim);
  std::vector<int> labels(n);
  Rng noise_rng = rng.split("noise");
  std::size_t row = 0;
  for (int c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
      for (std::size_t j = 0; j < dim; ++j) {
        double v = centers[c][j] + spread * noise_rng.normal();
        data[row * dim + j] = std::min(std::max(v, 0.0), 1.0);
      }
      labels[row] = c;
    }
  }
  return Dataset{Tensor({n, 1, 1, dim}, std::move(data)), std::move(labels),
                 num_classes, "blobs"};
}

std::vector<Batch> batches(const Dataset& dataset, const BatchPlan& plan) {
  if (plan.batch_size == 0 || plan.batch_size > dataset.size()) {
    throw DataError("batches: batch_size must be in [1, n]");
  }
  Rng rng(plan.shuffle_seed);
  std::vector<std::size_t> perm = rng.permutation(dataset.size());
  std::vector<Batch> out;
  for (std::size_t start = 0; start < perm.size(); start += plan.batch_size) {
    std::size_t count = std::min(plan.batch_size, perm.size() - start);
    if (count < plan.batch_size && plan.drop_last) break;
    std::vector<std::size_t> idx(perm.begin() + start, perm.begin() + start + count);
    Dataset sub = dataset.subset(idx);
    out.push_back(Batch{sub.images, sub.labels});
  }
  return out;
}

}  // namespace rfa

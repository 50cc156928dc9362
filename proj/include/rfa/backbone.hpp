#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rfa/tensor.hpp"

namespace rfa {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One backbone layer: dense or 3x3 conv, optionally followed by relu.
/// Dense layers flatten 4-D inputs to [n, rest].
struct Block {
  enum class Kind { dense, conv };
  Kind kind = Kind::dense;
  Tensor weight;  // dense: [out, in]; conv: [oc, c, 3, 3]
  Tensor bias;
  int stride = 1;
  bool relu_after = true;

  Tensor forward(const Tensor& x) const;
};

/// Layered backbone with named split indices. forward over [0, L) composes
/// identically to forward over [0, g) then [g, L) for every g.
class SplitNet {
 public:
  std::string arch;           // "RefNetD" or "RefNetC"
  std::size_t input_dim = 0;  // RefNetD: flattened input; RefNetC: image side
  std::size_t input_channels = 1;
  int num_classes = 0;
  std::vector<Block> blocks;

  std::size_t num_splits() const { return blocks.size(); }
  Tensor forward_slice(const Tensor& input, std::size_t from, std::size_t to) const;
  Tensor forward(const Tensor& input) const {
    return forward_slice(input, 0, num_splits());
  }

  /// Stable named registry of every parameter ("block0.weight", ...).
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::vector<Tensor> params() const;
  std::size_t param_count() const;
};

struct Prediction {
  std::vector<int> labels;  // argmax, ties toward the lower class index
  Tensor probs;             // [n, c], rows sum to 1
};

Prediction predict(const SplitNet& net, const Tensor& x);
int argmax_row(const Tensor& probs, std::size_t row);

/// Dense blocks input_dim -> 256 -> 128 -> 64 -> 64 -> num_classes;
/// split indices 0..5. He-uniform fan-in init, seeded.
SplitNet make_refnet_d(std::size_t input_dim, int num_classes, Rng& rng);

/// Conv stem (two 3x3 conv blocks, stride 2) then the dense tail; for
/// image inputs of shape [n, c, side, side].
SplitNet make_refnet_c(std::size_t side, std::size_t channels, int num_classes,
                       Rng& rng);

/// Independent trainable copy of blocks [d, L); used as C_R / C_N.
struct TailHead {
  std::size_t d = 0;
  std::vector<Block> blocks;

  Tensor forward(const Tensor& z) const;
  std::vector<std::pair<std::string, Tensor>> named_params(
      const std::string& prefix) const;
};

TailHead duplicate_tail(const SplitNet& net, std::size_t d);

// ---- checkpoint format ("RFA1") ---------------------------------------------
//
//   bytes 0..3   magic "RFA1"
//   u32 LE       metadata length, then metadata (JSON text)
//   u32 LE       parameter count
//   per param:   u32 name length, name bytes, u32 ndims, u64 dims...,
//                raw little-endian float64 payload
// Round trips are byte-identical.

void save_named_tensors(const std::string& path, const std::string& metadata_json,
                        const std::vector<std::pair<std::string, Tensor>>& params);
struct LoadedCheckpoint {
  std::string metadata_json;
  std::vector<std::pair<std::string, Tensor>> params;
};
LoadedCheckpoint load_named_tensors(const std::string& path);

void save_checkpoint(const SplitNet& net, const std::string& path,
                     const std::string& extra_metadata_json = "{}");
SplitNet load_checkpoint(const std::string& path);

}  // namespace rfa

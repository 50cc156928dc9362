#include "rfa/backbone.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace rfa {

using nlohmann::json;

Tensor Block::forward(const Tensor& x) const {
  Tensor out;
  if (kind == Kind::dense) {
    out = affine(x, weight, bias);
  } else {
    out = conv2d(x, weight, bias, stride);
  }
  return relu_after ? relu(out) : out;
}

Tensor SplitNet::forward_slice(const Tensor& input, std::size_t from,
                               std::size_t to) const {
  if (from >= to || to > blocks.size()) {
    throw ShapeError("forward_slice: requires 0 <= from < to <= L");
  }
  Tensor z = input;
  for (std::size_t i = from; i < to; ++i) z = blocks[i].forward(z);
  return z;
}

std::vector<std::pair<std::string, Tensor>> SplitNet::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    out.emplace_back("block" + std::to_string(i) + ".weight", blocks[i].weight);
    out.emplace_back("block" + std::to_string(i) + ".bias", blocks[i].bias);
  }
  return out;
}

std::vector<Tensor> SplitNet::params() const {
  std::vector<Tensor> out;
  for (const auto& b : blocks) {
    out.push_back(b.weight);
    out.push_back(b.bias);
  }
  return out;
}

std::size_t SplitNet::param_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.weight.size() + b.bias.size();
  return n;
}

int argmax_row(const Tensor& probs, std::size_t row) {
  std::size_t c = probs.dim(1);
  int best = 0;
  for (std::size_t j = 1; j < c; ++j) {
    if (probs[row * c + j] > probs[row * c + best]) best = static_cast<int>(j);
  }
  return best;
}

Prediction predict(const SplitNet& net, const Tensor& x) {
  Tensor probs = softmax(net.forward(x).detach());
  Prediction pred;
  pred.probs = probs;
  pred.labels.resize(probs.dim(0));
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    pred.labels[i] = argmax_row(probs, i);
  }
  return pred;
}

namespace {

Tensor he_uniform(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> data(n);
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(data), true);
}

Block dense_block(std::size_t in, std::size_t out, bool relu_after, Rng& rng) {
  Block b;
  b.kind = Block::Kind::dense;
  b.weight = he_uniform({out, in}, in, rng);
  b.bias = Tensor({out}, std::vector<double>(out, 0.0), true);
  b.relu_after = relu_after;
  return b;
}

Block conv_block(std::size_t in_c, std::size_t out_c, int stride, Rng& rng) {
  Block b;
  b.kind = Block::Kind::conv;
  b.weight = he_uniform({out_c, in_c, 3, 3}, in_c * 9, rng);
  b.bias = Tensor({out_c}, std::vector<double>(out_c, 0.0), true);
  b.stride = stride;
  b.relu_after = true;
  return b;
}

}  // namespace

SplitNet make_refnet_d(std::size_t input_dim, int num_classes, Rng& rng) {
  SplitNet net;
  net.arch = "RefNetD";
  net.input_dim = input_dim;
  net.num_classes = num_classes;
  Rng r = rng.split("refnet_d");
  std::size_t dims[] = {input_dim, 256, 128, 64, 64};
  for (std::size_t i = 0; i + 1 < 5; ++i) {
    net.blocks.push_back(dense_block(dims[i], dims[i + 1], true, r));
  }
  net.blocks.push_back(
      dense_block(dims[4], static_cast<std::size_t>(num_classes), false, r));
  return net;
}

SplitNet make_refnet_c(std::size_t side, std::size_t channels, int num_classes,
                       Rng& rng) {
  SplitNet net;
  net.arch = "RefNetC";
  net.input_dim = side;
  net.input_channels = channels;
  net.num_classes = num_classes;
  Rng r = rng.split("refnet_c");
  net.blocks.push_back(conv_block(channels, 8, 2, r));
  net.blocks.push_back(conv_block(8, 16, 2, r));
  std::size_t spatial = (side + 1) / 2;
  spatial = (spatial + 1) / 2;
  std::size_t flat = 16 * spatial * spatial;
  net.blocks.push_back(dense_block(flat, 64, true, r));
  net.blocks.push_back(dense_block(64, 64, true, r));
  net.blocks.push_back(
      dense_block(64, static_cast<std::size_t>(num_classes), false, r));
  return net;
}

Tensor TailHead::forward(const Tensor& z) const {
  Tensor out = z;
  for (const auto& b : blocks) out = b.forward(out);
  return out;
}

std::vector<std::pair<std::string, Tensor>> TailHead::named_params(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    out.emplace_back(prefix + ".block" + std::to_string(i) + ".weight",
                     blocks[i].weight);
    out.emplace_back(prefix + ".block" + std::to_string(i) + ".bias",
                     blocks[i].bias);
  }
  return out;
}

TailHead duplicate_tail(const SplitNet& net, std::size_t d) {
  if (d == 0 || d >= net.num_splits()) {
    throw ShapeError("duplicate_tail: requires 0 < d < L");
  }
  TailHead head;
  head.d = d;
  for (std::size_t i = d; i < net.blocks.size(); ++i) {
    Block b = net.blocks[i];
    b.weight = net.blocks[i].weight.clone(true);
    b.bias = net.blocks[i].bias.clone(true);
    head.blocks.push_back(std::move(b));
  }
  return head;
}

// ---- checkpoint io -----------------------------------------------------------

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw CheckpointError("truncated checkpoint: " + path);
  }
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

std::uint64_t read_u64(std::istream& in, const std::string& path) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) {
    throw CheckpointError("truncated checkpoint: " + path);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_named_tensors(const std::string& path, const std::string& metadata_json,
                        const std::vector<std::pair<std::string, Tensor>>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint: " + path);
  out.write("RFA1", 4);
  write_u32(out, static_cast<std::uint32_t>(metadata_json.size()));
  out.write(metadata_json.data(),
            static_cast<std::streamsize>(metadata_json.size()));
  write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) write_u64(out, d);
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(tensor.data().data()),
              static_cast<std::streamsize>(tensor.size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("write failure: " + path);
}

LoadedCheckpoint load_named_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "RFA1", 4) != 0) {
    throw CheckpointError("bad checkpoint magic in " + path);
  }
  LoadedCheckpoint ckpt;
  std::uint32_t meta_len = read_u32(in, path);
  ckpt.metadata_json.resize(meta_len);
  if (!in.read(ckpt.metadata_json.data(), meta_len)) {
    throw CheckpointError("truncated checkpoint: " + path);
  }
  std::uint32_t count = read_u32(in, path);
  for (std::uint32_t p = 0; p < count; ++p) {
    std::uint32_t name_len = read_u32(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) {
      throw CheckpointError("truncated checkpoint: " + path);
    }
    std::uint32_t ndims = read_u32(in, path);
    std::vector<std::size_t> shape(ndims);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(read_u64(in, path));
      n *= d;
    }
    std::vector<double> data(n);
    if (!in.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(n * sizeof(double)))) {
      throw CheckpointError("truncated tensor payload in " + path);
    }
    ckpt.params.emplace_back(std::move(name),
                             Tensor(std::move(shape), std::move(data), true));
  }
  return ckpt;
}

void save_checkpoint(const SplitNet& net, const std::string& path,
                     const std::string& extra_metadata_json) {
  json meta = json::parse(extra_metadata_json);
  meta["arch"] = net.arch;
  meta["input_dim"] = net.input_dim;
  meta["input_channels"] = net.input_channels;
  meta["num_classes"] = net.num_classes;
  meta["num_splits"] = net.num_splits();
  save_named_tensors(path, meta.dump(), net.named_params());
}

SplitNet load_checkpoint(const std::string& path) {
  LoadedCheckpoint ckpt = load_named_tensors(path);
  json meta = json::parse(ckpt.metadata_json);
  std::string arch = meta.at("arch").get<std::string>();
  Rng dummy(0);
  SplitNet net;
  if (arch == "RefNetD") {
    net = make_refnet_d(meta.at("input_dim").get<std::size_t>(),
                        meta.at("num_classes").get<int>(), dummy);
  } else if (arch == "RefNetC") {
    net = make_refnet_c(meta.at("input_dim").get<std::size_t>(),
                        meta.at("input_channels").get<std::size_t>(),
                        meta.at("num_classes").get<int>(), dummy);
  } else {
    throw CheckpointError("unknown architecture '" + arch + "' in " + path);
  }
  auto named = net.named_params();
  if (named.size() != ckpt.params.size()) {
    throw CheckpointError("parameter count mismatch in " + path);
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [name, tensor] = named[i];
    auto& [loaded_name, loaded] = ckpt.params[i];
    if (name != loaded_name || tensor.shape() != loaded.shape()) {
      throw CheckpointError("parameter layout mismatch at '" + loaded_name +
                            "' in " + path);
    }
    std::copy(loaded.data().begin(), loaded.data().end(),
              tensor.mutable_data().begin());
  }
  return net;
}

}  // namespace rfa

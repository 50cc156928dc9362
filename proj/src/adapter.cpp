#include "rfa/adapter.hpp"

#include <cmath>

#include <json.hpp>

namespace rfa {

using nlohmann::json;

namespace {

Tensor he_uniform(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> data(n);
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(data), true);
}

Tensor zero_bias(std::size_t n) {
  return Tensor({n}, std::vector<double>(n, 0.0), true);
}

}  // namespace

Vae::Encoded Vae::encode(const Tensor& z) const {
  Tensor h = relu(affine(z, enc1_w, enc1_b));
  return {affine(h, mu_w, mu_b), affine(h, logvar_w, logvar_b)};
}

Tensor Vae::decode(const Tensor& latent) const {
  Tensor h = relu(affine(latent, dec1_w, dec1_b));
  return affine(h, dec2_w, dec2_b);
}

Tensor Vae::forward_deterministic(const Tensor& z) const {
  return decode(encode(z).mu);
}

std::vector<std::pair<std::string, Tensor>> Vae::named_params(
    const std::string& prefix) const {
  return {
      {prefix + ".enc1.weight", enc1_w},     {prefix + ".enc1.bias", enc1_b},
      {prefix + ".mu.weight", mu_w},         {prefix + ".mu.bias", mu_b},
      {prefix + ".logvar.weight", logvar_w}, {prefix + ".logvar.bias", logvar_b},
      {prefix + ".dec1.weight", dec1_w},     {prefix + ".dec1.bias", dec1_b},
      {prefix + ".dec2.weight", dec2_w},     {prefix + ".dec2.bias", dec2_b},
  };
}

namespace {

// Adds +/-identity blocks so relu(W_in x) followed by W_out recovers x via
// relu(x) - relu(-x); the random base weights become a small perturbation.
void plant_identity_pair(Tensor& w_in, Tensor& w_out, std::size_t dim,
                         double damp) {
  auto in = w_in.mutable_data();
  auto out = w_out.mutable_data();
  std::size_t in_cols = w_in.dim(1);
  std::size_t out_cols = w_out.dim(1);
  for (std::size_t r = 0; r < w_in.dim(0); ++r)
    for (std::size_t c = 0; c < in_cols; ++c) in[r * in_cols + c] *= damp;
  for (std::size_t r = 0; r < w_out.dim(0); ++r)
    for (std::size_t c = 0; c < out_cols; ++c) out[r * out_cols + c] *= damp;
  for (std::size_t j = 0; j < dim; ++j) {
    in[j * in_cols + j] += 1.0;
    in[(dim + j) * in_cols + j] += -1.0;
    out[j * out_cols + j] += 1.0;
    out[j * out_cols + (dim + j)] += -1.0;
  }
}

}  // namespace

Vae make_vae(std::size_t feature_dim, std::size_t hidden_dim,
             std::size_t latent_dim, Rng& rng) {
  Vae v;
  v.enc1_w = he_uniform({hidden_dim, feature_dim}, feature_dim, rng);
  v.enc1_b = zero_bias(hidden_dim);
  v.mu_w = he_uniform({latent_dim, hidden_dim}, hidden_dim, rng);
  v.mu_b = zero_bias(latent_dim);
  v.logvar_w = he_uniform({latent_dim, hidden_dim}, hidden_dim, rng);
  v.logvar_b = zero_bias(latent_dim);
  v.dec1_w = he_uniform({hidden_dim, latent_dim}, latent_dim, rng);
  v.dec1_b = zero_bias(hidden_dim);
  v.dec2_w = he_uniform({feature_dim, hidden_dim}, hidden_dim, rng);
  v.dec2_b = zero_bias(feature_dim);
  // Near-identity start (standard adapter practice: begin at the backbone's
  // behavior and learn only the needed correction). Requires room for the
  // +/- relu pair; otherwise the plain random init stands.
  if (hidden_dim >= 2 * feature_dim && latent_dim >= feature_dim) {
    plant_identity_pair(v.enc1_w, v.mu_w, feature_dim, 0.05);
    plant_identity_pair(v.dec1_w, v.dec2_w, feature_dim, 0.05);
    // start close to deterministic so sampling noise does not swamp the
    // identity path; logvar stays trainable
    for (double& b : v.logvar_b.mutable_data()) b = -6.0;
    auto lw = v.logvar_w.mutable_data();
    for (double& w : lw) w *= 0.05;
  }
  return v;
}

std::vector<std::pair<std::string, Tensor>> RfaModule::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& p : vae_r.named_params("vae_r")) out.push_back(p);
  for (auto& p : vae_n.named_params("vae_n")) out.push_back(p);
  for (auto& p : head_r.named_params("head_r")) out.push_back(p);
  for (auto& p : head_n.named_params("head_n")) out.push_back(p);
  return out;
}

std::vector<Tensor> RfaModule::params() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

std::size_t RfaModule::param_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named_params()) n += t.size();
  return n;
}

RfaModule make_rfa(const SplitNet& backbone, std::size_t d,
                   std::size_t hidden_dim, std::size_t latent_dim, Rng& rng) {
  if (d == 0 || d >= backbone.num_splits()) {
    throw ShapeError("make_rfa: requires 0 < d < L");
  }
  // Output width of block d-1 == width of z_d.
  const Block& prev = backbone.blocks[d - 1];
  if (prev.kind != Block::Kind::dense) {
    throw ShapeError("make_rfa: adapter site must follow a dense block");
  }
  RfaModule rfa;
  rfa.d = d;
  rfa.feature_dim = prev.weight.dim(0);
  rfa.hidden_dim = hidden_dim;
  rfa.latent_dim = latent_dim;
  Rng r = rng.split("rfa");
  Rng rr = r.split("vae_r");
  Rng rn = r.split("vae_n");
  rfa.vae_r = make_vae(rfa.feature_dim, hidden_dim, latent_dim, rr);
  rfa.vae_n = make_vae(rfa.feature_dim, hidden_dim, latent_dim, rn);
  rfa.head_r = duplicate_tail(backbone, d);
  rfa.head_n = duplicate_tail(backbone, d);
  return rfa;
}

std::vector<std::pair<std::string, Tensor>> RfaInference::named_params() const {
  return vae_r.named_params("vae_r");
}

std::size_t RfaInference::param_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named_params()) n += t.size();
  return n;
}

RfaInference strip_to_inference(const RfaModule& rfa) {
  RfaInference out;
  out.d = rfa.d;
  out.feature_dim = rfa.feature_dim;
  out.hidden_dim = rfa.hidden_dim;
  out.latent_dim = rfa.latent_dim;
  out.vae_r = rfa.vae_r;
  return out;
}

RfaForward rfa_forward(const RfaModule& rfa, const Tensor& z_d, Rng& rng,
                       bool deterministic) {
  if (z_d.rank() != 2 || z_d.dim(1) != rfa.feature_dim) {
    throw ShapeError("rfa_forward: feature width does not match adapter site d");
  }
  RfaForward out;
  auto enc_r = rfa.vae_r.encode(z_d);
  auto enc_n = rfa.vae_n.encode(z_d);
  out.mu_r = enc_r.mu;
  out.logvar_r = enc_r.logvar;
  out.mu_n = enc_n.mu;
  out.logvar_n = enc_n.logvar;
  if (deterministic) {
    out.z_r = rfa.vae_r.decode(enc_r.mu);
    out.z_n = rfa.vae_n.decode(enc_n.mu);
  } else {
    Rng r_rng = rng.split("sample_r");
    Rng n_rng = rng.split("sample_n");
    out.z_r = rfa.vae_r.decode(reparameterize(enc_r.mu, enc_r.logvar, r_rng));
    out.z_n = rfa.vae_n.decode(reparameterize(enc_n.mu, enc_n.logvar, n_rng));
  }
  return out;
}

Tensor loss_cr(const RfaModule& rfa, const RfaForward& plus,
               const RfaForward& minus, const std::vector<int>& y) {
  Tensor a = cross_entropy_with_logits(rfa.head_r.forward(plus.z_r), y);
  Tensor b = cross_entropy_with_logits(rfa.head_r.forward(minus.z_r), y);
  return add(a, b);
}

std::vector<int> erroneous_labels(const Tensor& adv_logits,
                                  const std::vector<int>& y) {
  const std::size_t n = adv_logits.dim(0);
  const std::size_t c = adv_logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0, second = -1;
    for (std::size_t j = 1; j < c; ++j) {
      if (adv_logits[i * c + j] > adv_logits[i * c + best]) {
        second = best;
        best = static_cast<int>(j);
      } else if (second < 0 ||
                 adv_logits[i * c + j] > adv_logits[i * c + second]) {
        second = static_cast<int>(j);
      }
    }
    out[i] = (best != y[i]) ? best : second;
  }
  return out;
}

Tensor loss_cn(const RfaModule& rfa, const RfaForward& plus,
               const RfaForward& minus, const std::vector<int>& y,
               const std::vector<int>& y_bar) {
  Tensor a = cross_entropy_with_logits(rfa.head_n.forward(plus.z_n), y);
  Tensor b = cross_entropy_with_logits(rfa.head_n.forward(minus.z_n), y_bar);
  return add(a, b);
}

Tensor triplet(const Tensor& a, const Tensor& p, const Tensor& n, double tau) {
  if (a.shape() != p.shape() || a.shape() != n.shape()) {
    throw ShapeError("triplet: shape mismatch");
  }
  double inv_dim = 1.0 / static_cast<double>(a.dim(1));
  Tensor scale = Tensor::scalar(inv_dim);
  Tensor d_ap = mul(squared_distance(a, p), scale);
  Tensor d_an = mul(squared_distance(a, n), scale);
  Tensor hinge = relu(add(sub(d_ap, d_an), Tensor::scalar(tau)));
  return mean(hinge);
}

Tensor loss_tp(const RfaForward& plus, const RfaForward& minus, double tau) {
  return add(triplet(plus.z_r, minus.z_r, plus.z_n, tau),
             triplet(plus.z_r, minus.z_r, minus.z_n, tau));
}

Tensor loss_kl(const RfaForward& plus, const RfaForward& minus) {
  // -0.5 * mean_batch sum_latent (1 + logvar - mu^2 - exp(logvar))
  auto kl_one = [](const Tensor& mu, const Tensor& logvar) {
    Tensor inner = sub(add(Tensor::scalar(1.0), logvar),
                       add(mul(mu, mu), exp(logvar)));
    Tensor per_sample = sum_rows(inner);
    return mul(Tensor::scalar(-0.5), mean(per_sample));
  };
  return add(add(kl_one(plus.mu_r, plus.logvar_r),
                 kl_one(minus.mu_r, minus.logvar_r)),
             add(kl_one(plus.mu_n, plus.logvar_n),
                 kl_one(minus.mu_n, minus.logvar_n)));
}

Tensor loss_fb(const LossWeights& w, const LossComponents& c) {
  Tensor total = add(c.cr, add(mul(Tensor::scalar(w.lambda_cn), c.cn),
                               mul(Tensor::scalar(w.lambda_tp), c.tp)));
  if (w.lambda_kl > 0.0 && c.kl.defined()) {
    total = add(total, mul(Tensor::scalar(w.lambda_kl), c.kl));
  }
  return total;
}

Tensor loss_ub(const LossWeights& w, const LossComponents& c,
               const Tensor& backbone_ce) {
  Tensor total = add(c.cr, add(mul(Tensor::scalar(w.lambda_tp), c.tp),
                               mul(Tensor::scalar(w.lambda_b), backbone_ce)));
  if (w.lambda_kl > 0.0 && c.kl.defined()) {
    total = add(total, mul(Tensor::scalar(w.lambda_kl), c.kl));
  }
  return total;
}

DistillPrediction distill_infer(const RfaInference& rfa_i,
                                const SplitNet& backbone, const Tensor& x) {
  const std::size_t L = backbone.num_splits();
  if (rfa_i.d == 0 || rfa_i.d >= L) {
    throw ShapeError("distill_infer: adapter split does not match backbone");
  }
  Tensor z_d = backbone.forward_slice(x, 0, rfa_i.d).detach();
  if (z_d.dim(1) != rfa_i.feature_dim) {
    throw ShapeError("distill_infer: adapter split does not match backbone");
  }
  DistillPrediction out;
  out.y_hat = softmax(backbone.forward_slice(z_d, rfa_i.d, L).detach());
  Tensor z_r = rfa_i.vae_r.forward_deterministic(z_d).detach();
  out.y_hat_r = softmax(backbone.forward_slice(z_r, rfa_i.d, L).detach());
  return out;
}

// ---- serialization -----------------------------------------------------------

namespace {

json rfa_meta(const RfaModule& rfa) {
  return json{{"arch", "RFA"},
              {"d", rfa.d},
              {"feature_dim", rfa.feature_dim},
              {"hidden_dim", rfa.hidden_dim},
              {"latent_dim", rfa.latent_dim}};
}

void fill_params(std::vector<std::pair<std::string, Tensor>>& dst,
                 const std::vector<std::pair<std::string, Tensor>>& src,
                 const std::string& path) {
  if (dst.size() != src.size()) {
    throw CheckpointError("parameter count mismatch in " + path);
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].first != src[i].first ||
        dst[i].second.shape() != src[i].second.shape()) {
      throw CheckpointError("parameter layout mismatch at '" + src[i].first +
                            "' in " + path);
    }
    std::copy(src[i].second.data().begin(), src[i].second.data().end(),
              dst[i].second.mutable_data().begin());
  }
}

}  // namespace

void save_rfa(const RfaModule& rfa, const std::string& path) {
  save_named_tensors(path, rfa_meta(rfa).dump(), rfa.named_params());
}

RfaModule load_rfa(const std::string& path, const SplitNet& backbone) {
  LoadedCheckpoint ckpt = load_named_tensors(path);
  json meta = json::parse(ckpt.metadata_json);
  if (meta.at("arch").get<std::string>() != "RFA") {
    throw CheckpointError("unknown architecture in " + path);
  }
  Rng dummy(0);
  RfaModule rfa = make_rfa(backbone, meta.at("d").get<std::size_t>(),
                           meta.at("hidden_dim").get<std::size_t>(),
                           meta.at("latent_dim").get<std::size_t>(), dummy);
  auto named = rfa.named_params();
  fill_params(named, ckpt.params, path);
  return rfa;
}

void save_rfa_inference(const RfaInference& rfa_i, const std::string& path) {
  json meta{{"arch", "RFAI"},
            {"d", rfa_i.d},
            {"feature_dim", rfa_i.feature_dim},
            {"hidden_dim", rfa_i.hidden_dim},
            {"latent_dim", rfa_i.latent_dim}};
  save_named_tensors(path, meta.dump(), rfa_i.named_params());
}

RfaInference load_rfa_inference(const std::string& path) {
  LoadedCheckpoint ckpt = load_named_tensors(path);
  json meta = json::parse(ckpt.metadata_json);
  if (meta.at("arch").get<std::string>() != "RFAI") {
    throw CheckpointError("unknown architecture in " + path);
  }
  RfaInference out;
  out.d = meta.at("d").get<std::size_t>();
  out.feature_dim = meta.at("feature_dim").get<std::size_t>();
  out.hidden_dim = meta.at("hidden_dim").get<std::size_t>();
  out.latent_dim = meta.at("latent_dim").get<std::size_t>();
  Rng dummy(0);
  out.vae_r = make_vae(out.feature_dim, out.hidden_dim, out.latent_dim, dummy);
  auto named = out.named_params();
  fill_params(named, ckpt.params, path);
  return out;
}

}  // namespace rfa

#include "rfa/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "rfa/metrics.hpp"

namespace rfa {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const char* section,
                    std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known |= (it.key() == k);
    if (!known) {
      throw ConfigError(std::string("unknown config key '") + it.key() +
                        "' in section " + section);
    }
  }
}

template <typename T>
void pull(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) {
    try {
      out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for config key '") + key +
                        "': " + e.what());
    }
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

std::filesystem::path out_path(const ExperimentConfig& cfg,
                               const std::string& name) {
  std::filesystem::create_directories(cfg.output_dir);
  return std::filesystem::path(cfg.output_dir) / name;
}

struct Splits {
  Dataset train;
  Dataset test;
};

Splits load_splits(const ExperimentConfig& cfg) {
  const auto& d = cfg.dataset;
  Splits s;
  if (d.kind == "blobs") {
    // one draw, shared centers; the tail of each class becomes the test set
    Rng base(cfg.seed);
    Dataset all = synth_blobs(base.split("blob-data").seed(),
                              d.n_per_class + d.test_n_per_class,
                              d.num_classes, d.dim, d.spread);
    std::vector<std::size_t> seen(static_cast<std::size_t>(d.num_classes), 0);
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < all.size(); ++i) {
      auto c = static_cast<std::size_t>(all.labels[i]);
      (seen[c]++ < d.n_per_class ? tr : te).push_back(i);
    }
    s.train = all.subset(tr);
    s.test = all.subset(te);
  } else if (d.kind == "idx") {
    if (d.images.empty() || d.labels.empty()) {
      throw ConfigError("dataset.kind=idx requires dataset.images and dataset.labels");
    }
    s.train = load_idx(d.images, d.labels);
    if (!d.test_images.empty()) {
      s.test = load_idx(d.test_images, d.test_labels);
    } else {
      // deterministic 5:1 tail split when no test files are given
      std::size_t n_test = s.train.size() / 6;
      std::vector<std::size_t> tr, te;
      for (std::size_t i = 0; i < s.train.size(); ++i) {
        (i % 6 == 5 ? te : tr).push_back(i);
      }
      s.test = s.train.subset(te);
      s.train = s.train.subset(tr);
      (void)n_test;
    }
  } else {
    throw ConfigError("dataset.kind must be 'blobs' or 'idx'");
  }
  if (d.train_subset > 0 && d.train_subset < s.train.size()) {
    s.train = s.train.take(d.train_subset);
  }
  return s;
}

SplitNet build_backbone(const ExperimentConfig& cfg, const Splits& data) {
  if (!cfg.backbone.checkpoint.empty()) {
    return load_checkpoint(cfg.backbone.checkpoint);
  }
  Rng rng(Rng(cfg.seed).split("backbone-init").seed());
  std::size_t per_sample = data.train.images.size() / data.train.size();
  if (cfg.backbone.arch == "refnet_d") {
    return make_refnet_d(per_sample, data.train.num_classes, rng);
  }
  if (cfg.backbone.arch == "refnet_c") {
    std::size_t c = data.train.images.dim(1);
    std::size_t side = data.train.images.dim(2);
    return make_refnet_c(side, c, data.train.num_classes, rng);
  }
  throw ConfigError("backbone.arch must be 'refnet_d' or 'refnet_c'");
}

SplitNet require_backbone(const ExperimentConfig& cfg) {
  if (cfg.backbone.checkpoint.empty()) {
    throw ConfigError("this command requires backbone.checkpoint");
  }
  return load_checkpoint(cfg.backbone.checkpoint);
}

json report_stamp(const ExperimentConfig& cfg) {
  json j;
  j["config_hash"] = cfg.hash();
  j["seed"] = cfg.seed;
  j["threads"] = thread_budget();
  return j;
}

double clean_accuracy(const SplitNet& net, const Dataset& data) {
  return 1.0 - standard_error(net, data);
}

AttackSpec named_attack(const ExperimentConfig& cfg, const std::string& name) {
  AttackSpec spec = cfg.attack_spec();
  spec.space = AttackSpace::input;
  if (name == "pgd_linf") {
    spec.family = AttackFamily::pgd;
    spec.norm = AttackNorm::l_inf;
  } else if (name == "pgd_l2") {
    spec.family = AttackFamily::pgd;
    spec.norm = AttackNorm::l_2;
  } else if (name == "fgsm") {
    spec.family = AttackFamily::fgsm;
    spec.norm = AttackNorm::l_inf;
    spec.k = 1;
    spec.rand_init = false;
  } else {
    throw ConfigError("unknown attack name '" + name +
                      "' (expected pgd_linf, pgd_l2 or fgsm)");
  }
  return spec;
}

double median_of(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

// ---- config ------------------------------------------------------------------

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be a JSON object");
  reject_unknown(root, "(root)",
                 {"seed", "output_dir", "dataset", "backbone", "attack",
                  "adapter", "train", "metrics"});

  ExperimentConfig cfg;
  pull(root, "seed", cfg.seed);
  pull(root, "output_dir", cfg.output_dir);

  if (root.contains("dataset")) {
    const json& d = root["dataset"];
    reject_unknown(d, "dataset",
                   {"kind", "n_per_class", "num_classes", "dim", "spread",
                    "test_n_per_class", "train_subset", "images", "labels",
                    "test_images", "test_labels"});
    pull(d, "kind", cfg.dataset.kind);
    pull(d, "n_per_class", cfg.dataset.n_per_class);
    pull(d, "num_classes", cfg.dataset.num_classes);
    pull(d, "dim", cfg.dataset.dim);
    pull(d, "spread", cfg.dataset.spread);
    pull(d, "test_n_per_class", cfg.dataset.test_n_per_class);
    pull(d, "train_subset", cfg.dataset.train_subset);
    pull(d, "images", cfg.dataset.images);
    pull(d, "labels", cfg.dataset.labels);
    pull(d, "test_images", cfg.dataset.test_images);
    pull(d, "test_labels", cfg.dataset.test_labels);
  }
  if (root.contains("backbone")) {
    const json& b = root["backbone"];
    reject_unknown(b, "backbone", {"arch", "checkpoint"});
    pull(b, "arch", cfg.backbone.arch);
    pull(b, "checkpoint", cfg.backbone.checkpoint);
  }
  if (root.contains("attack")) {
    const json& a = root["attack"];
    reject_unknown(a, "attack",
                   {"family", "space", "norm", "epsilon", "k", "eta", "g",
                    "rand_init"});
    pull(a, "family", cfg.attack.family);
    pull(a, "space", cfg.attack.space);
    pull(a, "norm", cfg.attack.norm);
    pull(a, "epsilon", cfg.attack.epsilon);
    pull(a, "k", cfg.attack.k);
    pull(a, "eta", cfg.attack.eta);
    pull(a, "g", cfg.attack.g);
    pull(a, "rand_init", cfg.attack.rand_init);
  }
  if (root.contains("adapter")) {
    const json& a = root["adapter"];
    reject_unknown(a, "adapter", {"d", "hidden_dim", "latent_dim", "checkpoint"});
    pull(a, "d", cfg.adapter.d);
    pull(a, "hidden_dim", cfg.adapter.hidden_dim);
    pull(a, "latent_dim", cfg.adapter.latent_dim);
    pull(a, "checkpoint", cfg.adapter.checkpoint);
  }
  if (root.contains("train")) {
    const json& t = root["train"];
    reject_unknown(t, "train",
                   {"mode", "epochs", "batch_size", "learning_rate", "beta1",
                    "beta2", "adam_eps", "lambda_cn", "lambda_tp", "lambda_b",
                    "tau", "lambda_kl", "ub_backbone_lr", "track_robust_err"});
    pull(t, "mode", cfg.train.mode);
    pull(t, "epochs", cfg.train.epochs);
    pull(t, "batch_size", cfg.train.batch_size);
    pull(t, "learning_rate", cfg.train.learning_rate);
    pull(t, "beta1", cfg.train.beta1);
    pull(t, "beta2", cfg.train.beta2);
    pull(t, "adam_eps", cfg.train.adam_eps);
    pull(t, "lambda_cn", cfg.train.lambda_cn);
    pull(t, "lambda_tp", cfg.train.lambda_tp);
    pull(t, "lambda_b", cfg.train.lambda_b);
    pull(t, "tau", cfg.train.tau);
    pull(t, "lambda_kl", cfg.train.lambda_kl);
    pull(t, "ub_backbone_lr", cfg.train.ub_backbone_lr);
    pull(t, "track_robust_err", cfg.train.track_robust_err);
  }
  if (root.contains("metrics")) {
    const json& m = root["metrics"];
    reject_unknown(m, "metrics",
                   {"g_list", "samples", "kde_grid", "attacks", "mic_max_pairs"});
    pull(m, "g_list", cfg.metrics.g_list);
    pull(m, "samples", cfg.metrics.samples);
    pull(m, "kde_grid", cfg.metrics.kde_grid);
    pull(m, "attacks", cfg.metrics.attacks);
    pull(m, "mic_max_pairs", cfg.metrics.mic_max_pairs);
  }

  auto one_of = [](const char* field, const std::string& v,
                   std::initializer_list<const char*> allowed) {
    for (const char* a : allowed) {
      if (v == a) return;
    }
    std::string msg = std::string("invalid value '") + v + "' for " + field +
                      "; expected one of:";
    for (const char* a : allowed) msg += std::string(" ") + a;
    throw ConfigError(msg);
  };
  one_of("dataset.kind", cfg.dataset.kind, {"blobs", "idx"});
  one_of("backbone.arch", cfg.backbone.arch, {"refnet_d", "refnet_c"});
  one_of("attack.family", cfg.attack.family, {"fgsm", "pgd"});
  one_of("attack.space", cfg.attack.space, {"input", "feature"});
  one_of("attack.norm", cfg.attack.norm, {"l_inf", "l_2"});
  one_of("train.mode", cfg.train.mode,
         {"standard", "fb", "ub", "at_pgd_baseline"});
  return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

std::string ExperimentConfig::to_json() const {
  json root;
  root["seed"] = seed;
  root["output_dir"] = output_dir;
  root["dataset"] = {{"kind", dataset.kind},
                     {"n_per_class", dataset.n_per_class},
                     {"num_classes", dataset.num_classes},
                     {"dim", dataset.dim},
                     {"spread", dataset.spread},
                     {"test_n_per_class", dataset.test_n_per_class},
                     {"train_subset", dataset.train_subset},
                     {"images", dataset.images},
                     {"labels", dataset.labels},
                     {"test_images", dataset.test_images},
                     {"test_labels", dataset.test_labels}};
  root["backbone"] = {{"arch", backbone.arch},
                      {"checkpoint", backbone.checkpoint}};
  root["attack"] = {{"family", attack.family}, {"space", attack.space},
                    {"norm", attack.norm},     {"epsilon", attack.epsilon},
                    {"k", attack.k},           {"eta", attack.eta},
                    {"g", attack.g},           {"rand_init", attack.rand_init}};
  root["adapter"] = {{"d", adapter.d},
                     {"hidden_dim", adapter.hidden_dim},
                     {"latent_dim", adapter.latent_dim},
                     {"checkpoint", adapter.checkpoint}};
  root["train"] = {{"mode", train.mode},
                   {"epochs", train.epochs},
                   {"batch_size", train.batch_size},
                   {"learning_rate", train.learning_rate},
                   {"beta1", train.beta1},
                   {"beta2", train.beta2},
                   {"adam_eps", train.adam_eps},
                   {"lambda_cn", train.lambda_cn},
                   {"lambda_tp", train.lambda_tp},
                   {"lambda_b", train.lambda_b},
                   {"tau", train.tau},
                   {"lambda_kl", train.lambda_kl},
                   {"ub_backbone_lr", train.ub_backbone_lr},
                   {"track_robust_err", train.track_robust_err}};
  root["metrics"] = {{"g_list", metrics.g_list},
                     {"samples", metrics.samples},
                     {"kde_grid", metrics.kde_grid},
                     {"attacks", metrics.attacks},
                     {"mic_max_pairs", metrics.mic_max_pairs}};
  return root.dump(2);
}

std::string ExperimentConfig::hash() const { return config_hash(to_json()); }

AttackSpec ExperimentConfig::attack_spec() const {
  AttackSpec spec;
  if (attack.family == "fgsm") {
    spec.family = AttackFamily::fgsm;
  } else if (attack.family == "pgd") {
    spec.family = AttackFamily::pgd;
  } else {
    throw ConfigError("attack.family must be 'fgsm' or 'pgd'");
  }
  if (attack.space == "input") {
    spec.space = AttackSpace::input;
  } else if (attack.space == "feature") {
    spec.space = AttackSpace::feature;
  } else {
    throw ConfigError("attack.space must be 'input' or 'feature'");
  }
  if (attack.norm == "l_inf") {
    spec.norm = AttackNorm::l_inf;
  } else if (attack.norm == "l_2") {
    spec.norm = AttackNorm::l_2;
  } else {
    throw ConfigError("attack.norm must be 'l_inf' or 'l_2'");
  }
  spec.epsilon = attack.epsilon;
  spec.k = attack.k;
  spec.eta = attack.eta;
  spec.g = attack.g;
  spec.rand_init = attack.rand_init;
  return spec;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig c;
  if (train.mode == "standard") {
    c.mode = TrainMode::standard;
  } else if (train.mode == "fb") {
    c.mode = TrainMode::fb;
  } else if (train.mode == "ub") {
    c.mode = TrainMode::ub;
  } else if (train.mode == "at_pgd_baseline") {
    c.mode = TrainMode::at_pgd_baseline;
  } else {
    throw ConfigError("train.mode must be standard, fb, ub or at_pgd_baseline");
  }
  c.attack = attack_spec();
  c.g = attack.g;
  c.d = adapter.d;
  c.epochs = train.epochs;
  c.plan.batch_size = train.batch_size;
  c.learning_rate = train.learning_rate;
  c.beta1 = train.beta1;
  c.beta2 = train.beta2;
  c.adam_eps = train.adam_eps;
  c.weights.lambda_cn = train.lambda_cn;
  c.weights.lambda_tp = train.lambda_tp;
  c.weights.lambda_b = train.lambda_b;
  c.weights.tau = train.tau;
  c.weights.lambda_kl = train.lambda_kl;
  c.seed = seed;
  c.ub_backbone_lr = train.ub_backbone_lr;
  c.test_data = nullptr;
  c.track_robust_err = train.track_robust_err;
  return c;
}

int thread_budget() {
  const char* env = std::getenv("RFA_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) {
    throw ConfigError(std::string("RFA_THREADS must be a positive integer, got '") +
                      env + "'");
  }
  return static_cast<int>(v);
}

// ---- commands ----------------------------------------------------------------

int cmd_pretrain(const ExperimentConfig& cfg) {
  Splits data = load_splits(cfg);
  SplitNet net = build_backbone(cfg, data);

  TrainConfig tc = cfg.train_config();
  tc.mode = TrainMode::standard;
  tc.test_data = &data.test;
  tc.track_robust_err = false;
  RunRecord rec = train_standard(net, data.train, tc);
  rec.config_hash = cfg.hash();

  save_checkpoint(net, out_path(cfg, "backbone.rfa1").string(),
                  json{{"config_hash", cfg.hash()}}.dump());
  rec.to_csv(out_path(cfg, "pretrain_curve.csv").string());
  json report = report_stamp(cfg);
  report["run"] = json::parse(rec.to_json());
  report["clean_test_accuracy"] = 1.0 - rec.epochs.back().test_std_err;
  report["checkpoint"] = out_path(cfg, "backbone.rfa1").string();
  write_text(out_path(cfg, "pretrain_report.json").string(), report.dump(2));
  return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
  Splits data = load_splits(cfg);
  TrainConfig tc = cfg.train_config();
  tc.test_data = &data.test;
  json report = report_stamp(cfg);
  RunRecord rec;

  if (tc.mode == TrainMode::standard) {
    SplitNet net = build_backbone(cfg, data);
    rec = train_standard(net, data.train, tc);
    save_checkpoint(net, out_path(cfg, "backbone.rfa1").string(),
                    json{{"config_hash", cfg.hash()}}.dump());
  } else if (tc.mode == TrainMode::at_pgd_baseline) {
    SplitNet net = build_backbone(cfg, data);
    rec = train_at_baseline(net, data.train, tc);
    save_checkpoint(net, out_path(cfg, "backbone_at.rfa1").string(),
                    json{{"config_hash", cfg.hash()}}.dump());
  } else {
    SplitNet net = require_backbone(cfg);
    if (cfg.attack.g >= cfg.adapter.d) {
      throw ConfigError("attack.g must be smaller than adapter.d");
    }
    // feature attacks need a budget; calibrate from the training data when
    // the config leaves eta at 0
    if (tc.attack.space == AttackSpace::feature && tc.attack.eta == 0.0) {
      Rng cr(Rng(cfg.seed).split("train-calibration").seed());
      auto bs = batches(data.train, tc.plan);
      auto cal = calibrate_eta(net, bs, tc.attack.g, cfg.attack.epsilon,
                               tc.attack.k, cr);
      tc.attack.eta = cal.eta;
      report["calibrated_eta"] = cal.eta;
    }
    Rng ar(Rng(cfg.seed).split("adapter-init").seed());
    RfaModule rfa =
        make_rfa(net, cfg.adapter.d, cfg.adapter.hidden_dim,
                 cfg.adapter.latent_dim, ar);
    if (tc.mode == TrainMode::fb) {
      rec = train_fb(net, rfa, data.train, tc);
    } else {
      rec = train_ub(net, rfa, data.train, tc);
      save_checkpoint(net, out_path(cfg, "backbone_ub.rfa1").string(),
                      json{{"config_hash", cfg.hash()}}.dump());
    }
    save_rfa(rfa, out_path(cfg, "adapter.rfa1").string());
    save_rfa_inference(strip_to_inference(rfa),
                       out_path(cfg, "adapter_infer.rfa1").string());
  }

  rec.config_hash = cfg.hash();
  rec.to_csv(out_path(cfg, "train_curve.csv").string());
  report["run"] = json::parse(rec.to_json());
  RoReport ro;
  if (rec.epochs.size() >= 10 && cfg.train.track_robust_err) {
    ro = detect_ro(rec);
    report["robust_overfitting"] = {{"detected", ro.ro_detected},
                                    {"best_epoch", ro.best_epoch},
                                    {"final_gap", ro.final_gap}};
  }
  write_text(out_path(cfg, "train_report.json").string(), report.dump(2));
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg) {
  Splits data = load_splits(cfg);
  SplitNet net = require_backbone(cfg);
  RfaInference rfa_i;
  bool have_adapter = !cfg.adapter.checkpoint.empty();
  if (have_adapter) rfa_i = load_rfa_inference(cfg.adapter.checkpoint);

  json report = report_stamp(cfg);
  report["clean_accuracy_backbone"] = clean_accuracy(net, data.test);
  if (have_adapter) {
    AttackSpec none;
    none.epsilon = 0.0;
    none.k = 1;
    none.rand_init = false;
    report["clean_accuracy_adapter"] =
        robust_accuracy(net, &rfa_i, none, data.test, cfg.seed);
  }

  json per_attack = json::array();
  for (const std::string& name : cfg.metrics.attacks) {
    AttackSpec spec = named_attack(cfg, name);
    json entry;
    entry["attack"] = name;
    entry["epsilon"] = spec.epsilon;
    entry["k"] = spec.k;
    entry["robust_accuracy_backbone"] =
        robust_accuracy(net, nullptr, spec, data.test, cfg.seed);
    if (have_adapter) {
      entry["robust_accuracy_adapter"] =
          robust_accuracy(net, &rfa_i, spec, data.test, cfg.seed);
    }
    per_attack.push_back(entry);
  }
  report["attacks"] = per_attack;
  write_text(out_path(cfg, "eval_report.json").string(), report.dump(2));
  return 0;
}

int cmd_prop1(const ExperimentConfig& cfg) {
  Splits data = load_splits(cfg);
  SplitNet net = require_backbone(cfg);
  for (std::size_t g : cfg.metrics.g_list) {
    if (g == 0 || g >= net.num_splits()) {
      throw ConfigError("metrics.g_list entry out of range: " + std::to_string(g));
    }
  }
  // matched budgets: k * eta = 1 unless the config pins eta explicitly
  double eta = cfg.attack.eta > 0.0 ? cfg.attack.eta : 1.0 / cfg.attack.k;

  Dataset pool = data.test.size() >= cfg.metrics.samples
                     ? data.test.take(cfg.metrics.samples)
                     : data.test;
  Batch all{pool.images, pool.labels};

  std::ostringstream csv;
  csv << "g,sample_index,delta_l\n";
  std::map<std::size_t, std::vector<double>> per_g;
  for (std::size_t g : cfg.metrics.g_list) {
    auto samples = delta_loss_batch(net, g, eta, cfg.attack.k, all);
    auto& vals = per_g[g];
    for (std::size_t i = 0; i < samples.size(); ++i) {
      vals.push_back(samples[i].value);
      csv << g << "," << i << "," << samples[i].value << "\n";
    }
  }
  write_text(out_path(cfg, "prop1_samples.csv").string(), csv.str());

  json report = report_stamp(cfg);
  report["eta"] = eta;
  report["k"] = cfg.attack.k;
  report["n_samples"] = pool.size();
  json medians = json::object();
  json kde_files = json::object();
  bool degenerate = false;
  std::ostringstream kcsv;
  kcsv << "g,x,density\n";
  for (const auto& [g, vals] : per_g) {
    medians[std::to_string(g)] = median_of(vals);
    double lo = *std::min_element(vals.begin(), vals.end());
    double hi = *std::max_element(vals.begin(), vals.end());
    if (hi - lo < 1e-15) {
      degenerate = true;  // eta = 0 (or a dead layer): KDE is undefined
      continue;
    }
    KdeResult kd = kde(vals, cfg.metrics.kde_grid);
    for (std::size_t i = 0; i < kd.grid.size(); ++i) {
      kcsv << g << "," << kd.grid[i] << "," << kd.density[i] << "\n";
    }
  }
  write_text(out_path(cfg, "prop1_kde.csv").string(), kcsv.str());
  report["medians"] = medians;
  if (degenerate) report["warning"] = "degenerate samples; KDE skipped";

  json pvals = json::object();
  for (std::size_t i = 0; i + 1 < cfg.metrics.g_list.size(); ++i) {
    std::size_t ga = cfg.metrics.g_list[i];
    std::size_t gb = cfg.metrics.g_list[i + 1];
    double p = mann_whitney_p_greater(per_g[ga], per_g[gb]);
    pvals[std::to_string(ga) + ">" + std::to_string(gb)] = p;
  }
  report["mann_whitney_p"] = pvals;
  write_text(out_path(cfg, "prop1_report.json").string(), report.dump(2));
  return 0;
}

int cmd_detect(const ExperimentConfig& cfg) {
  Splits data = load_splits(cfg);
  SplitNet net = require_backbone(cfg);
  if (cfg.adapter.checkpoint.empty()) {
    throw ConfigError("detect requires adapter.checkpoint");
  }
  RfaInference rfa_i = load_rfa_inference(cfg.adapter.checkpoint);

  AttackSpec spec = cfg.attack_spec();
  if (spec.space != AttackSpace::input) {
    throw ConfigError("detect expects an input-space attack");
  }
  Detector det = train_detector(net, rfa_i, data.train, spec, cfg.seed);

  // score the test set: clean (label 0) and attacked (label 1)
  Rng ar(Rng(cfg.seed).split("detect-attack").seed());
  Tensor adv =
      spec.family == AttackFamily::fgsm
          ? fgsm(net, data.test.images, data.test.labels, spec.epsilon)
          : pgd_input(net, data.test.images, data.test.labels, spec.epsilon,
                      spec.k, spec.norm, spec.rand_init, ar);
  auto clean_scores = det.score(detector_features(net, rfa_i, data.test.images));
  auto adv_scores = det.score(detector_features(net, rfa_i, adv));

  std::vector<double> scores;
  std::vector<int> labels;
  std::ostringstream csv;
  csv << "sample_index,clean_score,adv_score\n";
  for (std::size_t i = 0; i < clean_scores.size(); ++i) {
    csv << i << "," << clean_scores[i] << "," << adv_scores[i] << "\n";
    scores.push_back(clean_scores[i]);
    labels.push_back(0);
    scores.push_back(adv_scores[i]);
    labels.push_back(1);
  }
  write_text(out_path(cfg, "detect_scores.csv").string(), csv.str());

  RocCurve curve = roc(scores, labels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    int pred = scores[i] >= det.threshold ? 1 : 0;
    if (pred == labels[i]) ++correct;
  }

  json report = report_stamp(cfg);
  report["auc"] = curve.auc;
  report["tnr_at_95_tpr"] = curve.tnr_at_95_tpr;
  report["threshold"] = det.threshold;
  report["accuracy_at_threshold"] =
      static_cast<double>(correct) / static_cast<double>(scores.size());
  report["control"] = (spec.epsilon == 0.0);  // no attack: AUC ~ 0.5 expected
  write_text(out_path(cfg, "detect_report.json").string(), report.dump(2));
  return 0;
}

int cmd_calibrate(const ExperimentConfig& cfg) {
  Splits data = load_splits(cfg);
  SplitNet net = require_backbone(cfg);
  BatchPlan plan;
  plan.batch_size = cfg.train.batch_size;

  json table = json::object();
  for (std::size_t g : cfg.metrics.g_list) {
    Rng rng(Rng(cfg.seed).split("calibrate").split(g).seed());
    auto bs = batches(data.train, plan);
    auto cal = calibrate_eta(net, bs, g, cfg.attack.epsilon, cfg.attack.k, rng);
    table[std::to_string(g)] = {{"eta", cal.eta},
                                {"mu_abs", cal.mu_abs},
                                {"max_delta_inf", cal.max_delta_inf},
                                {"batches_used", cal.batches_used},
                                {"samples_used", cal.samples_used}};
  }
  json report = report_stamp(cfg);
  report["epsilon"] = cfg.attack.epsilon;
  report["k"] = cfg.attack.k;
  report["eta_table"] = table;
  write_text(out_path(cfg, "calibration.json").string(), report.dump(2));
  return 0;
}

int run_cli(const std::string& command, const ExperimentConfig& config) {
  try {
    if (command == "pretrain") return cmd_pretrain(config);
    if (command == "train") return cmd_train(config);
    if (command == "eval") return cmd_eval(config);
    if (command == "prop1") return cmd_prop1(config);
    if (command == "detect") return cmd_detect(config);
    if (command == "calibrate") return cmd_calibrate(config);
    throw ConfigError("unknown command: " + command);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 1;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return 2;
  }
}

}  // namespace rfa

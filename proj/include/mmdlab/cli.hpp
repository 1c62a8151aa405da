// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment runner. A JSON config (defaults below, optionally merged with a
// file, then `--set a.b=v` overrides) drives one subcommand. Every command
// writes into <output_dir>/<command>/ together with the resolved config.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mmdlab/data.hpp"
#include "mmdlab/denoiser.hpp"
#include "mmdlab/eval.hpp"
#include "mmdlab/features.hpp"
#include "mmdlab/finetune.hpp"
#include "mmdlab/io.hpp"
#include "mmdlab/mmd.hpp"
#include "mmdlab/sampler.hpp"
#include "mmdlab/schedule.hpp"

namespace mmdlab::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// The documented schema: every accepted key appears here with its default.
inline Json default_config() {
  return Json::parse(R"({
    "seed": 0,
    "output_dir": "runs/ring8",
    "checkpoint": "",
    "dataset": {"kind": "ring8", "n": 20000, "heldout_ratio": 0.2},
    "schedule": {"T": 100, "beta_start": 0.0001, "beta_end": 0.02},
    "denoiser": {"width": 128, "depth": 4, "time_embedding": 32},
    "pretrain": {"iterations": 20000, "batch": 128, "lr": 0.0002},
    "finetune": {
      "budgets": [5, 10, 20],
      "schedule_method": "linear",
      "sampler": "ddim",
      "kernel": "cubic",
      "rbf_sigma": null,
      "feature_map": "identity",
      "lr": 5e-06,
      "iterations": 500,
      "batch": 128,
      "eval_every": 100,
      "checkpointing": true
    },
    "features": {
      "randproj_dim": 16,
      "encoder": {"hidden": 32, "features": 8, "iterations": 2000, "input_noise": 0.1, "lr": 0.001}
    },
    "eval": {
      "budgets": [5, 10, 20, 100],
      "sampler": "ddim",
      "n": 4000,
      "reps": 3,
      "kernel": "cubic",
      "rbf_sigma": null,
      "feature_map": "encoder",
      "ffd_feature_map": "encoder",
      "metrics": ["mmd2", "ffd", "precision_recall"],
      "k": 3
    },
    "sample": {"n": 1000, "budget": 5, "sampler": "ddim"},
    "interpolate": {"pairs": 8, "budget": 5},
    "audit": {"n": 500, "K": 5},
    "ablate": {
      "kernels": ["linear", "cubic", "rbf"],
      "budgets": [5, 10, 20],
      "schedule_methods": ["linear", "quadratic"],
      "schedule_budgets": [5, 10],
      "samplers": ["ddpm", "ddim"]
    }
  })");
}

namespace detail {

inline std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::stringstream ss(path);
  std::string p;
  while (std::getline(ss, p, '.')) parts.push_back(p);
  return parts;
}

/// Recursive merge of `src` into `dst`; unknown keys are rejected.
inline void merge(Json& dst, const Json& src, const std::string& prefix) {
  if (!src.is_object()) throw ConfigError((prefix.empty() ? "config" : prefix) + ": expected an object");
  for (const auto& [key, value] : src.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!dst.contains(key)) throw ConfigError(path + ": unknown config key");
    if (dst[key].is_object()) {
      merge(dst[key], value, path);
    } else {
      dst[key] = value;
    }
  }
}

}  // namespace detail

/// Apply one `a.b=v` override. `v` is parsed as JSON when possible, else kept
/// as a string.
inline void apply_override(Json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json* node = &cfg;
  for (const auto& part : detail::split_path(path)) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError(path + ": unknown config key");
    node = &(*node)[part];
  }
  if (node->is_object()) throw ConfigError(path + ": cannot override a whole section");
  Json value = Json::parse(text, nullptr, false);
  *node = value.is_discarded() ? Json(text) : value;
}

inline Json resolve_config(const std::optional<fs::path>& file, const std::vector<std::string>& sets) {
  Json cfg = default_config();
  if (file) {
    std::string text;
    try {
      text = read_file(*file);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config file: ") + e.what());
    }
    Json user = Json::parse(text, nullptr, false);
    if (user.is_discarded()) throw ConfigError("config file " + file->string() + ": invalid JSON");
    detail::merge(cfg, user, "");
  }
  for (const auto& s : sets) apply_override(cfg, s);
  return cfg;
}

namespace detail {

template <class V>
V field(const Json& cfg, const std::string& path) {
  const Json* node = &cfg;
  for (const auto& part : split_path(path)) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError(path + ": missing");
    node = &(*node)[part];
  }
  try {
    return node->get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + ": wrong type (" + node->dump() + ")");
  }
}

inline std::optional<double> optional_double(const Json& cfg, const std::string& path) {
  const Json* node = &cfg;
  for (const auto& part : split_path(path)) node = &(*node)[part];
  if (node->is_null()) return std::nullopt;
  return field<double>(cfg, path);
}

inline void check(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path + ": " + what);
}

template <class F>
auto parse_enum(const Json& cfg, const std::string& path, F parse) {
  try {
    return parse(field<std::string>(cfg, path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace detail

struct ExperimentConfig {
  Json raw;
  std::uint64_t seed = 0;
  fs::path output_dir;
  std::string checkpoint;

  ToyKind dataset_kind = ToyKind::ring8;
  std::size_t dataset_n = 0;
  double heldout_ratio = 0.2;

  int T = 100;
  double beta_start = 1e-4, beta_end = 2e-2;
  DenoiserSpec denoiser;
  PretrainConfig pretrain;

  std::vector<int> ft_budgets;
  SubsetMethod ft_method = SubsetMethod::linear;
  SamplerKind ft_sampler = SamplerKind::ddim;
  KernelSpec ft_kernel;
  FeatureKind ft_features = FeatureKind::identity;
  double ft_lr = 5e-6;
  long ft_iterations = 500;
  std::size_t ft_batch = 128;
  long ft_eval_every = 0;
  bool ft_checkpointing = true;

  std::size_t randproj_dim = 16;
  EncoderConfig encoder;

  std::vector<int> eval_budgets;
  SamplerKind eval_sampler = SamplerKind::ddim;
  std::size_t eval_n = 0;
  int eval_reps = 1;
  KernelSpec eval_kernel;
  FeatureKind eval_features = FeatureKind::encoder;
  FeatureKind ffd_features = FeatureKind::encoder;
  std::vector<std::string> eval_metrics;
  std::size_t eval_k = 3;

  std::size_t sample_n = 0;
  int sample_budget = 5;
  SamplerKind sample_sampler = SamplerKind::ddim;
  std::size_t interp_pairs = 0;
  int interp_budget = 5;
  std::size_t audit_n = 0;
  std::size_t audit_K = 5;

  std::vector<KernelKind> ablate_kernels;
  std::vector<int> ablate_budgets;
  std::vector<SubsetMethod> ablate_methods;
  std::vector<int> ablate_schedule_budgets;
  std::vector<SamplerKind> ablate_samplers;

  NoiseSchedule schedule() const { return make_schedule(T, beta_start, beta_end); }

  FinetuneConfig finetune_config(int budget) const {
    FinetuneConfig c;
    c.subset = select_timesteps(ft_method, T, budget);
    c.sampler = ft_sampler;
    c.kernel = ft_kernel;
    c.adam.lr = ft_lr;
    c.batch = ft_batch;
    c.iterations = ft_iterations;
    c.checkpointing = ft_checkpointing;
    c.eval_every = ft_eval_every;
    return c;
  }

  fs::path checkpoint_path() const {
    return checkpoint.empty() ? output_dir / "pretrain" / "model.ckpt" : fs::path(checkpoint);
  }

  static ExperimentConfig from_json(const Json& j) {
    using detail::check;
    using detail::field;
    ExperimentConfig c;
    c.raw = j;
    check(j.contains("seed") && j["seed"].is_number_integer() && j["seed"].get<long long>() >= 0,
          "seed", "a non-negative integer is required");
    c.seed = j["seed"].get<std::uint64_t>();
    c.output_dir = field<std::string>(j, "output_dir");
    check(!c.output_dir.empty(), "output_dir", "must not be empty");
    c.checkpoint = field<std::string>(j, "checkpoint");

    c.dataset_kind = detail::parse_enum(j, "dataset.kind", parse_toy_kind);
    const long n = field<long>(j, "dataset.n");
    check(n >= 4, "dataset.n", "must be >= 4");
    c.dataset_n = static_cast<std::size_t>(n);
    c.heldout_ratio = field<double>(j, "dataset.heldout_ratio");
    check(c.heldout_ratio > 0.0 && c.heldout_ratio < 1.0, "dataset.heldout_ratio", "must be in (0,1)");

    c.T = field<int>(j, "schedule.T");
    check(c.T >= 1, "schedule.T", "must be >= 1");
    c.beta_start = field<double>(j, "schedule.beta_start");
    c.beta_end = field<double>(j, "schedule.beta_end");
    check(c.beta_start > 0.0 && c.beta_start <= c.beta_end && c.beta_end < 1.0, "schedule",
          "need 0 < beta_start <= beta_end < 1");

    auto positive = [&](const std::string& path) {
      const long v = field<long>(j, path);
      check(v >= 1, path, "must be >= 1");
      return static_cast<std::size_t>(v);
    };
    c.denoiser = DenoiserSpec{2, positive("denoiser.width"), positive("denoiser.depth"),
                              positive("denoiser.time_embedding")};
    check(c.denoiser.time_embedding % 2 == 0, "denoiser.time_embedding", "must be even");

    c.pretrain.iterations = static_cast<long>(positive("pretrain.iterations"));
    c.pretrain.batch = positive("pretrain.batch");
    c.pretrain.adam.lr = field<double>(j, "pretrain.lr");
    check(c.pretrain.adam.lr > 0.0, "pretrain.lr", "must be positive");

    auto budgets = [&](const std::string& path) {
      auto b = field<std::vector<int>>(j, path);
      check(!b.empty(), path, "must not be empty");
      for (int v : b) check(v >= 1 && v <= c.T, path, "budget " + std::to_string(v) + " outside [1, T]");
      return b;
    };
    c.ft_budgets = budgets("finetune.budgets");
    c.ft_method = detail::parse_enum(j, "finetune.schedule_method", parse_subset_method);
    c.ft_sampler = detail::parse_enum(j, "finetune.sampler", parse_sampler_kind);
    c.ft_kernel.kind = detail::parse_enum(j, "finetune.kernel", parse_kernel_kind);
    c.ft_kernel.sigma = detail::optional_double(j, "finetune.rbf_sigma");
    check(!c.ft_kernel.sigma || *c.ft_kernel.sigma > 0.0, "finetune.rbf_sigma", "must be positive");
    c.ft_features = detail::parse_enum(j, "finetune.feature_map", parse_feature_kind);
    c.ft_lr = field<double>(j, "finetune.lr");
    check(c.ft_lr > 0.0, "finetune.lr", "must be positive");
    c.ft_iterations = static_cast<long>(positive("finetune.iterations"));
    c.ft_batch = positive("finetune.batch");
    check(c.ft_batch >= 2, "finetune.batch", "must be >= 2");
    c.ft_eval_every = field<long>(j, "finetune.eval_every");
    check(c.ft_eval_every >= 0, "finetune.eval_every", "must be >= 0");
    c.ft_checkpointing = field<bool>(j, "finetune.checkpointing");
    for (int b : c.ft_budgets) {
      try {
        select_timesteps(c.ft_method, c.T, b);
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("finetune.budgets: ") + e.what());
      }
    }

    c.randproj_dim = positive("features.randproj_dim");
    c.encoder.hidden = positive("features.encoder.hidden");
    c.encoder.features = positive("features.encoder.features");
    c.encoder.iterations = static_cast<long>(positive("features.encoder.iterations"));
    c.encoder.input_noise = field<double>(j, "features.encoder.input_noise");
    c.encoder.lr = field<double>(j, "features.encoder.lr");

    c.eval_budgets = budgets("eval.budgets");
    c.eval_sampler = detail::parse_enum(j, "eval.sampler", parse_sampler_kind);
    c.eval_n = positive("eval.n");
    check(c.eval_n >= 2, "eval.n", "must be >= 2");
    c.eval_reps = static_cast<int>(positive("eval.reps"));
    c.eval_kernel.kind = detail::parse_enum(j, "eval.kernel", parse_kernel_kind);
    c.eval_kernel.sigma = detail::optional_double(j, "eval.rbf_sigma");
    check(!c.eval_kernel.sigma || *c.eval_kernel.sigma > 0.0, "eval.rbf_sigma", "must be positive");
    c.eval_features = detail::parse_enum(j, "eval.feature_map", parse_feature_kind);
    c.ffd_features = detail::parse_enum(j, "eval.ffd_feature_map", parse_feature_kind);
    c.eval_metrics = field<std::vector<std::string>>(j, "eval.metrics");
    for (const auto& m : c.eval_metrics) {
      check(m == "mmd2" || m == "ffd" || m == "precision_recall", "eval.metrics",
            "unknown metric '" + m + "' (mmd2|ffd|precision_recall)");
    }
    c.eval_k = positive("eval.k");
    check(c.eval_k < c.eval_n, "eval.k", "must be smaller than eval.n");
    const auto heldout = static_cast<std::size_t>(
        std::llround(static_cast<double>(c.dataset_n) * c.heldout_ratio));
    check(heldout >= c.eval_n, "eval.n",
          "exceeds the held-out pool (" + std::to_string(heldout) + " rows)");

    c.sample_n = positive("sample.n");
    c.sample_budget = field<int>(j, "sample.budget");
    check(c.sample_budget >= 1 && c.sample_budget <= c.T, "sample.budget", "outside [1, T]");
    c.sample_sampler = detail::parse_enum(j, "sample.sampler", parse_sampler_kind);
    c.interp_pairs = positive("interpolate.pairs");
    c.interp_budget = field<int>(j, "interpolate.budget");
    check(c.interp_budget >= 1 && c.interp_budget <= c.T, "interpolate.budget", "outside [1, T]");
    c.audit_n = positive("audit.n");
    c.audit_K = positive("audit.K");

    for (const auto& k : field<std::vector<std::string>>(j, "ablate.kernels")) {
      c.ablate_kernels.push_back(detail::parse_enum(Json{{"k", k}}, "k", parse_kernel_kind));
    }
    c.ablate_budgets = budgets("ablate.budgets");
    for (const auto& m : field<std::vector<std::string>>(j, "ablate.schedule_methods")) {
      c.ablate_methods.push_back(detail::parse_enum(Json{{"m", m}}, "m", parse_subset_method));
    }
    c.ablate_schedule_budgets = budgets("ablate.schedule_budgets");
    for (auto m : c.ablate_methods) {
      for (int b : c.ablate_schedule_budgets) {
        try {
          select_timesteps(m, c.T, b);
        } catch (const ConfigError& e) {
          throw ConfigError(std::string("ablate.schedule_budgets: ") + e.what());
        }
      }
    }
    for (const auto& s : field<std::vector<std::string>>(j, "ablate.samplers")) {
      c.ablate_samplers.push_back(detail::parse_enum(Json{{"s", s}}, "s", parse_sampler_kind));
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// Shared experiment state
// ---------------------------------------------------------------------------

/// RNG stream tags, so every consumer of the seed draws independently.
enum Stream : std::uint64_t {
  kPretrain = 1,
  kEncoder = 2,
  kFinetune = 3,
  kEval = 4,
  kSample = 5,
  kInterpolate = 6,
  kAudit = 7,
};

inline Rng stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t sub = 0) {
  return make_rng(seed, stream * 1000003ULL + sub);
}

/// Dataset split, schedule and frozen feature maps, all fixed by the config.
struct Lab {
  ExperimentConfig cfg;
  NoiseSchedule sched;
  Split<float> split;
  FeatureMap<float> encoder;

  explicit Lab(ExperimentConfig c)
      : cfg(std::move(c)), sched(cfg.schedule()), split(), encoder() {
    const auto ds = make_dataset<float>(cfg.dataset_kind, cfg.dataset_n, cfg.seed);
    split = split_dataset(ds.points, cfg.heldout_ratio, cfg.seed);
    Rng rng = stream_rng(cfg.seed, kEncoder);
    encoder = train_encoder(split.train, cfg.encoder, rng);
  }

  FeatureMap<float> features(FeatureKind kind) const {
    switch (kind) {
      case FeatureKind::identity: return identity_features<float>(2);
      case FeatureKind::randproj: return random_projection<float>(2, cfg.randproj_dim, cfg.seed);
      case FeatureKind::encoder: return encoder;
    }
    return identity_features<float>(2);
  }
};

struct EvalRow {
  std::string run_id;
  MetricReport report;
  std::string kernel;
  std::string feature_map;
  int budget = 0;
  std::string sampler;
};

/// Per repetition: one generated batch and one held-out draw, shared by all
/// requested metrics.
inline std::vector<EvalRow> evaluate(const Lab& lab, const DenoiserParams<float>& params,
                                     const TimestepSubset& subset, SamplerKind kind,
                                     const std::string& run_id,
                                     const std::vector<std::string>& metrics, Rng& rng) {
  const auto& c = lab.cfg;
  const auto fm = lab.features(c.eval_features), ffm = lab.features(c.ffd_features);
  std::vector<double> mmd, ffd, prec, rec;
  for (int r = 0; r < c.eval_reps; ++r) {
    const Tensor<float> gen = sample_chain(params, subset, kind, c.eval_n, lab.sched, rng).x0;
    const Tensor<float> real = subsample_rows(lab.split.heldout, c.eval_n, rng);
    for (const auto& m : metrics) {
      if (m == "mmd2") {
        mmd.push_back(mmd2_unbiased(featurize(fm, gen), featurize(fm, real), c.eval_kernel, true).value);
      } else if (m == "ffd") {
        ffd.push_back(frechet_feature_distance(featurize(ffm, gen), featurize(ffm, real)).value);
      } else if (m == "precision_recall") {
        const auto pr = knn_precision_recall(featurize(fm, real), featurize(fm, gen), c.eval_k);
        prec.push_back(pr.precision);
        rec.push_back(pr.recall);
      }
    }
  }
  std::vector<EvalRow> rows;
  const int b = static_cast<int>(subset.budget());
  const std::string kernel = to_string(c.eval_kernel.kind), s = to_string(kind);
  if (!mmd.empty()) rows.push_back({run_id, summarize("heldout_mmd2", mmd), kernel, to_string(c.eval_features), b, s});
  if (!ffd.empty()) rows.push_back({run_id, summarize("ffd", ffd), "none", to_string(c.ffd_features), b, s});
  if (!prec.empty()) {
    rows.push_back({run_id, summarize("precision", prec), "none", to_string(c.eval_features), b, s});
    rows.push_back({run_id, summarize("recall", rec), "none", to_string(c.eval_features), b, s});
  }
  return rows;
}

inline FinetuneResult<float> run_finetune(const Lab& lab, const DenoiserParams<float>& init,
                                          const FinetuneConfig& fc, FeatureKind features, Rng& rng,
                                          Rng* probe_rng = nullptr) {
  std::function<double(const DenoiserParams<float>&)> probe;
  if (probe_rng) {
    probe = [&](const DenoiserParams<float>& p) {
      return evaluate(lab, p, fc.subset, fc.sampler, "probe", {"mmd2"}, *probe_rng)
          .front()
          .report.value;
    };
  }
  return finetune<float>(init, fc, lab.split.train, lab.features(features), lab.sched, rng, probe);
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline std::vector<std::string> metrics_header() {
  return {"run_id", "metric", "value", "std", "reps", "kernel", "feature_map", "budget", "sampler"};
}

inline std::string metrics_csv(const std::vector<EvalRow>& rows) {
  CsvWriter w(metrics_header());
  for (const auto& r : rows) {
    w.row({r.run_id, r.report.metric, format_float(r.report.value), format_float(r.report.std),
           std::to_string(r.report.reps), r.kernel, r.feature_map, std::to_string(r.budget),
           r.sampler});
  }
  return w.str();
}

inline std::string history_csv(const FinetuneHistory& h) {
  CsvWriter w({"iteration", "loss", "heldout_mmd2", "millis"});
  for (const auto& s : h.steps) {
    w.row({std::to_string(s.iteration), format_float(s.loss),
           s.heldout_mmd2 ? format_float(*s.heldout_mmd2) : "", format_float(s.millis)});
  }
  return w.str();
}

/// Creates <output_dir>/<command>/ and freezes the resolved config there.
inline fs::path artifact_dir(const ExperimentConfig& cfg, const std::string& command) {
  const fs::path dir = cfg.output_dir / command;
  fs::create_directories(dir);
  write_file_atomic(dir / "config.json", cfg.raw.dump(2) + "\n");
  return dir;
}

/// Checkpoints are write-once.
inline void write_new_checkpoint(const DenoiserParams<float>& p, const fs::path& path) {
  if (fs::exists(path)) {
    throw std::runtime_error("refusing to overwrite existing checkpoint " + path.string());
  }
  serialize_model(p, path);
}

inline void write_sidecar(const fs::path& csv, Json meta) {
  write_file_atomic(fs::path(csv.string() + ".meta.json"), meta.dump(2) + "\n");
}

inline DenoiserParams<float> load_checkpoint(const ExperimentConfig& cfg) {
  const fs::path path = cfg.checkpoint_path();
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  auto p = deserialize_model(path);
  if (p.spec.dim != 2) throw std::runtime_error("checkpoint " + path.string() + " is not 2-D");
  return p;
}

/// Runs jobs in order, or concurrently when jobs > 1. Results keep job order.
template <class R>
std::vector<R> run_jobs(const std::vector<std::function<R()>>& work, int jobs) {
  std::vector<R> out(work.size());
  if (jobs <= 1) {
    for (std::size_t i = 0; i < work.size(); ++i) out[i] = work[i]();
    return out;
  }
  for (std::size_t start = 0; start < work.size(); start += static_cast<std::size_t>(jobs)) {
    std::vector<std::future<R>> running;
    const std::size_t end = std::min(work.size(), start + static_cast<std::size_t>(jobs));
    for (std::size_t i = start; i < end; ++i) running.push_back(std::async(std::launch::async, work[i]));
    for (std::size_t i = start; i < end; ++i) out[i] = running[i - start].get();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct Context {
  ExperimentConfig cfg;
  int jobs = 1;
  std::ostream* log = &std::cout;
};

inline void print_rows(std::ostream& os, const std::vector<EvalRow>& rows) {
  for (const auto& r : rows) {
    os << r.run_id << " " << r.report.metric << " = " << format_float(r.report.value) << " +- "
       << format_float(r.report.std) << "\n";
  }
}

inline int cmd_pretrain(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto dir = artifact_dir(c, "pretrain");
  const auto ckpt = dir / "model.ckpt";
  if (fs::exists(ckpt)) throw std::runtime_error("refusing to overwrite existing checkpoint " + ckpt.string());
  const auto ds = make_dataset<float>(c.dataset_kind, c.dataset_n, c.seed);
  const auto split = split_dataset(ds.points, c.heldout_ratio, c.seed);
  for (const auto& [name, rows] : {std::pair{"train", &split.train}, std::pair{"heldout", &split.heldout}}) {
    const fs::path csv = dir / (std::string(name) + ".csv");
    write_file_atomic(csv, matrix_csv(*rows, coord_header(2)));
    write_sidecar(csv, Json{{"dataset", to_string(c.dataset_kind)}, {"split", name},
                            {"seed", c.seed}, {"heldout_ratio", c.heldout_ratio},
                            {"standardization_mean", ds.standardization.mean},
                            {"standardization_scale", ds.standardization.scale}});
  }

  Rng rng = stream_rng(c.seed, kPretrain);
  const auto init = init_denoiser<float>(c.denoiser, rng);
  const auto res = pretrain(init, split.train, c.schedule(), c.pretrain, rng);
  CsvWriter w({"iteration", "loss"});
  for (std::size_t i = 0; i < res.loss_history.size(); ++i) {
    w.row({std::to_string(i), format_float(res.loss_history[i])});
  }
  w.save(dir / "loss.csv");
  write_new_checkpoint(res.params, ckpt);
  *ctx.log << "pretrain: wrote " << ckpt.string() << "\n";
  return 0;
}

inline std::string ft_name(int budget, SamplerKind s) {
  return "b" + std::to_string(budget) + "_" + to_string(s);
}

inline int cmd_finetune(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto init = load_checkpoint(c);
  const auto dir = artifact_dir(c, "finetune");
  for (int b : c.ft_budgets) {
    const auto ckpt = dir / ("finetuned_" + ft_name(b, c.ft_sampler) + ".ckpt");
    if (fs::exists(ckpt)) throw std::runtime_error("refusing to overwrite existing checkpoint " + ckpt.string());
  }
  const Lab lab(c);
  std::vector<std::function<int()>> work;
  std::mutex log_mu;
  for (std::size_t i = 0; i < c.ft_budgets.size(); ++i) {
    work.push_back([&, i] {
      const int b = c.ft_budgets[i];
      Rng rng = stream_rng(c.seed, kFinetune, i);
      Rng probe = stream_rng(c.seed, kEval, 1000 + i);
      const auto res = run_finetune(lab, init, c.finetune_config(b), c.ft_features, rng,
                                    c.ft_eval_every > 0 ? &probe : nullptr);
      const std::string name = ft_name(b, c.ft_sampler);
      write_file_atomic(dir / ("history_" + name + ".csv"), history_csv(res.history));
      write_new_checkpoint(res.params, dir / ("finetuned_" + name + ".ckpt"));
      std::lock_guard lock(log_mu);
      *ctx.log << "finetune: budget " << b << " final loss "
               << format_float(res.history.steps.back().loss) << "\n";
      return 0;
    });
  }
  run_jobs(work, ctx.jobs);
  return 0;
}

inline int cmd_sample(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto params = load_checkpoint(c);
  const auto dir = artifact_dir(c, "sample");
  Rng rng = stream_rng(c.seed, kSample);
  const auto subset = select_timesteps(SubsetMethod::linear, c.T, c.sample_budget);
  const auto x = sample_chain(params, subset, c.sample_sampler, c.sample_n, c.schedule(), rng).x0;
  write_file_atomic(dir / "samples.csv", matrix_csv(x, coord_header(2)));
  write_sidecar(dir / "samples.csv",
                Json{{"checkpoint", c.checkpoint_path().string()}, {"budget", c.sample_budget},
                     {"sampler", to_string(c.sample_sampler)}, {"n", c.sample_n}, {"seed", c.seed},
                     {"space", "standardized"}});
  *ctx.log << "sample: wrote " << (dir / "samples.csv").string() << "\n";
  return 0;
}

inline int cmd_eval(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto params = load_checkpoint(c);
  const Lab lab(c);
  const auto dir = artifact_dir(c, "eval");
  std::vector<std::function<std::vector<EvalRow>()>> work;
  for (std::size_t i = 0; i < c.eval_budgets.size(); ++i) {
    work.push_back([&, i] {
      // Same stream for every budget: paired x_T and held-out draws.
      Rng rng = stream_rng(c.seed, kEval);
      const auto subset = select_timesteps(SubsetMethod::linear, c.T, c.eval_budgets[i]);
      return evaluate(lab, params, subset, c.eval_sampler, "eval", c.eval_metrics, rng);
    });
  }
  std::vector<EvalRow> rows;
  for (auto& r : run_jobs(work, ctx.jobs)) rows.insert(rows.end(), r.begin(), r.end());
  write_file_atomic(dir / "metrics.csv", metrics_csv(rows));
  print_rows(*ctx.log, rows);
  return 0;
}

/// Finetune `init` under `fc`, then report held-out MMD^2 (eval kernel and features).
inline EvalRow finetune_and_score(const Lab& lab, const DenoiserParams<float>& init,
                                  const FinetuneConfig& fc, bool do_finetune,
                                  const std::string& run_id) {
  // Every grid cell sees the same draws, so cells differ only in their setting.
  Rng ft_rng = stream_rng(lab.cfg.seed, kFinetune);
  Rng ev_rng = stream_rng(lab.cfg.seed, kEval);
  const auto params =
      do_finetune ? run_finetune(lab, init, fc, lab.cfg.ft_features, ft_rng).params : init;
  return evaluate(lab, params, fc.subset, fc.sampler, run_id, {"mmd2"}, ev_rng).front();
}

inline int run_grid(const Context& ctx, const std::string& command,
                    const std::vector<std::function<EvalRow(const Lab&, const DenoiserParams<float>&)>>& grid) {
  const auto& c = ctx.cfg;
  const auto init = load_checkpoint(c);
  const Lab lab(c);
  const auto dir = artifact_dir(c, command);
  std::vector<std::function<EvalRow()>> work;
  for (const auto& g : grid) work.push_back([&, g] { return g(lab, init); });
  const auto rows = run_jobs(work, ctx.jobs);
  write_file_atomic(dir / "metrics.csv", metrics_csv(rows));
  print_rows(*ctx.log, rows);
  return 0;
}

inline int cmd_ablate_kernels(const Context& ctx) {
  const auto& c = ctx.cfg;
  std::vector<std::function<EvalRow(const Lab&, const DenoiserParams<float>&)>> grid;
  for (auto k : c.ablate_kernels) {
    for (int b : c.ablate_budgets) {
      grid.push_back([k, b](const Lab& lab, const DenoiserParams<float>& init) {
        FinetuneConfig fc = lab.cfg.finetune_config(b);
        fc.kernel = KernelSpec{k, lab.cfg.ft_kernel.sigma};
        return finetune_and_score(lab, init, fc, true,
                                  "kernel-" + to_string(k) + "-b" + std::to_string(b));
      });
    }
  }
  return run_grid(ctx, "ablate-kernels", grid);
}

inline int cmd_ablate_schedule(const Context& ctx) {
  const auto& c = ctx.cfg;
  std::vector<std::function<EvalRow(const Lab&, const DenoiserParams<float>&)>> grid;
  for (auto m : c.ablate_methods) {
    for (int b : c.ablate_schedule_budgets) {
      grid.push_back([m, b](const Lab& lab, const DenoiserParams<float>& init) {
        FinetuneConfig fc = lab.cfg.finetune_config(b);
        fc.subset = select_timesteps(m, lab.cfg.T, b);
        return finetune_and_score(lab, init, fc, true,
                                  "schedule-" + to_string(m) + "-b" + std::to_string(b));
      });
    }
  }
  return run_grid(ctx, "ablate-schedule", grid);
}

inline int cmd_ablate_sampler(const Context& ctx) {
  const auto& c = ctx.cfg;
  std::vector<std::function<EvalRow(const Lab&, const DenoiserParams<float>&)>> grid;
  for (bool ft : {false, true}) {
    for (auto s : c.ablate_samplers) {
      for (int b : c.ablate_budgets) {
        grid.push_back([s, b, ft](const Lab& lab, const DenoiserParams<float>& init) {
          FinetuneConfig fc = lab.cfg.finetune_config(b);
          fc.sampler = s;
          const std::string id =
              "sampler-" + to_string(s) + (ft ? "+mmd" : "") + "-b" + std::to_string(b);
          return finetune_and_score(lab, init, fc, ft, id);
        });
        }
    }
  }
  return run_grid(ctx, "ablate-sampler", grid);
}

inline int cmd_interpolate(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto params = load_checkpoint(c);
  const auto dir = artifact_dir(c, "interpolate");
  Rng rng = stream_rng(c.seed, kInterpolate);
  const auto a = randn<float>(c.interp_pairs, 2, rng), b = randn<float>(c.interp_pairs, 2, rng);
  const auto subset = select_timesteps(SubsetMethod::linear, c.T, c.interp_budget);
  constexpr int kSteps = 11;
  Tensor<float> x_T = Tensor<float>::matrix(c.interp_pairs * kSteps, 2);
  for (std::size_t p = 0; p < c.interp_pairs; ++p) {
    const std::vector<double> u{a(p, 0), a(p, 1)}, v{b(p, 0), b(p, 1)};
    for (int s = 0; s < kSteps; ++s) {
      const auto z = slerp(u, v, s / 10.0);
      x_T(p * kSteps + s, 0) = static_cast<float>(z[0]);
      x_T(p * kSteps + s, 1) = static_cast<float>(z[1]);
    }
  }
  const auto x0 = run_chain(params, subset, SamplerKind::ddim, ChainNoise<float>{x_T, {}}, c.schedule());
  CsvWriter w({"pair", "alpha", "z0", "z1", "x0", "x1"});
  for (std::size_t i = 0; i < x0.rows(); ++i) {
    w.row({std::to_string(i / kSteps), format_float(static_cast<double>(i % kSteps) / 10.0),
           format_float(x_T(i, 0)), format_float(x_T(i, 1)), format_float(x0(i, 0)),
           format_float(x0(i, 1))});
  }
  w.save(dir / "interpolation.csv");
  write_sidecar(dir / "interpolation.csv",
                Json{{"checkpoint", c.checkpoint_path().string()}, {"budget", c.interp_budget},
                     {"sampler", "ddim"}, {"pairs", c.interp_pairs}, {"seed", c.seed}});
  *ctx.log << "interpolate: wrote " << (dir / "interpolation.csv").string() << "\n";
  return 0;
}

inline int cmd_nn_audit(const Context& ctx) {
  const auto& c = ctx.cfg;
  const auto params = load_checkpoint(c);
  const Lab lab(c);
  const auto dir = artifact_dir(c, "nn-audit");
  if (c.audit_K > lab.split.train.rows()) throw ConfigError("audit.K: exceeds the training set size");
  Rng rng = stream_rng(c.seed, kAudit);
  const auto subset = select_timesteps(SubsetMethod::linear, c.T, c.sample_budget);
  const auto gen = sample_chain(params, subset, c.sample_sampler, c.audit_n, lab.sched, rng).x0;
  const auto table = nn_audit(gen, lab.split.train, c.audit_K, lab.features(c.eval_features));
  CsvWriter w({"query", "rank", "train_index", "distance"});
  for (std::size_t q = 0; q < table.indices.size(); ++q) {
    for (std::size_t r = 0; r < table.indices[q].size(); ++r) {
      w.row({std::to_string(q), std::to_string(r + 1), std::to_string(table.indices[q][r]),
             format_float(table.distances[q][r])});
    }
  }
  w.save(dir / "neighbors.csv");
  const double mean = mean_nearest_distance(table);
  std::vector<EvalRow> rows{{"nn-audit", summarize("mean_nn_distance", {mean}), "none",
                             to_string(c.eval_features), c.sample_budget, to_string(c.sample_sampler)}};
  write_file_atomic(dir / "metrics.csv", metrics_csv(rows));
  print_rows(*ctx.log, rows);
  return 0;
}

inline int cmd_config(const Context& ctx) {
  *ctx.log << ctx.cfg.raw.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline const std::map<std::string, std::pair<std::string, int (*)(const Context&)>>& commands() {
  static const std::map<std::string, std::pair<std::string, int (*)(const Context&)>> table{
      {"pretrain", {"Train the denoiser; writes model.ckpt and loss.csv", cmd_pretrain}},
      {"finetune", {"MMD finetuning for each finetune.budgets entry", cmd_finetune}},
      {"sample", {"Draw samples from a checkpoint", cmd_sample}},
      {"eval", {"Held-out metrics for a checkpoint at eval.budgets", cmd_eval}},
      {"ablate-kernels", {"Finetune with each kernel at each budget", cmd_ablate_kernels}},
      {"ablate-schedule", {"Linear vs quadratic timestep selection", cmd_ablate_schedule}},
      {"ablate-sampler", {"DDPM vs DDIM, with and without finetuning", cmd_ablate_sampler}},
      {"interpolate", {"Slerp between noise pairs, decoded with DDIM", cmd_interpolate}},
      {"nn-audit", {"Nearest training neighbours of generated samples", cmd_nn_audit}},
      {"config", {"Print the resolved config", cmd_config}},
  };
  return table;
}

/// Exit status: 0 success, 1 runtime failure, 2 configuration error.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"mmdlab: MMD finetuning of diffusion models on toy data"};
  app.require_subcommand(1);
  std::string config_file;
  std::vector<std::string> sets;
  int jobs = 1;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, entry] : commands()) {
    auto* sub = app.add_subcommand(name, entry.first);
    sub->add_option("-c,--config", config_file, "JSON config merged over the defaults");
    sub->add_option("--set", sets, "Override one key, e.g. --set finetune.lr=1e-4");
    sub->add_option("--parallel", jobs, "Independent sub-runs to execute concurrently")
        ->check(CLI::PositiveNumber);
    subs[name] = sub;
  }
  std::vector<const char*> argv{"mmdlab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "mmdlab: " << e.what() << "\n";
    return 2;
  }
  try {
    Context ctx{ExperimentConfig::from_json(resolve_config(
                    config_file.empty() ? std::nullopt : std::optional<fs::path>(config_file), sets)),
                jobs, &out};
    for (const auto& [name, sub] : subs) {
      if (sub->parsed()) return commands().at(name).second(ctx);
    }
    return 2;
  } catch (const ConfigError& e) {
    err << "mmdlab: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "mmdlab: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mmdlab::cli

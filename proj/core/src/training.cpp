#include "latentcsi/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <random>
#include <sstream>

#include "latentcsi/error.hpp"
#include "latentcsi/fileutil.hpp"
#include "latentcsi/nn/adam.hpp"
#include "latentcsi/weights_io.hpp"

namespace latentcsi {

using nlohmann::json;
namespace fs = std::filesystem;

const char* target_name(TargetKind k) { return k == TargetKind::kLatent ? "latent" : "pixel"; }

TargetKind parse_target(const std::string& s) {
  if (s == "latent") return TargetKind::kLatent;
  if (s == "pixel") return TargetKind::kPixel;
  throw InvalidArgument("target must be 'latent' or 'pixel', got '" + s + "'");
}

void validate(const TrainConfig& c) {
  if (!(c.lr > 0)) throw InvalidArgument("train: lr must be > 0");
  if (c.patience < 1) throw InvalidArgument("train: patience must be >= 1");
  if (c.batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
  if (c.max_epochs < 1) throw InvalidArgument("train: max_epochs must be >= 1");
  if (c.seeds.empty()) throw InvalidArgument("train: seeds must be nonempty");
  auto sorted = c.seeds;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw InvalidArgument("train: seeds must be distinct");
  }
}

// ------------------------------------------------------------------ stopping

EarlyStopper::EarlyStopper(int patience) : patience_(patience) {
  if (patience < 1) throw InvalidArgument("patience must be >= 1");
}

bool EarlyStopper::observe(double val_loss) {
  ++epoch_;
  improved_ = epoch_ == 1 || val_loss < best_;
  if (improved_) {
    best_ = val_loss;
    best_epoch_ = epoch_;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  return since_best_ >= patience_;
}

// ------------------------------------------------------------------ reports

double TrainReport::mean_epoch_seconds() const {
  if (epochs.empty()) return 0;
  double s = 0;
  for (const auto& e : epochs) s += e.seconds;
  return s / epochs.size();
}

std::string report_json(const TrainReport& r) {
  json ep = json::array();
  for (const auto& e : r.epochs) {
    ep.push_back({{"epoch", e.epoch},
                  {"train_loss", e.train_loss},
                  {"val_loss", e.val_loss},
                  {"seconds", e.seconds}});
  }
  json j = {{"seed", r.seed},
            {"target", target_name(r.target)},
            {"epochs", ep},
            {"stopped_epoch", r.stopped_epoch},
            {"best_epoch", r.best_epoch},
            {"best_val", r.best_val},
            {"test_loss", r.test_loss},
            {"param_count", r.param_count},
            {"sec_per_epoch", r.mean_epoch_seconds()},
            {"checkpoint", r.checkpoint}};
  return j.dump();
}

TrainReport report_from_json(const std::string& line) {
  try {
    const json j = json::parse(line);
    TrainReport r;
    r.seed = j.at("seed");
    r.target = parse_target(j.at("target"));
    for (const auto& e : j.at("epochs")) {
      r.epochs.push_back({e.at("epoch"), e.at("train_loss"), e.at("val_loss"), e.at("seconds")});
    }
    r.stopped_epoch = j.at("stopped_epoch");
    r.best_epoch = j.at("best_epoch");
    r.best_val = j.at("best_val");
    r.test_loss = j.at("test_loss");
    r.param_count = j.at("param_count");
    r.checkpoint = j.value("checkpoint", "");
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("train report: ") + e.what());
  }
}

std::vector<TrainReport> load_reports(const fs::path& jsonl) {
  std::istringstream in(read_file(jsonl));
  std::vector<TrainReport> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(report_from_json(line));
    } catch (const ParseError& e) {
      throw ParseError(jsonl.string() + " line " + std::to_string(n) + ": " + e.what(), n);
    }
  }
  return out;
}

// ------------------------------------------------------------------ targets

const LatentTensor& TargetCache::at(const std::string& sample_id) const {
  auto it = index.find(sample_id);
  if (it == index.end()) throw InvalidArgument("no latent target for sample " + sample_id);
  return latents[it->second];
}

namespace {

void reindex(TargetCache& c) {
  c.index.clear();
  for (std::size_t i = 0; i < c.sample_ids.size(); ++i) c.index.emplace(c.sample_ids[i], i);
}

std::optional<TargetCache> try_load_cache(const fs::path& path, const std::string& identity,
                                          const std::vector<std::string>& ids) {
  if (!fs::exists(path)) return std::nullopt;
  WeightFile wf = load_weights(path);
  const json meta = json::parse(wf.meta_json);
  if (meta.value("backend_identity", "") != identity) return std::nullopt;
  if (meta.at("sample_ids").get<std::vector<std::string>>() != ids) return std::nullopt;
  const auto& p = wf.params.at("latents");
  if (p.shape.size() != 4 || static_cast<std::size_t>(p.shape[0]) != ids.size()) return std::nullopt;
  TargetCache c;
  c.backend_identity = identity;
  c.sample_ids = ids;
  const std::size_t per = static_cast<std::size_t>(p.shape[1]) * p.shape[2] * p.shape[3];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    LatentTensor z(p.shape[1], p.shape[2], p.shape[3]);
    std::copy_n(p.value.begin() + i * per, per, z.data.begin());
    c.latents.push_back(std::move(z));
  }
  reindex(c);
  return c;
}

}  // namespace

TargetCache precompute_latent_targets(const Dataset& ds, const LatentBackend& backend,
                                      const std::optional<fs::path>& cache_path) {
  const BackendInfo info = backend.info();
  std::vector<std::string> ids;
  for (const auto& e : ds.manifest.entries) ids.push_back(e.sample_id);
  if (ds.images.size() != ids.size()) {
    for (std::size_t i = ds.images.size(); i < ids.size(); ++i) {
      throw IoError("missing image for sample " + ids[i]);
    }
  }
  if (cache_path) {
    if (auto c = try_load_cache(*cache_path, info.identity, ids)) return *c;
  }
  TargetCache c;
  c.backend_identity = info.identity;
  c.sample_ids = ids;
  c.latents = backend.encode_means(ds.images);
  if (info.latent_scale != 1.0f) {
    for (auto& z : c.latents) {
      for (auto& v : z.data) v *= info.latent_scale;
    }
  }
  c.computed = c.latents.size();
  reindex(c);
  if (cache_path) {
    nn::ParamSet<float> ps;
    auto& p = ps.add("latents", {static_cast<int>(ids.size()), info.latent_channels,
                                 info.latent_height, info.latent_width});
    std::size_t off = 0;
    for (const auto& z : c.latents) {
      std::copy(z.data.begin(), z.data.end(), p.value.begin() + off);
      off += z.size();
    }
    json meta = {{"backend_identity", info.identity}, {"sample_ids", ids}};
    save_weights(*cache_path, ps, meta.dump());
  }
  return c;
}

// ------------------------------------------------------------------ training

std::vector<float> model_inputs(const Dataset& ds, const std::vector<std::size_t>& idx) {
  const auto& stats = ds.manifest.norm_stats;
  std::vector<float> x;
  x.reserve(idx.size() * stats.mean.size());
  for (std::size_t i : idx) {
    const auto v = normalize(ds.amplitudes.at(i), stats);
    x.insert(x.end(), v.values.begin(), v.values.end());
  }
  return x;
}

namespace {

using Clock = std::chrono::steady_clock;

// Flattened regression targets aligned with dataset indices.
std::vector<std::vector<float>> build_targets(const Dataset& ds, const ModelSpec& spec,
                                              TargetKind kind, const TargetCache* cache) {
  std::vector<std::vector<float>> out(ds.manifest.entries.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (kind == TargetKind::kLatent) {
      if (!cache) throw InvalidArgument("latent training requires precomputed targets");
      out[i] = cache->at(ds.manifest.entries[i].sample_id).data;
    } else {
      out[i] = to_planar(ds.images.at(i));
    }
    if (out[i].size() != spec.out_numel()) {
      throw ShapeError("target for " + ds.manifest.entries[i].sample_id + " has " +
                       std::to_string(out[i].size()) + " values, model outputs " +
                       std::to_string(spec.out_numel()));
    }
  }
  return out;
}

struct Batch {
  std::vector<float> x, y;
  int n = 0;
};

Batch gather(const std::vector<float>& inputs, int s, const std::vector<std::vector<float>>& targets,
             const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
  Batch b;
  b.n = static_cast<int>(end - begin);
  for (std::size_t k = begin; k < end; ++k) {
    const std::size_t i = idx[k];
    b.x.insert(b.x.end(), inputs.begin() + i * s, inputs.begin() + (i + 1) * s);
    b.y.insert(b.y.end(), targets[i].begin(), targets[i].end());
  }
  return b;
}

double split_loss(const EncoderWeights& w, const ModelSpec& spec, const std::vector<float>& inputs,
                  const std::vector<std::vector<float>>& targets,
                  const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0;
  double sum = 0;
  constexpr std::size_t kEvalBatch = 64;
  for (std::size_t s = 0; s < idx.size(); s += kEvalBatch) {
    const std::size_t e = std::min(idx.size(), s + kEvalBatch);
    Batch b = gather(inputs, spec.s, targets, idx, s, e);
    nn::Tape<float> t(false);
    nn::Binder<float> bind(t, w);
    nn::Var y = model_forward(bind, spec, t.constant({b.n, spec.s}, b.x));
    sum += static_cast<double>(t.value(t.mean_sq_error(y, b.y))[0]) * b.n;
  }
  return sum / idx.size();
}

std::vector<float> all_inputs(const Dataset& ds) {
  std::vector<std::size_t> all(ds.manifest.entries.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return model_inputs(ds, all);
}

}  // namespace

TrainResult train(const Dataset& ds, const ModelSpec& spec, const TrainConfig& cfg,
                  std::uint64_t seed, const TargetCache* targets) {
  validate(cfg);
  validate(spec);
  if (static_cast<int>(ds.manifest.norm_stats.mean.size()) != spec.s) {
    throw ShapeError("dataset has " + std::to_string(ds.manifest.norm_stats.mean.size()) +
                     " subcarriers, model expects " + std::to_string(spec.s));
  }
  if (cfg.target == TargetKind::kPixel && spec.kind != ModelSpec::Kind::kBaseline) {
    throw InvalidArgument("pixel targets require the baseline model");
  }
  if (cfg.target == TargetKind::kLatent && spec.kind != ModelSpec::Kind::kEncoder) {
    throw InvalidArgument("latent targets require the encoder model");
  }
  auto train_idx = ds.manifest.indices(Split::kTrain);
  const auto val_idx = ds.manifest.indices(Split::kVal);
  const auto test_idx = ds.manifest.indices(Split::kTest);
  if (train_idx.empty()) throw InvalidArgument("train: training split is empty");

  const auto inputs = all_inputs(ds);
  const auto ys = build_targets(ds, spec, cfg.target, targets);

  TrainResult res;
  EncoderWeights w = build_model(spec, seed);
  EncoderWeights best = w;
  nn::Adam opt(w, nn::AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps});
  std::mt19937_64 rng(seed);
  EarlyStopper stop(cfg.patience);
  auto& rep = res.report;
  rep.seed = seed;
  rep.target = cfg.target;
  rep.param_count = w.scalar_count();

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double sum = 0;
    int batch = 0;
    for (std::size_t s = 0; s < train_idx.size(); s += cfg.batch_size, ++batch) {
      const std::size_t e = std::min(train_idx.size(), s + cfg.batch_size);
      Batch b = gather(inputs, spec.s, ys, train_idx, s, e);
      w.zero_grad();
      nn::Tape<float> t;
      nn::Binder<float> bind(t, w);
      nn::Var loss = t.mean_sq_error(model_forward(bind, spec, t.constant({b.n, spec.s}, b.x)), b.y);
      const double lv = t.value(loss)[0];
      if (!std::isfinite(lv)) {
        throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch) +
                                  ", batch " + std::to_string(batch),
                              epoch, batch);
      }
      t.backward(loss);
      opt.step();
      sum += lv * b.n;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = sum / train_idx.size();
    rec.val_loss = val_idx.empty() ? rec.train_loss : split_loss(w, spec, inputs, ys, val_idx);
    rec.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    rep.epochs.push_back(rec);
    const bool halt = stop.observe(rec.val_loss);
    if (stop.improved()) best = w;
    if (cfg.verbose) {
      std::fprintf(stderr, "[%s seed %llu] epoch %d train %.6f val %.6f%s (%.2fs)\n",
                   target_name(cfg.target), static_cast<unsigned long long>(seed), epoch,
                   rec.train_loss, rec.val_loss, stop.improved() ? " *" : "", rec.seconds);
    }
    if (halt) break;
  }
  rep.stopped_epoch = stop.epochs_seen();
  rep.best_epoch = stop.best_epoch();
  rep.best_val = stop.best_val();
  rep.test_loss = split_loss(best, spec, inputs, ys, test_idx);
  res.weights = std::move(best);
  return res;
}

double evaluate_loss(const Dataset& ds, const ModelSpec& spec, const EncoderWeights& w,
                     TargetKind target, const TargetCache* targets, Split split) {
  const auto inputs = all_inputs(ds);
  const auto ys = build_targets(ds, spec, target, targets);
  return split_loss(w, spec, inputs, ys, ds.manifest.indices(split));
}

double mean_predictor_loss(const Dataset& ds, TargetKind target, const TargetCache* targets,
                           Split split) {
  const auto train_idx = ds.manifest.indices(Split::kTrain);
  const auto eval_idx = ds.manifest.indices(split);
  if (train_idx.empty() || eval_idx.empty()) throw InvalidArgument("mean predictor: empty split");
  auto value = [&](std::size_t i) -> std::vector<float> {
    if (target == TargetKind::kLatent) {
      if (!targets) throw InvalidArgument("mean predictor: latent targets required");
      return targets->at(ds.manifest.entries[i].sample_id).data;
    }
    return to_planar(ds.images.at(i));
  };
  std::vector<double> mean;
  for (std::size_t i : train_idx) {
    const auto v = value(i);
    if (mean.empty()) mean.assign(v.size(), 0.0);
    for (std::size_t j = 0; j < v.size(); ++j) mean[j] += v[j];
  }
  for (auto& m : mean) m /= train_idx.size();
  double sum = 0;
  for (std::size_t i : eval_idx) {
    const auto v = value(i);
    for (std::size_t j = 0; j < v.size(); ++j) sum += (v[j] - mean[j]) * (v[j] - mean[j]);
  }
  return sum / (static_cast<double>(eval_idx.size()) * mean.size());
}

// ------------------------------------------------------------------ protocol

std::string checkpoint_meta(const ModelSpec& spec, const TrainReport& r, const NormStats& stats) {
  json j = {{"format", "latentcsi-checkpoint"},
            {"model", json::parse(spec_json(spec))},
            {"target", target_name(r.target)},
            {"seed", r.seed},
            {"best_epoch", r.best_epoch},
            {"best_val", r.best_val},
            {"test_loss", r.test_loss},
            {"norm_stats", {{"mean", stats.mean}, {"std", stats.std}}}};
  return j.dump();
}

void save_checkpoint(const fs::path& path, const ModelSpec& spec, const EncoderWeights& w,
                     const TrainReport& r, const NormStats& stats) {
  save_weights(path, w, checkpoint_meta(spec, r, stats));
}

Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
  WeightFile wf = load_weights(path);
  try {
    const json j = json::parse(wf.meta_json);
    if (j.value("format", "") != "latentcsi-checkpoint") {
      throw ParseError(path.string() + " is not a model checkpoint");
    }
    Checkpoint c;
    c.spec = spec_from_json(j.at("model").dump());
    c.target = parse_target(j.at("target"));
    c.seed = j.at("seed");
    c.norm_stats.mean = j.at("norm_stats").at("mean").get<std::vector<float>>();
    c.norm_stats.std = j.at("norm_stats").at("std").get<std::vector<float>>();
    const auto layout = model_layout(c.spec);
    for (const auto& d : layout.decls()) {
      if (!wf.params.contains(d.name) || wf.params.at(d.name).shape != d.shape) {
        throw ShapeError("checkpoint " + path.string() + ": parameter " + d.name +
                         " missing or misshaped");
      }
    }
    c.weights = std::move(wf.params);
    return c;
  } catch (const json::exception& e) {
    throw ParseError("checkpoint " + path.string() + ": " + e.what());
  }
}

ProtocolResult run_protocol(const Dataset& ds, const ModelSpec& spec, const TrainConfig& cfg,
                            const TargetCache* targets, const std::optional<fs::path>& out_dir) {
  validate(cfg);
  ProtocolResult pr;
  if (out_dir) fs::create_directories(*out_dir);
  std::string jsonl;
  for (std::uint64_t seed : cfg.seeds) {
    TrainResult r = train(ds, spec, cfg, seed, targets);
    if (out_dir) {
      const fs::path ck = *out_dir / ("seed_" + std::to_string(seed) + ".lcsw");
      r.report.checkpoint = ck.filename().string();
      save_checkpoint(ck, spec, r.weights, r.report, ds.manifest.norm_stats);
    }
    jsonl += report_json(r.report) + "\n";
    pr.reports.push_back(std::move(r.report));
    pr.all_weights.push_back(std::move(r.weights));
  }
  for (std::size_t i = 1; i < pr.reports.size(); ++i) {
    if (pr.reports[i].test_loss < pr.reports[pr.selected].test_loss) pr.selected = i;
  }
  pr.selected_weights = pr.all_weights[pr.selected];
  if (out_dir) {
    write_file(*out_dir / "reports.jsonl", jsonl);
    save_checkpoint(*out_dir / "selected.lcsw", spec, pr.selected_weights, pr.reports[pr.selected],
                    ds.manifest.norm_stats);
  }
  return pr;
}

// ------------------------------------------------------------------ gradient check

EncoderConfig tiny_encoder_config() {
  EncoderConfig c;
  c.s = 8;
  c.b = 8;
  c.d = 1;
  c.latent_channels = 4;
  c.init_spatial = 4;
  c.attention_blocks = {1};
  c.ctx_tokens = 2;
  c.ctx_dim = 4;
  c.kernel = 3;
  return c;
}

GradCheckResult gradient_check(const ModelSpec& spec, std::uint64_t seed, double eps, int batch) {
  if (!(eps > 0)) throw InvalidArgument("gradient_check: eps must be > 0");
  nn::ParamSet<double> params = build_model(spec, seed).cast<double>();
  std::mt19937_64 rng(seed ^ 0x6c8e9cf570932bd5ULL);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> x(static_cast<std::size_t>(batch) * spec.s);
  for (auto& v : x) v = nd(rng);
  std::vector<double> target(static_cast<std::size_t>(batch) * spec.out_numel());
  for (auto& v : target) v = nd(rng);
  // Randomize zero-initialized biases and norm shifts so every parameter
  // sees a generic operating point.
  for (auto& p : params.params()) {
    bool all_const = true;
    for (double v : p.value) all_const = all_const && v == p.value.front();
    if (all_const) {
      for (auto& v : p.value) v += 0.1 * nd(rng);
    }
  }

  auto loss = [&](nn::Tape<double>& t, nn::ParamSet<double>& ps) {
    nn::Binder<double> b(t, ps);
    return t.sq_error_sum(model_forward(b, spec, t.constant({batch, spec.s}, x)), target);
  };

  params.zero_grad();
  {
    nn::Tape<double> t;
    t.backward(loss(t, params));
  }
  double gmax = 0;
  for (const auto& p : params.params()) {
    for (double g : p.grad) gmax = std::max(gmax, std::abs(g));
  }
  const double floor = std::max(1e-3 * gmax, 1e-12);

  GradCheckResult r;
  for (auto& p : params.params()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double a = p.grad.empty() ? 0.0 : p.grad[i];
      const double v = p.value[i];
      auto eval = [&](double xv) {
        p.value[i] = xv;
        nn::Tape<double> t(false);
        return t.value(loss(t, params))[0];
      };
      const double num = (eval(v + eps) - eval(v - eps)) / (2 * eps);
      p.value[i] = v;
      const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst_param = p.name + "[" + std::to_string(i) + "]";
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace latentcsi

#pragma once

// Encoder and baseline training: latent-target cache, mini-batch Adam with
// early stopping, the seeded multi-run protocol, and gradient verification.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "latentcsi/csi_data.hpp"
#include "latentcsi/encoder.hpp"
#include "latentcsi/latent_backend.hpp"

namespace latentcsi {

enum class TargetKind { kLatent, kPixel };
const char* target_name(TargetKind k);
TargetKind parse_target(const std::string& s);

struct TrainConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int patience = 5;
  int max_epochs = 200;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  TargetKind target = TargetKind::kLatent;
  bool verbose = false;
};
void validate(const TrainConfig& c);

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation loss than the running best.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience);
  /// Records the loss of the next epoch (1-based); true when training
  /// should stop after this epoch.
  bool observe(double val_loss);
  bool improved() const { return improved_; }
  int best_epoch() const { return best_epoch_; }
  double best_val() const { return best_; }
  int epochs_seen() const { return epoch_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int since_best_ = 0;
  bool improved_ = false;
  double best_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double seconds = 0;
};

struct TrainReport {
  std::uint64_t seed = 0;
  TargetKind target = TargetKind::kLatent;
  std::vector<EpochRecord> epochs;
  int stopped_epoch = 0;
  int best_epoch = 0;
  double best_val = 0;
  double test_loss = 0;
  std::size_t param_count = 0;
  std::string checkpoint;  // path of the persisted best-epoch weights, when written

  double mean_epoch_seconds() const;
};
std::string report_json(const TrainReport& r);
TrainReport report_from_json(const std::string& line);

/// Encoder regression targets: one scaled posterior mean per sample.
struct TargetCache {
  std::string backend_identity;
  std::vector<std::string> sample_ids;
  std::vector<LatentTensor> latents;
  std::size_t computed = 0;  // latents computed (not loaded) by the last call
  std::unordered_map<std::string, std::size_t> index;

  const LatentTensor& at(const std::string& sample_id) const;
};

/// Computes targets for every manifest sample, or loads them from
/// `cache_path` when it holds targets for the same backend identity and
/// sample ids. Writes the cache when a path is given.
TargetCache precompute_latent_targets(const Dataset& ds, const LatentBackend& backend,
                                      const std::optional<std::filesystem::path>& cache_path = {});

struct TrainResult {
  EncoderWeights weights;  // best-epoch weights
  TrainReport report;
};

/// One seeded training run. Latent targets are required for
/// TargetKind::kLatent; pixel targets come from the dataset images.
TrainResult train(const Dataset& ds, const ModelSpec& spec, const TrainConfig& cfg,
                  std::uint64_t seed, const TargetCache* targets);

/// Mean squared error of a model over a split.
double evaluate_loss(const Dataset& ds, const ModelSpec& spec, const EncoderWeights& w,
                     TargetKind target, const TargetCache* targets, Split split);

/// Test MSE of predicting the training-split mean target for every sample.
double mean_predictor_loss(const Dataset& ds, TargetKind target, const TargetCache* targets,
                           Split split = Split::kTest);

struct ProtocolResult {
  std::vector<TrainReport> reports;
  std::size_t selected = 0;  // argmin test loss
  EncoderWeights selected_weights;
  std::vector<EncoderWeights> all_weights;
};

/// One training run per seed; selects the run with the lowest test loss.
/// With `out_dir`, writes reports.jsonl, seed_<k>.lcsw, and selected.lcsw.
ProtocolResult run_protocol(const Dataset& ds, const ModelSpec& spec, const TrainConfig& cfg,
                            const TargetCache* targets,
                            const std::optional<std::filesystem::path>& out_dir = {});

std::vector<TrainReport> load_reports(const std::filesystem::path& jsonl);

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst_param;
};

/// Analytic vs central-difference gradients of sum((f(x) - target)^2) over
/// every parameter, in double precision. The per-scalar error is
/// |a - n| / max(|a|, |n|, 1e-3 * max_j |a_j|).
GradCheckResult gradient_check(const ModelSpec& spec, std::uint64_t seed, double eps = 1e-5,
                               int batch = 2);

/// The small configuration used for gradient verification:
/// s=8, b=8, d=1, latent 4x8x8, m=2, e=4, 3x3 kernels, attention in block 1.
EncoderConfig tiny_encoder_config();

/// Weight-file meta for a trained model.
std::string checkpoint_meta(const ModelSpec& spec, const TrainReport& r, const NormStats& stats);
struct Checkpoint {
  ModelSpec spec;
  EncoderWeights weights;
  NormStats norm_stats;
  TargetKind target = TargetKind::kLatent;
  std::uint64_t seed = 0;
};
void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                     const EncoderWeights& w, const TrainReport& r, const NormStats& stats);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Normalized network input rows for the given dataset indices.
std::vector<float> model_inputs(const Dataset& ds, const std::vector<std::size_t>& idx);

}  // namespace latentcsi

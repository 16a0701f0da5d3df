#pragma once

// CSI ingestion, normalization, splitting, and the synthetic paired-data
// generator.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "latentcsi/image.hpp"

namespace latentcsi {

struct ComplexCsiFrame {
  std::vector<float> re;
  std::vector<float> im;
  double timestamp = 0.0;
  std::string link_id;
};

struct AmplitudeVector {
  std::vector<float> values;
  bool operator==(const AmplitudeVector&) const = default;
};

struct NormStats {
  std::vector<float> mean;
  std::vector<float> std;
};

/// Smallest standard deviation used by normalize().
inline constexpr float kMinStd = 1e-6f;
/// Default CSI/image pairing tolerance in seconds.
inline constexpr double kSyncTolerance = 0.050;

enum class Split { kUnassigned, kTrain, kVal, kTest };
const char* split_name(Split s);
Split parse_split(const std::string& s);

/// Axis-aligned pixel box.
struct PixelBox {
  int x = 0, y = 0, w = 0, h = 0;
  bool operator==(const PixelBox&) const = default;
};

struct SyntheticSceneState {
  double pos_x = 0.5;  // [0,1], fraction of image width
  double pos_y = 0.5;  // [0,1], fraction of image height
  double theta = 0.0;  // [0, 2pi), image coordinates (y down)
};

struct ManifestEntry {
  std::string sample_id;
  std::size_t csi_index = 0;  // frame index in the manifest's CSIF file
  std::string image_path;     // relative to the manifest directory
  Split split = Split::kUnassigned;
  double csi_timestamp = 0.0;
  double image_timestamp = 0.0;
  std::string caption;
  std::optional<PixelBox> subject_box;
  std::optional<SyntheticSceneState> state;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  int subcarriers = 0;
  int image_width = 0;
  int image_height = 0;
  NormStats norm_stats;
  std::uint64_t split_seed = 0;
  std::string csi_file = "frames.csif";
  std::string stats_file = "stats.csv";
  std::filesystem::path root;  // directory the relative paths resolve against

  std::size_t count(Split s) const;
  std::vector<std::size_t> indices(Split s) const;
};

/// Manifest plus everything it references, held in memory. Samples are
/// aligned with `manifest.entries`.
struct Dataset {
  DatasetManifest manifest;
  std::vector<ComplexCsiFrame> frames;
  std::vector<AmplitudeVector> amplitudes;
  std::vector<RgbImage> images;
};

struct PairedSample {
  std::string sample_id;
  AmplitudeVector csi;
  RgbImage image;
  Split split = Split::kUnassigned;
};
PairedSample paired_sample(const Dataset& ds, std::size_t i);

// ----------------------------------------------------------------- ops

/// Elementwise magnitude. Rejects non-finite input naming the subcarrier.
AmplitudeVector amplitude(const ComplexCsiFrame& frame);

/// (x - mean) / max(std, 1e-6) per subcarrier.
AmplitudeVector normalize(const AmplitudeVector& x, const NormStats& stats);
/// Affine inverse of normalize() with the same clamp.
AmplitudeVector denormalize(const AmplitudeVector& x, const NormStats& stats);

/// Per-subcarrier mean and population std over the training split; std
/// entries are clamped to >= 1e-6.
NormStats fit_norm_stats(const std::vector<AmplitudeVector>& amplitudes,
                         const DatasetManifest& manifest);

struct SplitRatios {
  double train = 0.8, val = 0.1, test = 0.1;
};
struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};
/// train = floor(r_train*n), val = floor(r_val*n), test = the remainder.
SplitCounts split_counts(std::size_t n, SplitRatios ratios = {});
/// Seeded uniform shuffle, then the first block is train, the next val, the
/// rest test. Records `seed` in the manifest.
DatasetManifest split_dataset(DatasetManifest manifest, SplitRatios ratios, std::uint64_t seed);

struct SyntheticConfig {
  int image_size = 64;
  int subcarriers = 64;
  int paths = 8;
  double csi_noise = 0.01;
  double margin = 0.2;          // positions drawn from [margin, 1-margin]
  double subject_length = 0.28; // fractions of image size
  double subject_width = 0.14;
  SplitRatios ratios{};
};

void validate(const SyntheticConfig& cfg);

/// Fixed multipath geometry drawn once per generated dataset.
struct MultipathEnvironment {
  std::vector<double> base_delay, delay_dx, delay_dy;
  std::vector<double> gain, orient_phase;
  double orient_depth = 0.5;
};
MultipathEnvironment draw_environment(int paths, std::uint64_t seed);

/// Noise-free multipath response
///   x_c[k] = sum_j a_j(theta) exp(i 2pi f_k tau_j(pos)), f_k = k/s,
/// with tau_j affine in position and a_j = g_j (1 + depth cos(theta - phi_j)).
ComplexCsiFrame multipath_response(const MultipathEnvironment& env, const SyntheticSceneState& st,
                                   int subcarriers);

/// Plain background with a filled oriented rectangle (lighter head end)
/// centred at (pos_x*W, pos_y*H). `mask`, when given, receives 1 for
/// subject pixels.
RgbImage render_scene(const SyntheticSceneState& st, const SyntheticConfig& cfg,
                      std::vector<unsigned char>* mask = nullptr);
/// Bounding box of the rotated rectangle plus a 1 px margin, at least 8 px.
PixelBox subject_box(const SyntheticSceneState& st, const SyntheticConfig& cfg);
std::string scene_caption(const SyntheticSceneState& st);

/// Deterministic under seed. The manifest has splits and training-split
/// normalization statistics filled in; root is empty until written.
Dataset generate_synthetic(std::size_t n, std::uint64_t seed, const SyntheticConfig& cfg);

// ----------------------------------------------------------------- I/O

/// Rows of 2s+1 numbers: timestamp then (re, im) interleaved.
std::vector<ComplexCsiFrame> import_csv(const std::filesystem::path& path, int subcarriers);
std::vector<ComplexCsiFrame> parse_csv(const std::string& text, int subcarriers);

/// "CSIF" | u32 version=1 | u32 s | u64 count | per frame f64 timestamp +
/// 2s f32 (re, im interleaved), little-endian.
std::string encode_csif(const std::vector<ComplexCsiFrame>& frames, int subcarriers);
std::vector<ComplexCsiFrame> decode_csif(const std::string& bytes, int* subcarriers = nullptr);

/// Pairs frames with the PNGs of `image_dir` (sorted by file name), one to
/// one in order. An optional `timestamps.txt` in image_dir gives one image
/// timestamp per line; each pair must then lie within `tolerance`.
Dataset pair_frames_with_images(std::vector<ComplexCsiFrame> frames,
                                const std::filesystem::path& image_dir,
                                double tolerance = kSyncTolerance);

/// Splits, fits normalization statistics, and fills amplitudes.
void finalize_dataset(Dataset& ds, SplitRatios ratios, std::uint64_t seed);

/// Writes manifest.jsonl, the stats sidecar, the CSIF file, and images/.
/// Sets manifest.root to `dir`.
void write_dataset(Dataset& ds, const std::filesystem::path& dir);
std::string manifest_text(const DatasetManifest& m);
std::string stats_text(const NormStats& s);

/// Reads manifest.jsonl (path to the file or its directory) and the stats
/// sidecar.
DatasetManifest load_manifest(const std::filesystem::path& path);
/// Loads the manifest and everything it references.
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace latentcsi

#include "latentcsi/csi_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <sstream>
#include <json.hpp>

#include "latentcsi/binary_io.hpp"
#include "latentcsi/error.hpp"
#include "latentcsi/fileutil.hpp"

namespace latentcsi {

namespace fs = std::filesystem;
using nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kUnassigned: break;
  }
  return "unassigned";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  if (s == "unassigned") return Split::kUnassigned;
  throw ParseError("unknown split '" + s + "'");
}

std::size_t DatasetManifest::count(Split s) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [s](const auto& e) { return e.split == s; }));
}

std::vector<std::size_t> DatasetManifest::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == s) out.push_back(i);
  }
  return out;
}

PairedSample paired_sample(const Dataset& ds, std::size_t i) {
  const auto& e = ds.manifest.entries.at(i);
  return PairedSample{e.sample_id, ds.amplitudes.at(i), ds.images.at(i), e.split};
}

// ----------------------------------------------------------------- amplitude & stats

AmplitudeVector amplitude(const ComplexCsiFrame& frame) {
  if (frame.re.size() != frame.im.size()) {
    throw ShapeError("csi frame: re has " + std::to_string(frame.re.size()) + " entries, im has " +
                     std::to_string(frame.im.size()));
  }
  AmplitudeVector out;
  out.values.resize(frame.re.size());
  for (std::size_t k = 0; k < frame.re.size(); ++k) {
    const double re = frame.re[k], im = frame.im[k];
    if (!std::isfinite(re) || !std::isfinite(im)) {
      throw InvalidArgument("csi frame: non-finite value at subcarrier " + std::to_string(k));
    }
    out.values[k] = static_cast<float>(std::sqrt(re * re + im * im));
  }
  return out;
}

namespace {
void check_stats(const AmplitudeVector& x, const NormStats& stats) {
  if (stats.mean.size() != x.values.size() || stats.std.size() != x.values.size()) {
    throw ShapeError("normalize: vector has " + std::to_string(x.values.size()) +
                     " subcarriers, stats have " + std::to_string(stats.mean.size()));
  }
}
}  // namespace

AmplitudeVector normalize(const AmplitudeVector& x, const NormStats& stats) {
  check_stats(x, stats);
  AmplitudeVector out;
  out.values.resize(x.values.size());
  for (std::size_t k = 0; k < x.values.size(); ++k) {
    out.values[k] = (x.values[k] - stats.mean[k]) / std::max(stats.std[k], kMinStd);
  }
  return out;
}

AmplitudeVector denormalize(const AmplitudeVector& x, const NormStats& stats) {
  check_stats(x, stats);
  AmplitudeVector out;
  out.values.resize(x.values.size());
  for (std::size_t k = 0; k < x.values.size(); ++k) {
    out.values[k] = x.values[k] * std::max(stats.std[k], kMinStd) + stats.mean[k];
  }
  return out;
}

NormStats fit_norm_stats(const std::vector<AmplitudeVector>& amplitudes,
                         const DatasetManifest& manifest) {
  const auto train = manifest.indices(Split::kTrain);
  if (train.empty()) throw InvalidArgument("norm stats: training split is empty");
  const std::size_t s = static_cast<std::size_t>(manifest.subcarriers);
  std::vector<double> mean(s, 0.0), var(s, 0.0);
  for (std::size_t i : train) {
    if (amplitudes.at(i).values.size() != s) throw ShapeError("norm stats: subcarrier mismatch");
    for (std::size_t k = 0; k < s; ++k) mean[k] += amplitudes[i].values[k];
  }
  for (auto& m : mean) m /= static_cast<double>(train.size());
  for (std::size_t i : train) {
    for (std::size_t k = 0; k < s; ++k) {
      const double d = amplitudes[i].values[k] - mean[k];
      var[k] += d * d;
    }
  }
  NormStats out;
  out.mean.resize(s);
  out.std.resize(s);
  for (std::size_t k = 0; k < s; ++k) {
    out.mean[k] = static_cast<float>(mean[k]);
    out.std[k] = std::max(static_cast<float>(std::sqrt(var[k] / train.size())), kMinStd);
  }
  return out;
}

// ----------------------------------------------------------------- splits

SplitCounts split_counts(std::size_t n, SplitRatios r) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
    throw InvalidArgument("split ratios must be nonnegative and sum to 1");
  }
  if (n < 3) throw InvalidArgument("split: need at least 3 samples, got " + std::to_string(n));
  // The epsilon absorbs representation error such as 0.8*15000 = 11999.999...
  SplitCounts c;
  c.train = static_cast<std::size_t>(std::floor(r.train * static_cast<double>(n) + 1e-9));
  c.val = static_cast<std::size_t>(std::floor(r.val * static_cast<double>(n) + 1e-9));
  c.val = std::min(c.val, n - c.train);
  c.test = n - c.train - c.val;
  return c;
}

DatasetManifest split_dataset(DatasetManifest manifest, SplitRatios ratios, std::uint64_t seed) {
  const std::size_t n = manifest.entries.size();
  const SplitCounts c = split_counts(n, ratios);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t r = 0; r < n; ++r) {
    auto& e = manifest.entries[order[r]];
    e.split = r < c.train ? Split::kTrain : (r < c.train + c.val ? Split::kVal : Split::kTest);
  }
  manifest.split_seed = seed;
  return manifest;
}

// ----------------------------------------------------------------- synthesis

void validate(const SyntheticConfig& cfg) {
  if (cfg.image_size < 16) throw InvalidArgument("synthetic: image_size must be >= 16");
  if (cfg.subcarriers < 1) throw InvalidArgument("synthetic: subcarriers must be >= 1");
  if (cfg.paths < 1) throw InvalidArgument("synthetic: paths must be >= 1");
  if (!(cfg.csi_noise >= 0)) throw InvalidArgument("synthetic: csi_noise must be >= 0");
  if (!(cfg.margin >= 0 && cfg.margin < 0.5)) throw InvalidArgument("synthetic: margin in [0,0.5)");
  if (!(cfg.subject_length > 0 && cfg.subject_width > 0 && cfg.subject_length < 1)) {
    throw InvalidArgument("synthetic: subject size must be in (0,1)");
  }
}

MultipathEnvironment draw_environment(int paths, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  MultipathEnvironment env;
  for (int j = 0; j < paths; ++j) {
    if (j == 0) {
      // Line-of-sight path unaffected by the subject.
      env.base_delay.push_back(0.0);
      env.delay_dx.push_back(0.0);
      env.delay_dy.push_back(0.0);
      env.gain.push_back(1.5);
      env.orient_phase.push_back(0.0);
      continue;
    }
    env.base_delay.push_back(0.5 + 2.0 * u01(rng));
    env.delay_dx.push_back(-3.0 + 6.0 * u01(rng));
    env.delay_dy.push_back(-3.0 + 6.0 * u01(rng));
    env.gain.push_back(0.3 + 0.7 * u01(rng));
    env.orient_phase.push_back(2.0 * std::numbers::pi * u01(rng));
  }
  return env;
}

ComplexCsiFrame multipath_response(const MultipathEnvironment& env, const SyntheticSceneState& st,
                                   int subcarriers) {
  ComplexCsiFrame f;
  f.re.assign(subcarriers, 0.0f);
  f.im.assign(subcarriers, 0.0f);
  const std::size_t paths = env.gain.size();
  for (int k = 0; k < subcarriers; ++k) {
    const double freq = static_cast<double>(k) / subcarriers;
    std::complex<double> acc = 0.0;
    for (std::size_t j = 0; j < paths; ++j) {
      const bool moving = j != 0;
      const double tau = env.base_delay[j] + env.delay_dx[j] * st.pos_x + env.delay_dy[j] * st.pos_y;
      const double a =
          env.gain[j] * (moving ? 1.0 + env.orient_depth * std::cos(st.theta - env.orient_phase[j])
                                : 1.0);
      acc += a * std::polar(1.0, 2.0 * std::numbers::pi * freq * tau);
    }
    f.re[k] = static_cast<float>(acc.real());
    f.im[k] = static_cast<float>(acc.imag());
  }
  return f;
}

namespace {
constexpr float kBackground[3] = {0.25f, 0.30f, 0.35f};
constexpr float kBody[3] = {0.85f, 0.50f, 0.25f};
constexpr float kHead[3] = {0.95f, 0.90f, 0.75f};
}  // namespace

RgbImage render_scene(const SyntheticSceneState& st, const SyntheticConfig& cfg,
                      std::vector<unsigned char>* mask) {
  const int n = cfg.image_size;
  RgbImage img(n, n);
  if (mask) mask->assign(static_cast<std::size_t>(n) * n, 0);
  const double cx = st.pos_x * n, cy = st.pos_y * n;
  const double half_len = 0.5 * cfg.subject_length * n;
  const double half_wid = 0.5 * cfg.subject_width * n;
  const double ux = std::cos(st.theta), uy = std::sin(st.theta);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double along = dx * ux + dy * uy;
      const double across = -dx * uy + dy * ux;
      const float* color = kBackground;
      if (std::abs(along) <= half_len && std::abs(across) <= half_wid) {
        color = along > 0.5 * half_len ? kHead : kBody;
        if (mask) (*mask)[static_cast<std::size_t>(y) * n + x] = 1;
      }
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = color[c];
    }
  }
  return img;
}

PixelBox subject_box(const SyntheticSceneState& st, const SyntheticConfig& cfg) {
  const int n = cfg.image_size;
  const double cx = st.pos_x * n, cy = st.pos_y * n;
  const double hl = 0.5 * cfg.subject_length * n, hw = 0.5 * cfg.subject_width * n;
  const double ux = std::cos(st.theta), uy = std::sin(st.theta);
  const double ex = std::abs(hl * ux) + std::abs(hw * uy);
  const double ey = std::abs(hl * uy) + std::abs(hw * ux);
  int x0 = static_cast<int>(std::floor(cx - ex)) - 1;
  int y0 = static_cast<int>(std::floor(cy - ey)) - 1;
  int x1 = static_cast<int>(std::ceil(cx + ex)) + 1;
  int y1 = static_cast<int>(std::ceil(cy + ey)) + 1;
  auto widen = [n](int& a, int& b) {
    while (b - a < 8) {
      if (a > 0) --a;
      if (b - a < 8 && b < n) ++b;
    }
  };
  x0 = std::max(0, x0);
  y0 = std::max(0, y0);
  x1 = std::min(n, x1);
  y1 = std::min(n, y1);
  widen(x0, x1);
  widen(y0, y1);
  return PixelBox{x0, y0, x1 - x0, y1 - y0};
}

std::string scene_caption(const SyntheticSceneState& st) {
  static const char* kCols[] = {"left", "center", "right"};
  static const char* kRows[] = {"top", "middle", "bottom"};
  static const char* kDirs[] = {"east", "south", "west", "north"};
  const int col = std::clamp(static_cast<int>(st.pos_x * 3), 0, 2);
  const int row = std::clamp(static_cast<int>(st.pos_y * 3), 0, 2);
  const double q = std::fmod(st.theta + std::numbers::pi / 4, 2 * std::numbers::pi);
  const int dir = std::clamp(static_cast<int>(q / (std::numbers::pi / 2)), 0, 3);
  return std::string("a person at the ") + kRows[row] + " " + kCols[col] + " facing " + kDirs[dir];
}

Dataset generate_synthetic(std::size_t n, std::uint64_t seed, const SyntheticConfig& cfg) {
  validate(cfg);
  if (n < 3) throw InvalidArgument("synthetic: need n >= 3");
  Dataset ds;
  auto& m = ds.manifest;
  m.subcarriers = cfg.subcarriers;
  m.image_width = m.image_height = cfg.image_size;
  const MultipathEnvironment env = draw_environment(cfg.paths, seed);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(cfg.margin, 1.0 - cfg.margin);
  std::uniform_real_distribution<double> ang(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);
  ds.frames.reserve(n);
  ds.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticSceneState st;
    st.pos_x = pos(rng);
    st.pos_y = pos(rng);
    st.theta = ang(rng);
    ComplexCsiFrame f = multipath_response(env, st, cfg.subcarriers);
    for (int k = 0; k < cfg.subcarriers; ++k) {
      f.re[k] += static_cast<float>(cfg.csi_noise * noise(rng));
      f.im[k] += static_cast<float>(cfg.csi_noise * noise(rng));
    }
    f.timestamp = 0.1 * static_cast<double>(i);
    f.link_id = "synthetic";
    ManifestEntry e;
    char id[32];
    std::snprintf(id, sizeof id, "s%06zu", i);
    e.sample_id = id;
    e.csi_index = i;
    e.image_path = "images/" + e.sample_id + ".png";
    e.csi_timestamp = e.image_timestamp = f.timestamp;
    e.caption = scene_caption(st);
    e.subject_box = subject_box(st, cfg);
    e.state = st;
    m.entries.push_back(std::move(e));
    ds.images.push_back(render_scene(st, cfg));
    ds.frames.push_back(std::move(f));
  }
  finalize_dataset(ds, cfg.ratios, seed);
  return ds;
}

void finalize_dataset(Dataset& ds, SplitRatios ratios, std::uint64_t seed) {
  ds.manifest = split_dataset(std::move(ds.manifest), ratios, seed);
  ds.amplitudes.clear();
  ds.amplitudes.reserve(ds.frames.size());
  for (const auto& f : ds.frames) ds.amplitudes.push_back(amplitude(f));
  ds.manifest.norm_stats = fit_norm_stats(ds.amplitudes, ds.manifest);
}

// ----------------------------------------------------------------- CSV

std::vector<ComplexCsiFrame> parse_csv(const std::string& text, int subcarriers) {
  if (subcarriers < 1) throw InvalidArgument("csv: subcarrier count must be >= 1");
  std::vector<ComplexCsiFrame> frames;
  const std::size_t arity = 2 * static_cast<std::size_t>(subcarriers) + 1;
  std::size_t row = 0;
  std::size_t pos = 0;
  std::vector<double> vals;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string_view line(text.data() + pos, eol - pos);
    pos = eol + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    ++row;
    vals.clear();
    std::size_t start = 0;
    while (true) {
      std::size_t comma = line.find(',', start);
      std::string_view field = line.substr(start, comma == std::string_view::npos
                                                      ? std::string_view::npos
                                                      : comma - start);
      while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
      while (!field.empty() && (field.back() == ' ' || field.back() == '\t')) field.remove_suffix(1);
      double v = 0;
      auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (field.empty() || ec != std::errc() || ptr != field.data() + field.size()) {
        throw ParseError("csv row " + std::to_string(row) + ": malformed number '" +
                             std::string(field) + "'",
                         row);
      }
      vals.push_back(v);
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (vals.size() != arity) {
      throw ParseError("csv row " + std::to_string(row) + ": expected " + std::to_string(arity) +
                           " values (timestamp + " + std::to_string(subcarriers) +
                           " re/im pairs), got " + std::to_string(vals.size()),
                       row);
    }
    ComplexCsiFrame f;
    f.timestamp = vals[0];
    f.re.resize(subcarriers);
    f.im.resize(subcarriers);
    for (int k = 0; k < subcarriers; ++k) {
      f.re[k] = static_cast<float>(vals[1 + 2 * k]);
      f.im[k] = static_cast<float>(vals[2 + 2 * k]);
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

std::vector<ComplexCsiFrame> import_csv(const fs::path& path, int subcarriers) {
  return parse_csv(read_file(path), subcarriers);
}

// ----------------------------------------------------------------- CSIF

namespace {
constexpr char kCsifMagic[4] = {'C', 'S', 'I', 'F'};
}

std::string encode_csif(const std::vector<ComplexCsiFrame>& frames, int subcarriers) {
  std::string out(kCsifMagic, 4);
  binio::put<std::uint32_t>(out, 1);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(subcarriers));
  binio::put<std::uint64_t>(out, frames.size());
  for (const auto& f : frames) {
    if (f.re.size() != static_cast<std::size_t>(subcarriers) || f.im.size() != f.re.size()) {
      throw ShapeError("csif: frame subcarrier count mismatch");
    }
    binio::put<double>(out, f.timestamp);
    for (int k = 0; k < subcarriers; ++k) {
      binio::put<float>(out, f.re[k]);
      binio::put<float>(out, f.im[k]);
    }
  }
  return out;
}

std::vector<ComplexCsiFrame> decode_csif(const std::string& bytes, int* subcarriers) {
  binio::Reader r(bytes);
  if (r.bytes(4) != std::string_view(kCsifMagic, 4)) throw ParseError("csif: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != 1) throw ParseError("csif: unsupported version " + std::to_string(version));
  const auto s = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  if (r.remaining() != count * (8 + 8ull * s)) throw ParseError("csif: size does not match header");
  std::vector<ComplexCsiFrame> frames(count);
  for (auto& f : frames) {
    f.timestamp = r.get<double>();
    f.re.resize(s);
    f.im.resize(s);
    for (std::uint32_t k = 0; k < s; ++k) {
      f.re[k] = r.get<float>();
      f.im[k] = r.get<float>();
    }
  }
  if (subcarriers) *subcarriers = static_cast<int>(s);
  return frames;
}

// ----------------------------------------------------------------- pairing

Dataset pair_frames_with_images(std::vector<ComplexCsiFrame> frames, const fs::path& image_dir,
                                double tolerance) {
  if (!fs::is_directory(image_dir)) throw IoError("image directory not found: " + image_dir.string());
  std::vector<fs::path> pngs;
  for (const auto& de : fs::directory_iterator(image_dir)) {
    if (de.is_regular_file() && de.path().extension() == ".png") pngs.push_back(de.path());
  }
  std::sort(pngs.begin(), pngs.end());
  if (pngs.size() != frames.size()) {
    throw InvalidArgument("pairing: " + std::to_string(frames.size()) + " CSI frames vs " +
                          std::to_string(pngs.size()) + " images");
  }
  std::vector<double> img_ts;
  const fs::path ts_file = image_dir / "timestamps.txt";
  if (fs::exists(ts_file)) {
    std::istringstream in(read_file(ts_file));
    double t;
    while (in >> t) img_ts.push_back(t);
    if (img_ts.size() != pngs.size()) {
      throw InvalidArgument("pairing: timestamps.txt has " + std::to_string(img_ts.size()) +
                            " entries for " + std::to_string(pngs.size()) + " images");
    }
  }
  Dataset ds;
  auto& m = ds.manifest;
  m.subcarriers = frames.empty() ? 0 : static_cast<int>(frames.front().re.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    RgbImage img = load_png(pngs[i]);
    if (i == 0) {
      m.image_width = img.width;
      m.image_height = img.height;
    } else if (img.width != m.image_width || img.height != m.image_height) {
      throw ShapeError("pairing: " + pngs[i].filename().string() + " has different dimensions");
    }
    ManifestEntry e;
    char id[32];
    std::snprintf(id, sizeof id, "s%06zu", i);
    e.sample_id = id;
    e.csi_index = i;
    e.image_path = "images/" + e.sample_id + ".png";
    e.csi_timestamp = frames[i].timestamp;
    e.image_timestamp = img_ts.empty() ? frames[i].timestamp : img_ts[i];
    if (std::abs(e.csi_timestamp - e.image_timestamp) > tolerance) {
      throw InvalidArgument("pairing: sample " + e.sample_id + " CSI/image timestamps differ by " +
                            std::to_string(std::abs(e.csi_timestamp - e.image_timestamp)) +
                            " s (tolerance " + std::to_string(tolerance) + " s)");
    }
    m.entries.push_back(std::move(e));
    ds.images.push_back(std::move(img));
  }
  ds.frames = std::move(frames);
  return ds;
}

// ----------------------------------------------------------------- manifest files

std::string manifest_text(const DatasetManifest& m) {
  std::string out;
  json header = {{"format", "latentcsi-manifest"},
                 {"version", 1},
                 {"subcarriers", m.subcarriers},
                 {"image_width", m.image_width},
                 {"image_height", m.image_height},
                 {"split_seed", m.split_seed},
                 {"csi_file", m.csi_file},
                 {"stats_file", m.stats_file},
                 {"count", m.entries.size()}};
  out += header.dump() + "\n";
  for (const auto& e : m.entries) {
    json j = {{"sample_id", e.sample_id},
              {"csi", m.csi_file + "#" + std::to_string(e.csi_index)},
              {"image", e.image_path},
              {"split", split_name(e.split)},
              {"csi_timestamp", e.csi_timestamp},
              {"image_timestamp", e.image_timestamp}};
    if (!e.caption.empty()) j["caption"] = e.caption;
    if (e.subject_box) {
      j["box"] = {e.subject_box->x, e.subject_box->y, e.subject_box->w, e.subject_box->h};
    }
    if (e.state) j["state"] = {e.state->pos_x, e.state->pos_y, e.state->theta};
    out += j.dump() + "\n";
  }
  return out;
}

std::string stats_text(const NormStats& s) {
  std::string out;
  char buf[64];
  for (std::size_t k = 0; k < s.mean.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", s.mean[k], s.std[k]);
    out += buf;
  }
  return out;
}

void write_dataset(Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "images");
  auto& m = ds.manifest;
  m.root = dir;
  write_file(dir / m.csi_file, encode_csif(ds.frames, m.subcarriers));
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    save_png(dir / m.entries[i].image_path, ds.images[i]);
  }
  write_file(dir / m.stats_file, stats_text(m.norm_stats));
  write_file(dir / "manifest.jsonl", manifest_text(m));
}

DatasetManifest load_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.jsonl" : path;
  if (!fs::exists(file)) throw IoError("manifest not found: " + file.string());
  const std::string text = read_file(file);
  DatasetManifest m;
  m.root = file.parent_path();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& ex) {
      throw ParseError("manifest line " + std::to_string(lineno) + ": " + ex.what(), lineno);
    }
    try {
      if (!have_header) {
        if (j.value("format", "") != "latentcsi-manifest") {
          throw ParseError("manifest: missing header line", lineno);
        }
        m.subcarriers = j.at("subcarriers");
        m.image_width = j.at("image_width");
        m.image_height = j.at("image_height");
        m.split_seed = j.at("split_seed");
        m.csi_file = j.at("csi_file");
        m.stats_file = j.at("stats_file");
        have_header = true;
        continue;
      }
      ManifestEntry e;
      e.sample_id = j.at("sample_id");
      const std::string csi = j.at("csi");
      const auto hash = csi.rfind('#');
      if (hash == std::string::npos) throw ParseError("manifest: csi reference lacks '#index'", lineno);
      e.csi_index = std::stoull(csi.substr(hash + 1));
      e.image_path = j.at("image");
      e.split = parse_split(j.at("split"));
      e.csi_timestamp = j.value("csi_timestamp", 0.0);
      e.image_timestamp = j.value("image_timestamp", 0.0);
      e.caption = j.value("caption", "");
      if (j.contains("box")) {
        const auto& b = j["box"];
        e.subject_box = PixelBox{b[0], b[1], b[2], b[3]};
      }
      if (j.contains("state")) {
        const auto& s = j["state"];
        e.state = SyntheticSceneState{s[0], s[1], s[2]};
      }
      m.entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw ParseError("manifest line " + std::to_string(lineno) + ": " + ex.what(), lineno);
    }
  }
  if (!have_header) throw ParseError("manifest: empty file");

  const fs::path stats = m.root / m.stats_file;
  if (fs::exists(stats)) {
    std::istringstream sin(read_file(stats));
    std::string sl;
    std::size_t sline = 0;
    while (std::getline(sin, sl)) {
      ++sline;
      if (sl.empty()) continue;
      float mean = 0, sd = 0;
      if (std::sscanf(sl.c_str(), "%f,%f", &mean, &sd) != 2) {
        throw ParseError("stats line " + std::to_string(sline) + ": expected 'mean,std'", sline);
      }
      m.norm_stats.mean.push_back(mean);
      m.norm_stats.std.push_back(std::max(sd, kMinStd));
    }
    if (m.norm_stats.mean.size() != static_cast<std::size_t>(m.subcarriers)) {
      throw ParseError("stats: expected " + std::to_string(m.subcarriers) + " rows, got " +
                       std::to_string(m.norm_stats.mean.size()));
    }
  }
  return m;
}

Dataset load_dataset(const fs::path& path) {
  Dataset ds;
  ds.manifest = load_manifest(path);
  auto& m = ds.manifest;
  int s = 0;
  const auto frames = decode_csif(read_file(m.root / m.csi_file), &s);
  if (s != m.subcarriers) throw ShapeError("csif subcarrier count differs from manifest");
  for (const auto& e : m.entries) {
    if (e.csi_index >= frames.size()) {
      throw ParseError("manifest: sample " + e.sample_id + " references missing CSI frame");
    }
    ds.frames.push_back(frames[e.csi_index]);
    ds.amplitudes.push_back(amplitude(frames[e.csi_index]));
    const fs::path img = m.root / e.image_path;
    if (!fs::exists(img)) throw IoError("missing image for sample " + e.sample_id + ": " + img.string());
    ds.images.push_back(load_png(img));
  }
  return ds;
}

}  // namespace latentcsi

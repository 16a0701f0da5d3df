#include <doctest.h>

#include <cmath>

#include "latentcsi/error.hpp"
#include "latentcsi/fileutil.hpp"
#include "latentcsi/metrics.hpp"
#include "latentcsi/toy_backend.hpp"
#include "latentcsi/training.hpp"
#include "tmpdir.hpp"

using namespace latentcsi;

namespace {

const Dataset& small_dataset() {
  static const Dataset ds = generate_synthetic(80, 13, SyntheticConfig{});
  return ds;
}

const ToyBackend& random_backend() {
  static const auto b = ToyBackend::initialize(ToyBackendConfig{}, 4);
  return *b;
}

ModelSpec small_encoder() {
  EncoderConfig c;
  c.s = 64;
  c.b = 8;
  c.d = 1;
  c.latent_channels = 4;
  c.init_spatial = 4;
  c.attention_blocks = {1};
  c.ctx_tokens = 4;
  c.ctx_dim = 8;
  return model_spec(c);
}

TrainConfig quick(int epochs) {
  TrainConfig c;
  c.max_epochs = epochs;
  c.batch_size = 16;
  c.seeds = {1};
  return c;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("early stopping waits patience epochs past the best") {
  EarlyStopper s(5);
  const double vals[] = {5, 4, 3, 3.1, 3.2, 3.3, 3.4, 3.5};
  int stopped = 0;
  for (int i = 0; i < 8; ++i) {
    if (s.observe(vals[i])) {
      stopped = i + 1;
      break;
    }
  }
  CHECK(stopped == 8);
  CHECK(s.best_epoch() == 3);
  CHECK(s.best_val() == 3.0);

  // Equal losses are not improvements.
  EarlyStopper e(2);
  CHECK_FALSE(e.observe(1.0));
  CHECK_FALSE(e.observe(1.0));
  CHECK(e.observe(1.0));
  CHECK(e.best_epoch() == 1);
  CHECK_THROWS_AS(EarlyStopper(0), InvalidArgument);
}

TEST_CASE("latent targets are cached by backend identity") {
  testsupport::TempDir dir("cache");
  const auto& ds = small_dataset();
  const auto& b = random_backend();
  const auto first = precompute_latent_targets(ds, b, dir / "t.lcsw");
  CHECK(first.latents.size() == ds.manifest.entries.size());
  CHECK(first.computed == first.latents.size());
  const auto second = precompute_latent_targets(ds, b, dir / "t.lcsw");
  CHECK(second.computed == 0);
  for (int i = 0; i < 10; ++i) {
    const auto& id = ds.manifest.entries[i].sample_id;
    LatentTensor fresh = b.encode(ds.images[i]).mu;
    for (auto& v : fresh.data) v *= b.info().latent_scale;
    CHECK(second.at(id) == first.at(id));
    // Batched and single-image encodes round differently.
    double d = 0;
    for (std::size_t j = 0; j < fresh.size(); ++j) d = std::max(d, double(std::abs(fresh.data[j] - first.at(id).data[j])));
    CHECK(d < 1e-4);
  }
  const auto other = ToyBackend::initialize(ToyBackendConfig{}, 5);
  CHECK(precompute_latent_targets(ds, *other, dir / "t.lcsw").computed == ds.manifest.entries.size());
  CHECK_THROWS_AS(first.at("nope"), InvalidArgument);
}

TEST_CASE("training on one sample lowers the loss every epoch") {
  Dataset ds = generate_synthetic(3, 2, SyntheticConfig{});
  ds.manifest.entries[0].split = Split::kTrain;
  ds.manifest.entries[1].split = Split::kVal;
  ds.manifest.entries[2].split = Split::kTest;
  const auto targets = precompute_latent_targets(ds, random_backend());
  TrainConfig c = quick(5);
  c.lr = 1e-4;
  c.patience = 10;
  const auto r = train(ds, small_encoder(), c, 3, &targets);
  REQUIRE(r.report.epochs.size() == 5);
  for (int i = 1; i < 5; ++i) CHECK(r.report.epochs[i].train_loss < r.report.epochs[i - 1].train_loss);
}

TEST_CASE("training is reproducible and returns the best epoch") {
  const auto& ds = small_dataset();
  const auto targets = precompute_latent_targets(ds, random_backend());
  const auto spec = small_encoder();
  const auto a = train(ds, spec, quick(4), 7, &targets);
  const auto b = train(ds, spec, quick(4), 7, &targets);
  REQUIRE(a.report.epochs.size() == b.report.epochs.size());
  for (std::size_t i = 0; i < a.report.epochs.size(); ++i) {
    CHECK(a.report.epochs[i].train_loss == b.report.epochs[i].train_loss);
    CHECK(a.report.epochs[i].val_loss == b.report.epochs[i].val_loss);
  }
  double best = 1e300;
  for (const auto& e : a.report.epochs) best = std::min(best, e.val_loss);
  CHECK(a.report.best_val == best);
  CHECK(a.report.stopped_epoch <= 4);
  // The returned weights reproduce the recorded best validation loss.
  CHECK(evaluate_loss(ds, spec, a.weights, TargetKind::kLatent, &targets, Split::kVal) ==
        doctest::Approx(a.report.best_val).epsilon(1e-6));
  CHECK(evaluate_loss(ds, spec, a.weights, TargetKind::kLatent, &targets, Split::kTest) ==
        doctest::Approx(a.report.test_loss).epsilon(1e-6));
}

TEST_CASE("target kind must match the model") {
  const auto& ds = small_dataset();
  TrainConfig c = quick(1);
  c.target = TargetKind::kPixel;
  CHECK_THROWS_AS(train(ds, small_encoder(), c, 1, nullptr), InvalidArgument);
  c.target = TargetKind::kLatent;
  CHECK_THROWS_AS(train(ds, small_encoder(), c, 1, nullptr), InvalidArgument);
}

TEST_CASE("non-finite losses abort with epoch and batch") {
  const auto& ds = small_dataset();
  const auto targets = precompute_latent_targets(ds, random_backend());
  TrainConfig c = quick(3);
  c.lr = 1e30;
  try {
    train(ds, small_encoder(), c, 1, &targets);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.epoch() >= 1);
    CHECK(e.batch() >= 0);
  }
}

TEST_CASE("protocol selects the lowest test loss and persists its reports") {
  testsupport::TempDir dir("proto");
  const auto& ds = small_dataset();
  const auto spec = model_spec(desk_baseline_config(64));
  TrainConfig c = quick(2);
  c.target = TargetKind::kPixel;
  c.seeds = {1, 2, 3};
  const auto pr = run_protocol(ds, spec, c, nullptr, dir.path());
  REQUIRE(pr.reports.size() == 3);
  std::size_t argmin = 0;
  for (std::size_t i = 1; i < 3; ++i) {
    if (pr.reports[i].test_loss < pr.reports[argmin].test_loss) argmin = i;
  }
  CHECK(pr.selected == argmin);

  const auto loaded = load_reports(dir / "reports.jsonl");
  REQUIRE(loaded.size() == 3);
  std::vector<double> test_losses;
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(loaded[i].seed == pr.reports[i].seed);
    CHECK(loaded[i].test_loss == pr.reports[i].test_loss);
    CHECK(loaded[i].epochs.size() == pr.reports[i].epochs.size());
    test_losses.push_back(loaded[i].test_loss);
  }
  double m = 0;
  for (double v : test_losses) m += v / 3;
  double v = 0;
  for (double x : test_losses) v += (x - m) * (x - m) / 2;
  CHECK(mean_std(test_losses).mean == doctest::Approx(m));
  CHECK(mean_std(test_losses).std == doctest::Approx(std::sqrt(v)));

  const auto ck = load_checkpoint(dir / "selected.lcsw");
  CHECK(ck.seed == pr.reports[argmin].seed);
  CHECK(ck.target == TargetKind::kPixel);
  CHECK(spec_json(ck.spec) == spec_json(spec));
  CHECK(ck.norm_stats.mean == ds.manifest.norm_stats.mean);
  for (const auto& p : pr.selected_weights.params()) CHECK(ck.weights.at(p.name).value == p.value);
}

TEST_CASE("gradient check agrees with central differences") {
  const auto tiny = model_spec(tiny_encoder_config());
  const auto r = gradient_check(tiny, 1);
  CHECK(r.checked == param_count(tiny));
  CHECK(r.max_rel_error < 1e-4);
  // Doubling the step moves the error by less than 10x either way, so the
  // check is neither truncation- nor roundoff-dominated.
  const double doubled = gradient_check(tiny, 1, 2e-5).max_rel_error;
  CHECK(doubled < 10 * r.max_rel_error);
  CHECK(r.max_rel_error < 10 * doubled);
  CHECK(gradient_check(tiny, 3).max_rel_error < 1e-4);

  EncoderConfig lin = tiny_encoder_config();
  lin.d = 0;
  lin.attention_blocks.clear();
  // The loss is quadratic in every parameter, so a large step is exact up to roundoff.
  CHECK(gradient_check(model_spec(lin), 2, 1e-2).max_rel_error < 1e-8);
}

TEST_CASE("mean predictor loss is the variance around the training mean") {
  const auto& ds = small_dataset();
  const auto targets = precompute_latent_targets(ds, random_backend());
  const double m = mean_predictor_loss(ds, TargetKind::kLatent, &targets);
  CHECK(m > 0);
  const double p = mean_predictor_loss(ds, TargetKind::kPixel, nullptr);
  CHECK(p > 0);
  CHECK_THROWS_AS(mean_predictor_loss(ds, TargetKind::kLatent, nullptr), InvalidArgument);
}

}  // TEST_SUITE

// latentcsi: synthesize or ingest paired CSI/image data, train the toy
// backend and the CSI models, evaluate, generate, and serve.
//
// Every option can also come from an INI file passed with --config; a
// [train] section sets options of the train subcommand, and so on.

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <map>
#include <thread>

#include "latentcsi/csi_data.hpp"
#include "latentcsi/error.hpp"
#include "latentcsi/fileutil.hpp"
#include "latentcsi/metrics.hpp"
#include "latentcsi/pipeline.hpp"
#include "latentcsi/service.hpp"
#include "latentcsi/toy_backend.hpp"
#include "latentcsi/training.hpp"

namespace fs = std::filesystem;
using namespace latentcsi;
using nlohmann::json;

namespace {

void print_summary(const Dataset& ds, const fs::path& dir) {
  const auto& m = ds.manifest;
  std::printf("manifest %s\n", (dir / "manifest.jsonl").c_str());
  std::printf("  samples %zu  subcarriers %d  images %dx%d\n", m.entries.size(), m.subcarriers,
              m.image_width, m.image_height);
  std::printf("  split train %zu / val %zu / test %zu\n", m.count(Split::kTrain),
              m.count(Split::kVal), m.count(Split::kTest));
  std::printf("  manifest hash %s\n", hex64(fnv1a64(manifest_text(m))).c_str());
}

std::shared_ptr<const LatentBackend> open_backend(const fs::path& p) {
  return std::shared_ptr<const LatentBackend>(load_toy_backend(p));
}

ModelSpec spec_for(const std::string& preset, TargetKind target, int s, int baseline_b) {
  if (preset == "desk") {
    return target == TargetKind::kLatent ? model_spec(desk_encoder_config(s))
                                         : model_spec(desk_baseline_config(s));
  }
  if (preset == "full") {
    return target == TargetKind::kLatent ? model_spec(full_encoder_config(s))
                                         : model_spec(full_baseline_config(s, baseline_b));
  }
  throw InvalidArgument("model: expected 'desk' or 'full', got '" + preset + "'");
}

std::vector<std::optional<PixelBox>> boxes_of(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<std::optional<PixelBox>> b;
  for (auto i : idx) b.push_back(ds.manifest.entries[i].subject_box);
  return b;
}

std::string fmt_ms(const MeanStd& m, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f(%.*f)", prec, m.mean, prec, m.std);
  return buf;
}

std::atomic<InferenceService*> g_service{nullptr};
void on_signal(int) {
  if (auto* s = g_service.load()) s->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Paired CSI/image training and CSI-driven latent diffusion generation"};
  app.set_config("--config", "", "INI file with per-subcommand sections");
  app.require_subcommand(1);
  app.fallthrough();

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic paired dataset");
  std::size_t synth_n = 2000;
  std::uint64_t synth_seed = 7;
  SyntheticConfig synth_cfg;
  std::string synth_out = "data";
  synth->add_option("--n", synth_n, "Number of samples")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--subcarriers", synth_cfg.subcarriers)->capture_default_str();
  synth->add_option("--image-size", synth_cfg.image_size)->capture_default_str();
  synth->add_option("--paths", synth_cfg.paths, "Multipath components")->capture_default_str();
  synth->add_option("--csi-noise", synth_cfg.csi_noise)->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->capture_default_str();

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Pair a CSV CSI capture with an image directory");
  std::string ingest_csv, ingest_images, ingest_out = "data";
  int ingest_s = 0;
  double ingest_tol = kSyncTolerance;
  std::uint64_t ingest_seed = 7;
  ingest->add_option("--csv", ingest_csv, "Rows: timestamp then re,im per subcarrier")->required();
  ingest->add_option("--images", ingest_images, "Directory of PNG frames")->required();
  ingest->add_option("--subcarriers", ingest_s, "Subcarriers per frame")->required();
  ingest->add_option("--tolerance", ingest_tol, "Max |t_csi - t_image| in seconds")->capture_default_str();
  ingest->add_option("--seed", ingest_seed, "Split seed")->capture_default_str();
  ingest->add_option("--out", ingest_out)->capture_default_str();

  // train-backend
  auto* tb = app.add_subcommand("train-backend", "Train the toy VAE and denoiser");
  std::string tb_data = "data", tb_out = "backend.lcsw";
  ToyTrainConfig tb_vae, tb_den;
  tb_vae.epochs = 8;
  tb_den.epochs = 8;
  tb->add_option("--data", tb_data)->capture_default_str();
  tb->add_option("--out", tb_out)->capture_default_str();
  tb->add_option("--vae-epochs", tb_vae.epochs)->capture_default_str();
  tb->add_option("--denoiser-epochs", tb_den.epochs)->capture_default_str();
  tb->add_option("--seed", tb_vae.seed)->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "Train the CSI encoder (latent) or baseline (pixel)");
  std::string tr_data = "data", tr_backend = "backend.lcsw", tr_out, tr_target = "latent",
              tr_model = "desk";
  int tr_seeds = 5, tr_baseline_b = 8;
  TrainConfig tcfg;
  tr->add_option("--data", tr_data)->capture_default_str();
  tr->add_option("--backend", tr_backend, "Needed for latent targets")->capture_default_str();
  tr->add_option("--target", tr_target, "latent or pixel")->capture_default_str();
  tr->add_option("--model", tr_model, "desk or full presets")->capture_default_str();
  tr->add_option("--baseline-b", tr_baseline_b, "Base width of the full baseline")->capture_default_str();
  tr->add_option("--seeds", tr_seeds, "Runs with seeds 1..N")->capture_default_str();
  tr->add_option("--lr", tcfg.lr)->capture_default_str();
  tr->add_option("--patience", tcfg.patience)->capture_default_str();
  tr->add_option("--batch", tcfg.batch_size)->capture_default_str();
  tr->add_option("--max-epochs", tcfg.max_epochs)->capture_default_str();
  tr->add_option("--out", tr_out, "Output directory (default runs/<target>)");
  tr->add_flag("--verbose", tcfg.verbose);

  // eval
  auto* ev = app.add_subcommand("eval", "Strength-zero metrics on the test split");
  std::string ev_data = "data", ev_backend = "backend.lcsw", ev_out = "eval";
  std::vector<std::string> ev_ckpts;
  int ev_crop = 64;
  ev->add_option("--data", ev_data)->capture_default_str();
  ev->add_option("--backend", ev_backend)->capture_default_str();
  ev->add_option("--checkpoint", ev_ckpts, "Checkpoint files or run directories")->required();
  ev->add_option("--crop-size", ev_crop)->capture_default_str();
  ev->add_option("--out", ev_out)->capture_default_str();

  // generate
  auto* gen = app.add_subcommand("generate", "Text-guided generation for one CSI sample");
  std::string gen_data = "data", gen_backend = "backend.lcsw", gen_ckpt, gen_sample,
              gen_out = "generated.png";
  Img2ImgParams gp;
  gen->add_option("--data", gen_data)->capture_default_str();
  gen->add_option("--backend", gen_backend)->capture_default_str();
  gen->add_option("--checkpoint", gen_ckpt)->required();
  gen->add_option("--sample-id", gen_sample, "Manifest sample (default: first test sample)");
  gen->add_option("--prompt", gp.prompt)->capture_default_str();
  gen->add_option("--strength", gp.strength)->capture_default_str()->check(CLI::Range(0.0, 1.0));
  gen->add_option("--steps", gp.steps)->capture_default_str()->check(CLI::Range(1, 1000));
  gen->add_option("--guidance", gp.guidance_scale)->capture_default_str();
  gen->add_option("--seed", gp.seed)->capture_default_str();
  gen->add_option("--out", gen_out)->capture_default_str();

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP inference service");
  std::string sv_data = "data", sv_backend = "backend.lcsw", sv_ckpt;
  ServiceConfig scfg;
  sv->add_option("--data", sv_data)->capture_default_str();
  sv->add_option("--backend", sv_backend)->capture_default_str();
  sv->add_option("--checkpoint", sv_ckpt)->required();
  sv->add_option("--host", scfg.host)->capture_default_str();
  sv->add_option("--port", scfg.port)->capture_default_str();
  sv->add_option("--max-concurrency", scfg.max_concurrency)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      Dataset ds = generate_synthetic(synth_n, synth_seed, synth_cfg);
      write_dataset(ds, synth_out);
      print_summary(ds, synth_out);
    } else if (*ingest) {
      Dataset ds = pair_frames_with_images(import_csv(ingest_csv, ingest_s), ingest_images, ingest_tol);
      finalize_dataset(ds, SplitRatios{}, ingest_seed);
      write_dataset(ds, ingest_out);
      print_summary(ds, ingest_out);
    } else if (*tb) {
      const Dataset ds = load_dataset(tb_data);
      ToyBackendConfig bc;
      bc.vae.image_size = ds.manifest.image_width;
      tb_vae.verbose = tb_den.verbose = true;
      tb_den.seed = tb_vae.seed;
      auto vae = train_toy_vae(ds, bc.vae, tb_vae);
      ToyBackend stage(bc, vae.params,
                       toy_denoiser_layout(bc.denoiser, bc.vae.latent_channels, bc.text.width)
                           .materialize(tb_vae.seed));
      auto den = train_toy_denoiser(ds, stage, tb_den);
      ToyBackend backend(bc, std::move(vae.params), std::move(den.params));
      save_toy_backend(tb_out, backend);
      std::printf("backend %s  identity %s\n", tb_out.c_str(), backend.info().identity.c_str());
    } else if (*tr) {
      const Dataset ds = load_dataset(tr_data);
      tcfg.target = parse_target(tr_target);
      tcfg.seeds.clear();
      for (int i = 1; i <= tr_seeds; ++i) tcfg.seeds.push_back(i);
      const fs::path out = tr_out.empty() ? fs::path("runs") / tr_target : fs::path(tr_out);
      const ModelSpec spec = spec_for(tr_model, tcfg.target, ds.manifest.subcarriers, tr_baseline_b);
      std::optional<TargetCache> cache;
      if (tcfg.target == TargetKind::kLatent) {
        auto backend = open_backend(tr_backend);
        fs::create_directories(out);
        cache = precompute_latent_targets(ds, *backend, out / "latent_targets.lcsw");
      }
      std::printf("training %s model, %zu parameters, seeds 1..%d\n", tr_target.c_str(),
                  param_count(spec), tr_seeds);
      auto pr = run_protocol(ds, spec, tcfg, cache ? &*cache : nullptr, out);
      for (const auto& r : pr.reports) {
        std::printf("  seed %llu  epochs %d (best %d)  test %.6f  %.2f s/epoch\n",
                    static_cast<unsigned long long>(r.seed), r.stopped_epoch, r.best_epoch,
                    r.test_loss, r.mean_epoch_seconds());
      }
      std::printf("selected seed %llu -> %s\n",
                  static_cast<unsigned long long>(pr.reports[pr.selected].seed),
                  (out / "selected.lcsw").c_str());
    } else if (*ev) {
      const Dataset ds = load_dataset(ev_data);
      const auto idx = ds.manifest.indices(Split::kTest);
      std::vector<AmplitudeVector> raw;
      std::vector<RgbImage> refs;
      for (auto i : idx) {
        raw.push_back(ds.amplitudes[i]);
        refs.push_back(ds.images[i]);
      }
      std::vector<fs::path> files;
      for (const auto& c : ev_ckpts) {
        if (fs::is_directory(c)) {
          for (const auto& r : load_reports(fs::path(c) / "reports.jsonl")) {
            files.push_back(fs::path(c) / r.checkpoint);
          }
        } else {
          files.emplace_back(c);
        }
      }
      std::shared_ptr<const LatentBackend> backend;
      ToyFeatureExtractor fx;
      GroundTruthDetector det(boxes_of(ds, idx));
      fs::create_directories(ev_out);
      std::map<std::string, std::vector<MetricReport>> groups;
      std::string csv = csv_header() + "\n";
      for (const auto& f : files) {
        Checkpoint ck = load_checkpoint(f);
        if (ck.target == TargetKind::kLatent && !backend) backend = open_backend(ev_backend);
        const std::string label = target_name(ck.target);
        CsiImagePipeline pl(std::move(ck), backend);
        MetricReport r = evaluate_images(refs, pl.reconstruct(raw), fx, &det, ev_crop);
        r.label = label;
        r.config = json{{"checkpoint", f.string()}, {"strength", 0.0}, {"mode", "direct decode"}}.dump();
        write_file(fs::path(ev_out) / (f.stem().string() + "_" + label + ".json"), report_json(r));
        csv += csv_row(r) + "\n";
        groups[label].push_back(std::move(r));
      }
      write_file(fs::path(ev_out) / "metrics.csv", csv);
      std::printf("%-8s %-16s %-14s %-12s %-16s %-14s %-12s\n", "method", "FID", "RMSE", "SSIM",
                  "FID(crop)", "RMSE(crop)", "SSIM(crop)");
      for (const auto& [label, rs] : groups) {
        std::vector<double> f, r, s, fc, rc, sc;
        for (const auto& m : rs) {
          f.push_back(m.full.fid);
          r.push_back(m.full.rmse);
          s.push_back(m.full.ssim);
          fc.push_back(m.crop->fid);
          rc.push_back(m.crop->rmse);
          sc.push_back(m.crop->ssim);
        }
        std::printf("%-8s %-16s %-14s %-12s %-16s %-14s %-12s\n", label.c_str(),
                    fmt_ms(mean_std(f), 4).c_str(), fmt_ms(mean_std(r), 2).c_str(),
                    fmt_ms(mean_std(s), 3).c_str(), fmt_ms(mean_std(fc), 4).c_str(),
                    fmt_ms(mean_std(rc), 2).c_str(), fmt_ms(mean_std(sc), 3).c_str());
      }
      std::printf("strength 0 (direct decode), %zu test images, extractor %s\n", refs.size(),
                  fx.identity().c_str());
    } else if (*gen) {
      const Dataset ds = load_dataset(gen_data);
      Checkpoint ck = load_checkpoint(gen_ckpt);
      std::shared_ptr<const LatentBackend> backend;
      if (ck.target == TargetKind::kLatent) backend = open_backend(gen_backend);
      CsiImagePipeline pl(std::move(ck), backend);
      std::size_t index = 0;
      if (gen_sample.empty()) {
        const auto test = ds.manifest.indices(Split::kTest);
        if (test.empty()) throw InvalidArgument("the dataset has no test samples");
        index = test.front();
      } else {
        auto it = std::find_if(ds.manifest.entries.begin(), ds.manifest.entries.end(),
                               [&](const ManifestEntry& e) { return e.sample_id == gen_sample; });
        if (it == ds.manifest.entries.end()) throw InvalidArgument("unknown sample " + gen_sample);
        index = it - ds.manifest.entries.begin();
      }
      const auto r = pl.generate(ds.amplitudes[index], gp);
      save_png(gen_out, r.image);
      const json meta = {{"sample_id", ds.manifest.entries[index].sample_id},
                         {"prompt", gp.prompt},
                         {"strength", gp.strength},
                         {"steps", gp.steps},
                         {"guidance_scale", gp.guidance_scale},
                         {"seed", gp.seed},
                         {"t_start", r.t_start},
                         {"steps_taken", r.steps_taken},
                         {"direct_decode", gp.strength == 0.0}};
      write_file(gen_out + ".json", meta.dump(2) + "\n");
      std::printf("%s  %s\n", gen_out.c_str(), meta.dump().c_str());
    } else if (*sv) {
      InferenceService service(scfg);
      const int port = service.bind();
      std::thread loader([&] {
        try {
          Dataset ds = load_dataset(sv_data);
          Checkpoint ck = load_checkpoint(sv_ckpt);
          std::shared_ptr<const LatentBackend> backend;
          if (ck.target == TargetKind::kLatent) backend = open_backend(sv_backend);
          auto pl = std::make_shared<const CsiImagePipeline>(std::move(ck), backend);
          service.provide(ServiceState{std::move(ds), std::move(pl)});
          std::fprintf(stderr, "ready\n");
        } catch (const std::exception& e) {
          service.fail(e.what());
          std::fprintf(stderr, "load failed: %s\n", e.what());
        }
      });
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::fprintf(stderr, "listening on http://%s:%d\n", scfg.host.c_str(), port);
      service.serve();
      loader.join();
      g_service = nullptr;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

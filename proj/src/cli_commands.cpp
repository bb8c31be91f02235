#include "cli_commands.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "itx/io.hpp"
#include "itx/threads.hpp"

namespace fs = std::filesystem;

namespace itx {
namespace cli {

namespace {

// ---------------------------------------------------------------------------
// strict config parsing
// ---------------------------------------------------------------------------

void reject_unknown(const nlohmann::json& j, const std::string& section,
                    const std::vector<std::string>& known) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("unknown config key: " + section + it.key());
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(j, "",
                 {"seed", "model", "train", "phantom", "ladder", "bench"});
  RunConfig cfg;
  if (!j.contains("seed"))
    throw ConfigError("missing config field: seed");
  cfg.seed = j.at("seed").get<uint64_t>();

  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m, "model.",
                   {"channels", "in_channels", "out_channels", "block",
                    "window", "patch", "heads", "dropout", "use_bias"});
    read_field(m, "channels", cfg.model.channels);
    read_field(m, "in_channels", cfg.model.in_channels);
    read_field(m, "out_channels", cfg.model.out_channels);
    read_field(m, "block", cfg.model.block.spec);
    read_field(m, "window", cfg.model.ws.window);
    read_field(m, "patch", cfg.model.ws.patch);
    read_field(m, "heads", cfg.model.heads);
    read_field(m, "dropout", cfg.model.dropout);
    read_field(m, "use_bias", cfg.model.use_bias);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    reject_unknown(t, "train.",
                   {"epochs", "batch", "peak_lr", "beta1", "beta2", "eps",
                    "val_fraction", "samples", "snr_min", "snr_max"});
    read_field(t, "epochs", cfg.train.epochs);
    read_field(t, "batch", cfg.train.batch);
    read_field(t, "peak_lr", cfg.train.peak_lr);
    read_field(t, "beta1", cfg.train.beta1);
    read_field(t, "beta2", cfg.train.beta2);
    read_field(t, "eps", cfg.train.eps);
    read_field(t, "val_fraction", cfg.train.val_fraction);
    read_field(t, "samples", cfg.train_samples);
    read_field(t, "snr_min", cfg.train_snr_min);
    read_field(t, "snr_max", cfg.train_snr_max);
  }
  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    reject_unknown(p, "phantom.",
                   {"height", "width", "frames", "blood", "myo", "background",
                    "blood_radius", "ring_gap", "ring_thickness",
                    "center_jitter", "radius_jitter", "beat", "phase_amp"});
    read_field(p, "height", cfg.phantom.height);
    read_field(p, "width", cfg.phantom.width);
    read_field(p, "frames", cfg.phantom.frames);
    read_field(p, "blood", cfg.phantom.blood);
    read_field(p, "myo", cfg.phantom.myo);
    read_field(p, "background", cfg.phantom.background);
    read_field(p, "blood_radius", cfg.phantom.blood_radius);
    read_field(p, "ring_gap", cfg.phantom.ring_gap);
    read_field(p, "ring_thickness", cfg.phantom.ring_thickness);
    read_field(p, "center_jitter", cfg.phantom.center_jitter);
    read_field(p, "radius_jitter", cfg.phantom.radius_jitter);
    read_field(p, "beat", cfg.phantom.beat);
    read_field(p, "phase_amp", cfg.phantom.phase_amp);
  }
  if (j.contains("ladder")) {
    const auto& l = j.at("ladder");
    reject_unknown(l, "ladder.", {"targets", "acceleration"});
    read_field(l, "targets", cfg.ladder.targets);
    read_field(l, "acceleration", cfg.acceleration);
  }
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    reject_unknown(b, "bench.",
                   {"sizes", "channels", "frames", "window", "patch", "heads",
                    "reps"});
    read_field(b, "sizes", cfg.bench.sizes);
    read_field(b, "channels", cfg.bench.channels);
    read_field(b, "frames", cfg.bench.frames);
    read_field(b, "window", cfg.bench.ws.window);
    read_field(b, "patch", cfg.bench.ws.patch);
    read_field(b, "heads", cfg.bench.heads);
    read_field(b, "reps", cfg.bench.reps);
  }

  // the model's reference grid follows the phantom size
  cfg.model.ref_height = cfg.phantom.height;
  cfg.model.ref_width = cfg.phantom.width;
  cfg.phantom.seed = cfg.seed;
  cfg.ladder.seed = mix_seed(cfg.seed, 0x1add);
  cfg.train.seed = mix_seed(cfg.seed, 0x42a1);
  cfg.model.validate();
  cfg.train.validate();
  cfg.phantom.validate();
  cfg.ladder.validate();
  return cfg;
}

RunConfig RunConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON: " + path);
  return from_json(j);
}

namespace {

// ---------------------------------------------------------------------------
// manifests and small file helpers
// ---------------------------------------------------------------------------

std::string hash_hex(const std::string& path) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash_file(path);
  return os.str();
}

void write_manifest(const std::string& out_dir, const std::string& command,
                    uint64_t seed, const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs,
                    const nlohmann::json& extra = {}) {
  nlohmann::json m;
  m["command"] = command;
  m["seed"] = seed;
  m["inputs"] = nlohmann::json::object();
  for (const auto& p : inputs) m["inputs"][p] = hash_hex(p);
  m["outputs"] = nlohmann::json::object();
  for (const auto& p : outputs) m["outputs"][p] = hash_hex(p);
  if (!extra.is_null() && !extra.empty()) m["extra"] = extra;
  const std::string path = out_dir + "/" + command + "_manifest.json";
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest: " + path);
  os << m.dump(2) << "\n";
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory: " + dir);
}

void require_file(const std::string& path, const std::string& hint) {
  if (!fs::exists(path))
    throw IoError("missing input: " + path + " (" + hint + ")");
}

std::string lvl_name(size_t i) {
  std::ostringstream os;
  os << "lvl" << std::setw(2) << std::setfill('0') << i;
  return os.str();
}

ComplexSeries read_series(const std::string& base) {
  ComplexSeries s;
  s.real = read_itx(base + "_real.itx");
  s.imag = read_itx(base + "_imag.itx");
  s.validate();
  return s;
}

void write_series(const std::string& base, const ComplexSeries& s) {
  write_itx(base + "_real.itx", s.real);
  write_itx(base + "_imag.itx", s.imag);
}

Model build_model(const RunConfig& cfg) {
  return build_hrnet(cfg.model, mix_seed(cfg.seed, 0x0de1));
}

std::vector<Sample> build_training_set(const RunConfig& cfg,
                                       const GFactorMap& g) {
  std::vector<Sample> data;
  for (int64_t i = 0; i < cfg.train_samples; ++i) {
    PhantomSpec spec = cfg.phantom;
    spec.seed = mix_seed(cfg.seed, 0x5a0 + static_cast<uint64_t>(i));
    Phantom ph = gen_phantom(spec);
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x7b0 + static_cast<uint64_t>(i)));
    std::uniform_real_distribution<double> pick(cfg.train_snr_min,
                                                cfg.train_snr_max);
    const double nn = solve_noise_sd(ph.truth, g, pick(rng));
    ComplexSeries noisy = add_mr_noise(
        ph.truth, nn, g, mix_seed(cfg.seed, 0x9c0 + static_cast<uint64_t>(i)));
    data.push_back(
        Sample{make_model_input(noisy, g), make_model_target(ph.truth)});
  }
  return data;
}

}  // namespace

void cmd_phantom(const RunConfig& cfg, const std::string& out_dir) {
  ensure_dir(out_dir);
  Phantom ph = gen_phantom(cfg.phantom);
  GFactorMap g =
      gen_gfactor(cfg.acceleration, cfg.phantom.height, cfg.phantom.width);
  write_series(out_dir + "/gt", ph.truth);
  write_itx(out_dir + "/mask_blood.itx", ph.blood_mask);
  write_itx(out_dir + "/mask_myo.itx", ph.myo_mask);
  write_itx(out_dir + "/gmap.itx", g.g);
  write_manifest(out_dir, "phantom", cfg.seed, {},
                 {out_dir + "/gt_real.itx", out_dir + "/gt_imag.itx",
                  out_dir + "/mask_blood.itx", out_dir + "/mask_myo.itx",
                  out_dir + "/gmap.itx"},
                 {{"frames", cfg.phantom.frames},
                  {"acceleration", cfg.acceleration}});
}

void cmd_corrupt(const RunConfig& cfg, const std::string& out_dir,
                 const std::optional<std::vector<double>>& level_override) {
  ensure_dir(out_dir);
  require_file(out_dir + "/gt_real.itx", "run the phantom command first");
  require_file(out_dir + "/gmap.itx", "run the phantom command first");
  ComplexSeries truth = read_series(out_dir + "/gt");
  GFactorMap g;
  g.g = read_itx(out_dir + "/gmap.itx");
  g.acceleration = cfg.acceleration;

  NoiseLadder ladder = cfg.ladder;
  if (level_override) {
    ladder.targets = *level_override;
    ladder.validate();
  }
  auto levels = make_snr_ladder(truth, g, ladder);

  nlohmann::json entries = nlohmann::json::array();
  std::vector<std::string> outputs;
  for (size_t i = 0; i < levels.size(); ++i) {
    const std::string base = out_dir + "/" + lvl_name(i);
    write_series(base, levels[i].noisy);
    outputs.push_back(base + "_real.itx");
    outputs.push_back(base + "_imag.itx");
    entries.push_back({{"target", levels[i].target},
                       {"noise_sd", levels[i].noise_sd},
                       {"measured_snr", levels[i].measured_snr},
                       {"seed", levels[i].seed},
                       {"real", base + "_real.itx"},
                       {"imag", base + "_imag.itx"}});
  }
  write_manifest(out_dir, "corrupt", cfg.seed,
                 {out_dir + "/gt_real.itx", out_dir + "/gt_imag.itx",
                  out_dir + "/gmap.itx"},
                 outputs, {{"levels", entries}});
}

void cmd_train(const RunConfig& cfg, const std::string& out_dir,
               std::optional<double> lr_override, bool resume) {
  ensure_dir(out_dir);
  GFactorMap g =
      gen_gfactor(cfg.acceleration, cfg.phantom.height, cfg.phantom.width);
  std::vector<Sample> data = build_training_set(cfg, g);

  Model model = build_model(cfg);
  int64_t start_step = 0;
  const std::string best_path = out_dir + "/checkpoint_best.itxp";
  const std::string last_path = out_dir + "/checkpoint_last.itxp";
  if (resume) {
    require_file(last_path, "no checkpoint to resume from");
    nlohmann::json meta = load_params(model, last_path);
    start_step = meta.value("step", 0);
  }

  TrainConfig tc = cfg.train;
  if (lr_override) tc.peak_lr = *lr_override;
  TrainResult res = train(model, data, tc, best_path, last_path, start_step);

  // with a zero learning rate nothing improves, so no best checkpoint was
  // written; emit the untouched parameters to keep the output set complete
  if (!fs::exists(best_path)) save_params(model, best_path, {{"step", start_step}});

  const std::string csv_path = out_dir + "/loss.csv";
  std::ofstream csv(csv_path);
  csv << "epoch,split,loss,lr\n";
  for (const auto& row : res.log) {
    csv << row.epoch << ",train," << std::setprecision(10) << row.train_loss
        << "," << row.lr << "\n";
    csv << row.epoch << ",val," << std::setprecision(10) << row.val_loss << ","
        << row.lr << "\n";
  }
  csv.close();

  write_manifest(out_dir, "train", cfg.seed, {},
                 {best_path, last_path, csv_path},
                 {{"best_val", res.best_val},
                  {"best_epoch", res.best_epoch},
                  {"steps", start_step + res.steps_done},
                  {"samples", cfg.train_samples},
                  {"resumed", resume}});
}

void cmd_denoise(const RunConfig& cfg, const std::string& out_dir,
                 const std::string& checkpoint, const std::string& input_base,
                 const std::string& gmap_path) {
  ensure_dir(out_dir);
  require_file(checkpoint, "train a model first or pass --checkpoint");
  require_file(input_base + "_real.itx", "pass --input BASE for BASE_real.itx");
  require_file(gmap_path, "pass --gmap or run the phantom command");

  Model model = build_model(cfg);
  load_params(model, checkpoint);
  ComplexSeries in = read_series(input_base);
  GFactorMap g;
  g.g = read_itx(gmap_path);
  g.acceleration = cfg.acceleration;

  Tensor5D out = model_forward(model, make_model_input(in, g), false);
  ComplexSeries den = series_from_two_channel(out);
  write_series(out_dir + "/denoised", den);
  write_manifest(out_dir, "denoise", cfg.seed,
                 {checkpoint, input_base + "_real.itx",
                  input_base + "_imag.itx", gmap_path},
                 {out_dir + "/denoised_real.itx", out_dir + "/denoised_imag.itx"});
}

void cmd_sweep(const RunConfig& cfg, const std::string& out_dir,
               const std::string& checkpoint) {
  ensure_dir(out_dir);
  require_file(checkpoint, "train a model first or pass --checkpoint");
  require_file(out_dir + "/corrupt_manifest.json",
               "run the corrupt command first");
  ComplexSeries truth = read_series(out_dir + "/gt");
  Tensor5D blood_mask = read_itx(out_dir + "/mask_blood.itx");
  Tensor5D myo_mask = read_itx(out_dir + "/mask_myo.itx");
  GFactorMap g;
  g.g = read_itx(out_dir + "/gmap.itx");
  g.acceleration = cfg.acceleration;

  std::ifstream mf(out_dir + "/corrupt_manifest.json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  const auto& levels = manifest.at("extra").at("levels");

  Model model = build_model(cfg);
  load_params(model, checkpoint);

  Tensor5D gt_mag = magnitude(truth);
  const double gt_blood = masked_mean(gt_mag, blood_mask);
  const double gt_myo = masked_mean(gt_mag, myo_mask);

  const std::string csv_path = out_dir + "/metrics.csv";
  std::ofstream csv(csv_path);
  csv << "case,target_snr,psnr_db,ssim,cnr_in,cnr_out,cnr_gt\n";
  std::vector<double> blood_out, blood_gt, myo_out, myo_gt;
  for (size_t i = 0; i < levels.size(); ++i) {
    const double target = levels[i].at("target").get<double>();
    const double nn = levels[i].at("noise_sd").get<double>();
    ComplexSeries noisy = read_series(out_dir + "/" + lvl_name(i));
    Tensor5D den = model_forward(model, make_model_input(noisy, g), false);
    ComplexSeries den_series = series_from_two_channel(den);

    Tensor5D in_mag = magnitude(noisy);
    Tensor5D out_mag = magnitude(den_series);
    // sigma in SNR units: the level's added-noise SD
    const double cnr_in = cnr(in_mag, blood_mask, myo_mask, nn);
    const double cnr_out = cnr(out_mag, blood_mask, myo_mask, nn);
    const double cnr_gt = cnr(gt_mag, blood_mask, myo_mask, nn);
    csv << lvl_name(i) << "_in," << target << "," << std::setprecision(10)
        << psnr(in_mag, gt_mag) << "," << ssim(in_mag, gt_mag) << "," << cnr_in
        << "," << cnr_out << "," << cnr_gt << "\n";
    csv << lvl_name(i) << "_out," << target << "," << std::setprecision(10)
        << psnr(out_mag, gt_mag) << "," << ssim(out_mag, gt_mag) << ","
        << cnr_in << "," << cnr_out << "," << cnr_gt << "\n";

    blood_out.push_back(masked_mean(out_mag, blood_mask));
    blood_gt.push_back(gt_blood);
    myo_out.push_back(masked_mean(out_mag, myo_mask));
    myo_gt.push_back(gt_myo);
  }
  csv.close();

  const std::string ba_path = out_dir + "/bland_altman.csv";
  std::ofstream ba(ba_path);
  ba << "sweep,mean_dev,cr90\n";
  if (blood_out.size() >= 2) {
    auto rb = bland_altman(blood_out, blood_gt);
    auto rm = bland_altman(myo_out, myo_gt);
    ba << "blood_signal," << std::setprecision(10) << rb.mean_dev << ","
       << rb.cr90 << "\n";
    ba << "myo_signal," << rm.mean_dev << "," << rm.cr90 << "\n";
  }
  ba.close();

  write_manifest(out_dir, "sweep", cfg.seed,
                 {checkpoint, out_dir + "/gt_real.itx"}, {csv_path, ba_path});
}

// ---------------------------------------------------------------------------
// attention complexity benchmark
// ---------------------------------------------------------------------------

namespace {

double time_best_of(int reps, const std::function<void()>& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

/// Dense full-frame patch attention with QKV convs, streamed row by row so
/// the R x R coefficient matrix is never materialized.
void dense_full_attention(const Tensor5D& x, const AttentionParams& p,
                          int64_t patch, int64_t heads) {
  const Dims5 d = x.dims();
  Tensor5D q = conv2d(x, p.qw, p.qb);
  Tensor5D k = conv2d(x, p.kw, p.kb);
  Tensor5D v = conv2d(x, p.vw, p.vb);
  WindowSpec full{d.h, patch};  // one window covering the frame
  DataMatrixSet qs = assemble_local(q, full);
  DataMatrixSet ks = assemble_local(k, full);
  DataMatrixSet vs = assemble_local(v, full);
  const int64_t R = qs.rows, D = qs.cols, dh = D / heads;
  const double scale = std::sqrt(static_cast<double>(dh));
  Tensor5D out(qs.stack.dims());
  std::vector<float> logits(static_cast<size_t>(R));
  for (int64_t m = 0; m < qs.count; ++m)
    for (int64_t h = 0; h < heads; ++h) {
      const float* qm = qs.matrix(m);
      const float* km = ks.matrix(m);
      const float* vm = vs.matrix(m);
      float* om = out.data() + m * R * D;
      for (int64_t i = 0; i < R; ++i) {
        const float* qr = qm + i * D + h * dh;
        float mx = -1e30f;
        for (int64_t j = 0; j < R; ++j) {
          const float* kr = km + j * D + h * dh;
          float dot = 0.0f;
          for (int64_t c = 0; c < dh; ++c) dot += qr[c] * kr[c];
          logits[j] = static_cast<float>(dot / scale);
          mx = std::max(mx, logits[j]);
        }
        double sum = 0.0;
        for (int64_t j = 0; j < R; ++j) {
          logits[j] = std::exp(logits[j] - mx);
          sum += logits[j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        float* orow = om + i * D + h * dh;
        std::fill(orow, orow + dh, 0.0f);
        for (int64_t j = 0; j < R; ++j) {
          const float a = logits[j] * inv;
          const float* vr = vm + j * D + h * dh;
          for (int64_t c = 0; c < dh; ++c) orow[c] += a * vr[c];
        }
      }
    }
}

double fit_exponent(const std::vector<std::pair<int64_t, double>>& pts) {
  // least-squares slope of log(time) against log(pixels)
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(pts.size());
  for (const auto& [pixels, t] : pts) {
    const double lx = std::log(static_cast<double>(pixels));
    const double ly = std::log(t);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

BenchResult run_bench(const BenchConfig& cfg) {
  // single-thread timing for stability
  const int prev_threads = max_threads();
  set_threads(1);
  BenchResult res;
  std::vector<std::pair<int64_t, double>> lg_pts, dense_pts;
  for (int64_t size : cfg.sizes) {
    const int64_t pixels = size * size;
    Tensor5D x = random_uniform<float>(
        {1, cfg.channels, cfg.frames, size, size}, -1.0f, 1.0f,
        static_cast<uint64_t>(size));
    std::mt19937_64 rng(static_cast<uint64_t>(size) * 7 + 1);
    AttentionConfig base{AttnKind::Local, cfg.ws, cfg.heads, cfg.channels,
                         false};
    AttentionParams params =
        init_attention_params<float>(base, size, size, rng);

    double lg_total = 0.0;
    for (AttnKind kind :
         {AttnKind::Local, AttnKind::Global, AttnKind::Frame}) {
      AttentionConfig acfg{kind, cfg.ws, cfg.heads, cfg.channels, false};
      const double t = time_best_of(
          cfg.reps, [&] { attention_apply(x, acfg, params); });
      std::string name = kind == AttnKind::Local    ? "local"
                         : kind == AttnKind::Global ? "global"
                                                    : "frame";
      res.rows.push_back(BenchRow{name, size, pixels, t});
      if (kind != AttnKind::Frame) lg_total += t;
    }
    lg_pts.push_back({pixels, lg_total});

    const double td = time_best_of(cfg.reps, [&] {
      dense_full_attention(x, params, cfg.ws.patch, cfg.heads);
    });
    res.rows.push_back(BenchRow{"dense", size, pixels, td});
    dense_pts.push_back({pixels, td});
  }
  res.exponent_local_global = fit_exponent(lg_pts);
  res.exponent_dense = fit_exponent(dense_pts);
  set_threads(prev_threads);
  return res;
}

void cmd_bench(const RunConfig& cfg, const std::string& out_dir) {
  ensure_dir(out_dir);
  BenchResult res = run_bench(cfg.bench);
  const std::string csv_path = out_dir + "/bench.csv";
  std::ofstream csv(csv_path);
  csv << "mechanism,size,pixels,seconds\n";
  for (const auto& row : res.rows)
    csv << row.mechanism << "," << row.size << "," << row.pixels << ","
        << std::setprecision(8) << row.seconds << "\n";
  csv.close();
  write_manifest(out_dir, "bench", cfg.seed, {}, {csv_path},
                 {{"exponent_local_global", res.exponent_local_global},
                  {"exponent_dense", res.exponent_dense}});
}

}  // namespace cli
}  // namespace itx

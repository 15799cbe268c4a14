// dualburst command-line tool: simulate, train, eval, aggregate-dets, gradcheck, noise-stats.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dualburst/dualburst.hpp"
#include "image_io.hpp"

namespace db = dualburst;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kCheckFailed = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

int parse_int(const std::string& s, const std::string& what) {
  int v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw UsageError(what + ": '" + s + "' is not an integer");
  return v;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw UsageError(what + ": '" + s + "' is not a number");
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw db::IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text)) throw db::IoError("cannot write " + path.string());
}

// Reads `key=value` lines; used for config.txt echoes written by earlier runs.
std::map<std::string, std::string> read_key_values(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw db::IoError("cannot read " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

std::string prefixed(const std::string& block, const std::string& prefix) {
  std::string out;
  for (const auto& line : split(block, '\n')) {
    if (!line.empty()) out += prefix + line + '\n';
  }
  return out;
}

db::SensorConfig sensor_from(const std::string& path) {
  if (path.empty()) return {};
  try {
    return db::load_sensor_config(path);
  } catch (const db::IoError& e) {
    throw UsageError(e.what());
  }
}

std::string scene_to_string(const db::SceneSpec& s) {
  std::ostringstream os;
  os.precision(17);
  os << "classes=" << s.num_classes << "\nimage_size=" << s.image_size << "\nframes=" << s.frames
     << "\nframe_dt=" << s.frame_dt << "\nflux_fg=" << s.flux_fg << "\nflux_bg=" << s.flux_bg
     << "\nspeed_min=" << s.speed_min << "\nspeed_max=" << s.speed_max << "\nradius_min=" << s.radius_min
     << "\nradius_max=" << s.radius_max << "\nrotation_max=" << s.rotation_max << "\nscene_seed=" << s.seed << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string mode = "frames";
  std::size_t train = 2000;
  std::size_t test = 500;
  std::string plan = "1,3,5,7";
  std::string levels = "4:1,3:2,2:3,1:4";
  std::uint64_t seed = 42;
  std::string out;
  std::string sensor;
  std::string readout = "per_frame";
  bool no_clean = false;
  db::SceneSpec scene;
  std::string input;
  std::size_t export_png = 0;
};

db::ExposurePlan resolve_plan(const SimulateArgs& a) {
  db::ExposurePlan plan;
  if (a.mode == "frames") {
    std::vector<int> windows;
    for (const auto& w : split(a.plan, ',')) windows.push_back(parse_int(w, "--plan"));
    plan = db::ExposurePlan::frames(windows, !a.no_clean);
  } else {
    std::vector<db::SeverityLevel> levels;
    for (const auto& l : split(a.levels, ',')) {
      const auto parts = split(l, ':');
      if (parts.size() != 2) throw UsageError("--levels entries must look like shot:blur, got '" + l + "'");
      levels.push_back({parse_int(parts[0], "--levels"), parse_int(parts[1], "--levels")});
    }
    plan = db::ExposurePlan::severity(levels, !a.no_clean);
  }
  try {
    plan.validate();
  } catch (const db::DomainError& e) {
    throw UsageError(e.what());
  }
  if (plan.mode == db::ExposurePlan::Mode::frame_window) {
    const int widest = plan.windows.back();
    if (static_cast<std::size_t>(widest) > a.scene.frames) {
      throw UsageError("window " + std::to_string(widest) + " needs at least that many frames (--frames)");
    }
  }
  return plan;
}

void export_pngs(const db::DatasetManifest& m, std::size_t count, int bit_depth) {
  const fs::path dir = m.root / "png";
  make_dir(dir);
  for (std::size_t k = 0; k < std::min(count, m.entries.size()); ++k) {
    const auto& e = m.entries[k];
    const auto b = db::load_burst(m.root / e.path);
    std::string stem = e.path.substr(0, e.path.rfind('.'));
    std::replace(stem.begin(), stem.end(), '/', '_');
    for (std::size_t i = 0; i < b.size(); ++i) {
      db::io::write_png(dir / (stem + "_img" + std::to_string(i) + ".png"), b.images[i], bit_depth);
    }
    if (b.clean) db::io::write_png(dir / (stem + "_clean.png"), *b.clean, bit_depth);
  }
}

// Severity bursts from real images. Inputs are display-referred, so they are
// linearized with the sensor gamma first; the labels are unknown and set to 0.
db::DatasetManifest simulate_from_images(const SimulateArgs& a, const db::ExposurePlan& plan,
                                         const db::SensorConfig& sensor) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(a.input)) {
    const auto ext = entry.path().extension().string();
    if (ext == ".png" || ext == ".PNG" || ext == ".pgm" || ext == ".PGM") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw db::IoError("no .png or .pgm files in " + a.input);
  const fs::path out = a.out;
  make_dir(out / "test");
  db::DatasetManifest m;
  m.root = out;
  const auto root = db::RngStream::root(a.seed);
  for (std::size_t k = 0; k < files.size(); ++k) {
    const auto linear = db::apply_gamma(db::io::read_image(files[k]), 1.0 / sensor.gamma);
    auto b = db::make_burst(linear, plan, sensor, db::derive_stream(root, "burst", k));
    char name[32];
    std::snprintf(name, sizeof(name), "test/%06zu.dbt", k);
    db::save_burst(out / name, b);
    m.entries.push_back({name, 0, k});
  }
  db::write_manifest(m);
  return m;
}

int cmd_simulate(SimulateArgs a) {
  if (a.mode != "frames" && a.mode != "severity") throw UsageError("--mode must be frames or severity");
  if (!a.input.empty() && a.mode != "severity") throw UsageError("--input requires --mode severity");
  if (a.readout != "per_frame" && a.readout != "single") throw UsageError("--readout must be per_frame or single");
  a.scene.seed = a.seed;
  const auto plan = resolve_plan(a);
  const auto sensor = sensor_from(a.sensor);
  try {
    a.scene.validate();
  } catch (const db::ConfigError& e) {
    throw UsageError(e.what());
  }
  db::CaptureOptions opts;
  opts.readout = a.readout == "single" ? db::ReadoutMode::single : db::ReadoutMode::per_frame;

  std::ostringstream cfg;
  cfg << "command=simulate\nmode=" << a.mode << '\n'
      << (a.mode == "frames" ? "plan=" + a.plan : "levels=" + a.levels) << "\ntrain=" << a.train
      << "\ntest=" << a.test << "\nseed=" << a.seed << "\nreadout=" << a.readout
      << "\ninclude_clean=" << !a.no_clean << "\ninput=" << a.input << "\nexport_png=" << a.export_png << '\n'
      << scene_to_string(a.scene) << prefixed(sensor.to_string(), "sensor.");
  make_dir(a.out);
  write_text(fs::path(a.out) / "config.txt", cfg.str());

  const auto m = a.input.empty() ? db::build_dataset(a.scene, plan, sensor, {a.train, a.test}, a.out, opts)
                                 : simulate_from_images(a, plan, sensor);
  if (a.export_png > 0) export_pngs(m, a.export_png, sensor.bit_depth);
  std::cout << "samples," << m.entries.size() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string out;
  db::TrainConfig cfg;
  std::string schedule = "cosine";
  std::string consistency = "anchor";
  bool no_clean_task = false;
  std::string test_mode = "ensemble";
  bool quiet = false;
};

// Number of classes recorded by simulate, else inferred from the labels.
int dataset_classes(const db::DatasetManifest& m) {
  const fs::path cfg = m.root / "config.txt";
  if (fs::exists(cfg)) {
    const auto kv = read_key_values(cfg);
    if (auto it = kv.find("classes"); it != kv.end()) return parse_int(it->second, "dataset classes");
  }
  int top = 1;
  for (const auto& e : m.entries) top = std::max(top, e.label + 1);
  return std::max(top, 2);
}

void check_compatible(const db::NetConfig& net, const std::vector<db::Burst>& bursts, const std::string& split) {
  for (std::size_t k = 0; k < bursts.size(); ++k) {
    const auto& b = bursts[k];
    for (const auto& im : b.images) {
      if (im.shape() != db::Shape{net.input_size, net.input_size}) {
        throw db::FormatError(split + " sample " + std::to_string(k) + ": image shape does not match the " +
                              std::to_string(net.input_size) + "x" + std::to_string(net.input_size) + " model input");
      }
    }
    if (b.label < 0 || b.label >= net.num_classes) {
      throw db::FormatError(split + " sample " + std::to_string(k) + ": label " + std::to_string(b.label) +
                            " outside the model's " + std::to_string(net.num_classes) + " classes");
    }
  }
}

int cmd_train(TrainArgs a) {
  if (a.schedule != "cosine" && a.schedule != "constant") throw UsageError("--schedule must be cosine or constant");
  if (a.consistency != "anchor" && a.consistency != "pairwise") {
    throw UsageError("--consistency must be anchor or pairwise");
  }
  a.cfg.schedule = a.schedule == "cosine" ? db::TrainConfig::Schedule::cosine : db::TrainConfig::Schedule::constant;
  a.cfg.use_clean_anchor = a.consistency == "anchor";
  a.cfg.include_clean_in_task = !a.no_clean_task;
  const auto test_mode = db::EvalMode::parse(a.test_mode);
  a.cfg.validate();

  const auto manifest = db::read_manifest(a.data);
  const auto train = db::load_split(manifest, "train");
  const auto test = db::load_split(manifest, "test");
  if (train.empty()) throw db::FormatError(a.data + ": no training samples");
  db::NetConfig net;
  net.num_classes = dataset_classes(manifest);
  net.input_size = train.front().images.front().shape()[0];
  check_compatible(net, train, "train");
  check_compatible(net, test, "test");

  std::ostringstream cfg;
  cfg << "command=train\ndata=" << fs::absolute(a.data).lexically_normal().string() << "\nclasses="
      << net.num_classes << "\ninput_size=" << net.input_size << "\ntest_mode=" << test_mode.to_string() << '\n'
      << a.cfg.to_string();
  char hash[17];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(db::detail::fnv1a64(cfg.str())));
  const fs::path run = fs::path(a.out) / hash;
  make_dir(run);
  write_text(run / "config.txt", cfg.str());

  auto model = db::Model<float>::init(net, db::derive_stream(db::RngStream::root(a.cfg.seed), "model", 0));
  const auto result = db::fit(std::move(model), train, test, a.cfg, test_mode, [&](const db::EpochMetrics& m) {
    if (!a.quiet) std::cerr << "epoch " << m.epoch << '/' << a.cfg.epochs << "  " << db::format_metrics_row(m) << '\n';
  });
  db::write_metrics_csv(run / "metrics.csv", result.metrics);
  db::save_container(run / "model.dbt", db::model_to_container(result.model));
  std::cout << "run_dir," << run.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string run;
  std::string data;
  std::string mode = "ensemble";
  std::string split = "test";
  std::string out;
};

int cmd_eval(EvalArgs a) {
  const auto mode = db::EvalMode::parse(a.mode);
  if (a.split != "train" && a.split != "test") throw UsageError("--split must be train or test");
  const fs::path run = a.run;
  if (a.data.empty()) {
    const auto kv = read_key_values(run / "config.txt");
    auto it = kv.find("data");
    if (it == kv.end()) throw db::FormatError((run / "config.txt").string() + " does not name a dataset");
    a.data = it->second;
  }
  const auto model = db::model_from_container<float>(db::load_container(run / "model.dbt"));
  const auto manifest = db::read_manifest(a.data);
  const auto bursts = db::load_split(manifest, a.split);
  if (bursts.empty()) throw db::FormatError(a.data + ": split '" + a.split + "' is empty");
  check_compatible(model.config, bursts, a.split);
  for (std::size_t k = 0; k < bursts.size(); ++k) {
    if (mode.kind == db::EvalMode::Kind::clean && !bursts[k].clean) {
      throw db::FormatError(a.split + " sample " + std::to_string(k) + " has no clean image for --mode clean");
    }
    if (mode.kind == db::EvalMode::Kind::single && mode.index >= bursts[k].size()) {
      throw db::FormatError(a.split + " sample " + std::to_string(k) + " has only " +
                            std::to_string(bursts[k].size()) + " exposures");
    }
  }

  std::string tag = mode.to_string();
  std::replace(tag.begin(), tag.end(), ':', '-');
  const fs::path out = a.out.empty() ? run / ("eval-" + tag + "-" + a.split) : fs::path(a.out);
  make_dir(out);
  write_text(out / "config.txt", "command=eval\nrun=" + run.string() + "\ndata=" + a.data + "\nmode=" +
                                     mode.to_string() + "\nsplit=" + a.split + '\n');
  const auto r = db::evaluate(model, bursts, mode);
  char top1[32];
  std::snprintf(top1, sizeof(top1), "%.6f", r.top1);
  write_text(out / "eval.csv", "mode,split,samples,top1,feature_dispersion\n" + mode.to_string() + "," + a.split +
                                   "," + std::to_string(bursts.size()) + "," + top1 + "," +
                                   fmt(r.feature_dispersion) + "\n");
  std::cout << "top1," << top1 << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// aggregate-dets

struct AggregateArgs {
  std::vector<std::string> maps;
  bool scenario = false;
  std::string out;
  float threshold = 0.5f;
  double nms_iou = 0.5;
  std::string gt;
};

std::vector<db::Box> read_boxes(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw db::IoError("cannot read " + path.string());
  std::vector<db::Box> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    db::Box b;
    if (!(ls >> b.x1 >> b.y1 >> b.x2 >> b.y2 >> b.score >> b.cls) || !(b.x2 > b.x1 && b.y2 > b.y1)) {
      throw db::FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 'x1 y1 x2 y2 score class'");
    }
    out.push_back(b);
  }
  return out;
}

int cmd_aggregate(AggregateArgs a) {
  if (a.scenario == !a.maps.empty()) throw UsageError("give either --maps or --scenario");
  if (!(a.threshold > 0.0f && a.threshold < 1.0f)) throw UsageError("--threshold must be in (0, 1)");
  if (!(a.nms_iou > 0.0 && a.nms_iou < 1.0)) throw UsageError("--nms-iou must be in (0, 1)");
  const fs::path out = a.out;
  make_dir(out);

  std::vector<db::DetectionMaps> maps;
  std::vector<db::Box> gt;
  bool have_gt = false;
  if (a.scenario) {
    const auto s = db::make_false_positive_scenario();
    for (std::size_t i = 0; i < s.exposures.size(); ++i) {
      const auto path = out / ("exposure_" + std::to_string(i) + ".dbt");
      db::save_container(path, db::detection_maps_to_container(s.exposures[i]));
      a.maps.push_back(path.string());
    }
    write_text(out / "truth.txt", db::format_boxes({s.truth}));
    a.gt = (out / "truth.txt").string();
  }
  for (const auto& p : a.maps) maps.push_back(db::detection_maps_from_container(db::load_container(p)));
  if (!a.gt.empty()) {
    gt = read_boxes(a.gt);
    have_gt = true;
  }
  write_text(out / "config.txt", "command=aggregate-dets\nmaps=" + join(a.maps, ",") + "\nscenario=" +
                                     std::to_string(a.scenario) + "\nthreshold=" + fmt(a.threshold) +
                                     "\nnms_iou=" + fmt(a.nms_iou) + "\ngt=" + a.gt + '\n');

  std::ostringstream csv;
  csv << "source,boxes,ap50\n";
  auto report = [&](const std::string& name, const std::vector<db::Box>& boxes) {
    const double ap = have_gt ? db::ap_at_iou(boxes, gt, 0.5) : 0.0;
    csv << name << ',' << boxes.size() << ',' << (have_gt ? fmt(ap) : "") << '\n';
    return ap;
  };
  bool scenario_ok = true;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto boxes = db::nms(db::decode_boxes(maps[i], a.threshold), a.nms_iou);
    write_text(out / ("boxes_" + std::to_string(i) + ".txt"), db::format_boxes(boxes));
    const double ap = report("exposure_" + std::to_string(i), boxes);
    scenario_ok = scenario_ok && boxes.size() == 2 && ap == 0.5;
  }
  const auto agg = db::aggregate_detection_maps(maps);
  db::save_container(out / "aggregated.dbt", db::detection_maps_to_container(agg));
  const auto boxes = db::nms(db::decode_boxes(agg, a.threshold), a.nms_iou);
  write_text(out / "boxes.txt", db::format_boxes(boxes));
  const double ap = report("aggregate", boxes);
  scenario_ok = scenario_ok && boxes.size() == 1 && ap == 1.0;
  write_text(out / "summary.csv", csv.str());
  std::cout << csv.str();
  if (a.scenario && !scenario_ok) {
    std::cerr << "false-positive scenario check failed\n";
    return kCheckFailed;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradCheckArgs {
  std::uint64_t seed = 1;
  std::size_t samples = 200;
  std::string lambdas = "0,5";
  std::string consistency = "anchor,pairwise";
  std::size_t models = 1;
  std::size_t bursts = 1;
  double tol = 1e-5;
  std::string out;
};

int cmd_gradcheck(GradCheckArgs a) {
  std::vector<double> lambdas;
  for (const auto& l : split(a.lambdas, ',')) lambdas.push_back(parse_double(l, "--lambda"));
  std::vector<bool> anchors;
  for (const auto& c : split(a.consistency, ',')) {
    if (c != "anchor" && c != "pairwise") throw UsageError("--consistency entries must be anchor or pairwise");
    anchors.push_back(c == "anchor");
  }
  for (double l : lambdas) {
    if (!(l >= 0.0)) throw UsageError("--lambda values must be >= 0");
  }
  if (a.samples < 1 || a.models < 1 || a.bursts < 1) throw UsageError("--samples, --models, --bursts must be >= 1");
  const fs::path out = a.out.empty() ? fs::path("gradcheck-seed" + std::to_string(a.seed)) : fs::path(a.out);
  make_dir(out);
  write_text(out / "config.txt", "command=gradcheck\nseed=" + std::to_string(a.seed) + "\nsamples=" +
                                     std::to_string(a.samples) + "\nlambda=" + a.lambdas + "\nconsistency=" +
                                     a.consistency + "\nmodels=" + std::to_string(a.models) + "\nbursts=" +
                                     std::to_string(a.bursts) + "\ntol=" + fmt(a.tol) + "\nstep=1e-05\n");

  const auto root = db::RngStream::root(a.seed);
  db::SceneSpec scene;
  scene.seed = a.seed;
  std::ostringstream csv;
  csv << "model,burst,consistency,lambda_fc,parameter,index,analytic,numeric,rel_err\n";
  std::cout << "model,burst,consistency,lambda_fc,max_rel_err,probes,skipped\n";
  double worst = 0.0;
  bool short_of_probes = false;
  std::size_t combo = 0;
  for (std::size_t mi = 0; mi < a.models; ++mi) {
    const auto model = db::gradcheck_model(db::NetConfig{}, db::derive_stream(root, "model", mi));
    for (std::size_t bi = 0; bi < a.bursts; ++bi) {
      const auto s = db::generate_scene(scene, bi);
      auto burst = db::make_burst(s.flux, db::ExposurePlan::frames({1, 3, 5, 7}), db::SensorConfig{},
                                  db::derive_stream(root, "burst", bi));
      burst.label = s.label;
      for (bool anchor : anchors) {
        for (double lambda : lambdas) {
          db::TrainConfig cfg;
          cfg.use_clean_anchor = anchor;
          cfg.lambda_fc = lambda;
          db::GradCheckOptions opts;
          opts.samples = a.samples;
          const auto rep = db::grad_check(model, burst, cfg, db::derive_stream(root, "probe", combo++), opts);
          const char* mode = anchor ? "anchor" : "pairwise";
          for (const auto& e : rep.entries) {
            csv << mi << ',' << bi << ',' << mode << ',' << fmt(lambda) << ',' << e.parameter << ',' << e.index
                << ',' << fmt(e.analytic) << ',' << fmt(e.numeric) << ',' << fmt(e.rel_err) << '\n';
          }
          std::cout << mi << ',' << bi << ',' << mode << ',' << fmt(lambda) << ',' << fmt(rep.max_rel_err) << ','
                    << rep.entries.size() << ',' << rep.skipped << '\n';
          worst = std::max(worst, rep.max_rel_err);
          short_of_probes = short_of_probes || rep.entries.size() < a.samples;
        }
      }
    }
  }
  write_text(out / "gradcheck.csv", csv.str());
  std::cout << "max_rel_err," << fmt(worst) << '\n';
  if (short_of_probes) {
    std::cerr << "too many probes landed on ReLU kinks to collect " << a.samples << " samples\n";
    return kCheckFailed;
  }
  return worst < a.tol ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------
// noise-stats

struct NoiseStatsArgs {
  std::string sensor;
  std::string dts = "0.01,0.02,0.04,0.08";
  double flux = 1000.0;
  std::size_t pixels = 100000;
  std::uint64_t seed = 0;
  double tol = 0.05;
  std::string out;
};

int cmd_noise_stats(NoiseStatsArgs a) {
  const auto sensor = sensor_from(a.sensor);
  std::vector<double> dts;
  for (const auto& d : split(a.dts, ',')) {
    dts.push_back(parse_double(d, "--dt"));
    if (!(dts.back() > 0.0)) throw UsageError("--dt values must be > 0");
  }
  std::sort(dts.begin(), dts.end());
  if (!(a.flux >= 0.0)) throw UsageError("--flux must be >= 0");
  if (a.pixels < 2) throw UsageError("--pixels must be >= 2");
  const fs::path out = a.out.empty() ? fs::path("noise-stats-seed" + std::to_string(a.seed)) : fs::path(a.out);
  make_dir(out);
  write_text(out / "config.txt", "command=noise-stats\nsensor_file=" + a.sensor + "\ndt=" + a.dts + "\nflux=" +
                                     fmt(a.flux) + "\npixels=" + std::to_string(a.pixels) + "\nseed=" +
                                     std::to_string(a.seed) + "\ntol=" + fmt(a.tol) + '\n' +
                                     prefixed(sensor.to_string(), "sensor."));

  const auto rows = db::noise_stats(sensor, a.flux, dts, a.pixels, db::RngStream::root(a.seed));
  std::ostringstream csv;
  csv << "dt,signal_electrons,snr_predicted,snr_empirical,rel_err\n";
  bool ok = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    csv << fmt(r.dt) << ',' << fmt(r.signal) << ',' << fmt(r.predicted) << ',' << fmt(r.empirical) << ','
        << fmt(r.rel_err) << '\n';
    ok = ok && r.rel_err < a.tol;
    if (i > 0 && dts[i] > dts[i - 1]) ok = ok && r.empirical > rows[i - 1].empirical;
  }
  write_text(out / "noise_stats.csv", csv.str());
  std::cout << csv.str();
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-exposure burst simulation, consistency training and ensemble inference.\n"
               "Set DUALBURST_THREADS to cap worker threads (0 or unset = all cores)."};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Generate a burst dataset with a manifest");
  s->add_option("--mode", sim.mode, "frames (frame-window averaging) or severity (single-image ladder)")
      ->capture_default_str();
  s->add_option("--train", sim.train, "Training samples")->capture_default_str();
  s->add_option("--test", sim.test, "Test samples")->capture_default_str();
  s->add_option("--plan", sim.plan, "Odd, increasing frame windows (frames mode)")->capture_default_str();
  s->add_option("--levels", sim.levels, "shot:blur severity pairs (severity mode)")->capture_default_str();
  s->add_option("--seed", sim.seed, "Root seed")->capture_default_str();
  s->add_option("--out", sim.out, "Output dataset directory")->required();
  s->add_option("--sensor", sim.sensor, "Sensor key=value file (eta, sigma_r, sigma_d, gamma, full_scale, bit_depth)");
  s->add_option("--readout", sim.readout, "per_frame (noise per frame, then averaged) or single (one readout)")
      ->capture_default_str();
  s->add_flag("--no-clean", sim.no_clean, "Do not store the noise-free clean image");
  s->add_option("--classes", sim.scene.num_classes, "Shape classes (2..6)")->capture_default_str();
  s->add_option("--image-size", sim.scene.image_size, "Image side in pixels")->capture_default_str();
  s->add_option("--frames", sim.scene.frames, "Flux frames per scene")->capture_default_str();
  s->add_option("--flux-fg", sim.scene.flux_fg, "Shape flux, photons/s")->capture_default_str();
  s->add_option("--flux-bg", sim.scene.flux_bg, "Background flux, photons/s")->capture_default_str();
  s->add_option("--input", sim.input, "Directory of .png/.pgm images for severity bursts (labels set to 0)");
  s->add_option("--export-png", sim.export_png, "Export the first K samples as PNG under <out>/png")
      ->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a classifier; writes <out>/<config hash>/");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Parent directory of run directories")->required();
  t->add_option("--lambda", tr.cfg.lambda_fc, "Consistency weight")->capture_default_str();
  t->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
  t->add_option("--batch", tr.cfg.batch_size, "Bursts per batch")->capture_default_str();
  t->add_option("--lr", tr.cfg.lr_base, "Base learning rate")->capture_default_str();
  t->add_option("--momentum", tr.cfg.momentum)->capture_default_str();
  t->add_option("--schedule", tr.schedule, "cosine or constant")->capture_default_str();
  t->add_option("--consistency", tr.consistency, "anchor (to the clean image) or pairwise")->capture_default_str();
  t->add_flag("--no-clean-task", tr.no_clean_task, "Leave the clean image out of the task loss");
  t->add_flag("--stop-clean-grad", tr.cfg.stop_clean_grad, "Block the consistency gradient into the clean branch");
  t->add_flag("--normalize-features", tr.cfg.normalize_features, "Consistency on unit-length features");
  t->add_option("--grad-clip", tr.cfg.grad_clip, "Global gradient norm cap, 0 = off")->capture_default_str();
  t->add_option("--lambda-warmup", tr.cfg.lambda_warmup_epochs, "Epochs over which lambda ramps up")
      ->capture_default_str();
  t->add_option("--seed", tr.cfg.seed)->capture_default_str();
  t->add_option("--test-mode", tr.test_mode, "Per-epoch test metric: ensemble, clean or single:<i>")
      ->capture_default_str();
  t->add_flag("--quiet", tr.quiet, "No per-epoch progress on stderr");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a trained run; prints top1,<value>");
  e->add_option("--run", ev.run, "Run directory written by train")->required();
  e->add_option("--data", ev.data, "Dataset directory (default: the one the run was trained on)");
  e->add_option("--mode", ev.mode, "ensemble, clean or single:<i>")->capture_default_str();
  e->add_option("--split", ev.split, "train or test")->capture_default_str();
  e->add_option("--out", ev.out, "Output directory (default <run>/eval-<mode>-<split>)");

  AggregateArgs ag;
  auto* g = app.add_subcommand("aggregate-dets", "Average detection maps, decode and suppress boxes");
  g->add_option("--maps", ag.maps, "Detection map containers (cls, ctr, reg, stride)");
  g->add_flag("--scenario", ag.scenario, "Use the built-in 4-exposure false-positive scenario");
  g->add_option("--out", ag.out, "Output directory")->required();
  g->add_option("--threshold", ag.threshold, "Score threshold on sqrt(cls * ctr)")->capture_default_str();
  g->add_option("--nms-iou", ag.nms_iou, "NMS IoU threshold")->capture_default_str();
  g->add_option("--gt", ag.gt, "Ground-truth boxes, lines 'x1 y1 x2 y2 score class'");

  GradCheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference check of the training loss gradient");
  c->add_option("--seed", gc.seed)->capture_default_str();
  c->add_option("--samples", gc.samples, "Probed parameters per configuration")->capture_default_str();
  c->add_option("--lambda", gc.lambdas, "Comma-separated consistency weights")->capture_default_str();
  c->add_option("--consistency", gc.consistency, "Comma-separated: anchor, pairwise")->capture_default_str();
  c->add_option("--models", gc.models, "Random models")->capture_default_str();
  c->add_option("--bursts", gc.bursts, "Random bursts per model")->capture_default_str();
  c->add_option("--tol", gc.tol, "Maximum relative error")->capture_default_str();
  c->add_option("--out", gc.out, "Output directory (default gradcheck-seed<seed>)");

  NoiseStatsArgs ns;
  auto* n = app.add_subcommand("noise-stats", "Predicted vs empirical SNR of constant-flux captures");
  n->add_option("--sensor", ns.sensor, "Sensor key=value file");
  n->add_option("--dt", ns.dts, "Comma-separated exposure times, seconds")->capture_default_str();
  n->add_option("--flux", ns.flux, "Photons/s")->capture_default_str();
  n->add_option("--pixels", ns.pixels)->capture_default_str();
  n->add_option("--seed", ns.seed)->capture_default_str();
  n->add_option("--tol", ns.tol, "Maximum relative SNR error")->capture_default_str();
  n->add_option("--out", ns.out, "Output directory (default noise-stats-seed<seed>)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kUsage;
  }

  try {
    if (s->parsed()) return cmd_simulate(sim);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev);
    if (g->parsed()) return cmd_aggregate(ag);
    if (c->parsed()) return cmd_gradcheck(gc);
    if (n->parsed()) return cmd_noise_stats(ns);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const db::ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kData;
  }
  return kUsage;
}

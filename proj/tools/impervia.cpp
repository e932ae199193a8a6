// impervia: batch entry point for the imperviousness forecasting pipeline.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "impervia/impervia.hpp"

namespace fs = std::filesystem;
using namespace impervia;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void add_common(CLI::App* sub, Common& c, const std::vector<std::string>& keys) {
  sub->add_option("--config", c.config_path, "key=value config file");
  sub->add_option("--set", c.sets, "override one config key, KEY=VALUE (repeatable)");
  sub->add_option("--seed", c.seed, "seed for every random choice");
  sub->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  sub->add_option("--out", c.out, "output directory (default $IMPERVIA_OUT or .)");
  std::string footer = "\nConfig keys:";
  if (keys.empty()) footer += "\n  (none)";
  for (const auto& k : keys) {
    const auto* key = find_key(k);
    footer += "\n  " + k + " (default " + key->fallback + "): " + key->help;
  }
  sub->footer(footer);
}

Config load_config(const Common& c, const std::map<std::string, std::string>& flags = {}) {
  Config cfg;
  if (!c.config_path.empty()) cfg.load_file(c.config_path);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects KEY=VALUE, got " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& [k, v] : flags) cfg.set(k, v);
  return cfg;
}

fs::path out_dir(const Common& c) {
  fs::path p = c.out;
  if (p.empty()) {
    const char* env = std::getenv("IMPERVIA_OUT");
    p = env && *env ? env : ".";
  }
  fs::create_directories(p);
  return p;
}

std::string hex_digest_of(const std::string& text) { return to_hex(sha256(text)); }

store::RunManifest start_manifest(const std::string& command, const Config& cfg, const std::vector<std::string>& keys,
                                  const Common& c) {
  store::RunManifest m;
  m.config = cfg.subset(keys);
  m.seeds = {c.seed};
  std::string basis = command;
  for (const auto& [k, v] : m.config) basis += "\n" + k + "=" + v;
  basis += "\nseed=" + std::to_string(c.seed);
  m.run_id = command + "-" + hex_digest_of(basis).substr(0, 12);
  m.timestamps["start"] = store::utc_now();
  return m;
}

void finish_manifest(store::RunManifest& m, const fs::path& out) {
  m.timestamps["end"] = store::utc_now();
  store::save_manifest(m, out / "run.manifest");
}

template <class F>
void parallel_for(std::size_t n, int threads, F&& body) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(threads), n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex mu;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!err) err = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

std::vector<std::size_t> cells_of(const Config& cfg) {
  std::vector<std::size_t> cells;
  for (auto v : cfg.int_list("eval.cells")) {
    if (v < 1) throw ConfigError("eval.cells entries must be >= 1");
    cells.push_back(static_cast<std::size_t>(v));
  }
  return cells;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Datasets: one directory per sample holding imp<k>.igrd / like<k>.igrd for
// k = 0..N-1 and an optional target.igrd.

struct DatasetEntry {
  std::string name;
  fs::path dir;
};

std::vector<DatasetEntry> list_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + root.string());
  std::vector<DatasetEntry> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "imp0.igrd")) out.push_back({e.path().filename().string(), e.path()});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  if (out.empty()) throw IoError("no samples under " + root.string());
  return out;
}

ConditioningStack load_stack(const fs::path& dir, int n_cond) {
  ConditioningStack s;
  for (int k = 0; k < n_cond; ++k) {
    s.imperviousness.push_back(load_grid((dir / ("imp" + std::to_string(k) + ".igrd")).string(), GridKind::Continuous));
    s.likelihood.push_back(load_grid((dir / ("like" + std::to_string(k) + ".igrd")).string(), GridKind::Continuous));
    s.years.push_back(k);
  }
  return s;
}

std::vector<fs::path> dataset_files(const std::vector<DatasetEntry>& ds) {
  std::vector<fs::path> files;
  for (const auto& e : ds)
    for (const auto& f : fs::directory_iterator(e.dir))
      if (f.path().extension() == ".igrd") files.push_back(f.path());
  std::sort(files.begin(), files.end());
  return files;
}

DenoiserConfig model_config(const Config& cfg) {
  DenoiserConfig c;
  c.depth = static_cast<int>(cfg.integer("model.depth"));
  c.base_channels = static_cast<int>(cfg.integer("model.base_channels"));
  c.gn_groups = static_cast<int>(cfg.integer("model.gn_groups"));
  c.embed_dim = static_cast<int>(cfg.integer("model.embed_dim"));
  c.n_cond = static_cast<int>(cfg.integer("model.n_cond"));
  c.input_side = static_cast<int>(cfg.integer("model.input_side"));
  c.check();
  return c;
}

diffusion::NoiseSchedule schedule_of(const Config& cfg) {
  return diffusion::make_schedule(static_cast<int>(cfg.integer("schedule.steps")), cfg.real("schedule.beta_start"),
                                  cfg.real("schedule.beta_end"));
}

const std::vector<std::string> kModelKeys{"model.depth",   "model.base_channels", "model.gn_groups",
                                          "model.embed_dim", "model.n_cond",     "model.input_side"};
const std::vector<std::string> kScheduleKeys{"schedule.steps", "schedule.beta_start", "schedule.beta_end"};

std::vector<std::string> join(std::initializer_list<std::vector<std::string>> parts) {
  std::vector<std::string> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct IngestArgs {
  std::string input, kind = "continuous", name;
  bool nlcd_codes = false;
};
const std::vector<std::string> kIngestKeys{"tile.side"};

int run_ingest(const Common& c, const IngestArgs& a) {
  const auto cfg = load_config(c);
  const auto out = out_dir(c);
  auto m = start_manifest("ingest", cfg, kIngestKeys, c);
  const GridKind kind = a.kind == "categorical" ? GridKind::Categorical : GridKind::Continuous;
  Grid g;
  if (fs::path(a.input).extension() == ".igrd") {
    g = load_grid(a.input, kind);
  } else if (fs::path(a.input).extension() == ".tif" || fs::path(a.input).extension() == ".tiff") {
    g = load_geotiff(a.input);
  } else {
    std::ifstream f(a.input);
    if (!f) throw IoError("cannot open " + a.input);
    g = read_ascii_grid(f, kind);
  }
  if (a.nlcd_codes) {
    if (kind != GridKind::Categorical) throw UsageError("--nlcd-codes needs --kind categorical");
    const auto legend = LulcLegend::nlcd16();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!g.valid[i]) continue;
      const int idx = legend.index_of_code(static_cast<int>(g.values[i]));
      if (idx < 0) throw RangeError("unknown NLCD code " + std::to_string(static_cast<int>(g.values[i])));
      g.values[i] = idx;
    }
  }
  if (kind == GridKind::Categorical) g.check(16);
  else g.check_percent();
  const std::string name = a.name.empty() ? fs::path(a.input).stem().string() : a.name;
  save_grid(g, (out / (name + ".igrd")).string());
  const auto ts = tile(g, static_cast<std::size_t>(cfg.integer("tile.side")), name);
  fs::create_directories(out / "tiles");
  std::ostringstream idx;
  idx << "index,row,col,nodata_fraction\n";
  for (std::size_t i = 0; i < ts.tiles.size(); ++i) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%04zu", i);
    save_grid(extract_tile(g, ts, i), (out / "tiles" / (name + "_t" + buf + ".igrd")).string());
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.6f\n", i, ts.tiles[i].row, ts.tiles[i].col, ts.tiles[i].nodata_fraction);
    idx << buf;
  }
  write_text(out / "tiles.csv", idx.str());
  m.add_input(a.input);
  m.outputs["grid"] = name + ".igrd";
  m.outputs["tiles"] = "tiles.csv";
  finish_manifest(m, out);
  std::printf("tiles=%zu margin_right=%zu margin_bottom=%zu status=%s\n", ts.tiles.size(), ts.margin_right,
              ts.margin_bottom, ts.status.c_str());
  return 0;
}

struct LikelihoodArgs {
  std::vector<std::string> lc;
};

int run_likelihood(const Common& c, const LikelihoodArgs& a) {
  const auto cfg = load_config(c);
  const auto out = out_dir(c);
  auto m = start_manifest("likelihood", cfg, {}, c);
  std::vector<Grid> lcs;
  for (const auto& p : a.lc) {
    lcs.push_back(load_grid(p, GridKind::Categorical));
    m.add_input(p);
  }
  const auto legend = LulcLegend::nlcd16();
  const auto series = transition::likelihood_series(lcs, legend);
  for (std::size_t k = 0; k < series.maps.size(); ++k) {
    const auto name = "likelihood" + std::to_string(k) + ".igrd";
    save_grid(series.maps[k], (out / name).string());
    m.outputs["likelihood" + std::to_string(k)] = name;
  }
  for (std::size_t k = 0; k < series.tables.size(); ++k) {
    std::ostringstream os;
    transition::write_probs(os, series.tables[k].probs);
    write_text(out / ("probs" + std::to_string(k) + ".txt"), os.str());
  }
  finish_manifest(m, out);
  std::printf("likelihood_maps=%zu\n", series.maps.size());
  return 0;
}

struct ClusterArgs {
  std::vector<std::string> series;
};
const std::vector<std::string> kClusterKeys{"cluster.k", "cluster.signature", "tile.side"};

int run_cluster(const Common& c, const ClusterArgs& a) {
  const auto cfg = load_config(c);
  const auto out = out_dir(c);
  auto m = start_manifest("cluster", cfg, kClusterKeys, c);
  std::vector<Grid> grids;
  for (const auto& p : a.series) {
    grids.push_back(load_grid(p, GridKind::Continuous));
    m.add_input(p);
  }
  const auto& sig_name = cfg.text("cluster.signature");
  clustering::SignatureStat stat;
  if (sig_name == "mean_change") stat = clustering::SignatureStat::MeanChange;
  else if (sig_name == "fraction_changed") stat = clustering::SignatureStat::FractionChanged;
  else throw ConfigError("cluster.signature must be mean_change or fraction_changed");
  const auto ts = tile(grids.front(), static_cast<std::size_t>(cfg.integer("tile.side")));
  std::vector<clustering::TemporalSignature> sigs;
  for (std::size_t t = 0; t < ts.tiles.size(); ++t) {
    std::vector<Grid> patch;
    for (const auto& g : grids) {
      require_same_shape(grids.front(), g, "cluster series");
      patch.push_back(extract_tile(g, ts, t));
    }
    char id[32];
    std::snprintf(id, sizeof id, "t%04zu", t);
    sigs.push_back(clustering::signature(patch, id, stat));
  }
  const auto model = clustering::cluster(sigs, static_cast<std::size_t>(cfg.integer("cluster.k")), c.seed);
  std::ostringstream s1, s2, s3;
  clustering::write_signatures_csv(s1, sigs);
  clustering::write_assignments_csv(s2, sigs, model);
  clustering::write_weights_csv(s3, model);
  write_text(out / "signatures.csv", s1.str());
  write_text(out / "assignments.csv", s2.str());
  write_text(out / "weights.csv", s3.str());
  m.outputs = {{"signatures", "signatures.csv"}, {"assignments", "assignments.csv"}, {"weights", "weights.csv"}};
  finish_manifest(m, out);
  std::printf("patches=%zu k=%zu objective=%.6f\n", sigs.size(), model.k, model.objective());
  return 0;
}

struct TrainArgs {
  std::string data;
  std::optional<long long> steps;
};
const std::vector<std::string> kTrainKeys = join(
    {kModelKeys, kScheduleKeys, {"train.steps", "train.batch", "train.lr", "train.ema"}});

int run_train(const Common& c, const TrainArgs& a) {
  std::map<std::string, std::string> flags;
  if (a.steps) flags["train.steps"] = std::to_string(*a.steps);
  const auto cfg = load_config(c, flags);
  const auto out = out_dir(c);
  auto m = start_manifest("train", cfg, kTrainKeys, c);
  const auto mc = model_config(cfg);
  const auto ds = list_dataset(a.data);
  std::vector<diffusion::TrainingPair<float>> data;
  for (const auto& e : ds) {
    const auto stack = load_stack(e.dir, mc.n_cond);
    stack.check(mc.n_cond, mc.input_side);
    const auto target = load_grid((e.dir / "target.igrd").string(), GridKind::Continuous);
    data.push_back({stack.to_tensor<float>(), synthetic::to_unit<float>(target), 1.0});
  }
  for (const auto& f : dataset_files(ds)) m.add_input(f.string());
  Denoiser<float> model(mc);
  model.initialize(c.seed);
  diffusion::TrainConfig tc;
  tc.steps = static_cast<int>(cfg.integer("train.steps"));
  tc.batch = static_cast<int>(cfg.integer("train.batch"));
  tc.lr = cfg.real("train.lr");
  tc.ema = cfg.real("train.ema");
  tc.seed = c.seed;
  tc.threads = c.threads;
  const auto res = diffusion::train(model, data, schedule_of(cfg), tc);
  save_checkpoint(Checkpoint<float>{mc, model.params(), res.ema}, (out / "model.idnp").string());
  std::ostringstream loss;
  write_loss_csv(loss, res.loss_history);
  write_text(out / "loss.csv", loss.str());
  m.outputs = {{"checkpoint", "model.idnp"}, {"loss", "loss.csv"}};
  finish_manifest(m, out);
  std::printf("steps=%d final_loss=%.6g\n", tc.steps, res.loss_history.empty() ? 0.0 : res.loss_history.back());
  return 0;
}

struct SampleArgs {
  std::string model, data;
  bool raw = false;
};
const std::vector<std::string> kSampleKeys =
    join({kScheduleKeys, {"sample.ddim_steps", "sample.eta", "sample.seeds"}});

int run_sample(const Common& c, const SampleArgs& a) {
  const auto cfg = load_config(c);
  const auto out = out_dir(c);
  auto m = start_manifest("sample", cfg, kSampleKeys, c);
  const auto ck = load_checkpoint<float>(a.model);
  m.add_input(a.model);
  Denoiser<float> model(ck.config);
  model.params() = a.raw ? ck.params : ck.ema;
  const auto s = schedule_of(cfg);
  const int steps = static_cast<int>(cfg.integer("sample.ddim_steps"));
  const double eta = cfg.real("sample.eta");
  const auto draws = static_cast<std::size_t>(cfg.integer("sample.seeds"));
  if (draws < 1) throw ConfigError("sample.seeds must be >= 1");
  const auto ds = list_dataset(a.data);
  for (const auto& f : dataset_files(ds)) m.add_input(f.string());
  std::vector<nn::Tensor<float>> conds;
  double pixel = 30.0;
  for (const auto& e : ds) {
    const auto stack = load_stack(e.dir, ck.config.n_cond);
    stack.check(ck.config.n_cond, ck.config.input_side);
    pixel = stack.imperviousness.front().pixel_size;
    conds.push_back(stack.to_tensor<float>());
  }
  const int side = ck.config.input_side;
  std::vector<Grid> results(ds.size() * draws);
  parallel_for(results.size(), c.threads, [&](std::size_t job) {
    const std::size_t tile = job / draws, draw = job % draws;
    auto rng = diffusion::stream_rng(c.seed, tile, draw);
    const auto x = diffusion::ddim_sample<float>(diffusion::model_predictor(model, conds[tile]), s, {1, side, side},
                                                 steps, eta, rng);
    results[job] = synthetic::to_percent(x, pixel);
  });
  for (std::size_t t = 0; t < ds.size(); ++t) {
    std::vector<Grid> per(results.begin() + static_cast<std::ptrdiff_t>(t * draws),
                          results.begin() + static_cast<std::ptrdiff_t>((t + 1) * draws));
    for (std::size_t d = 0; d < draws; ++d)
      save_grid(per[d], (out / ("forecast_" + ds[t].name + "_" + std::to_string(d) + ".igrd")).string());
    const auto st = eval::seed_stats(per);
    save_grid(st.mean, (out / ("mean_" + ds[t].name + ".igrd")).string());
    save_grid(st.std, (out / ("std_" + ds[t].name + ".igrd")).string());
  }
  m.outputs["forecasts"] = ".";
  finish_manifest(m, out);
  std::printf("tiles=%zu draws=%zu\n", ds.size(), draws);
  return 0;
}

struct CaArgs {
  std::string lc_a, lc_b, truth;
  bool nlcd = false;
};
const std::vector<std::string> kCaKeys{"ca.window", "ca.eta", "ca.tolerance", "ca.max_iterations"};

int run_ca(const Common& c, const CaArgs& a) {
  const auto cfg = load_config(c);
  const auto out = out_dir(c);
  auto m = start_manifest("ca-forecast", cfg, kCaKeys, c);
  auto load8 = [&](const std::string& p) {
    auto g = load_grid(p, GridKind::Categorical);
    m.add_input(p);
    if (a.nlcd) g = ca::reclass_nlcd(g);
    g.check(ca::kClasses);
    return g;
  };
  const auto lca = load8(a.lc_a), lcb = load8(a.lc_b);
  ca::AllocationConfig ac;
  ac.eta = cfg.real("ca.eta");
  ac.rel_tolerance = cfg.real("ca.tolerance");
  ac.max_iterations = static_cast<std::size_t>(cfg.integer("ca.max_iterations"));
  const auto f = ca::forecast(lca, lcb, static_cast<std::size_t>(cfg.integer("ca.window")), ac);
  save_grid(f.allocation.map, (out / "forecast.igrd").string());
  const auto change = ca::imperv_change_binary(lcb, f.allocation.map);
  save_grid(change, (out / "change.igrd").string());
  std::ostringstream P;
  ca::write_matrix(P, f.model.P);
  write_text(out / "transition.txt", P.str());
  std::ostringstream rep;
  char buf[160];
  std::snprintf(buf, sizeof buf, "iterations=%zu converged=%d\n", f.allocation.iterations, f.allocation.converged ? 1 : 0);
  rep << buf;
  for (std::size_t k = 0; k < ca::kClasses; ++k) {
    std::snprintf(buf, sizeof buf, "class=%s target=%.3f deficit=%.3f\n", ca::class_names()[k], f.model.targets[k],
                  f.allocation.deficits[k]);
    rep << buf;
  }
  if (!a.truth.empty()) {
    const auto truth = load8(a.truth);
    const auto cc = eval::confusion(change, ca::imperv_change_binary(lcb, truth));
    std::snprintf(buf, sizeof buf, "tp=%llu fp=%llu fn=%llu tn=%llu\nprecision=%.2f recall=%.2f f1=%.2f\n",
                  static_cast<unsigned long long>(cc.tp), static_cast<unsigned long long>(cc.fp),
                  static_cast<unsigned long long>(cc.fn), static_cast<unsigned long long>(cc.tn), cc.precision,
                  cc.recall, cc.f1);
    rep << buf;
  }
  write_text(out / "ca_report.txt", rep.str());
  m.outputs = {{"forecast", "forecast.igrd"}, {"change", "change.igrd"}, {"transition", "transition.txt"},
               {"report", "ca_report.txt"}};
  finish_manifest(m, out);
  std::cout << rep.str();
  return 0;
}

struct EvaluateArgs {
  std::string curves, data, forecasts;
};
const std::vector<std::string> kEvaluateKeys{"eval.cells", "model.n_cond"};

int run_evaluate(const Common& c, const EvaluateArgs& a) {
  const auto cfg = load_config(c);
  const auto out = out_dir(c);
  auto m = start_manifest("evaluate", cfg, kEvaluateKeys, c);
  eval::EvalReport report;
  if (!a.curves.empty()) {
    if (!a.data.empty()) throw UsageError("--curves and --data are exclusive");
    std::ifstream f(a.curves);
    if (!f) throw IoError("cannot open " + a.curves);
    const auto [model, null] = eval::read_curves_csv(f);
    report = eval::make_report(model, null);
    m.add_input(a.curves);
  } else {
    if (a.data.empty() || a.forecasts.empty()) throw UsageError("evaluate needs --curves, or --data with --forecasts");
    const auto cells = cells_of(cfg);
    const int n = static_cast<int>(cfg.integer("model.n_cond"));
    std::vector<eval::MaeAccumulator> am, an;
    eval::ConfusionCounts cc;
    double pixel = 30.0;
    for (const auto& e : list_dataset(a.data)) {
      const auto past = load_grid((e.dir / ("imp" + std::to_string(n - 1) + ".igrd")).string(), GridKind::Continuous);
      const auto truth = load_grid((e.dir / "target.igrd").string(), GridKind::Continuous);
      const auto pred_path = fs::path(a.forecasts) / ("mean_" + e.name + ".igrd");
      const auto pred = load_grid(pred_path.string(), GridKind::Continuous);
      pixel = past.pixel_size;
      eval::accumulate_mae(am, pred, truth, cells);
      eval::accumulate_mae(an, eval::null_forecast(past), truth, cells);
      const auto part = eval::confusion(eval::binary_change(past, pred), eval::binary_change(past, truth));
      cc.tp += part.tp;
      cc.fp += part.fp;
      cc.fn += part.fn;
      cc.tn += part.tn;
      m.add_input(pred_path.string());
      m.add_input((e.dir / "target.igrd").string());
    }
    report = eval::make_report(eval::curve_from(am, cells, pixel), eval::curve_from(an, cells, pixel));
    report.confusion = eval::finish_confusion(cc);
  }
  std::ostringstream rep, csv;
  eval::write_report(rep, report);
  eval::write_curves_csv(csv, report.model, report.null);
  write_text(out / "report.txt", rep.str());
  write_text(out / "curves.csv", csv.str());
  m.outputs = {{"report", "report.txt"}, {"curves", "curves.csv"}};
  finish_manifest(m, out);
  std::cout << rep.str();
  return 0;
}

struct PlotArgs {
  std::string curves, title;
};

int run_plot(const Common& c, const PlotArgs& a) {
  const auto cfg = load_config(c);
  const auto out = out_dir(c);
  auto m = start_manifest("plot", cfg, {}, c);
  std::ifstream f(a.curves);
  if (!f) throw IoError("cannot open " + a.curves);
  const auto [model, null] = eval::read_curves_csv(f);
  m.add_input(a.curves);
  std::ostringstream csv, svg;
  eval::write_curves_csv(csv, model, null);
  eval::write_svg(svg, model, null, a.title);
  write_text(out / "curves.csv", csv.str());
  write_text(out / "curves.svg", svg.str());
  m.outputs = {{"csv", "curves.csv"}, {"svg", "curves.svg"}};
  finish_manifest(m, out);
  std::printf("wrote curves.csv curves.svg\n");
  return 0;
}

struct SynthArgs {
  int count = 16;
  double growth = 5.0;
};
const std::vector<std::string> kSynthKeys{"model.n_cond", "model.input_side"};

int run_synth(const Common& c, const SynthArgs& a) {
  const auto cfg = load_config(c);
  const auto out = out_dir(c);
  auto m = start_manifest("synth", cfg, kSynthKeys, c);
  if (a.count < 1) throw UsageError("--count must be >= 1");
  const int n = static_cast<int>(cfg.integer("model.n_cond"));
  const auto side = static_cast<std::size_t>(cfg.integer("model.input_side"));
  for (int i = 0; i < a.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "s%04d", i);
    const auto dir = out / name;
    fs::create_directories(dir);
    const auto smp = synthetic::make_sample(side, n, c.seed * 1000003ull + static_cast<std::uint64_t>(i), a.growth);
    for (int k = 0; k < n; ++k) {
      save_grid(smp.stack.imperviousness[static_cast<std::size_t>(k)], (dir / ("imp" + std::to_string(k) + ".igrd")).string());
      save_grid(smp.stack.likelihood[static_cast<std::size_t>(k)], (dir / ("like" + std::to_string(k) + ".igrd")).string());
    }
    save_grid(smp.truth, (dir / "target.igrd").string());
  }
  m.outputs["samples"] = std::to_string(a.count);
  finish_manifest(m, out);
  std::printf("samples=%d\n", a.count);
  return 0;
}

std::string quoted(const std::string& s) {
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') q += '\\';
    q += ch == '\n' ? ' ' : ch;
  }
  return q + "\"";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"impervia: imperviousness forecasting toolkit"};
  app.require_subcommand(1);
  Common common;

  IngestArgs ingest;
  auto* s_ingest = app.add_subcommand("ingest", "convert a raster to IGRD and cut it into tiles");
  add_common(s_ingest, common, kIngestKeys);
  s_ingest->add_option("--input", ingest.input, "ESRI ASCII grid (.asc) or IGRD file")->required();
  s_ingest->add_option("--kind", ingest.kind, "continuous or categorical")
      ->check(CLI::IsMember({"continuous", "categorical"}));
  s_ingest->add_option("--name", ingest.name, "output base name");
  s_ingest->add_flag("--nlcd-codes", ingest.nlcd_codes, "input holds raw NLCD codes (11..95)");

  LikelihoodArgs likelihood;
  auto* s_like = app.add_subcommand("likelihood", "imperviousness likelihood maps from land-cover maps");
  add_common(s_like, common, {});
  s_like->add_option("--lc", likelihood.lc, "16-class land-cover IGRD, chronological (repeat)")->required();

  ClusterArgs cluster;
  auto* s_cluster = app.add_subcommand("cluster", "temporal signatures, DTW k-medoids and sampling weights");
  add_common(s_cluster, common, kClusterKeys);
  s_cluster->add_option("--series", cluster.series, "imperviousness IGRD, chronological (repeat)")->required();

  TrainArgs train;
  auto* s_train = app.add_subcommand("train", "train the conditional denoiser");
  add_common(s_train, common, kTrainKeys);
  s_train->add_option("--data", train.data, "dataset directory")->required();
  s_train->add_option("--steps", train.steps, "shorthand for --set train.steps=N");

  SampleArgs sample;
  auto* s_sample = app.add_subcommand("sample", "DDIM forecasts for every dataset tile and seed");
  add_common(s_sample, common, kSampleKeys);
  s_sample->add_option("--model", sample.model, "checkpoint (.idnp)")->required();
  s_sample->add_option("--data", sample.data, "dataset directory")->required();
  s_sample->add_flag("--raw-weights", sample.raw, "use the raw weights instead of the EMA weights");

  CaArgs caa;
  auto* s_ca = app.add_subcommand("ca-forecast", "CA-Markov baseline forecast");
  add_common(s_ca, common, kCaKeys);
  s_ca->add_option("--lc-a", caa.lc_a, "earlier land cover")->required();
  s_ca->add_option("--lc-b", caa.lc_b, "later land cover")->required();
  s_ca->add_option("--truth", caa.truth, "observed land cover one period after --lc-b");
  s_ca->add_flag("--nlcd", caa.nlcd, "inputs use the 16-class NLCD legend");

  EvaluateArgs evaluate;
  auto* s_eval = app.add_subcommand("evaluate", "MAE curves, null resolution and change confusion");
  add_common(s_eval, common, kEvaluateKeys);
  s_eval->add_option("--curves", evaluate.curves, "CSV with resolution_km,model_mae,null_mae");
  s_eval->add_option("--data", evaluate.data, "dataset directory with targets");
  s_eval->add_option("--forecasts", evaluate.forecasts, "directory written by sample");

  PlotArgs plot;
  auto* s_plot = app.add_subcommand("plot", "CSV and SVG of MAE curves");
  add_common(s_plot, common, {});
  s_plot->add_option("--curves", plot.curves, "curve CSV")->required();
  s_plot->add_option("--title", plot.title, "plot title");

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "write a synthetic toy dataset");
  add_common(s_synth, common, kSynthKeys);
  s_synth->add_option("--count", synth.count, "number of samples");
  s_synth->add_option("--growth", synth.growth, "percent points added per year at likelihood 1");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::printf("error kind=usage msg=%s\n", quoted(e.what()).c_str());
    return 2;
  }

  try {
    if (*s_ingest) return run_ingest(common, ingest);
    if (*s_like) return run_likelihood(common, likelihood);
    if (*s_cluster) return run_cluster(common, cluster);
    if (*s_train) return run_train(common, train);
    if (*s_sample) return run_sample(common, sample);
    if (*s_ca) return run_ca(common, caa);
    if (*s_eval) return run_evaluate(common, evaluate);
    if (*s_plot) return run_plot(common, plot);
    if (*s_synth) return run_synth(common, synth);
  } catch (const UsageError& e) {
    std::printf("error kind=usage msg=%s\n", quoted(e.what()).c_str());
    return 2;
  } catch (const Error& e) {
    std::printf("error kind=%s msg=%s\n", e.kind().c_str(), quoted(e.what()).c_str());
    return 1;
  } catch (const std::exception& e) {
    std::printf("error kind=internal msg=%s\n", quoted(e.what()).c_str());
    return 1;
  }
  return 2;
}

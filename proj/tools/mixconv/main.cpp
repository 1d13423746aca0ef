// mixconv: task-conditional 3D convolution engine, single binary with
// subcommands for the whole workflow: synthesize data, train, evaluate,
// predict, verify merged/branch-wise agreement, extend to a new task,
// benchmark the two forward strategies, and dump gate summaries.
//
// Exit codes: 0 ok, 1 contract/tolerance failure, 2 usage or config error,
// 3 IO error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "mixconv/bench.hpp"
#include "mixconv/checkpoint.hpp"
#include "mixconv/config.hpp"
#include "mixconv/equiv.hpp"
#include "mixconv/metrics.hpp"
#include "mixconv/network.hpp"
#include "mixconv/sliding_window.hpp"
#include "mixconv/synth.hpp"
#include "mixconv/train.hpp"

namespace fs = std::filesystem;
using namespace mixconv;

namespace {

constexpr int kOk = 0;
constexpr int kContract = 1;
constexpr int kUsage = 2;
constexpr int kIo = 3;

int guarded(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kContract;
  }
}

RunConfig config_from(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

// Run `fn` with the element type matching a dtype code (1 = f32, 2 = f64).
template <class F>
int with_dtype(int code, F&& fn) {
  if (code == 1) return fn(float{});
  if (code == 2) return fn(double{});
  throw ConfigError("unsupported dtype code " + std::to_string(code));
}

template <class T>
VolumeT<T> cast_volume(const Volume& v) {
  VolumeT<T> out(v.d, v.h, v.w);
  for (std::size_t i = 0; i < v.data.size(); ++i)
    out.data[i] = static_cast<T>(v.data[i]);
  return out;
}

// Sample ids in reports: input file stem without the _x suffix,
// e.g. data/c2_s011_x.vol5 -> c2_s011.
std::string sample_id(const SampleRef& ref) {
  std::string stem = fs::path(ref.input_path).stem().string();
  if (stem.size() > 2 && stem.ends_with("_x")) stem.resize(stem.size() - 2);
  return stem;
}

// Mirrors stream output into a log file so training progress is visible
// live and preserved on disk.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 private:
  int overflow(int c) override {
    if (c != EOF) {
      a_->sputc(static_cast<char>(c));
      b_->sputc(static_cast<char>(c));
    }
    return c;
  }
  int sync() override {
    a_->pubsync();
    b_->pubsync();
    return 0;
  }
  std::streambuf* a_;
  std::streambuf* b_;
};

void write_text_file(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f << text;
    if (!f) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

// Label filter for a task flag: one task when requested, otherwise every
// task the model can embed (datasets may carry extra classes, e.g. one held
// out for the extension workflow).
std::vector<int> filter_of(int task, int model_tasks) {
  std::vector<int> out;
  if (task > 0) {
    out.push_back(task);
  } else {
    for (int l = 1; l <= model_tasks; ++l) out.push_back(l);
  }
  return out;
}

// Sliding-window evaluation of one split; `window` is the tile extent
// (defaults to the training patch).
template <class T>
MetricsReport eval_split(NetworkParams<T>& params,
                         const std::vector<SampleRef>& rows,
                         const std::string& data_dir, Split split,
                         const std::vector<int>& label_filter, int wd, int wh,
                         int ww, Path path) {
  MetricsReport report;
  for (const SampleRef& ref : rows) {
    if (ref.split != split) continue;
    if (!label_filter.empty() &&
        std::find(label_filter.begin(), label_filter.end(), ref.label) ==
            label_filter.end())
      continue;
    const Sample s = load_sample(ref, data_dir);
    const VolumeT<T> vol = cast_volume<T>(s.input);
    const WindowPlan plan = make_window_plan(vol.d, vol.h, vol.w, wd, wh, ww);
    const bool replay = params.stored_gates.count(s.label) > 0;
    const VolumeT<T> pred =
        sliding_window_predict(vol, params, s.label, plan, path, replay);
    report.images.push_back(
        {sample_id(ref), s.label, metrics(pred, cast_volume<T>(s.target))});
  }
  if (report.images.empty())
    throw ConfigError("no samples selected in split '" + split_name(split) + "'");
  return report;
}

// FNV-1a over the raw bytes of every non-trainable parameter group; the
// extension workflow uses it to prove the frozen base never moved.
template <class T>
uint64_t frozen_checksum(NetworkParams<T>& params) {
  uint64_t h = 1469598103934665603ull;
  for_each_group<T>(params, nullptr, [&](const ParamGroup<T>& g) {
    if (g.trainable) return;
    const auto* bytes = reinterpret_cast<const unsigned char*>(g.param);
    for (std::size_t i = 0; i < g.count * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  });
  return h;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOpts {
  std::string config;
  std::string out;
  uint64_t seed = 0;
  int classes = 0;
  int samples = 0;
  bool dump = false;
  CLI::Option *out_opt = nullptr, *seed_opt = nullptr, *classes_opt = nullptr,
              *samples_opt = nullptr;
};

int cmd_gen_data(const GenDataOpts& o) {
  RunConfig cfg = config_from(o.config);
  if (o.out_opt->count()) cfg.data_dir = o.out;
  if (o.seed_opt->count()) cfg.seed = o.seed;
  if (o.classes_opt->count()) cfg.data.classes = o.classes;
  if (o.samples_opt->count()) cfg.data.samples_per_class = o.samples;
  if (o.dump) {
    std::cout << dump_run_config(cfg);
    return kOk;
  }
  fs::create_directories(cfg.data_dir);
  const auto rows = generate_dataset(cfg.data, cfg.seed, cfg.data_dir);
  int train = 0, val = 0, test = 0;
  for (const auto& r : rows) {
    if (r.split == Split::Train) ++train;
    if (r.split == Split::Val) ++val;
    if (r.split == Split::Test) ++test;
  }
  std::cout << "wrote " << rows.size() << " samples (" << train << " train, "
            << val << " val, " << test << " test) to " << cfg.data_dir
            << "\nmanifest: " << cfg.data_dir << "/manifest.txt\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
  std::string path_name;
  std::string dtype;
  std::string variant;
  uint64_t seed = 0;
  int epochs = 0;
  int batch = 0;
  int task = -1;
  bool dump = false;
  CLI::Option *data_opt = nullptr, *out_opt = nullptr, *seed_opt = nullptr,
              *epochs_opt = nullptr, *batch_opt = nullptr, *task_opt = nullptr,
              *path_opt = nullptr, *dtype_opt = nullptr, *variant_opt = nullptr;
};

RunConfig train_config(const TrainOpts& o) {
  RunConfig cfg = config_from(o.config);
  if (o.data_opt->count()) cfg.data_dir = o.data;
  if (o.out_opt->count()) cfg.out_dir = o.out;
  if (o.seed_opt->count()) {
    cfg.seed = o.seed;
    cfg.train.seed = o.seed;
    cfg.arch.embed_seed = o.seed;
  }
  if (o.epochs_opt->count()) cfg.train.epochs = o.epochs;
  if (o.batch_opt->count()) cfg.train.batch_size = o.batch;
  if (o.task_opt->count()) cfg.task_filter = o.task;
  if (o.path_opt->count()) cfg.train.path = path_from_name(o.path_name);
  if (o.dtype_opt->count()) cfg.dtype_code = dtype_from_name(o.dtype);
  if (o.variant_opt->count()) cfg.arch.variant = variant_from_name(o.variant);
  if (cfg.task_filter < 0 || cfg.task_filter > cfg.arch.tasks)
    throw ConfigError("task filter out of range 0.." +
                      std::to_string(cfg.arch.tasks));
  return cfg;
}

template <class T>
int train_typed(const RunConfig& cfg, const std::string& resume) {
  NetworkParams<T> params = [&] {
    if (resume.empty()) {
      Rng rng = Rng(cfg.seed).stream("init", 0);
      return build_network<T>(cfg.arch, rng);
    }
    std::cout << "resuming from " << resume << " (architecture taken from the checkpoint)\n";
    return load_checkpoint<T>(resume);
  }();

  const auto rows = read_manifest(cfg.data_dir + "/manifest.txt");
  const auto filter = filter_of(cfg.task_filter, params.arch.tasks);
  const auto train_set = load_split(rows, cfg.data_dir, Split::Train, filter);
  const auto val_set = load_split(rows, cfg.data_dir, Split::Val, filter);
  if (train_set.empty()) throw ConfigError("manifest has no training samples");
  if (val_set.empty()) throw ConfigError("manifest has no validation samples");

  std::cout << "training " << variant_name(params.arch.variant) << " depth "
            << params.arch.depth << ", base " << params.arch.base_channels
            << ", " << parameter_count(params, true) << " trainable of "
            << parameter_count(params) << " parameters, "
            << train_set.size() << " train / " << val_set.size()
            << " val samples, " << path_name(cfg.train.path) << " path, "
            << dtype_name(cfg.dtype_code) << "\n";

  fs::create_directories(cfg.out_dir);
  std::ofstream log_file(cfg.out_dir + "/train.log", std::ios::trunc);
  if (!log_file) throw IoError("cannot open " + cfg.out_dir + "/train.log");
  TeeBuf tee(std::cout.rdbuf(), log_file.rdbuf());
  std::ostream log(&tee);

  TrainResult<T> result = train(params, train_set, val_set, cfg.train, &log);
  if (result.diverged) {
    std::cerr << "training diverged (non-finite loss); no checkpoint written\n";
    return kContract;
  }

  const std::string ckpt = cfg.out_dir + "/model.rpmk";
  save_checkpoint(ckpt, result.best);
  std::cout << "best validation MSE " << result.best_val << " at epoch "
            << result.best_epoch << "\nwrote " << ckpt << "\n";
  return kOk;
}

int cmd_train(const TrainOpts& o) {
  RunConfig cfg = train_config(o);
  if (o.dump) {
    std::cout << dump_run_config(cfg);
    return kOk;
  }
  return with_dtype(cfg.dtype_code, [&](auto tag) {
    return train_typed<decltype(tag)>(cfg, o.resume);
  });
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string config;
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "test";
  std::string baseline;
  std::vector<int> window;
  int task = 0;
  CLI::Option *data_opt = nullptr, *out_opt = nullptr;
};

template <class T>
int eval_typed(const RunConfig& cfg, const EvalOpts& o) {
  const auto rows = read_manifest(cfg.data_dir + "/manifest.txt");
  NetworkParams<T> params = load_checkpoint<T>(o.checkpoint);

  const int wd = o.window.empty() ? cfg.train.patch_d : o.window[0];
  const int wh = o.window.empty() ? cfg.train.patch_h : o.window[1];
  const int ww = o.window.empty() ? cfg.train.patch_w : o.window[2];

  MetricsReport report =
      eval_split(params, rows, cfg.data_dir, split_from_name(o.split),
                 filter_of(o.task, params.arch.tasks), wd, wh, ww,
                 cfg.train.path);

  std::optional<MetricsReport> baseline;
  if (!o.baseline.empty()) baseline = read_report_kv(o.baseline);

  const std::string text =
      format_report(report, baseline ? &*baseline : nullptr);
  std::cout << text;

  fs::create_directories(cfg.out_dir);
  write_text_file(cfg.out_dir + "/report.txt", text);
  write_report_kv(cfg.out_dir + "/report.kv", report);
  std::cout << "wrote " << cfg.out_dir << "/report.txt and "
            << cfg.out_dir << "/report.kv\n";
  return kOk;
}

int cmd_eval(const EvalOpts& o) {
  RunConfig cfg = config_from(o.config);
  if (o.data_opt->count()) cfg.data_dir = o.data;
  if (o.out_opt->count()) cfg.out_dir = o.out;
  return with_dtype(checkpoint_dtype(o.checkpoint), [&](auto tag) {
    return eval_typed<decltype(tag)>(cfg, o);
  });
}

// ---------------------------------------------------------------------------
// predict

struct PredictOpts {
  std::string checkpoint;
  std::string input;
  std::string out;
  int task = 1;
  std::vector<int> window;
};

template <class T>
int predict_typed(const PredictOpts& o) {
  NetworkParams<T> params = load_checkpoint<T>(o.checkpoint);
  if (o.task < 1 || o.task > params.arch.tasks)
    throw ConfigError("task " + std::to_string(o.task) + " out of range 1.." +
                      std::to_string(params.arch.tasks));

  Volume raw = vol_dtype(o.input) == 2
                   ? [&] {
                       const VolumeT<double> v = read_vol_f64(o.input);
                       Volume out(v.d, v.h, v.w);
                       for (std::size_t i = 0; i < v.data.size(); ++i)
                         out.data[i] = static_cast<float>(v.data[i]);
                       return out;
                     }()
                   : read_vol(o.input);
  zscore(raw);
  const VolumeT<T> vol = cast_volume<T>(raw);

  const int wd = o.window.empty() ? 16 : o.window[0];
  const int wh = o.window.empty() ? 32 : o.window[1];
  const int ww = o.window.empty() ? 32 : o.window[2];
  const WindowPlan plan = make_window_plan(vol.d, vol.h, vol.w, wd, wh, ww);

  const bool replay = params.stored_gates.count(o.task) > 0;
  const VolumeT<T> pred =
      sliding_window_predict(vol, params, o.task, plan, Path::Merged, replay);
  write_vol(o.out, pred);
  std::cout << "wrote " << o.out << " (" << pred.d << "x" << pred.h << "x"
            << pred.w << ", standardized units)\n";
  return kOk;
}

int cmd_predict(const PredictOpts& o) {
  return with_dtype(checkpoint_dtype(o.checkpoint), [&](auto tag) {
    return predict_typed<decltype(tag)>(o);
  });
}

// ---------------------------------------------------------------------------
// check-equiv

struct CheckEquivOpts {
  int trials = 100;
  int net_trials = 10;
  uint64_t seed = 1;
  double perturb = 0;
};

// Agreement tolerances for the merged strategy against branch-wise
// evaluation. These are release criteria, not knobs.
constexpr double kBlockTolF64 = 1e-10;
constexpr double kBlockTolF32 = 1e-4;
constexpr double kNetTolF64 = 1e-8;

int cmd_check_equiv(const CheckEquivOpts& o) {
  if (o.perturb != 0)
    std::cout << "injecting " << o.perturb
              << " into one merged-side expert weight (sensitivity check)\n";

  const EquivReport blocks = run_block_equiv_suite(o.trials, o.seed, o.perturb);
  for (const EquivCase& c : blocks.cases)
    std::printf("case %3d  f64 %.3e  f32 %.3e  %s\n", c.index, c.dev_f64,
                c.dev_f32, c.desc.c_str());
  std::printf("block suite max deviation: f64 %.3e (tol %.0e), f32 %.3e (tol %.0e)\n",
              blocks.max_f64, kBlockTolF64, blocks.max_f32, kBlockTolF32);

  const EquivReport nets = run_network_equiv_suite(o.net_trials, o.seed);
  for (const EquivCase& c : nets.cases)
    std::printf("net  %3d  f64 %.3e  %s\n", c.index, c.dev_f64, c.desc.c_str());
  std::printf("network suite max deviation: f64 %.3e (tol %.0e)\n", nets.max_f64,
              kNetTolF64);

  const bool ok = blocks.max_f64 <= kBlockTolF64 &&
                  blocks.max_f32 <= kBlockTolF32 && nets.max_f64 <= kNetTolF64;
  std::cout << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? kOk : kContract;
}

// ---------------------------------------------------------------------------
// extend

struct ExtendOpts {
  std::string config;
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string compare_split = "val";
  int new_task = 0;
  int epochs = 0;
  CLI::Option *data_opt = nullptr, *out_opt = nullptr, *epochs_opt = nullptr;
};

template <class T>
int extend_typed(RunConfig cfg, const ExtendOpts& o) {
  const auto rows = read_manifest(cfg.data_dir + "/manifest.txt");
  NetworkParams<T> params = load_checkpoint<T>(o.checkpoint);
  const int old_tasks = params.arch.tasks;
  const int new_task = o.new_task > 0 ? o.new_task : old_tasks + 1;
  if (new_task <= old_tasks)
    throw ConfigError("new task id " + std::to_string(new_task) +
                      " collides with existing tasks 1.." +
                      std::to_string(old_tasks));

  const Split cmp_split = split_from_name(o.compare_split);
  const int wd = cfg.train.patch_d, wh = cfg.train.patch_h, ww = cfg.train.patch_w;

  std::cout << "evaluating tasks 1.." << old_tasks << " on the "
            << o.compare_split << " split before extension\n";
  std::vector<Metrics> pre;
  for (int l = 1; l <= old_tasks; ++l)
    pre.push_back(eval_split(params, rows, cfg.data_dir, cmp_split, {l}, wd,
                             wh, ww, cfg.train.path)
                      .overall());

  Rng rng = Rng(cfg.seed).stream("extend", 0);
  extend_for_new_task(params, rng);
  const uint64_t frozen_before = frozen_checksum(params);

  const auto train_set = load_split(rows, cfg.data_dir, Split::Train, {new_task});
  const auto val_set = load_split(rows, cfg.data_dir, Split::Val, {new_task});
  if (train_set.empty())
    throw ConfigError("manifest has no training samples for task " +
                      std::to_string(new_task));
  if (o.epochs_opt->count()) cfg.train.epochs = o.epochs;

  std::cout << "fine-tuning task " << new_task << ": "
            << parameter_count(params, true) << " trainable of "
            << parameter_count(params) << " parameters, " << train_set.size()
            << " train / " << val_set.size() << " val samples\n";

  fs::create_directories(cfg.out_dir);
  std::ofstream log_file(cfg.out_dir + "/extend.log", std::ios::trunc);
  if (!log_file) throw IoError("cannot open " + cfg.out_dir + "/extend.log");
  TeeBuf tee(std::cout.rdbuf(), log_file.rdbuf());
  std::ostream log(&tee);

  TrainResult<T> result = train(params, train_set, val_set, cfg.train, &log);
  if (result.diverged) {
    std::cerr << "fine-tuning diverged (non-finite loss); no checkpoint written\n";
    return kContract;
  }

  const uint64_t frozen_after = frozen_checksum(result.best);
  bool ok = frozen_before == frozen_after;
  if (!ok) std::cerr << "frozen-parameter checksum changed during fine-tuning\n";

  std::cout << "re-evaluating tasks 1.." << old_tasks
            << " with stored gates after extension\n";
  std::printf("task   MSE before          MSE after           unchanged\n");
  for (int l = 1; l <= old_tasks; ++l) {
    const Metrics post = eval_split(result.best, rows, cfg.data_dir, cmp_split,
                                    {l}, wd, wh, ww, cfg.train.path)
                             .overall();
    const bool same = pre[l - 1].mse == post.mse && pre[l - 1].mae == post.mae &&
                      pre[l - 1].r2 == post.r2;
    std::printf("%4d   %.12e  %.12e  %s\n", l, pre[l - 1].mse, post.mse,
                same ? "yes" : "NO");
    ok = ok && same;
  }

  const std::string ckpt = cfg.out_dir + "/extended.rpmk";
  save_checkpoint(ckpt, result.best);
  std::cout << "new task " << new_task << " best validation MSE "
            << result.best_val << " at epoch " << result.best_epoch
            << "\nwrote " << ckpt << "\n";
  if (!ok) {
    std::cerr << "previous-task behavior changed; extension contract violated\n";
    return kContract;
  }
  return kOk;
}

int cmd_extend(const ExtendOpts& o) {
  RunConfig cfg = config_from(o.config);
  if (o.data_opt->count()) cfg.data_dir = o.data;
  if (o.out_opt->count()) cfg.out_dir = o.out;
  return with_dtype(checkpoint_dtype(o.checkpoint), [&](auto tag) {
    return extend_typed<decltype(tag)>(cfg, o);
  });
}

// ---------------------------------------------------------------------------
// bench

struct BenchOpts {
  int reps = 50;
  int warmup = 5;
  int channels = 64;
  int batch = 1;
  std::vector<int> extents;
  uint64_t seed = 1;
  std::string out;
};

constexpr double kBenchAgreementTol = 1e-4;

int cmd_bench(const BenchOpts& o) {
  BlockBenchConfig cfg;
  cfg.reps = o.reps;
  cfg.warmup = o.warmup;
  cfg.channels = o.channels;
  cfg.batch = o.batch;
  cfg.seed = o.seed;
  if (!o.extents.empty()) {
    cfg.d = o.extents[0];
    cfg.h = o.extents[1];
    cfg.w = o.extents[2];
  }

  const BlockBenchReport r = bench_block(cfg);
  std::printf(
      "workload: one mixture block, %d -> %d channels, input %dx%dx%dx%dx%d, "
      "f32, %d reps after %d warmup\n",
      cfg.channels, cfg.channels, cfg.batch, cfg.channels, cfg.d, cfg.h, cfg.w,
      cfg.reps, cfg.warmup);
  std::printf("strategy      median ms     iqr ms   alloc bytes/fwd\n");
  std::printf("merged      %11.3f  %9.3f   %15llu\n", r.merged.median_ms,
              r.merged.iqr_ms,
              static_cast<unsigned long long>(r.merged.alloc_bytes));
  std::printf("branchwise  %11.3f  %9.3f   %15llu\n", r.branchwise.median_ms,
              r.branchwise.iqr_ms,
              static_cast<unsigned long long>(r.branchwise.alloc_bytes));
  std::printf("output agreement (rel): %.3e\n", r.rel_dev);

  if (r.rel_dev > kBenchAgreementTol) {
    std::cerr << "strategies disagree beyond " << kBenchAgreementTol
              << "; benchmark aborted\n";
    return kContract;
  }

  if (!o.out.empty()) {
    std::ostringstream kv;
    kv.precision(12);
    kv << "bench.batch " << cfg.batch << "\nbench.channels " << cfg.channels
       << "\nbench.extents " << cfg.d << " " << cfg.h << " " << cfg.w
       << "\nbench.reps " << cfg.reps << "\nbench.warmup " << cfg.warmup
       << "\nbench.seed " << cfg.seed
       << "\nmerged.median_ms " << r.merged.median_ms
       << "\nmerged.iqr_ms " << r.merged.iqr_ms
       << "\nmerged.alloc_bytes " << r.merged.alloc_bytes
       << "\nbranchwise.median_ms " << r.branchwise.median_ms
       << "\nbranchwise.iqr_ms " << r.branchwise.iqr_ms
       << "\nbranchwise.alloc_bytes " << r.branchwise.alloc_bytes
       << "\nagreement.rel_dev " << r.rel_dev << "\n";
    write_text_file(o.out, kv.str());
    std::cout << "wrote " << o.out << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// gates

struct GatesOpts {
  std::string checkpoint;
  std::string out;
  int task = 0;
};

template <class T>
int gates_typed(const GatesOpts& o) {
  NetworkParams<T> params = load_checkpoint<T>(o.checkpoint);
  if (params.arch.gating.source != GateSource::TaskPrior)
    throw ConfigError("gate summaries need task-prior gating; this checkpoint "
                      "uses input-dependent gates");

  std::ostringstream text;
  text << "# gate mass per expert, averaged over output channels\n";
  for (int l = 1; l <= params.arch.tasks; ++l) {
    if (o.task > 0 && l != o.task) continue;
    // Old tasks of an extended network run on stored gates, so the summary
    // reflects them too.
    const auto stored = params.stored_gates.find(l);
    std::vector<std::pair<std::string, std::vector<T>>> summary;
    if (stored != params.stored_gates.end()) {
      const auto blocks = block_list(params);
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        const GateVector<T>& gv = stored->second[b];
        std::vector<T> avg(gv.experts(), T(0));
        for (int e = 0; e < gv.experts(); ++e) {
          for (int c = 0; c < gv.channels(); ++c) avg[e] += gv.values[e][c];
          avg[e] /= static_cast<T>(gv.channels());
        }
        summary.emplace_back(blocks[b].first, std::move(avg));
      }
    } else {
      summary = gating_summary(params, l);
    }
    for (const auto& [block, avg] : summary) {
      text << "block=" << block << " task=" << l;
      char buf[64];
      // Keys carry the expert position because kinds can repeat (an
      // extension appends another conv3).
      for (std::size_t e = 0; e < avg.size(); ++e) {
        std::snprintf(buf, sizeof buf, " e%zu:%s=%.17g", e,
                      expert_name(params.arch.experts[e]).c_str(),
                      static_cast<double>(avg[e]));
        text << buf;
      }
      text << "\n";
    }
  }

  if (o.out.empty()) {
    std::cout << text.str();
  } else {
    write_text_file(o.out, text.str());
    std::cout << "wrote " << o.out << "\n";
  }
  return kOk;
}

int cmd_gates(const GatesOpts& o) {
  return with_dtype(checkpoint_dtype(o.checkpoint), [&](auto tag) {
    return gates_typed<decltype(tag)>(o);
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"task-conditional 3D convolution engine and benchmark kit"};
  app.require_subcommand(1);
  int rc = kOk;

  GenDataOpts gen;
  auto* gen_cmd = app.add_subcommand(
      "gen-data", "Synthesize the multi-structure volumetric benchmark");
  gen_cmd->add_option("--config", gen.config, "Run configuration file (JSON)");
  gen.out_opt = gen_cmd->add_option("-o,--out", gen.out, "Dataset directory");
  gen.seed_opt = gen_cmd->add_option("--seed", gen.seed, "Generation seed");
  gen.classes_opt =
      gen_cmd->add_option("--classes", gen.classes, "Structure classes (1..4)");
  gen.samples_opt = gen_cmd->add_option("--samples-per-class", gen.samples,
                                        "Samples per structure class");
  gen_cmd->add_flag("--dump-config", gen.dump,
                    "Print the effective configuration and exit");
  gen_cmd->callback([&] { rc = guarded([&] { return cmd_gen_data(gen); }); });

  TrainOpts tr;
  auto* train_cmd =
      app.add_subcommand("train", "Train a model on a generated dataset");
  train_cmd->add_option("--config", tr.config, "Run configuration file (JSON)");
  tr.data_opt = train_cmd->add_option("--data", tr.data, "Dataset directory");
  tr.out_opt =
      train_cmd->add_option("-o,--out", tr.out, "Output directory (checkpoint, log)");
  tr.seed_opt = train_cmd->add_option("--seed", tr.seed, "Run seed");
  tr.epochs_opt = train_cmd->add_option("--epochs", tr.epochs, "Training epochs");
  tr.batch_opt =
      train_cmd->add_option("--batch-size", tr.batch, "Mini-batch size");
  tr.task_opt = train_cmd->add_option(
      "--task", tr.task, "Train on one task only (0 trains on all)");
  tr.path_opt = train_cmd->add_option("--path", tr.path_name,
                                      "Forward strategy: merged|branchwise");
  tr.dtype_opt =
      train_cmd->add_option("--dtype", tr.dtype, "Element type: f32|f64");
  tr.variant_opt = train_cmd->add_option(
      "--variant", tr.variant,
      "Network variant: task_conditional|plain|multi_decoder");
  train_cmd->add_option("--resume", tr.resume,
                        "Continue training from a checkpoint");
  train_cmd->add_flag("--dump-config", tr.dump,
                      "Print the effective configuration and exit");
  train_cmd->callback([&] { rc = guarded([&] { return cmd_train(tr); }); });

  EvalOpts ev;
  auto* eval_cmd = app.add_subcommand(
      "eval", "Evaluate a checkpoint on a dataset split (sliding window)");
  eval_cmd->add_option("--config", ev.config, "Run configuration file (JSON)");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")
      ->required();
  ev.data_opt = eval_cmd->add_option("--data", ev.data, "Dataset directory");
  ev.out_opt = eval_cmd->add_option("-o,--out", ev.out, "Report directory");
  eval_cmd->add_option("--split", ev.split, "Split: train|val|test");
  eval_cmd->add_option("--task", ev.task, "Restrict to one task (0 = all)");
  eval_cmd->add_option("--baseline", ev.baseline,
                       "Baseline report.kv for relative-improvement rows");
  eval_cmd->add_option("--window", ev.window,
                       "Sliding-window extents D H W (default: training patch)")
      ->expected(3);
  eval_cmd->callback([&] { rc = guarded([&] { return cmd_eval(ev); }); });

  PredictOpts pr;
  auto* predict_cmd = app.add_subcommand(
      "predict", "Sliding-window prediction for one volume and task");
  predict_cmd->add_option("--checkpoint", pr.checkpoint, "Model checkpoint")
      ->required();
  predict_cmd->add_option("--input", pr.input, "Input volume (VOL5)")
      ->required();
  predict_cmd->add_option("--task", pr.task, "Task id (1-based)")->required();
  predict_cmd->add_option("-o,--out", pr.out, "Output volume path")->required();
  predict_cmd->add_option("--window", pr.window,
                          "Sliding-window extents D H W")
      ->expected(3);
  predict_cmd->callback([&] { rc = guarded([&] { return cmd_predict(pr); }); });

  CheckEquivOpts ce;
  auto* equiv_cmd = app.add_subcommand(
      "check-equiv",
      "Verify merged and branch-wise forwards agree to tolerance");
  equiv_cmd->add_option("--trials", ce.trials, "Randomized block-level cases");
  equiv_cmd->add_option("--net-trials", ce.net_trials,
                        "Randomized end-to-end network cases");
  equiv_cmd->add_option("--seed", ce.seed, "Suite seed");
  equiv_cmd->add_option(
      "--inject-perturbation", ce.perturb,
      "Nudge one merged-side weight by this amount; the suite must then fail "
      "(demonstrates sensitivity)");
  equiv_cmd->callback([&] { rc = guarded([&] { return cmd_check_equiv(ce); }); });

  ExtendOpts ex;
  auto* extend_cmd = app.add_subcommand(
      "extend", "Add a task to a trained model without touching old behavior");
  extend_cmd->add_option("--config", ex.config, "Run configuration file (JSON)");
  extend_cmd->add_option("--checkpoint", ex.checkpoint, "Trained checkpoint")
      ->required();
  ex.data_opt = extend_cmd->add_option(
      "--data", ex.data, "Dataset directory that includes the new task");
  ex.out_opt = extend_cmd->add_option("-o,--out", ex.out, "Output directory");
  extend_cmd->add_option("--new-task", ex.new_task,
                         "New task id (default: next unused)");
  ex.epochs_opt =
      extend_cmd->add_option("--epochs", ex.epochs, "Fine-tuning epochs");
  extend_cmd->add_option("--compare-split", ex.compare_split,
                         "Split for the before/after comparison");
  extend_cmd->callback([&] { rc = guarded([&] { return cmd_extend(ex); }); });

  BenchOpts be;
  auto* bench_cmd = app.add_subcommand(
      "bench", "Time merged vs branch-wise forwards on a fixed block workload");
  bench_cmd->add_option("--reps", be.reps, "Timed repetitions");
  bench_cmd->add_option("--warmup", be.warmup, "Untimed warmup repetitions");
  bench_cmd->add_option("--channels", be.channels, "Block channels");
  bench_cmd->add_option("--batch", be.batch, "Batch size");
  bench_cmd->add_option("--extents", be.extents, "Input extents D H W")
      ->expected(3);
  bench_cmd->add_option("--seed", be.seed, "Workload seed");
  bench_cmd->add_option("-o,--out", be.out, "Also write a key-value report");
  bench_cmd->callback([&] { rc = guarded([&] { return cmd_bench(be); }); });

  GatesOpts ga;
  auto* gates_cmd = app.add_subcommand(
      "gates", "Dump per-task, per-block expert gate summaries");
  gates_cmd->add_option("--checkpoint", ga.checkpoint, "Model checkpoint")
      ->required();
  gates_cmd->add_option("-o,--out", ga.out, "Output file (default: stdout)");
  gates_cmd->add_option("--task", ga.task, "Restrict to one task (0 = all)");
  gates_cmd->callback([&] { rc = guarded([&] { return cmd_gates(ga); }); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  return rc;
}

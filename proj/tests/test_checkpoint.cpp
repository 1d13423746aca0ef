#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mixconv/checkpoint.hpp"
#include "mixconv/config.hpp"
#include "mixconv/errors.hpp"
#include "mixconv/network.hpp"

using namespace mixconv;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& leaf) {
  fs::path dir = fs::temp_directory_path() / "mixconv-checkpoint-tests" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ArchConfig tiny_arch(int tasks = 2) {
  ArchConfig a;
  a.depth = 1;
  a.base_channels = 2;
  a.tasks = tasks;
  return a;
}

// Give every block a non-degenerate gate so serialization has to carry real
// values, not the all-zero init.
template <class T>
void randomize_gating(NetworkParams<T>& p, uint64_t seed) {
  Rng rng(seed);
  for (auto& [bname, blk] : block_list(p))
    for (T& v : blk->fc1.w) v = static_cast<T>(rng.normal() * 0.3);
}

template <class T>
std::map<std::string, std::vector<T>> snapshot(NetworkParams<T>& p) {
  std::map<std::string, std::vector<T>> snap;
  for_each_group<T>(p, nullptr, [&](const ParamGroup<T>& g) {
    snap[g.name] = std::vector<T>(g.param, g.param + g.count);
  });
  return snap;
}

template <class T>
void check_bit_identical(NetworkParams<T>& a, NetworkParams<T>& b) {
  auto sa = snapshot(a);
  auto sb = snapshot(b);
  REQUIRE(sa.size() == sb.size());
  for (const auto& [name, values] : sa) {
    REQUIRE_MESSAGE(sb.count(name) == 1, name);
    // Element-wise == on purpose: the format stores raw little-endian
    // payloads, so a round-trip may not lose a single bit.
    CHECK_MESSAGE(sb.at(name) == values, name);
  }
}

void check_arch_equal(const ArchConfig& a, const ArchConfig& b) {
  CHECK(a.depth == b.depth);
  CHECK(a.base_channels == b.base_channels);
  CHECK(a.in_channels == b.in_channels);
  CHECK(a.out_channels == b.out_channels);
  CHECK(a.tasks == b.tasks);
  CHECK(a.variant == b.variant);
  CHECK(a.embed == b.embed);
  CHECK(a.embed_seed == b.embed_seed);
  REQUIRE(a.experts.size() == b.experts.size());
  for (std::size_t i = 0; i < a.experts.size(); ++i) {
    CHECK(a.experts[i].kind == b.experts[i].kind);
    CHECK(a.experts[i].k == b.experts[i].k);
  }
  CHECK(a.gating.fcn == b.gating.fcn);
  CHECK(a.gating.hidden == b.gating.hidden);
  CHECK(a.gating.activation == b.gating.activation);
  CHECK(a.gating.source == b.gating.source);
}

template <class T>
Tensor5<T> probe_input(uint64_t seed) {
  Tensor5<T> x(1, 1, 4, 4, 4);
  Rng rng(seed);
  for (T& v : x.data) v = static_cast<T>(rng.normal());
  return x;
}

}  // namespace

TEST_CASE("checkpoints round-trip bit-exactly in both precisions") {
  fs::path dir = scratch("roundtrip");

  Rng rng64(11);
  auto p64 = build_network<double>(tiny_arch(), rng64);
  randomize_gating(p64, 21);
  std::string path64 = (dir / "net64.rpmk").string();
  save_checkpoint(path64, p64);
  CHECK(checkpoint_dtype(path64) == 2);
  auto q64 = load_checkpoint<double>(path64);
  check_arch_equal(p64.arch, q64.arch);
  CHECK(q64.frozen_base == false);
  CHECK(q64.frozen_expert_count == 0);
  CHECK(q64.stored_gates.empty());
  check_bit_identical(p64, q64);

  auto x64 = probe_input<double>(31);
  CHECK(max_abs_diff(net_forward(x64, p64, 1), net_forward(x64, q64, 1)) == 0.0);

  Rng rng32(12);
  auto p32 = build_network<float>(tiny_arch(), rng32);
  randomize_gating(p32, 22);
  std::string path32 = (dir / "net32.rpmk").string();
  save_checkpoint(path32, p32);
  CHECK(checkpoint_dtype(path32) == 1);
  auto q32 = load_checkpoint<float>(path32);
  check_arch_equal(p32.arch, q32.arch);
  check_bit_identical(p32, q32);

  auto x32 = probe_input<float>(32);
  CHECK(max_abs_diff(net_forward(x32, p32, 2), net_forward(x32, q32, 2)) == 0.0f);

  // Saving twice from the same parameters produces byte-identical files, so
  // checkpoints can be compared with plain cmp.
  std::string again = (dir / "net64-again.rpmk").string();
  save_checkpoint(again, p64);
  std::ifstream f1(path64, std::ios::binary);
  std::ifstream f2(again, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);
}

TEST_CASE("checkpoints preserve every architecture variant") {
  fs::path dir = scratch("variants");

  std::vector<ArchConfig> archs;

  ArchConfig two_layer = tiny_arch();
  two_layer.gating.fcn = FcnKind::TwoLayer;
  two_layer.gating.hidden = 4;
  archs.push_back(two_layer);

  ArchConfig gaussian = tiny_arch(3);
  gaussian.embed = EmbedKind::Gaussian;
  gaussian.embed_seed = 7;
  archs.push_back(gaussian);

  ArchConfig input_dep = tiny_arch();
  input_dep.gating.source = GateSource::InputDependent;
  input_dep.gating.activation = GateActivation::Sigmoid;
  archs.push_back(input_dep);

  ArchConfig multi = tiny_arch();
  multi.variant = NetVariant::MultiDecoder;
  archs.push_back(multi);

  ArchConfig plain = tiny_arch();
  plain.variant = NetVariant::Plain;
  archs.push_back(plain);

  ArchConfig trimmed = tiny_arch();
  trimmed.experts = {{ExpertKind::Conv, 1}, {ExpertKind::AvgpConv, 5}};
  archs.push_back(trimmed);

  for (std::size_t i = 0; i < archs.size(); ++i) {
    CAPTURE(i);
    Rng rng(100 + i);
    auto p = build_network<float>(archs[i], rng);
    randomize_gating(p, 200 + i);
    std::string path = (dir / ("net" + std::to_string(i) + ".rpmk")).string();
    save_checkpoint(path, p);
    auto q = load_checkpoint<float>(path);
    check_arch_equal(p.arch, q.arch);
    check_bit_identical(p, q);
  }
}

TEST_CASE("an extended checkpoint restores frozen state and stored gates") {
  fs::path dir = scratch("extended");

  Rng rng(5);
  auto p = build_network<double>(tiny_arch(2), rng);
  randomize_gating(p, 6);

  auto x = probe_input<double>(7);
  Rng erng(8);
  extend_for_new_task(p, erng);
  // Nudge the new expert and gate rows so the reload has to reproduce more
  // than a zero-filled extension.
  Rng nudge(9);
  for (auto& [bname, blk] : block_list(p)) {
    for (double& v : blk->experts.back().conv_weights.data) v += nudge.normal() * 0.01;
    for (double& v : blk->fc1.w) v += nudge.normal() * 0.01;
  }

  auto y1 = net_forward(x, p, 1, Path::Merged, BNMode::Infer, static_cast<NetCache<double>*>(nullptr), true);
  auto y2 = net_forward(x, p, 2, Path::Merged, BNMode::Infer, static_cast<NetCache<double>*>(nullptr), true);
  auto y3 = net_forward(x, p, 3);

  std::string path = (dir / "extended.rpmk").string();
  save_checkpoint(path, p);
  auto q = load_checkpoint<double>(path);

  CHECK(q.frozen_base == true);
  CHECK(q.frozen_expert_count == 5);
  REQUIRE(q.stored_gates.size() == 2);
  REQUIRE(q.stored_gates.count(1) == 1);
  REQUIRE(q.stored_gates.count(2) == 1);
  REQUIRE(q.stored_gates.at(1).size() == block_list(q).size());
  for (std::size_t b = 0; b < q.stored_gates.at(1).size(); ++b) {
    const auto& orig = p.stored_gates.at(1)[b];
    const auto& back = q.stored_gates.at(1)[b];
    REQUIRE(back.values.size() == orig.values.size());
    CHECK(back.values == orig.values);
  }
  check_arch_equal(p.arch, q.arch);
  check_bit_identical(p, q);

  // Replay through the reloaded net must be bit-identical, old and new tasks.
  CHECK(max_abs_diff(net_forward(x, q, 1, Path::Merged, BNMode::Infer, static_cast<NetCache<double>*>(nullptr), true), y1) == 0.0);
  CHECK(max_abs_diff(net_forward(x, q, 2, Path::Merged, BNMode::Infer, static_cast<NetCache<double>*>(nullptr), true), y2) == 0.0);
  CHECK(max_abs_diff(net_forward(x, q, 3), y3) == 0.0);
}

TEST_CASE("the dtype probe and mismatched loads are reported honestly") {
  fs::path dir = scratch("dtype");

  Rng rng(3);
  auto p32 = build_network<float>(tiny_arch(), rng);
  auto p64 = build_network<double>(tiny_arch(), rng);
  std::string f32 = (dir / "f32.rpmk").string();
  std::string f64 = (dir / "f64.rpmk").string();
  save_checkpoint(f32, p32);
  save_checkpoint(f64, p64);

  CHECK(checkpoint_dtype(f32) == 1);
  CHECK(checkpoint_dtype(f64) == 2);
  CHECK_THROWS_AS(load_checkpoint<double>(f32), FormatError);
  CHECK_THROWS_AS(load_checkpoint<float>(f64), FormatError);
}

TEST_CASE("damaged checkpoint files are rejected") {
  fs::path dir = scratch("damage");

  Rng rng(4);
  auto p = build_network<float>(tiny_arch(), rng);
  std::string good = (dir / "good.rpmk").string();
  save_checkpoint(good, p);
  std::ifstream in(good, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  in.close();
  REQUIRE(bytes.size() > 16);

  auto write_bytes = [&](const fs::path& path, const std::string& b) {
    std::ofstream out(path, std::ios::binary);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  write_bytes(dir / "magic.rpmk", bad_magic);
  CHECK_THROWS_AS(load_checkpoint<float>((dir / "magic.rpmk").string()), FormatError);
  CHECK_THROWS_AS(checkpoint_dtype((dir / "magic.rpmk").string()), FormatError);

  std::string bad_version = bytes;
  bad_version[4] = 99;
  write_bytes(dir / "version.rpmk", bad_version);
  CHECK_THROWS_AS(load_checkpoint<float>((dir / "version.rpmk").string()), FormatError);

  write_bytes(dir / "short.rpmk", bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint<float>((dir / "short.rpmk").string()), FormatError);

  std::string longer = bytes;
  longer.push_back('\0');
  write_bytes(dir / "long.rpmk", longer);
  CHECK_THROWS_AS(load_checkpoint<float>((dir / "long.rpmk").string()), FormatError);

  CHECK_THROWS_AS(load_checkpoint<float>((dir / "absent.rpmk").string()), IoError);
  CHECK_THROWS_AS(checkpoint_dtype((dir / "absent.rpmk").string()), IoError);

  // The writer goes through a temp file in the target directory, so a missing
  // directory surfaces as an I/O failure instead of a partial file.
  std::string nowhere = (dir / "missing-subdir" / "net.rpmk").string();
  CHECK_THROWS_AS(save_checkpoint(nowhere, p), IoError);
  CHECK(!fs::exists(nowhere));
}

TEST_CASE("the architecture descriptor json round-trips every enum") {
  std::vector<NetVariant> variants = {NetVariant::TaskConditional,
                                      NetVariant::Plain,
                                      NetVariant::MultiDecoder};
  std::vector<EmbedKind> embeds = {EmbedKind::OneHot, EmbedKind::Gaussian};
  std::vector<FcnKind> fcns = {FcnKind::SingleLayer, FcnKind::TwoLayer};
  std::vector<GateActivation> acts = {GateActivation::Softmax,
                                      GateActivation::Sigmoid};
  std::vector<GateSource> sources = {GateSource::TaskPrior,
                                     GateSource::InputDependent};

  int combo = 0;
  for (auto v : variants)
    for (auto e : embeds)
      for (auto f : fcns)
        for (auto a : acts)
          for (auto s : sources) {
            CAPTURE(combo);
            ArchConfig arch = tiny_arch(3);
            arch.variant = v;
            arch.embed = e;
            arch.embed_seed = 40 + combo;
            arch.gating.fcn = f;
            arch.gating.hidden = 2 + (combo % 5);
            arch.gating.activation = a;
            arch.gating.source = s;
            if (combo % 2 == 0)
              arch.experts = {{ExpertKind::Conv, 3}, {ExpertKind::AvgpConv, 3}};

            const bool frozen = (combo % 3 == 0);
            const int frozen_experts = frozen ? static_cast<int>(arch.experts.size()) : 0;
            const int dtype = 1 + (combo % 2);
            std::string text = arch_to_json(arch, frozen, frozen_experts, dtype);

            ArchConfig back;
            bool back_frozen = !frozen;
            int back_experts = -1;
            int back_dtype = 0;
            arch_from_json(text, back, back_frozen, back_experts, back_dtype);
            check_arch_equal(arch, back);
            CHECK(back_frozen == frozen);
            CHECK(back_experts == frozen_experts);
            CHECK(back_dtype == dtype);
            ++combo;
          }

  ArchConfig sink;
  bool fb = false;
  int fe = 0, dc = 0;
  CHECK_THROWS_AS(arch_from_json("not json", sink, fb, fe, dc), FormatError);
  CHECK_THROWS_AS(arch_from_json("{\"depth\": \"two\"}", sink, fb, fe, dc), FormatError);
}

TEST_CASE("a minimal run config carries the documented defaults") {
  RunConfig cfg = parse_run_config("{}");
  CHECK(cfg.seed == 1);
  CHECK(cfg.out_dir == "runs/out");
  CHECK(cfg.dtype_code == 1);
  CHECK(cfg.data_dir == "data");
  CHECK(cfg.data.classes == 3);
  CHECK(cfg.data.samples_per_class == 24);
  CHECK(cfg.data.d == 32);
  CHECK(cfg.data.h == 64);
  CHECK(cfg.data.w == 64);
  CHECK(cfg.data.noise == doctest::Approx(0.1));
  CHECK(cfg.data.blur_sigma == doctest::Approx(1.0));
  CHECK(cfg.data.test_fraction == doctest::Approx(0.25));
  CHECK(cfg.data.val_fraction == doctest::Approx(0.10));
  CHECK(cfg.arch.depth == 2);
  CHECK(cfg.arch.base_channels == 8);
  CHECK(cfg.arch.in_channels == 1);
  CHECK(cfg.arch.out_channels == 1);
  CHECK(cfg.arch.tasks == 3);
  CHECK(cfg.arch.variant == NetVariant::TaskConditional);
  CHECK(cfg.arch.embed == EmbedKind::OneHot);
  REQUIRE(cfg.arch.experts.size() == 5);
  CHECK(cfg.arch.gating.fcn == FcnKind::SingleLayer);
  CHECK(cfg.arch.gating.hidden == 6);
  CHECK(cfg.arch.gating.activation == GateActivation::Softmax);
  CHECK(cfg.arch.gating.source == GateSource::TaskPrior);
  CHECK(cfg.train.epochs == 200);
  CHECK(cfg.train.batch_size == 4);
  CHECK(cfg.train.patch_d == 16);
  CHECK(cfg.train.patch_h == 32);
  CHECK(cfg.train.patch_w == 32);
  CHECK(cfg.train.val_interval == 10);
  CHECK(cfg.train.flip_augment == true);
  CHECK(cfg.train.lr == doctest::Approx(1e-4));
  CHECK(cfg.train.path == Path::Merged);
  CHECK(cfg.task_filter == 0);
}

TEST_CASE("the root seed flows into derived seeds unless pinned") {
  RunConfig inherited = parse_run_config("{\"seed\": 9}");
  CHECK(inherited.seed == 9);
  CHECK(inherited.train.seed == 9);
  CHECK(inherited.arch.embed_seed == 9);

  RunConfig pinned = parse_run_config(
      "{\"seed\": 9, \"train\": {\"seed\": 4}, \"arch\": {\"embed_seed\": 5}}");
  CHECK(pinned.seed == 9);
  CHECK(pinned.train.seed == 4);
  CHECK(pinned.arch.embed_seed == 5);
}

TEST_CASE("unknown config keys fail loudly at any depth") {
  CHECK_THROWS_AS(parse_run_config("{\"sede\": 1}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"train\": {\"lrr\": 0.1}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"data\": {\"color\": \"red\"}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"arch\": {\"gating\": {\"fn\": \"x\"}}}"),
                  ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"train\": 3}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[]"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"seed\": 1,"), ConfigError);
}

TEST_CASE("bad config values name the offending key") {
  CHECK_THROWS_AS(parse_run_config("{\"seed\": \"nine\"}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"dtype\": \"f16\"}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"train\": {\"patch\": [8, 8]}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"train\": {\"patch\": \"8\"}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"train\": {\"path\": \"detour\"}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"arch\": {\"variant\": \"spiral\"}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"arch\": {\"experts\": []}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"arch\": {\"experts\": [\"conv9\"]}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"arch\": {\"experts\": [3]}}"), ConfigError);

  // task_filter is validated against the architecture's task count.
  CHECK_THROWS_AS(parse_run_config("{\"train\": {\"task_filter\": 4}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"train\": {\"task_filter\": -1}}"), ConfigError);
  CHECK(parse_run_config("{\"train\": {\"task_filter\": 3}}").task_filter == 3);
  CHECK(parse_run_config(
            "{\"arch\": {\"tasks\": 5}, \"train\": {\"task_filter\": 5}}")
            .task_filter == 5);

  try {
    parse_run_config("{\"train\": {\"lrr\": 0.1}}");
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("lrr") != std::string::npos);
  }
}

TEST_CASE("name helpers map both ways and reject unknown spellings") {
  CHECK(path_name(Path::Merged) == std::string("merged"));
  CHECK(path_name(Path::Branchwise) == std::string("branchwise"));
  CHECK(path_from_name("merged") == Path::Merged);
  CHECK(path_from_name("branchwise") == Path::Branchwise);
  CHECK_THROWS_AS(path_from_name("detour"), ConfigError);

  CHECK(dtype_name(1) == std::string("f32"));
  CHECK(dtype_name(2) == std::string("f64"));
  CHECK(dtype_from_name("f32") == 1);
  CHECK(dtype_from_name("f64") == 2);
  CHECK_THROWS_AS(dtype_from_name("f16"), ConfigError);
}

TEST_CASE("dump and parse are mutually inverse") {
  const std::string text =
      "{\"seed\": 17, \"out_dir\": \"runs/exp\", \"dtype\": \"f64\","
      " \"data\": {\"dir\": \"elsewhere\", \"classes\": 4, \"extents\": [16, 32, 32]},"
      " \"arch\": {\"tasks\": 4, \"variant\": \"multi_decoder\","
      "            \"gating\": {\"activation\": \"sigmoid\"}},"
      " \"train\": {\"epochs\": 12, \"seed\": 4, \"patch\": [8, 16, 16],"
      "             \"task_filter\": 2}}";
  RunConfig cfg = parse_run_config(text);
  CHECK(cfg.dtype_code == 2);
  CHECK(cfg.arch.variant == NetVariant::MultiDecoder);
  CHECK(cfg.train.seed == 4);
  CHECK(cfg.arch.embed_seed == 17);
  CHECK(cfg.task_filter == 2);

  std::string dumped = dump_run_config(cfg);
  RunConfig back = parse_run_config(dumped);
  CHECK(dump_run_config(back) == dumped);
  CHECK(back.seed == cfg.seed);
  CHECK(back.train.seed == 4);
  CHECK(back.arch.embed_seed == 17);
  CHECK(back.data_dir == "elsewhere");
  CHECK(back.data.d == 16);
  CHECK(back.train.patch_h == 16);
  CHECK(back.task_filter == 2);

  // Defaults survive the same trip.
  RunConfig defaults = parse_run_config("{}");
  CHECK(dump_run_config(parse_run_config(dump_run_config(defaults))) ==
        dump_run_config(defaults));
}

TEST_CASE("config files load with path context in errors") {
  fs::path dir = scratch("config-files");

  std::ofstream(dir / "good.json") << "{\"seed\": 2}";
  RunConfig cfg = load_run_config((dir / "good.json").string());
  CHECK(cfg.seed == 2);

  std::ofstream(dir / "bad.json") << "{\"sede\": 2}";
  try {
    load_run_config((dir / "bad.json").string());
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bad.json") != std::string::npos);
  }

  CHECK_THROWS_AS(load_run_config((dir / "absent.json").string()), IoError);
}

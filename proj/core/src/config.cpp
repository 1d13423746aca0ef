#include "mixconv/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mixconv {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::string& section,
                    const std::set<std::string>& known) {
  for (const auto& item : j.items())
    if (!known.count(item.key()))
      throw ConfigError("unknown key '" + item.key() + "' in " + section);
}

const json* section(const json& j, const char* key) {
  if (!j.contains(key)) return nullptr;
  if (!j.at(key).is_object())
    throw ConfigError(std::string(key) + " must be an object");
  return &j.at(key);
}

template <class T>
void fetch(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("bad value for '") + key + "'");
  }
}

void fetch_triple(const json& j, const char* key, int& d, int& h, int& w) {
  if (!j.contains(key)) return;
  const json& a = j.at(key);
  if (!a.is_array() || a.size() != 3)
    throw ConfigError(std::string("'") + key + "' must be [depth, height, width]");
  try {
    d = a[0].get<int>();
    h = a[1].get<int>();
    w = a[2].get<int>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("bad value for '") + key + "'");
  }
}

void parse_data(const json& j, RunConfig& cfg) {
  reject_unknown(j, "data",
                 {"dir", "classes", "samples_per_class", "extents", "noise",
                  "blur_sigma", "test_fraction", "val_fraction"});
  fetch(j, "dir", cfg.data_dir);
  fetch(j, "classes", cfg.data.classes);
  fetch(j, "samples_per_class", cfg.data.samples_per_class);
  fetch_triple(j, "extents", cfg.data.d, cfg.data.h, cfg.data.w);
  fetch(j, "noise", cfg.data.noise);
  fetch(j, "blur_sigma", cfg.data.blur_sigma);
  fetch(j, "test_fraction", cfg.data.test_fraction);
  fetch(j, "val_fraction", cfg.data.val_fraction);
}

void parse_gating(const json& j, GatingConfig& g) {
  reject_unknown(j, "arch.gating", {"fcn", "hidden", "activation", "source"});
  std::string s;
  s = fcn_name(g.fcn);
  fetch(j, "fcn", s);
  g.fcn = fcn_from_name(s);
  fetch(j, "hidden", g.hidden);
  s = activation_name(g.activation);
  fetch(j, "activation", s);
  g.activation = activation_from_name(s);
  s = gate_source_name(g.source);
  fetch(j, "source", s);
  g.source = gate_source_from_name(s);
}

void parse_arch(const json& j, RunConfig& cfg) {
  reject_unknown(j, "arch",
                 {"depth", "base_channels", "in_channels", "out_channels",
                  "tasks", "variant", "embed", "embed_seed", "experts",
                  "gating"});
  ArchConfig& a = cfg.arch;
  fetch(j, "depth", a.depth);
  fetch(j, "base_channels", a.base_channels);
  fetch(j, "in_channels", a.in_channels);
  fetch(j, "out_channels", a.out_channels);
  fetch(j, "tasks", a.tasks);
  std::string s = variant_name(a.variant);
  fetch(j, "variant", s);
  a.variant = variant_from_name(s);
  s = embed_name(a.embed);
  fetch(j, "embed", s);
  a.embed = embed_from_name(s);
  fetch(j, "embed_seed", a.embed_seed);
  if (j.contains("experts")) {
    const json& e = j.at("experts");
    if (!e.is_array() || e.empty())
      throw ConfigError("'experts' must be a non-empty list of expert names");
    a.experts.clear();
    for (const auto& name : e) {
      if (!name.is_string())
        throw ConfigError("'experts' entries must be strings");
      a.experts.push_back(expert_spec_from_name(name.get<std::string>()));
    }
  }
  if (const json* g = section(j, "gating")) parse_gating(*g, a.gating);
}

void parse_train(const json& j, RunConfig& cfg) {
  reject_unknown(j, "train",
                 {"epochs", "batch_size", "patch", "val_interval",
                  "flip_augment", "lr", "beta1", "beta2", "eps", "path",
                  "seed", "task_filter"});
  TrainConfig& t = cfg.train;
  fetch(j, "epochs", t.epochs);
  fetch(j, "seed", t.seed);
  fetch(j, "batch_size", t.batch_size);
  fetch_triple(j, "patch", t.patch_d, t.patch_h, t.patch_w);
  fetch(j, "val_interval", t.val_interval);
  fetch(j, "flip_augment", t.flip_augment);
  fetch(j, "lr", t.lr);
  fetch(j, "beta1", t.beta1);
  fetch(j, "beta2", t.beta2);
  fetch(j, "eps", t.eps);
  std::string s = path_name(t.path);
  fetch(j, "path", s);
  t.path = path_from_name(s);
  fetch(j, "task_filter", cfg.task_filter);
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be an object");
  reject_unknown(j, "config", {"seed", "out_dir", "dtype", "data", "arch", "train"});

  RunConfig cfg;
  fetch(j, "seed", cfg.seed);
  fetch(j, "out_dir", cfg.out_dir);
  std::string dtype = dtype_name(cfg.dtype_code);
  fetch(j, "dtype", dtype);
  cfg.dtype_code = dtype_from_name(dtype);

  // Single seed field: derived seeds follow unless the file pins them.
  cfg.train.seed = cfg.seed;
  cfg.arch.embed_seed = cfg.seed;

  if (const json* d = section(j, "data")) parse_data(*d, cfg);
  if (const json* a = section(j, "arch")) parse_arch(*a, cfg);
  if (const json* t = section(j, "train")) parse_train(*t, cfg);

  if (cfg.task_filter < 0 || cfg.task_filter > cfg.arch.tasks)
    throw ConfigError("task_filter " + std::to_string(cfg.task_filter) +
                      " out of range 0.." + std::to_string(cfg.arch.tasks));
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  try {
    return parse_run_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string dump_run_config(const RunConfig& cfg) {
  json experts = json::array();
  for (const auto& e : cfg.arch.experts) experts.push_back(expert_name(e));
  json j{
      {"seed", cfg.seed},
      {"out_dir", cfg.out_dir},
      {"dtype", dtype_name(cfg.dtype_code)},
      {"data",
       {{"dir", cfg.data_dir},
        {"classes", cfg.data.classes},
        {"samples_per_class", cfg.data.samples_per_class},
        {"extents", {cfg.data.d, cfg.data.h, cfg.data.w}},
        {"noise", cfg.data.noise},
        {"blur_sigma", cfg.data.blur_sigma},
        {"test_fraction", cfg.data.test_fraction},
        {"val_fraction", cfg.data.val_fraction}}},
      {"arch",
       {{"depth", cfg.arch.depth},
        {"base_channels", cfg.arch.base_channels},
        {"in_channels", cfg.arch.in_channels},
        {"out_channels", cfg.arch.out_channels},
        {"tasks", cfg.arch.tasks},
        {"variant", variant_name(cfg.arch.variant)},
        {"embed", embed_name(cfg.arch.embed)},
        {"embed_seed", cfg.arch.embed_seed},
        {"experts", experts},
        {"gating",
         {{"fcn", fcn_name(cfg.arch.gating.fcn)},
          {"hidden", cfg.arch.gating.hidden},
          {"activation", activation_name(cfg.arch.gating.activation)},
          {"source", gate_source_name(cfg.arch.gating.source)}}}}},
      {"train",
       {{"epochs", cfg.train.epochs},
        {"seed", cfg.train.seed},
        {"batch_size", cfg.train.batch_size},
        {"patch", {cfg.train.patch_d, cfg.train.patch_h, cfg.train.patch_w}},
        {"val_interval", cfg.train.val_interval},
        {"flip_augment", cfg.train.flip_augment},
        {"lr", cfg.train.lr},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"eps", cfg.train.eps},
        {"path", path_name(cfg.train.path)},
        {"task_filter", cfg.task_filter}}}};
  return j.dump(2) + "\n";
}

}  // namespace mixconv

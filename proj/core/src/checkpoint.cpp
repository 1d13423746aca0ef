#include "mixconv/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace mixconv {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'R', 'P', 'M', 'K'};
constexpr uint8_t kVersion = 1;

template <class T>
constexpr uint8_t dtype_code_of() {
  return sizeof(T) == 4 ? 1 : 2;
}

void write_u32(std::ofstream& f, uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}
void write_str(std::ofstream& f, const std::string& s) {
  write_u32(f, static_cast<uint32_t>(s.size()));
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}
uint32_t read_u32(std::ifstream& f) {
  uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::string read_str(std::ifstream& f, const char* what) {
  const uint32_t len = read_u32(f);
  if (!f || len > (1u << 24)) throw FormatError(std::string("bad ") + what + " length");
  std::string s(len, '\0');
  f.read(s.data(), len);
  if (!f) throw FormatError(std::string("truncated ") + what);
  return s;
}

template <class T>
void save_impl(const std::string& path, NetworkParams<T>& params) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f.write(kMagic, 4);
    f.put(static_cast<char>(kVersion));
    write_str(f, arch_to_json(params.arch, params.frozen_base,
                              params.frozen_expert_count, dtype_code_of<T>()));

    uint32_t n_groups = 0;
    for_each_group<T>(params, nullptr, [&](const ParamGroup<T>&) { ++n_groups; });
    write_u32(f, n_groups);
    for_each_group<T>(params, nullptr, [&](const ParamGroup<T>& g) {
      write_str(f, g.name);
      f.put(static_cast<char>(dtype_code_of<T>()));
      f.put(static_cast<char>(1));  // rank: groups are stored flat
      write_u32(f, static_cast<uint32_t>(g.count));
      f.write(reinterpret_cast<const char*>(g.param),
              static_cast<std::streamsize>(g.count * sizeof(T)));
    });

    f.put(static_cast<char>(params.stored_gates.empty() ? 0 : 1));
    if (!params.stored_gates.empty()) {
      write_u32(f, static_cast<uint32_t>(params.stored_gates.size()));
      for (const auto& [task, blocks] : params.stored_gates) {
        write_u32(f, static_cast<uint32_t>(task));
        write_u32(f, static_cast<uint32_t>(blocks.size()));
        for (const auto& gv : blocks) {
          write_u32(f, static_cast<uint32_t>(gv.experts()));
          write_u32(f, static_cast<uint32_t>(gv.channels()));
          for (const auto& row : gv.values)
            f.write(reinterpret_cast<const char*>(row.data()),
                    static_cast<std::streamsize>(row.size() * sizeof(T)));
        }
      }
    }
    if (!f) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

template <class T>
NetworkParams<T> load_impl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(path + ": not a checkpoint file");
  const int version = f.get();
  if (version != kVersion)
    throw FormatError(path + ": unsupported checkpoint version " +
                      std::to_string(version));

  ArchConfig arch;
  bool frozen_base = false;
  int frozen_experts = 0;
  int dtype = 0;
  arch_from_json(read_str(f, "descriptor"), arch, frozen_base, frozen_experts,
                 dtype);
  if (dtype != dtype_code_of<T>())
    throw FormatError(path + ": dtype code " + std::to_string(dtype) +
                      ", expected " + std::to_string(dtype_code_of<T>()));

  // Rebuild the exact parameter layout, then overwrite every group.
  Rng rng(0);
  NetworkParams<T> params = build_network<T>(arch, rng);
  params.frozen_base = frozen_base;
  params.frozen_expert_count = frozen_experts;

  std::map<std::string, std::pair<T*, std::size_t>> groups;
  for_each_group<T>(params, nullptr, [&](const ParamGroup<T>& g) {
    groups[g.name] = {g.param, g.count};
  });

  const uint32_t n_groups = read_u32(f);
  if (!f || n_groups != groups.size())
    throw FormatError(path + ": has " + std::to_string(n_groups) +
                      " parameter groups, architecture expects " +
                      std::to_string(groups.size()));
  for (uint32_t i = 0; i < n_groups; ++i) {
    const std::string name = read_str(f, "group name");
    const int gdtype = f.get();
    const int rank = f.get();
    if (gdtype != dtype_code_of<T>() || rank != 1)
      throw FormatError(path + ": group " + name + " has unexpected encoding");
    const uint32_t count = read_u32(f);
    auto it = groups.find(name);
    if (it == groups.end())
      throw FormatError(path + ": unknown parameter group '" + name + "'");
    if (it->second.second != count)
      throw FormatError(path + ": group " + name + " holds " +
                        std::to_string(count) + " values, expected " +
                        std::to_string(it->second.second));
    f.read(reinterpret_cast<char*>(it->second.first),
           static_cast<std::streamsize>(count * sizeof(T)));
    if (!f) throw FormatError(path + ": truncated data for group " + name);
  }

  const int has_gates = f.get();
  if (has_gates == 1) {
    const uint32_t n_tasks = read_u32(f);
    for (uint32_t t = 0; t < n_tasks; ++t) {
      const int task = static_cast<int>(read_u32(f));
      const uint32_t n_blocks = read_u32(f);
      std::vector<GateVector<T>> blocks(n_blocks);
      for (uint32_t b = 0; b < n_blocks; ++b) {
        const uint32_t experts = read_u32(f);
        const uint32_t channels = read_u32(f);
        if (!f || experts > 64 || channels > (1u << 20))
          throw FormatError(path + ": implausible stored-gate extents");
        blocks[b].values.assign(experts, std::vector<T>(channels));
        for (auto& row : blocks[b].values)
          f.read(reinterpret_cast<char*>(row.data()),
                 static_cast<std::streamsize>(channels * sizeof(T)));
      }
      if (!f) throw FormatError(path + ": truncated stored-gate section");
      params.stored_gates[task] = std::move(blocks);
    }
  } else if (has_gates != 0) {
    throw FormatError(path + ": corrupt stored-gate flag");
  }
  f.peek();
  if (!f.eof()) throw FormatError(path + ": trailing bytes");
  return params;
}

}  // namespace

std::string arch_to_json(const ArchConfig& arch, bool frozen_base,
                         int frozen_expert_count, int dtype_code) {
  json experts = json::array();
  for (const auto& e : arch.experts) experts.push_back(expert_name(e));
  json j{{"depth", arch.depth},
         {"base_channels", arch.base_channels},
         {"in_channels", arch.in_channels},
         {"out_channels", arch.out_channels},
         {"tasks", arch.tasks},
         {"variant", variant_name(arch.variant)},
         {"embed", embed_name(arch.embed)},
         {"embed_seed", arch.embed_seed},
         {"experts", experts},
         {"gating",
          {{"fcn", fcn_name(arch.gating.fcn)},
           {"hidden", arch.gating.hidden},
           {"activation", activation_name(arch.gating.activation)},
           {"source", gate_source_name(arch.gating.source)}}},
         {"frozen_base", frozen_base},
         {"frozen_expert_count", frozen_expert_count},
         {"dtype", dtype_code}};
  return j.dump();
}

void arch_from_json(const std::string& text, ArchConfig& arch, bool& frozen_base,
                    int& frozen_expert_count, int& dtype_code) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad architecture descriptor: ") + e.what());
  }
  try {
    arch.depth = j.at("depth").get<int>();
    arch.base_channels = j.at("base_channels").get<int>();
    arch.in_channels = j.at("in_channels").get<int>();
    arch.out_channels = j.at("out_channels").get<int>();
    arch.tasks = j.at("tasks").get<int>();
    arch.variant = variant_from_name(j.at("variant").get<std::string>());
    arch.embed = embed_from_name(j.at("embed").get<std::string>());
    arch.embed_seed = j.at("embed_seed").get<uint64_t>();
    arch.experts.clear();
    for (const auto& e : j.at("experts"))
      arch.experts.push_back(expert_spec_from_name(e.get<std::string>()));
    const json& g = j.at("gating");
    arch.gating.fcn = fcn_from_name(g.at("fcn").get<std::string>());
    arch.gating.hidden = g.at("hidden").get<int>();
    arch.gating.activation =
        activation_from_name(g.at("activation").get<std::string>());
    arch.gating.source = gate_source_from_name(g.at("source").get<std::string>());
    frozen_base = j.at("frozen_base").get<bool>();
    frozen_expert_count = j.at("frozen_expert_count").get<int>();
    dtype_code = j.at("dtype").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad architecture descriptor: ") + e.what());
  } catch (const ConfigError& e) {
    // Name-lookup helpers flag bad config; in a checkpoint it is bad data.
    throw FormatError(std::string("bad architecture descriptor: ") + e.what());
  }
}

void save_checkpoint(const std::string& path, NetworkParams<float>& params) {
  save_impl(path, params);
}
void save_checkpoint(const std::string& path, NetworkParams<double>& params) {
  save_impl(path, params);
}

int checkpoint_dtype(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(path + ": not a checkpoint file");
  f.get();
  ArchConfig arch;
  bool fb = false;
  int fe = 0, dtype = 0;
  arch_from_json(read_str(f, "descriptor"), arch, fb, fe, dtype);
  return dtype;
}

template <class T>
NetworkParams<T> load_checkpoint(const std::string& path) {
  return load_impl<T>(path);
}

template NetworkParams<float> load_checkpoint<float>(const std::string&);
template NetworkParams<double> load_checkpoint<double>(const std::string&);

}  // namespace mixconv

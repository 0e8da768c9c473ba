#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsct/model.hpp"
#include "fsct/optimizer.hpp"
#include "fsct/tensor.hpp"

namespace fsct {

using json = nlohmann::json;

// Versioned binary container: magic, format version, a JSON config block,
// then named arrays (rank, extents, little-endian f64 payload). Doubles are
// stored bit-exactly, so save/load round trips are lossless.

inline constexpr char kCheckpointMagic[8] = {'F', 'S', 'C', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& in, const std::string& path) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("truncated checkpoint '" + path + "'");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64_array(std::ostream& out, const std::vector<double>& values) {
  for (double d : values) write_u64(out, std::bit_cast<std::uint64_t>(d));
}

inline void read_f64_array(std::istream& in, std::vector<double>& values,
                           const std::string& path) {
  for (double& d : values) d = std::bit_cast<double>(read_u64(in, path));
}

}  // namespace detail

inline json model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["ways"] = cfg.ways;
  j["shots"] = cfg.shots;
  j["queries_per_cat"] = cfg.queries_per_cat;
  if (cfg.input.is_image())
    j["input"] = {{"channels", cfg.input.channels},
                  {"height", cfg.input.height},
                  {"width", cfg.input.width}};
  else
    j["input"] = {{"features", cfg.input.features}};
  j["backbone"] = backbone_kind_name(cfg.backbone);
  j["conv_channels"] = cfg.conv_channels;
  j["num_heads"] = cfg.num_heads;
  j["attention"] = attention_mode_name(cfg.attention);
  j["prototype"] = prototype_mode_name(cfg.prototype);
  j["pre_norm"] = cfg.pre_norm;
  j["classifier_scale"] = cfg.classifier_scale;
  return j;
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.ways = j.at("ways").get<std::size_t>();
  cfg.shots = j.at("shots").get<std::size_t>();
  cfg.queries_per_cat = j.at("queries_per_cat").get<std::size_t>();
  const json& in = j.at("input");
  if (in.contains("features"))
    cfg.input = SampleDims{.features = in.at("features").get<std::size_t>()};
  else
    cfg.input = SampleDims{.features = 0,
                           .channels = in.at("channels").get<std::size_t>(),
                           .height = in.at("height").get<std::size_t>(),
                           .width = in.at("width").get<std::size_t>()};
  cfg.backbone = parse_backbone_kind(j.at("backbone").get<std::string>());
  cfg.conv_channels = j.at("conv_channels").get<std::size_t>();
  cfg.num_heads = j.at("num_heads").get<std::size_t>();
  cfg.attention = parse_attention_mode(j.at("attention").get<std::string>());
  cfg.prototype = parse_prototype_mode(j.at("prototype").get<std::string>());
  cfg.pre_norm = j.at("pre_norm").get<bool>();
  cfg.classifier_scale = j.at("classifier_scale").get<double>();
  return cfg;
}

/// Writes the model (and, when given, optimizer moments) plus a free-form
/// metadata object that travels inside the config block.
inline void save_checkpoint(const std::string& path, ModelState& state, AdamW* optimizer = nullptr,
                            const json& metadata = json::object()) {
  json config;
  config["model"] = model_config_to_json(state.config);
  config["metadata"] = metadata;
  if (optimizer != nullptr) {
    config["optimizer"] = {{"lr", optimizer->config().lr},
                           {"beta1", optimizer->config().beta1},
                           {"beta2", optimizer->config().beta2},
                           {"eps", optimizer->config().eps},
                           {"weight_decay", optimizer->config().weight_decay},
                           {"step", optimizer->step_count()}};
  }
  const std::string config_text = config.dump();

  std::vector<std::pair<std::string, Tensor*>> arrays;
  state.for_each_array([&](const std::string& name, Tensor& t) { arrays.emplace_back(name, &t); });
  std::vector<std::pair<std::string, Tensor>> moments;
  if (optimizer != nullptr)
    optimizer->for_each_moment(
        [&](const std::string& name, Tensor& t) { moments.emplace_back(name, t); });

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_u64(out, kCheckpointVersion);
  detail::write_u64(out, config_text.size());
  out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
  detail::write_u64(out, arrays.size() + moments.size());
  auto write_array = [&](const std::string& name, const Tensor& t) {
    detail::write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u64(out, t.rank());
    for (std::size_t e : t.shape()) detail::write_u64(out, e);
    detail::write_f64_array(out, t.data());
  };
  for (auto& [name, t] : arrays) write_array(name, *t);
  for (auto& [name, t] : moments) write_array(name, t);
  if (!out) throw std::runtime_error("write failed for checkpoint '" + path + "'");
}

struct Checkpoint {
  ModelState state;
  AdamW optimizer;
  bool has_optimizer = false;
  json metadata;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("'" + path + "' is not a checkpoint file");
  const std::uint64_t version = detail::read_u64(in, path);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint '" + path + "' has unsupported version " +
                             std::to_string(version));
  const std::uint64_t config_len = detail::read_u64(in, path);
  std::string config_text(config_len, '\0');
  in.read(config_text.data(), static_cast<std::streamsize>(config_len));
  if (!in) throw std::runtime_error("truncated checkpoint '" + path + "'");
  const json config = json::parse(config_text);

  Checkpoint ckpt;
  ckpt.metadata = config.value("metadata", json::object());
  const ModelConfig model_cfg = model_config_from_json(config.at("model"));
  Rng scratch(0);
  ckpt.state = ModelState(model_cfg, scratch);

  std::map<std::string, Tensor> loaded;
  const std::uint64_t num_arrays = detail::read_u64(in, path);
  for (std::uint64_t a = 0; a < num_arrays; ++a) {
    const std::uint64_t name_len = detail::read_u64(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const std::uint64_t rank = detail::read_u64(in, path);
    Shape shape(rank);
    for (std::uint64_t r = 0; r < rank; ++r) shape[r] = detail::read_u64(in, path);
    Tensor t = Tensor::zeros(shape);
    detail::read_f64_array(in, t.data(), path);
    loaded.emplace(std::move(name), std::move(t));
  }

  ckpt.state.for_each_array([&](const std::string& name, Tensor& t) {
    auto it = loaded.find(name);
    if (it == loaded.end())
      throw std::runtime_error("checkpoint '" + path + "' is missing array '" + name + "'");
    if (it->second.shape() != t.shape())
      throw std::runtime_error("checkpoint '" + path + "' array '" + name + "' has shape " +
                               shape_str(it->second.shape()) + ", expected " +
                               shape_str(t.shape()));
    t = it->second;
  });

  if (config.contains("optimizer")) {
    const json& oj = config.at("optimizer");
    AdamWConfig ocfg;
    ocfg.lr = oj.at("lr").get<double>();
    ocfg.beta1 = oj.at("beta1").get<double>();
    ocfg.beta2 = oj.at("beta2").get<double>();
    ocfg.eps = oj.at("eps").get<double>();
    ocfg.weight_decay = oj.at("weight_decay").get<double>();
    ckpt.optimizer = AdamW(ocfg);
    ckpt.optimizer.attach(ckpt.state);
    ckpt.optimizer.set_step_count(oj.at("step").get<std::size_t>());
    ckpt.optimizer.for_each_moment([&](const std::string& name, Tensor& t) {
      auto it = loaded.find(name);
      if (it == loaded.end())
        throw std::runtime_error("checkpoint '" + path + "' is missing array '" + name + "'");
      if (it->second.shape() != t.shape())
        throw std::runtime_error("checkpoint '" + path + "' array '" + name +
                                 "' has unexpected shape");
      t.data() = it->second.data();
    });
    ckpt.has_optimizer = true;
  }
  return ckpt;
}

}  // namespace fsct

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "specmc/dataset.hpp"
#include "specmc/errors.hpp"
#include "specmc/fcnn.hpp"

namespace specmc {

// .fcnn container: magic "FCNN" | u32 manifest byte length | JSON manifest |
// float64 tensor blob, little-endian, in manifest order. The manifest is
// deterministic so identical models serialize to identical bytes.
inline constexpr char kModelMagic[4] = {'F', 'C', 'N', 'N'};
inline constexpr int kModelVersion = 1;

inline void save_model(const FcnnModel& model, const std::filesystem::path& path,
                       std::uint64_t seed = 0) {
  auto params = model.params;  // tensor_refs needs mutable access
  auto refs = tensor_refs(params, model.config);

  nlohmann::json manifest;
  manifest["format"] = "fcnn";
  manifest["version"] = kModelVersion;
  manifest["config"] = {
      {"input_length", model.config.input_length},
      {"output_dim", model.config.output_dim},
      {"block_filters", model.config.block_filters},
      {"kernel_size", model.config.kernel_size},
      {"dilations", model.config.dilations},
      {"pool_size", model.config.pool_size},
      {"dropout_rate", model.config.dropout_rate},
      {"target_scale", model.config.target_scale},
  };
  manifest["species"] = model.species;
  manifest["created"] = {{"generator", "specmc"}, {"seed", seed}};
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& ref : refs) {
    tensors.push_back({{"name", ref.name}, {"shape", ref.shape}});
  }
  manifest["tensors"] = tensors;

  const std::string manifest_text = manifest.dump();
  std::string buf;
  detail::put_bytes(buf, kModelMagic, 4);
  detail::put_u32(buf, static_cast<std::uint32_t>(manifest_text.size()));
  buf += manifest_text;
  for (const auto& ref : refs) {
    for (double v : *ref.data) detail::put_f64(buf, v);
  }
  detail::write_file_bytes(path, buf, "model");
}

inline FcnnModel load_model(const std::filesystem::path& path) {
  const std::string data = detail::read_file_bytes(path, "model");
  detail::ByteReader r(data, "model file " + path.string());
  if (r.str(4) != std::string(kModelMagic, 4)) {
    throw format_error("not a fcnn checkpoint: bad magic in " + path.string());
  }
  const std::size_t manifest_len = r.u32();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(r.str(manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw format_error("unreadable checkpoint manifest: " + std::string(e.what()));
  }
  FcnnModel model;
  try {
    if (manifest.at("format") != "fcnn" || manifest.at("version") != kModelVersion) {
      throw format_error("unsupported checkpoint format/version");
    }
    const auto& c = manifest.at("config");
    model.config.input_length = c.at("input_length");
    model.config.output_dim = c.at("output_dim");
    model.config.block_filters = c.at("block_filters").get<std::vector<int>>();
    model.config.kernel_size = c.at("kernel_size");
    model.config.dilations = c.at("dilations").get<std::vector<int>>();
    model.config.pool_size = c.at("pool_size");
    model.config.dropout_rate = c.at("dropout_rate");
    model.config.target_scale = c.at("target_scale");
    model.species = manifest.at("species").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw format_error("incomplete checkpoint manifest: " + std::string(e.what()));
  }
  model.config.validate();
  model.params = zero_params(model.config);
  auto refs = tensor_refs(model.params, model.config);

  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != refs.size()) {
    throw format_error("checkpoint lists " + std::to_string(tensors.size()) +
                       " tensors, expected " + std::to_string(refs.size()));
  }
  for (std::size_t t = 0; t < refs.size(); ++t) {
    if (tensors[t].at("name") != refs[t].name ||
        tensors[t].at("shape").get<std::vector<std::size_t>>() != refs[t].shape) {
      throw format_error("checkpoint tensor " + std::to_string(t) +
                         " does not match the configured architecture");
    }
    for (auto& v : *refs[t].data) v = r.f64();
  }
  if (!r.at_end()) {
    throw format_error("trailing bytes after checkpoint payload in " + path.string());
  }
  return model;
}

}  // namespace specmc

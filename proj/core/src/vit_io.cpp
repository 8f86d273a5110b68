#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "vitquant/errors.hpp"
#include "vitquant/vit.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts are unsupported");

namespace vitquant {

using nlohmann::json;

namespace {

json config_to_json(const ViTConfig& c) {
  return json{{"image_size", c.image_size},   {"channels", c.channels},
              {"patch_size", c.patch_size},   {"embed_dim", c.embed_dim},
              {"num_heads", c.num_heads},     {"num_layers", c.num_layers},
              {"mlp_ratio", c.mlp_ratio},     {"num_classes", c.num_classes}};
}

ViTConfig config_from_json(const json& j) {
  ViTConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.num_classes = j.at("num_classes").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(const ViTModel& model, const std::string& path) {
  json manifest = json::array();
  std::uint64_t offset = 0;  // bytes into the data section
  const auto params = model.named_parameters();
  for (const auto& [name, t] : params) {
    manifest.push_back(json{{"name", name},
                            {"shape", t->shape()},
                            {"offset", offset},
                            {"count", t->size()}});
    offset += t->size() * sizeof(double);
  }
  json header{{"format", "vitquant-checkpoint-v1"},
              {"config", config_to_json(model.config)},
              {"tensors", manifest}};

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("save_checkpoint: cannot open " + path);
  out << header.dump() << '\n';
  for (const auto& [name, t] : params) {
    auto d = t->data();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!out) throw ConfigError("save_checkpoint: write failed for " + path);
}

ViTModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("load_checkpoint: cannot open " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) {
    throw ConfigError("load_checkpoint: missing header in " + path);
  }
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw ConfigError("load_checkpoint: bad header in " + path + ": " + e.what());
  }
  if (header.value("format", "") != "vitquant-checkpoint-v1") {
    throw ConfigError("load_checkpoint: unrecognized format in " + path);
  }

  ViTModel model = init_vit(config_from_json(header.at("config")), 0);
  auto params = model.named_parameters();
  const json& manifest = header.at("tensors");
  if (manifest.size() != params.size()) {
    throw ConfigError("load_checkpoint: tensor count mismatch in " + path);
  }

  const std::streampos data_start = in.tellg();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const json& entry = manifest[i];
    auto& [name, tensor] = params[i];
    if (entry.at("name").get<std::string>() != name) {
      throw ConfigError("load_checkpoint: expected tensor '" + name + "', found '" +
                        entry.at("name").get<std::string>() + "'");
    }
    const auto shape = entry.at("shape").get<std::vector<int>>();
    if (shape != tensor->shape()) {
      throw ConfigError("load_checkpoint: shape mismatch for '" + name + "'");
    }
    const auto count = entry.at("count").get<std::uint64_t>();
    if (count != tensor->size()) {
      throw ConfigError("load_checkpoint: element count mismatch for '" + name + "'");
    }
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    auto dst = tensor->mutable_data();
    in.read(reinterpret_cast<char*>(dst.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw ConfigError("load_checkpoint: truncated data section in " + path);
  }
  model.set_trainable(false);
  return model;
}

}  // namespace vitquant

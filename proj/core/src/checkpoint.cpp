#include "aft/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "aft/errors.hpp"

namespace aft {

using json = nlohmann::json;

namespace {

constexpr const char* kFormat = "aft-checkpoint-1";

void put_le(std::ofstream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model& m, const CheckpointMeta& meta) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory '" + dir.string() + "': " + ec.message());

  json tensors = json::array();
  std::size_t offset = 0;
  auto params = const_cast<Model&>(m).parameters();
  for (const auto& p : params) {
    const std::size_t bytes = p.value->numel() * sizeof(double);
    tensors.push_back({{"name", p.name}, {"shape", p.value->shape()}, {"dtype", "f64le"},
                       {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  const json manifest{{"format", kFormat},
                      {"config", json::parse(to_json(m.cfg))},
                      {"seed", meta.seed},
                      {"step", meta.step},
                      {"blob", "params.bin"},
                      {"tensors", tensors}};

  std::ofstream blob(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot write '" + (dir / "params.bin").string() + "'");
  for (const auto& p : params)
    for (double v : p.value->data()) put_le(blob, v);
  blob.close();
  if (!blob) throw IoError("error writing '" + (dir / "params.bin").string() + "'");

  std::ofstream man(dir / "manifest.json", std::ios::trunc);
  if (!man) throw IoError("cannot write '" + (dir / "manifest.json").string() + "'");
  man << manifest.dump(2) << '\n';
  if (!man) throw IoError("error writing '" + (dir / "manifest.json").string() + "'");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw ConfigError("checkpoint manifest in '" + dir.string() + "' is not valid JSON: " + e.what());
  }
  try {
    if (manifest.value("format", "") != kFormat)
      throw ConfigError("'" + dir.string() + "' is not a checkpoint of format " + kFormat);
    LoadedCheckpoint out;
    out.meta.seed = manifest.at("seed").get<std::uint64_t>();
    out.meta.step = manifest.at("step").get<std::size_t>();
    const ModelConfig cfg = model_config_from_json(manifest.at("config").dump());
    Rng scratch(0);
    out.model = init_model(cfg, scratch);

    const std::string blob = read_file(dir / manifest.value("blob", "params.bin"));
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
    const auto& entries = manifest.at("tensors");
    auto params = out.model.parameters();
    if (entries.size() != params.size())
      throw ConfigError("checkpoint lists " + std::to_string(entries.size()) + " tensors, config implies " +
                        std::to_string(params.size()));
    std::size_t expected_offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& e = entries[i];
      const std::string name = e.at("name").get<std::string>();
      if (name != params[i].name)
        throw ConfigError("checkpoint tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                          params[i].name + "'");
      const Shape shape = e.at("shape").get<Shape>();
      if (shape != params[i].value->shape())
        throw ConfigError("tensor '" + name + "' has shape " + to_string(shape) + ", config implies " +
                          to_string(params[i].value->shape()));
      if (e.at("dtype").get<std::string>() != "f64le") throw ConfigError("tensor '" + name + "' is not f64le");
      const std::size_t offset = e.at("offset").get<std::size_t>();
      const std::size_t nbytes = e.at("bytes").get<std::size_t>();
      if (offset != expected_offset || nbytes != params[i].value->numel() * sizeof(double))
        throw ConfigError("tensor '" + name + "' has inconsistent offset/size");
      if (offset + nbytes > blob.size()) throw ConfigError("params.bin is truncated at tensor '" + name + "'");
      double* dst = params[i].value->ptr();
      for (std::size_t k = 0; k < params[i].value->numel(); ++k) dst[k] = get_le(bytes + offset + 8 * k);
      expected_offset = offset + nbytes;
    }
    if (expected_offset != blob.size()) throw ConfigError("params.bin has trailing bytes");
    return out;
  } catch (const json::exception& e) {
    throw ConfigError("malformed checkpoint manifest in '" + dir.string() + "': " + e.what());
  }
}

}  // namespace aft

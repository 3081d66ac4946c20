#include "mcft/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

using nlohmann::json;

namespace mcft {

namespace {

constexpr char kMagic[8] = {'M', 'C', 'F', 'T', 'C', 'K', 'P', '1'};
constexpr int kSchemaVersion = 1;

json config_to_json(const EncoderConfig& c) {
  return json{{"embed_dim", c.embed_dim},       {"num_layers", c.num_layers},
              {"num_heads", c.num_heads},       {"ffn_ratio", c.ffn_ratio},
              {"patch_points", c.patch_points}, {"num_patches", c.num_patches},
              {"num_classes", c.num_classes}};
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig c;
  c.embed_dim = j.at("embed_dim").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.ffn_ratio = j.at("ffn_ratio").get<double>();
  c.patch_points = j.at("patch_points").get<int>();
  c.num_patches = j.at("num_patches").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  return c;
}

std::vector<float> to_f32(const Tensor& t) {
  std::vector<float> out(t.numel());
  for (int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<float>(t[i]);
  return out;
}

}  // namespace

uint32_t crc32(const void* data, size_t len) {
  static uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  uint32_t c = 0xffffffffu;
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

void save_checkpoint(const EncoderState& state, const std::string& path,
                     const std::map<std::string, Tensor>& extra) {
  json dir = json::array();
  std::vector<std::vector<float>> blocks;
  uint64_t offset = 0;
  auto push_block = [&](const std::string& name, const Tensor& t) {
    std::vector<float> block = to_f32(t);
    const uint64_t nbytes = block.size() * sizeof(float);
    dir.push_back(json{{"name", name},
                       {"shape", t.shape()},
                       {"offset", offset},
                       {"crc32", crc32(block.data(), nbytes)}});
    offset += nbytes;
    blocks.push_back(std::move(block));
  };
  for (const auto& [name, t] : state.params) push_block(name, t);
  for (const auto& [name, t] : extra) {
    if (state.params.count(name))
      throw validation_error("extra tensor name collides with encoder schema: " + name);
    push_block(name, t);
  }

  json header;
  header["schema_version"] = kSchemaVersion;
  header["config"] = config_to_json(state.config);
  header["layer_mask"] = state.layer_mask;
  header["tensors"] = std::move(dir);
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw integrity_error("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  const uint32_t hlen = static_cast<uint32_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), hs.size());
  for (const auto& b : blocks)
    out.write(reinterpret_cast<const char*>(b.data()), b.size() * sizeof(float));
  if (!out) throw integrity_error("short write on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw integrity_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw integrity_error("not a checkpoint file: " + path);
  uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw integrity_error("truncated checkpoint header: " + path);
  json header = json::parse(hs, nullptr, false);
  if (header.is_discarded()) throw integrity_error("corrupt checkpoint header: " + path);

  const int version = header.at("schema_version").get<int>();
  if (version != kSchemaVersion)
    throw integrity_error("checkpoint schema version " + std::to_string(version) +
                          " is not supported (expected " +
                          std::to_string(kSchemaVersion) + ")");

  Checkpoint ck;
  ck.state.config = config_from_json(header.at("config"));
  ck.state.config.validate();
  ck.state.layer_mask = header.at("layer_mask").get<std::vector<uint8_t>>();
  if (static_cast<int>(ck.state.layer_mask.size()) != ck.state.config.num_layers)
    throw integrity_error("layer mask length does not match config");

  const std::vector<char> data{std::istreambuf_iterator<char>(in),
                               std::istreambuf_iterator<char>()};
  std::map<std::string, Tensor> tensors;
  for (const auto& e : header.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const std::vector<int> shape = e.at("shape").get<std::vector<int>>();
    const uint64_t offset = e.at("offset").get<uint64_t>();
    const uint32_t want_crc = e.at("crc32").get<uint32_t>();
    const int64_t n = Tensor::numel_of(shape);
    const uint64_t nbytes = static_cast<uint64_t>(n) * sizeof(float);
    if (offset + nbytes > data.size())
      throw integrity_error("tensor block out of range: " + name);
    if (crc32(data.data() + offset, nbytes) != want_crc)
      throw integrity_error("checksum mismatch in tensor block: " + name);
    Tensor t(shape);
    const float* f = reinterpret_cast<const float*>(data.data() + offset);
    for (int64_t i = 0; i < n; ++i) t[i] = static_cast<double>(f[i]);
    tensors.emplace(name, std::move(t));
  }

  for (const auto& [name, shape] : param_schema(ck.state.config)) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw integrity_error("missing tensor: " + name);
    if (it->second.shape() != shape)
      throw integrity_error("tensor shape mismatch: " + name + " is " +
                            it->second.shape_str());
    ck.state.params.emplace(name, std::move(it->second));
    tensors.erase(it);
  }
  ck.extra = std::move(tensors);
  return ck;
}

}  // namespace mcft

#include "ketlab/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace ketlab::model {

static_assert(std::endian::native == std::endian::little,
              "ckpt-v1 blobs are little-endian; big-endian hosts are unsupported");

namespace {

using nlohmann::json;

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

uint64_t tensor_checksum(const numerics::Matrix& t) {
  std::string_view bytes(reinterpret_cast<const char*>(t.data.data()),
                         t.data.size() * sizeof(float));
  return numerics::fnv1a64(bytes);
}

void atomic_write(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void save_checkpoint(const TransformerLM& m, const std::filesystem::path& manifest_path,
                     const std::filesystem::path& blob_path) {
  json manifest;
  manifest["format"] = "ckpt-v1";
  manifest["config"] = {
      {"n_layers", m.config.n_layers},   {"d_model", m.config.d_model},
      {"n_heads", m.config.n_heads},     {"d_ff", m.config.d_ff},
      {"vocab_size", m.config.vocab_size}, {"max_seq_len", m.config.max_seq_len},
      {"seed", m.config.seed},
  };

  std::string blob;
  json tensors = json::array();
  uint64_t offset = 0;
  for (size_t i = 0; i < m.names.size(); ++i) {
    const numerics::Matrix& t = m.tensors[i];
    const size_t nbytes = t.data.size() * sizeof(float);
    tensors.push_back({
        {"name", m.names[i]},
        {"shape", {t.rows, t.cols}},
        {"dtype", "f32"},
        {"offset", offset},
        {"checksum", hex64(tensor_checksum(t))},
    });
    blob.append(reinterpret_cast<const char*>(t.data.data()), nbytes);
    offset += nbytes;
  }
  manifest["tensors"] = std::move(tensors);

  atomic_write(blob_path, blob);
  atomic_write(manifest_path, manifest.dump(2) + "\n");
}

TransformerLM load_checkpoint(const std::filesystem::path& manifest_path,
                              const std::filesystem::path& blob_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("cannot open checkpoint manifest: " + manifest_path.string());
  json manifest = json::parse(mf);
  if (manifest.at("format").get<std::string>() != "ckpt-v1")
    throw std::runtime_error("unsupported checkpoint format");

  ModelConfig cfg;
  const json& jc = manifest.at("config");
  cfg.n_layers = jc.at("n_layers").get<int>();
  cfg.d_model = jc.at("d_model").get<int>();
  cfg.n_heads = jc.at("n_heads").get<int>();
  cfg.d_ff = jc.at("d_ff").get<int>();
  cfg.vocab_size = jc.at("vocab_size").get<int>();
  cfg.max_seq_len = jc.at("max_seq_len").get<int>();
  cfg.seed = jc.at("seed").get<uint64_t>();

  TransformerLM m = TransformerLM::init(cfg);

  std::ifstream bf(blob_path, std::ios::binary);
  if (!bf) throw std::runtime_error("cannot open checkpoint blob: " + blob_path.string());
  std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  const json& tensors = manifest.at("tensors");
  if (tensors.size() != m.names.size())
    throw std::runtime_error("checkpoint tensor count does not match registry");
  for (size_t i = 0; i < tensors.size(); ++i) {
    const json& jt = tensors[i];
    const std::string name = jt.at("name").get<std::string>();
    if (name != m.names[i]) throw std::runtime_error("checkpoint registry order mismatch at " + name);
    numerics::Matrix& t = m.tensors[i];
    if (jt.at("shape")[0].get<int>() != t.rows || jt.at("shape")[1].get<int>() != t.cols)
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    if (jt.at("dtype").get<std::string>() != "f32")
      throw std::runtime_error("checkpoint dtype mismatch for " + name);
    const uint64_t offset = jt.at("offset").get<uint64_t>();
    const size_t nbytes = t.data.size() * sizeof(float);
    if (offset + nbytes > blob.size()) throw std::runtime_error("checkpoint blob truncated at " + name);
    std::memcpy(t.data.data(), blob.data() + offset, nbytes);
    if (hex64(tensor_checksum(t)) != jt.at("checksum").get<std::string>())
      throw std::runtime_error("checkpoint checksum mismatch for " + name);
  }
  return m;
}

void save_checkpoint_dir(const TransformerLM& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_checkpoint(m, dir / "model.json", dir / "model.bin");
}

TransformerLM load_checkpoint_dir(const std::filesystem::path& dir) {
  return load_checkpoint(dir / "model.json", dir / "model.bin");
}

bool checkpoint_exists(const std::filesystem::path& dir) {
  return std::filesystem::exists(dir / "model.json") && std::filesystem::exists(dir / "model.bin");
}

}  // namespace ketlab::model

#include "diffsat/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "diffsat/errors.hpp"

namespace diffsat {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DependencyError("missing checkpoint file " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const std::string& s) { EVP_DigestUpdate(ctx_, s.data(), s.size()); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 15];
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

std::string hash_dir(const fs::path& dir, const std::string& manifest_text, const json& j) {
  Sha256 h;
  h.update(manifest_text);
  for (const auto& [group, info] : j.at("groups").items())
    h.update(read_file(dir / info.at("file").get<std::string>()));
  return h.hex();
}

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex();
}

void CheckpointWriter::add(const std::string& group, const std::string& name,
                           const torch::Tensor& t) {
  DIFFSAT_EXPECT(t.defined(), "checkpoint tensor " + group + "/" + name + " is undefined");
  for (const auto& e : groups_[group])
    DIFFSAT_EXPECT(e.name != name, "duplicate checkpoint tensor " + group + "/" + name);
  groups_[group].push_back({name, t.detach().to(torch::kFloat32).contiguous().clone()});
}

void CheckpointWriter::add_module(const std::string& group, const torch::nn::Module& m) {
  for (const auto& p : m.named_parameters(true)) add(group, p.key(), p.value());
  for (const auto& b : m.named_buffers(true)) add(group, b.key(), b.value());
}

void CheckpointWriter::write(const fs::path& dir) const {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["dtype"] = "float32-le";
  j["groups"] = json::object();
  j["tensors"] = json::array();
  for (const auto& [group, entries] : groups_) {
    const std::string file = group + ".bin";
    std::ofstream out(tmp / file, std::ios::binary);
    if (!out) throw DataError("cannot write " + (tmp / file).string());
    std::int64_t offset = 0;
    for (const auto& e : entries) {
      const auto bytes = static_cast<std::int64_t>(e.data.numel() * sizeof(float));
      out.write(reinterpret_cast<const char*>(e.data.data_ptr<float>()), bytes);
      j["tensors"].push_back({{"group", group},
                              {"name", e.name},
                              {"shape", e.data.sizes().vec()},
                              {"dtype", "float32"},
                              {"offset", offset}});
      offset += bytes;
    }
    j["groups"][group] = {{"file", file}, {"bytes", offset}};
  }
  j["meta"] = meta_;
  std::ofstream(tmp / "manifest.json") << j.dump(1) << "\n";
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Checkpoint Checkpoint::load(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DependencyError("checkpoint directory not found: " + dir.string());
  Checkpoint ck;
  ck.dir_ = dir;
  const std::string text = read_file(dir / "manifest.json");
  json j;
  try {
    j = json::parse(text);
    if (j.value("format", "") != kCheckpointFormat)
      throw DataError("not a checkpoint manifest: " + (dir / "manifest.json").string());
    if (j.value("version", 0) != kCheckpointVersion)
      throw DataError("unsupported checkpoint version in " + dir.string());
    std::map<std::string, std::string> blobs;
    for (const auto& [group, info] : j.at("groups").items())
      blobs[group] = read_file(dir / info.at("file").get<std::string>());
    for (const auto& t : j.at("tensors")) {
      const auto group = t.at("group").get<std::string>();
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = t.at("offset").get<std::int64_t>();
      auto tensor = torch::empty(shape, torch::kFloat32);
      const auto bytes = static_cast<std::int64_t>(tensor.numel() * sizeof(float));
      const auto it = blobs.find(group);
      if (it == blobs.end() || offset < 0 ||
          offset + bytes > static_cast<std::int64_t>(it->second.size()))
        throw DataError("tensor " + group + "/" + name + " lies outside its group file");
      std::memcpy(tensor.data_ptr<float>(), it->second.data() + offset,
                  static_cast<std::size_t>(bytes));
      ck.tensors_[group][name] = tensor;
    }
    ck.meta_ = j.value("meta", json::object());
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  ck.hash_ = hash_dir(dir, text, j);
  return ck;
}

bool Checkpoint::has_group(const std::string& group) const { return tensors_.count(group) > 0; }

bool Checkpoint::has(const std::string& group, const std::string& name) const {
  auto it = tensors_.find(group);
  return it != tensors_.end() && it->second.count(name) > 0;
}

torch::Tensor Checkpoint::get(const std::string& group, const std::string& name) const {
  if (!has(group, name))
    throw DataError("checkpoint " + dir_.string() + " has no tensor " + group + "/" + name);
  return tensors_.at(group).at(name);
}

std::vector<std::string> Checkpoint::names(const std::string& group) const {
  std::vector<std::string> out;
  auto it = tensors_.find(group);
  if (it != tensors_.end())
    for (const auto& [k, v] : it->second) out.push_back(k);
  return out;
}

void Checkpoint::load_module(const std::string& group, torch::nn::Module& m) const {
  if (!has_group(group))
    throw DataError("checkpoint " + dir_.string() + " has no group '" + group + "'");
  torch::NoGradGuard ng;
  auto copy = [&](const std::string& name, torch::Tensor& dst) {
    auto src = get(group, name);
    if (src.sizes() != dst.sizes())
      throw DataError("checkpoint tensor " + group + "/" + name + " has shape " +
                      c10::str(src.sizes()) + ", model expects " + c10::str(dst.sizes()));
    dst.copy_(src);
  };
  for (auto& p : m.named_parameters(true)) copy(p.key(), p.value());
  for (auto& b : m.named_buffers(true)) copy(b.key(), b.value());
}

std::string checkpoint_hash(const fs::path& dir) {
  const std::string text = read_file(dir / "manifest.json");
  try {
    return hash_dir(dir, text, json::parse(text));
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
  }
}

}  // namespace diffsat

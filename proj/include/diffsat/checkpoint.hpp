#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

namespace diffsat {

namespace fs = std::filesystem;

inline constexpr const char* kCheckpointFormat = "diffsat-checkpoint";
inline constexpr int kCheckpointVersion = 1;

/// Collects named float32 tensors by group and writes a checkpoint directory:
/// `manifest.json` (tensor table, byte offsets, caller metadata) plus one flat
/// little-endian float32 `<group>.bin` per group.
class CheckpointWriter {
 public:
  void add(const std::string& group, const std::string& name, const torch::Tensor& t);
  /// Every parameter and buffer of `m`, by its dotted name.
  void add_module(const std::string& group, const torch::nn::Module& m);

  /// Free-form metadata stored under "meta" (config echo, seeds, RNG states, ...).
  nlohmann::json& meta() { return meta_; }

  /// Writes into `<dir>.tmp` and renames over `dir`.
  void write(const fs::path& dir) const;

 private:
  struct Entry {
    std::string name;
    torch::Tensor data;
  };
  std::map<std::string, std::vector<Entry>> groups_;
  nlohmann::json meta_ = nlohmann::json::object();
};

class Checkpoint {
 public:
  /// Throws DependencyError when the directory or a file is missing, DataError
  /// when the manifest is malformed.
  static Checkpoint load(const fs::path& dir);

  bool has(const std::string& group, const std::string& name) const;
  bool has_group(const std::string& group) const;
  torch::Tensor get(const std::string& group, const std::string& name) const;
  /// Copies every parameter and buffer of `m` from the group; all must exist
  /// with matching shapes.
  void load_module(const std::string& group, torch::nn::Module& m) const;
  std::vector<std::string> names(const std::string& group) const;

  const nlohmann::json& meta() const { return meta_; }
  const fs::path& dir() const { return dir_; }
  /// SHA-256 over manifest.json and every group file, hex encoded.
  const std::string& content_hash() const { return hash_; }

 private:
  fs::path dir_;
  nlohmann::json meta_;
  std::map<std::string, std::map<std::string, torch::Tensor>> tensors_;
  std::string hash_;
};

/// Hex SHA-256 of a checkpoint directory without loading the tensors.
std::string checkpoint_hash(const fs::path& dir);
/// Hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

}  // namespace diffsat

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "m3snet/tensor.hpp"

namespace m3snet {

/// Container layout:
///   "M3SCKPT1"
///   uint64 LE  header byte length
///   header     UTF-8 lines "key=value"; tensors listed as
///              "tensor=<name> f32 <d0>x<d1>x..." in payload order
///   payload    each tensor as little-endian float32, row-major
struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> header;  // non-tensor lines, in order
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  /// First value for `key`; throws IoError when absent.
  const std::string& get(std::string_view key) const;
  const std::string* find(std::string_view key) const;
  void set(std::string key, std::string value);
  const Tensor<float>& tensor(std::string_view name) const;
};

inline constexpr std::string_view kCheckpointMagic = "M3SCKPT1";

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace m3snet

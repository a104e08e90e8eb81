#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "m3snet/data.hpp"
#include "m3snet/network.hpp"
#include "m3snet/trainer.hpp"

namespace m3snet {

/// Flat key=value settings for one command. Files use one "key = value" per
/// line; blank lines and lines starting with '#' are ignored. Later
/// assignments (flags) override earlier ones (file).
class RunConfig {
 public:
  static RunConfig parse(std::string_view text, const std::string& origin = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  void set(const std::string& key, std::string value);
  const std::string* find(std::string_view key) const;
  bool has(std::string_view key) const { return find(key) != nullptr; }
  std::string get_or(std::string_view key, std::string fallback) const;
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  /// ConfigError naming every key outside `allowed`.
  void require_known(const std::set<std::string>& allowed, std::string_view command) const;

  std::string to_text() const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Keys owned by each settings group.
std::set<std::string> model_keys();
std::set<std::string> degradation_keys();
std::set<std::string> train_keys();

/// Applies every present key of the group over the given defaults.
ModelConfig model_from(const RunConfig& rc, ModelConfig base = {});
DegradationSpec degradation_from(const RunConfig& rc, DegradationSpec base = {});
TrainOptions train_options_from(const RunConfig& rc, TrainOptions base = {});

/// Model keys explicitly set in `rc` that disagree with `actual`, rendered
/// "key: requested != checkpoint".
std::vector<std::string> model_overrides_diff(const RunConfig& rc, const ModelConfig& actual);

}  // namespace m3snet

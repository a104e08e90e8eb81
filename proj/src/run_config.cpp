#include "m3snet/run_config.hpp"

#include <fstream>
#include <sstream>

#include "m3snet/text.hpp"

namespace m3snet {

RunConfig RunConfig::parse(std::string_view text, const std::string& origin) {
  RunConfig rc;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos || trim(line.substr(0, eq)).empty()) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    rc.set(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
  }
  return rc;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, std::string value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries_.emplace_back(key, std::move(value));
}

const std::string* RunConfig::find(std::string_view key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return &v;
  return nullptr;
}

std::string RunConfig::get_or(std::string_view key, std::string fallback) const {
  const auto* v = find(key);
  return v ? *v : std::move(fallback);
}

void RunConfig::require_known(const std::set<std::string>& allowed, std::string_view command) const {
  std::string unknown;
  for (const auto& [k, v] : entries_) {
    if (!allowed.contains(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  }
  if (!unknown.empty()) throw ConfigError(std::string(command) + ": unknown config key(s): " + unknown);
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& [k, v] : entries_) s += k + " = " + v + "\n";
  return s;
}

namespace {

template <typename Pairs>
std::set<std::string> keys_of(const Pairs& kv) {
  std::set<std::string> out;
  for (const auto& [k, v] : kv) out.insert(k);
  return out;
}

}  // namespace

std::set<std::string> model_keys() { return keys_of(ModelConfig{}.to_key_values()); }
std::set<std::string> degradation_keys() { return keys_of(DegradationSpec{}.to_key_values()); }

std::set<std::string> train_keys() {
  return {"iters",          "batch",          "patch",     "seed",    "lr_init", "lr_final",
          "checkpoint_every", "validate_every", "clip_norm", "augment"};
}

ModelConfig model_from(const RunConfig& rc, ModelConfig base) {
  for (const auto& [k, v] : rc.entries())
    if (model_keys().contains(k)) base.apply(k, v);
  base.validate();
  return base;
}

DegradationSpec degradation_from(const RunConfig& rc, DegradationSpec base) {
  for (const auto& [k, v] : rc.entries())
    if (degradation_keys().contains(k)) base.apply(k, v);
  base.validate();
  return base;
}

TrainOptions train_options_from(const RunConfig& rc, TrainOptions o) {
  for (const auto& [k, v] : rc.entries()) {
    if (k == "iters") o.iterations = parse_int64(k, v);
    else if (k == "batch") o.batch = parse_int(k, v);
    else if (k == "patch") o.patch = parse_int64(k, v);
    else if (k == "seed") o.seed = parse_uint64(k, v);
    else if (k == "lr_init") o.lr_init = parse_real(k, v);
    else if (k == "lr_final") o.lr_final = parse_real(k, v);
    else if (k == "checkpoint_every") o.checkpoint_every = parse_int64(k, v);
    else if (k == "validate_every") o.validate_every = parse_int64(k, v);
    else if (k == "clip_norm") o.clip_norm = parse_real(k, v);
    else if (k == "augment") o.augment = parse_bool(k, v);
  }
  o.validate();
  return o;
}

std::vector<std::string> model_overrides_diff(const RunConfig& rc, const ModelConfig& actual) {
  ModelConfig requested = actual;
  for (const auto& [k, v] : rc.entries())
    if (model_keys().contains(k)) requested.apply(k, v);
  std::vector<std::string> out;
  for (auto& line : config_diff(requested, actual)) out.push_back(std::move(line));
  return out;
}

}  // namespace m3snet

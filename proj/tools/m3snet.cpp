// m3snet command-line tool: synth, train, eval, restore, inspect.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "m3snet/checkpoint.hpp"
#include "m3snet/data.hpp"
#include "m3snet/metrics.hpp"
#include "m3snet/network.hpp"
#include "m3snet/run_config.hpp"
#include "m3snet/text.hpp"
#include "m3snet/trainer.hpp"

namespace fs = std::filesystem;
using namespace m3snet;

namespace {

struct Flags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::string> width, ablation, seed, iters, batch, patch, out, checkpoint, data, val_data, input,
      size, count, mode;
  bool tlc = false;
};

RunConfig gather(const Flags& f) {
  RunConfig rc = f.config.empty() ? RunConfig{} : RunConfig::load(f.config);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    rc.set(std::string(trim(s.substr(0, eq))), std::string(trim(s.substr(eq + 1))));
  }
  const std::pair<const char*, const std::optional<std::string>*> named[] = {
      {"width", &f.width},   {"ablation", &f.ablation},       {"seed", &f.seed},         {"iters", &f.iters},
      {"batch", &f.batch},   {"patch", &f.patch},             {"out", &f.out},           {"checkpoint", &f.checkpoint},
      {"data", &f.data},     {"val_data", &f.val_data},       {"input", &f.input},       {"size", &f.size},
      {"count", &f.count},   {"mode", &f.mode},
  };
  for (const auto& [key, value] : named)
    if (*value) rc.set(key, **value);
  if (f.tlc) rc.set("tlc", "true");
  return rc;
}

std::set<std::string> join(std::initializer_list<std::set<std::string>> groups) {
  std::set<std::string> out;
  for (const auto& g : groups) out.insert(g.begin(), g.end());
  return out;
}

const std::string& required(const RunConfig& rc, const char* key) {
  if (const auto* v = rc.find(key)) return *v;
  throw ConfigError(std::string("missing required setting '") + key + "' (flag --" + key + ")");
}

void echo_config(const fs::path& dir, const RunConfig& rc) {
  fs::create_directories(dir);
  std::ofstream f(dir / "config.txt");
  f << rc.to_text();
  if (!f) throw IoError("cannot write " + (dir / "config.txt").string());
}

void add_kv(RunConfig& rc, const std::vector<std::pair<std::string, std::string>>& kv) {
  for (const auto& [k, v] : kv) rc.set(k, v);
}

Checkpoint load_compatible(const RunConfig& rc, ModelConfig& config) {
  auto ckpt = load_checkpoint(required(rc, "checkpoint"));
  config = config_from_checkpoint(ckpt);
  const auto diff = model_overrides_diff(rc, config);
  if (!diff.empty()) {
    std::string msg = "checkpoint/config mismatch (requested != checkpoint):";
    for (const auto& d : diff) msg += " " + d + ";";
    msg.pop_back();
    throw ConfigError(msg);
  }
  return ckpt;
}

int cmd_synth(const RunConfig& in) {
  in.require_known(join({degradation_keys(), {"count", "size", "seed", "out"}}), "synth");
  RunConfig rc;
  const int count = parse_int("count", in.get_or("count", "50"));
  const auto size = parse_int64("size", in.get_or("size", "128"));
  const auto seed = parse_uint64("seed", in.get_or("seed", "0"));
  const fs::path out = required(in, "out");
  const auto spec = degradation_from(in);
  rc.set("count", std::to_string(count));
  rc.set("size", std::to_string(size));
  rc.set("seed", std::to_string(seed));
  rc.set("out", out.string());
  add_kv(rc, spec.to_key_values());
  write_synthetic_dataset(out, count, size, spec, seed);
  echo_config(out, rc);
  std::cout << "wrote " << count << " pairs of " << size << "x" << size << " to " << out.string() << '\n';
  return 0;
}

int cmd_train(const RunConfig& in) {
  in.require_known(join({model_keys(), train_keys(), {"data", "val_data", "val_split", "out", "resume"}}), "train");
  const fs::path out = required(in, "out");
  auto dataset = load_dataset(required(in, "data"));
  for (const auto& w : dataset.warnings) std::cerr << "warning: " << w << '\n';
  std::vector<ImagePair> train = std::move(dataset.pairs), val;
  if (const auto* vd = in.find("val_data")) {
    auto v = load_dataset(*vd);
    for (const auto& w : v.warnings) std::cerr << "warning: " << w << '\n';
    val = std::move(v.pairs);
  } else {
    const int split = parse_int("val_split", in.get_or("val_split", std::to_string(train.size() / 10)));
    if (split < 0 || static_cast<std::size_t>(split) >= train.size()) {
      throw ConfigError("val_split must leave at least one training pair");
    }
    val.assign(train.end() - split, train.end());
    train.resize(train.size() - split);
  }

  std::optional<Trainer> trainer;
  RunConfig rc;
  if (const auto* resume = in.find("resume")) {
    const auto ckpt = load_checkpoint(*resume);
    trainer.emplace(ckpt);
    const auto diff = model_overrides_diff(in, trainer->network().config());
    if (!diff.empty()) {
      std::string msg = "checkpoint/config mismatch (requested != checkpoint):";
      for (const auto& d : diff) msg += " " + d + ";";
      msg.pop_back();
      throw ConfigError(msg);
    }
    rc.set("resume", *resume);
  } else {
    trainer.emplace(model_from(in), train_options_from(in));
  }
  add_kv(rc, trainer->network().config().to_key_values());
  const auto& o = trainer->options();
  rc.set("iters", std::to_string(o.iterations));
  rc.set("batch", std::to_string(o.batch));
  rc.set("patch", std::to_string(o.patch));
  rc.set("seed", std::to_string(o.seed));
  rc.set("lr_init", format_real(o.lr_init));
  rc.set("lr_final", format_real(o.lr_final));
  rc.set("checkpoint_every", std::to_string(o.checkpoint_every));
  rc.set("validate_every", std::to_string(o.validate_every));
  rc.set("clip_norm", format_real(o.clip_norm));
  rc.set("augment", o.augment ? "true" : "false");
  rc.set("data", required(in, "data"));
  if (const auto* vd = in.find("val_data")) rc.set("val_data", *vd);
  else rc.set("val_split", std::to_string(val.size()));
  rc.set("out", out.string());
  echo_config(out, rc);

  std::ofstream log_file(out / "train.log", trainer->step_count() > 0 ? std::ios::app : std::ios::trunc);
  struct Tee : std::streambuf {
    std::streambuf *a, *b;
    int overflow(int c) override {
      if (c == EOF) return !EOF;
      return a->sputc(static_cast<char>(c)) == EOF || b->sputc(static_cast<char>(c)) == EOF ? EOF : c;
    }
    int sync() override { return a->pubsync() | b->pubsync(); }
  } tee;
  tee.a = std::cout.rdbuf();
  tee.b = log_file.rdbuf();
  std::ostream log(&tee);

  const auto t0 = std::chrono::steady_clock::now();
  if (o.iterations == 0) {
    save_checkpoint(out / "final.ckpt", trainer->checkpoint());
  } else {
    trainer->run(train, val, out, &log);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "done steps=" << trainer->step_count() << " seconds=" << format_real(secs)
            << " checkpoint=" << (out / "final.ckpt").string() << '\n';
  return 0;
}

int cmd_eval(const RunConfig& in) {
  in.require_known(join({model_keys(), {"checkpoint", "data", "tlc", "mode", "out"}}), "eval");
  ModelConfig config;
  const auto ckpt = load_compatible(in, config);
  const auto net = network_from_checkpoint(ckpt);
  auto dataset = load_dataset(required(in, "data"));
  for (const auto& w : dataset.warnings) std::cerr << "warning: " << w << '\n';
  EvalOptions opts;
  opts.tlc = parse_bool("tlc", in.get_or("tlc", "false"));
  opts.mode = parse_channel_mode(in.get_or("mode", "rgb"));
  const auto report = evaluate(net, dataset.pairs, opts);
  std::cout << report.to_text();
  if (const auto* out = in.find("out")) {
    RunConfig rc;
    rc.set("checkpoint", required(in, "checkpoint"));
    rc.set("data", required(in, "data"));
    rc.set("tlc", opts.tlc ? "true" : "false");
    rc.set("mode", to_string(opts.mode));
    rc.set("out", *out);
    echo_config(*out, rc);
    std::ofstream(fs::path(*out) / "metrics.txt") << report.to_text();
    std::ofstream(fs::path(*out) / "metrics.csv") << report.to_csv();
  }
  return 0;
}

int cmd_restore(const RunConfig& in) {
  in.require_known(join({model_keys(), {"checkpoint", "input", "out", "tlc"}}), "restore");
  ModelConfig config;
  const auto ckpt = load_compatible(in, config);
  const auto net = network_from_checkpoint(ckpt);
  const fs::path input = required(in, "input");
  const fs::path out = required(in, "out");
  const bool tlc = parse_bool("tlc", in.get_or("tlc", "false"));

  std::vector<fs::path> files;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input)) {
      auto ext = e.path().extension().string();
      for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no PNG files in " + input.string());
  } else if (fs::is_regular_file(input)) {
    files.push_back(input);
  } else {
    throw IoError("input not found: " + input.string());
  }
  fs::create_directories(out);
  for (const auto& f : files) {
    const auto target = out / f.filename();
    if (fs::exists(target) && fs::equivalent(target, f)) {
      throw IoError("refusing to overwrite input " + f.string() + "; choose another --out");
    }
  }
  RunConfig rc;
  rc.set("checkpoint", required(in, "checkpoint"));
  rc.set("input", input.string());
  rc.set("out", out.string());
  rc.set("tlc", tlc ? "true" : "false");
  echo_config(out, rc);
  for (const auto& f : files) {
    write_png(out / f.filename(), restore_image(net, read_png(f), tlc));
    std::cout << f.string() << " -> " << (out / f.filename()).string() << '\n';
  }
  return 0;
}

int cmd_inspect(const RunConfig& in) {
  in.require_known(join({model_keys(), {"size", "tlc"}}), "inspect");
  const auto config = model_from(in);
  const auto size = parse_int64("size", in.get_or("size", "256"));
  const bool tlc = parse_bool("tlc", in.get_or("tlc", "false"));
  const auto params = count_params(config);
  const auto macs = estimate_macs(config, size, size, tlc);
  char line[256];
  std::snprintf(line, sizeof line, "width=%d ablation=%s resolution=%lldx%lld params=%.4fM macs=%.3fG flops=%.3fG",
                config.width, to_string(config.ablation).c_str(), static_cast<long long>(size),
                static_cast<long long>(size), params / 1e6, macs.total() / 1e9, 2.0 * macs.total() / 1e9);
  std::cout << line << '\n';
  std::snprintf(line, sizeof line, "macs.conv=%.3fG macs.attention=%.3fG", macs.conv / 1e9, macs.attention / 1e9);
  std::cout << line << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mountain-shaped NAFBlock restoration network"};
  app.require_subcommand(1);
  Flags flags;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "key = value settings file")->check(CLI::ExistingFile);
    sub->add_option("--set", flags.sets, "extra key=value override (repeatable)");
  };
  auto model = [&](CLI::App* sub) {
    sub->add_option("--width", flags.width, "base width: 32, 64 or any even integer");
    sub->add_option("--ablation", flags.ablation, "baseline|ffm|mhamb|full");
  };

  auto* synth = app.add_subcommand("synth", "write a synthetic degraded/clean dataset");
  common(synth);
  synth->add_option("--out", flags.out, "dataset directory");
  synth->add_option("--count", flags.count, "number of pairs");
  synth->add_option("--size", flags.size, "image side in pixels");
  synth->add_option("--seed", flags.seed);

  auto* train = app.add_subcommand("train", "train a model");
  common(train);
  model(train);
  train->add_option("--data", flags.data, "training dataset root");
  train->add_option("--val-data", flags.val_data, "validation dataset root");
  train->add_option("--out", flags.out, "run directory");
  train->add_option("--iters", flags.iters);
  train->add_option("--batch", flags.batch);
  train->add_option("--patch", flags.patch);
  train->add_option("--seed", flags.seed);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  common(eval);
  model(eval);
  eval->add_option("--checkpoint", flags.checkpoint);
  eval->add_option("--data", flags.data);
  eval->add_option("--out", flags.out, "report directory");
  eval->add_option("--mode", flags.mode, "rgb|y_channel");
  eval->add_flag("--tlc", flags.tlc, "local SCA pooling with the recorded window");

  auto* restore = app.add_subcommand("restore", "restore a PNG image or a directory of PNGs");
  common(restore);
  model(restore);
  restore->add_option("--checkpoint", flags.checkpoint);
  restore->add_option("--input", flags.input);
  restore->add_option("--out", flags.out);
  restore->add_flag("--tlc", flags.tlc);

  auto* inspect = app.add_subcommand("inspect", "print parameter and MAC counts");
  common(inspect);
  model(inspect);
  inspect->add_option("--size", flags.size, "square input side (default 256)");
  inspect->add_flag("--tlc", flags.tlc);

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig rc = gather(flags);
    if (synth->parsed()) return cmd_synth(rc);
    if (train->parsed()) return cmd_train(rc);
    if (eval->parsed()) return cmd_eval(rc);
    if (restore->parsed()) return cmd_restore(rc);
    return cmd_inspect(rc);
  } catch (const std::exception& e) {
    std::cerr << "m3snet: error: " << e.what() << '\n';
    return 1;
  }
}

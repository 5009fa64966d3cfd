#pragma once

// Flat key = value run configuration. Every key has a default; unknown keys
// are rejected. '#' starts a comment.

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "dpcnet/training.hpp"

namespace dpcnet {

class RunConfig {
 public:
  // (key, default, description) in echo order.
  struct Key {
    const char* name;
    const char* value;
    const char* help;
  };

  static const std::vector<Key>& keys() {
    static const std::vector<Key> k = {
        {"model.levels", "3", "encoder/decoder levels"},
        {"model.blocks", "2,3,4", "DDBlocks per level"},
        {"model.heads", "2,4,8", "attention heads per level"},
        {"model.base_channels", "16", "channels at level 0"},
        {"model.window", "8", "spatial attention window side"},
        {"model.ffn_expansion", "2.66", "GDFN hidden expansion factor"},
        {"model.frequency_branch", "on", "FFEBlock inside each DDBlock"},
        {"model.fusion", "afm", "branch fusion: afm | concat"},
        {"model.spatial_sa", "on", "window self-attention in SCTB"},
        {"model.channel_sa", "on", "channel self-attention in SCTB"},
        {"model.sa_order", "spatial_first", "spatial_first | channel_first"},
        {"train.steps", "300", "total optimisation steps"},
        {"train.seed", "42", "initialisation and sampling seed"},
        {"train.lr_max", "3e-4", "initial learning rate"},
        {"train.lr_min", "1e-6", "final learning rate"},
        {"train.stages", "0:32:4,150:64:2", "start:patch:batch stages"},
        {"train.lambda_l1", "1", "pixel L1 weight"},
        {"train.lambda_perceptual", "0.2", "feature L1 weight"},
        {"train.lambda_fft", "0.05", "spectral L1 weight"},
        {"train.clip_norm", "1.0", "global gradient norm limit (0 disables)"},
        {"train.eval_every", "50", "steps between PSNR log entries (0 disables)"},
        {"train.checkpoint_every", "0", "steps between intermediate checkpoints (0 disables)"},
        {"train.flip", "on", "random horizontal flips"},
        {"data.root", "data/train", "training corpus root"},
        {"data.eval_root", "", "held-out corpus root for periodic PSNR"},
        {"out.dir", "runs/latest", "output directory"},
        {"gradcheck.h", "1e-4", "finite-difference step"},
        {"gradcheck.tol", "1e-4", "maximum relative error"},
        {"gradcheck.size", "16", "network input extent"},
        {"gradcheck.coords", "3", "coordinates sampled per tensor (0 = all)"},
        {"gradcheck.seed", "1", "input and sampling seed"},
    };
    return k;
  }

  RunConfig() {
    for (const auto& k : keys()) values_[k.name] = k.value;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
  }

  // "key=value" as given on the command line.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("override '" + assignment + "' is not of the form key=value");
    }
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  void parse(std::istream& in, const std::string& origin) {
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.find('=') == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(no) + ": expected key = value");
      }
      try {
        apply_override(line);
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(no) + ": " + e.what());
      }
    }
  }

  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    parse(in, path.string());
  }

  // DPCNET_SEED, when set, replaces train.seed.
  void apply_environment() {
    if (const char* s = std::getenv("DPCNET_SEED"); s && *s) set("train.seed", s);
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string& v = get(key);
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
      throw ConfigError(key + "=" + v + " is not a non-negative integer");
    }
    return out;
  }

  double get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + "=" + v + " is not a number");
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + "=" + v + " is not on/off");
  }

  std::vector<std::size_t> get_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : split(get(key), ',')) {
      std::size_t x = 0;
      const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
      if (ec != std::errc{} || p != item.data() + item.size()) {
        throw ConfigError(key + ": '" + item + "' is not a non-negative integer");
      }
      out.push_back(x);
    }
    return out;
  }

  ModelConfig model() const {
    ModelConfig m;
    m.levels = get_u64("model.levels");
    m.blocks_per_level = get_list("model.blocks");
    m.heads_per_level = get_list("model.heads");
    m.base_channels = get_u64("model.base_channels");
    m.window = get_u64("model.window");
    m.ffn_expansion = get_double("model.ffn_expansion");
    m.frequency_branch = get_bool("model.frequency_branch");
    const std::string& fusion = get("model.fusion");
    if (fusion == "afm") {
      m.fusion = Fusion::afm;
    } else if (fusion == "concat") {
      m.fusion = Fusion::concat;
    } else {
      throw ConfigError("model.fusion=" + fusion + " (expected afm or concat)");
    }
    m.spatial_sa = get_bool("model.spatial_sa");
    m.channel_sa = get_bool("model.channel_sa");
    const std::string& order = get("model.sa_order");
    if (order == "spatial_first") {
      m.sa_order = AttentionOrder::spatial_first;
    } else if (order == "channel_first") {
      m.sa_order = AttentionOrder::channel_first;
    } else {
      throw ConfigError("model.sa_order=" + order + " (expected spatial_first or channel_first)");
    }
    m.init_seed = get_u64("train.seed");
    m.validate();
    return m;
  }

  TrainOptions training() const {
    TrainOptions t;
    t.schedule.total_steps = get_u64("train.steps");
    t.schedule.lr_max = get_double("train.lr_max");
    t.schedule.lr_min = get_double("train.lr_min");
    t.schedule.stages.clear();
    for (const auto& item : split(get("train.stages"), ',')) {
      const auto parts = split(item, ':');
      if (parts.size() != 3) throw ConfigError("train.stages: '" + item + "' is not start:patch:batch");
      Stage s;
      try {
        s.start_step = std::stoull(parts[0]);
        s.patch = std::stoull(parts[1]);
        s.batch = std::stoull(parts[2]);
      } catch (const std::exception&) {
        throw ConfigError("train.stages: '" + item + "' is not start:patch:batch");
      }
      t.schedule.stages.push_back(s);
    }
    t.schedule.validate();
    t.weights = {get_double("train.lambda_l1"), get_double("train.lambda_perceptual"),
                 get_double("train.lambda_fft")};
    if (t.weights.l1 < 0 || t.weights.perceptual < 0 || t.weights.fft < 0) {
      throw ConfigError("loss weights must be non-negative");
    }
    t.seed = get_u64("train.seed");
    t.clip_norm = get_double("train.clip_norm");
    t.eval_every = get_u64("train.eval_every");
    t.checkpoint_every = get_u64("train.checkpoint_every");
    t.flip = get_bool("train.flip");
    return t;
  }

  // Resolved configuration as comment lines, for run headers.
  void echo(std::ostream& os) const {
    for (const auto& k : keys()) os << "# " << k.name << " = " << values_.at(k.name) << '\n';
  }

  // Resolved configuration in a form load_file accepts.
  void write(std::ostream& os) const {
    for (const auto& k : keys()) os << k.name << " = " << values_.at(k.name) << '\n';
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
      const auto pos = s.find(sep, start);
      out.push_back(trim(s.substr(start, pos - start)));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    return out;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace dpcnet

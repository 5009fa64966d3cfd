#pragma once

// Adam with bias correction, global-norm clipping, cosine annealing over
// progressive (patch, batch) stages, checkpoint files and the training loop.

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iterator>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dpcnet/data.hpp"
#include "dpcnet/losses.hpp"
#include "dpcnet/metrics.hpp"
#include "dpcnet/model.hpp"

namespace dpcnet {

// ---------------------------------------------------------------------------
// Optimiser

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimState {
  AdamConfig cfg;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;
};

// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) for every trainable
// parameter; moments are created on the first call.
template <typename T>
void adam_step(ParameterStore<T>& params, OptimState<T>& st, double lr) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p->value.shape());
      st.v.emplace_back(p->value.shape());
    }
  }
  if (st.m.size() != params.size()) throw ContractError("adam_step: state/parameter count mismatch");
  for (const auto& p : params) {
    if (p->grad.shape() != p->value.shape()) {
      throw ContractError("adam_step: missing gradient for '" + p->name + "'");
    }
  }
  ++st.t;
  const double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = params[i];
    if (p.frozen) continue;
    T* m = st.m[i].ptr();
    T* v = st.v[i].ptr();
    T* w = p.value.ptr();
    const T* g = p.grad.ptr();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = static_cast<T>(b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj);
      v[j] = static_cast<T>(b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj);
      const double mh = static_cast<double>(m[j]) / c1;
      const double vh = static_cast<double>(v[j]) / c2;
      w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * mh / (std::sqrt(vh) + st.cfg.eps));
    }
  }
}

// Rescales all gradients so their joint L2 norm is at most max_norm; returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p->frozen) continue;
    for (T g : p->grad.data()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto f = static_cast<T>(max_norm / norm);
    for (auto& p : params) p->grad *= f;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Schedule

struct Stage {
  std::uint64_t start_step = 0;
  std::size_t patch = 32;
  std::size_t batch = 4;

  friend bool operator==(const Stage&, const Stage&) = default;
};

struct Schedule {
  double lr_max = 3e-4;
  double lr_min = 1e-6;
  std::uint64_t total_steps = 300;
  std::vector<Stage> stages{{0, 32, 4}, {150, 64, 2}};

  void validate() const {
    if (stages.empty() || stages.front().start_step != 0) {
      throw ConfigError("schedule stages must start at step 0");
    }
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (stages[i].patch == 0 || stages[i].batch == 0) {
        throw ConfigError("schedule stage " + std::to_string(i) + " has zero patch or batch");
      }
      if (i > 0 && stages[i].start_step <= stages[i - 1].start_step) {
        throw ConfigError("schedule stages must be sorted by strictly increasing start step");
      }
    }
    if (lr_min < 0.0 || lr_max < lr_min) throw ConfigError("need 0 <= lr_min <= lr_max");
  }

  const Stage& stage_at(std::uint64_t step) const {
    std::size_t k = 0;
    while (k + 1 < stages.size() && stages[k + 1].start_step <= step) ++k;
    return stages[k];
  }
};

inline double cosine_lr(std::uint64_t step, const Schedule& s) {
  if (s.total_steps == 0 || step >= s.total_steps) return s.lr_min;
  const double frac = static_cast<double>(step) / static_cast<double>(s.total_steps);
  return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "DPCN" | u32 version | u32 count | count x (u32 name length, name bytes,
// 4 x u32 extents, f32 data) | u32 CRC-32 of every preceding byte.
// All integers and floats little-endian.

inline constexpr char kCheckpointMagic[4] = {'D', 'P', 'C', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

inline std::uint32_t narrow_u32(std::size_t v, const std::string& what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw CheckpointError(what + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const ParameterStore<T>& params) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, detail::narrow_u32(params.size(), "entry count"));
  for (const auto& p : params) {
    detail::put_u32(out, detail::narrow_u32(p->name.size(), "name length"));
    out.insert(out.end(), p->name.begin(), p->name.end());
    for (std::size_t d : p->value.shape().dims()) detail::put_u32(out, detail::narrow_u32(d, "extent"));
    for (T v : p->value.data()) {
      const auto f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      detail::put_u32(out, bits);
    }
  }
  detail::put_u32(out, detail::crc32_of(out.data(), out.size()));
  return out;
}

// Validates magic, CRC, then version, then parses.
inline std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  if (bytes.size() < 16) throw CrcError("checkpoint truncated (" + std::to_string(bytes.size()) + " bytes)");
  const std::size_t body = bytes.size() - 4;
  const std::uint32_t stored = detail::get_u32(bytes.data() + body);
  const std::uint32_t actual = detail::crc32_of(bytes.data(), body);
  if (stored != actual) {
    std::ostringstream os;
    os << "checkpoint CRC mismatch (stored " << std::hex << stored << ", computed " << actual << ")";
    throw CrcError(os.str());
  }
  const std::uint32_t version = detail::get_u32(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version));
  }
  std::size_t pos = 8;
  auto need = [&](std::size_t n) {
    if (pos + n > body) throw CheckpointError("checkpoint payload ends early");
  };
  need(4);
  const std::uint32_t count = detail::get_u32(bytes.data() + pos);
  pos += 4;
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    need(4);
    const std::uint32_t len = detail::get_u32(bytes.data() + pos);
    pos += 4;
    need(len);
    e.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), len);
    pos += len;
    need(16);
    std::array<std::size_t, 4> d{};
    for (auto& x : d) {
      x = detail::get_u32(bytes.data() + pos);
      pos += 4;
    }
    e.shape = Shape::from_dims(d);
    need(e.shape.size() * 4);
    e.data.resize(e.shape.size());
    for (auto& f : e.data) {
      const std::uint32_t bits = detail::get_u32(bytes.data() + pos);
      std::memcpy(&f, &bits, sizeof f);
      pos += 4;
    }
    entries.push_back(std::move(e));
  }
  if (pos != body) throw CheckpointError("trailing bytes after checkpoint entries");
  return entries;
}

// All-or-nothing: every parameter must have an entry of identical shape and
// every entry must name a parameter; nothing is written otherwise.
template <typename T>
void apply_checkpoint(const std::vector<CheckpointEntry>& entries, ParameterStore<T>& params) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name.emplace(e.name, &e);
  for (const auto& p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      throw ShapeMismatchError("checkpoint has no entry for parameter '" + p->name + "'");
    }
    if (it->second->shape != p->value.shape()) {
      throw ShapeMismatchError("parameter '" + p->name + "': checkpoint " +
                               it->second->shape.str() + " vs model " + p->value.shape().str());
    }
  }
  for (const auto& e : entries) {
    if (!params.find(e.name)) {
      throw ShapeMismatchError("checkpoint entry '" + e.name + "' does not exist in the model");
    }
  }
  for (auto& p : params) {
    const auto& src = by_name.at(p->name)->data;
    for (std::size_t i = 0; i < src.size(); ++i) p->value[i] = static_cast<T>(src[i]);
  }
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void save_checkpoint(const ParameterStore<T>& params, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(params));
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, ParameterStore<T>& params) {
  apply_checkpoint(decode_checkpoint(read_file(path)), params);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  Schedule schedule;
  LossWeights weights;
  std::uint64_t seed = Rng::kDefaultSeed;
  double clip_norm = 1.0;
  std::uint64_t eval_every = 50;        // 0 disables periodic PSNR
  std::uint64_t checkpoint_every = 0;   // 0: only the final checkpoint
  bool flip = true;
};

struct StepRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> psnr;
  Stage stage;

  std::string line() const {
    std::ostringstream os;
    os << "step=" << step << " lr=" << std::setprecision(9) << lr << " loss=" << loss;
    if (psnr) os << " psnr=" << *psnr;
    return os.str();
  }
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  // Called with the number of completed steps.
  std::function<void(std::uint64_t)> on_checkpoint;
};

// Mean Y-PSNR of the clamped network output over `pairs` (full images).
inline double evaluate_psnr(const DpcNet<float>& net, const std::vector<ImagePair>& pairs) {
  double total = 0.0;
  for (const auto& p : pairs) total += psnr_y(net.derain(p.rainy), p.clean);
  return total / static_cast<double>(pairs.size());
}

// Steps 0 .. total_steps-1. PSNR is logged every eval_every steps and on the
// last step: over `eval` when given, otherwise over the current batch.
inline std::vector<StepRecord> train_loop(DpcNet<float>& net, const std::vector<ImagePair>& corpus,
                                          const TrainOptions& opt, const TrainHooks& hooks = {},
                                          const std::vector<ImagePair>* eval = nullptr) {
  if (corpus.empty()) throw ContractError("train_loop: empty corpus");
  opt.schedule.validate();
  const FeatureExtractor<float> extractor;
  Rng rng(opt.seed ^ 0x5DEECE66Dull);
  OptimState<float> state;
  ParameterStore<float>& params = net.parameters();
  std::vector<StepRecord> log;
  const std::uint64_t T = opt.schedule.total_steps;
  for (std::uint64_t step = 0; step < T; ++step) {
    StepRecord rec;
    rec.step = step;
    rec.stage = opt.schedule.stage_at(step);
    rec.lr = cosine_lr(step, opt.schedule);

    std::vector<ImagePair> patches;
    for (std::size_t b = 0; b < rec.stage.batch; ++b) {
      const ImagePair& src = corpus[rng.below(corpus.size())];
      patches.push_back(patch_sample(src, rec.stage.patch, rng, opt.flip));
    }
    std::vector<const Image*> rainy, clean;
    for (const auto& p : patches) {
      rainy.push_back(&p.rainy);
      clean.push_back(&p.clean);
    }
    const Image x = stack_batch(rainy);
    const Image y = stack_batch(clean);

    params.zero_grad();
    Tensor<float> pred_value;
    {
      Graph<float> g;
      const Var<float> pred = net.forward(g, g.constant(x));
      const Var<float> loss = total_loss(g, pred, g.constant(y), opt.weights, extractor);
      rec.loss = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(rec.loss)) {
        throw NanLossError(step, "non-finite loss at step " + std::to_string(step));
      }
      g.backward(loss);
      pred_value = pred.value();
    }
    clip_grad_norm(params, opt.clip_norm);
    adam_step(params, state, rec.lr);

    const bool last = step + 1 == T;
    if ((opt.eval_every > 0 && (step + 1) % opt.eval_every == 0) || last) {
      if (eval && !eval->empty()) {
        rec.psnr = evaluate_psnr(net, *eval);
      } else {
        for (auto& v : pred_value.data()) v = std::clamp(v, 0.0f, 1.0f);
        rec.psnr = psnr_y(pred_value, y);
      }
    }
    if (hooks.on_step) hooks.on_step(rec);
    log.push_back(rec);
    if (hooks.on_checkpoint && opt.checkpoint_every > 0 && (step + 1) % opt.checkpoint_every == 0 &&
        !last) {
      hooks.on_checkpoint(step + 1);
    }
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(T);
  return log;
}

}  // namespace dpcnet

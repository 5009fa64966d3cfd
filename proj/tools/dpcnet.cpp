// dpcnet: train, infer, eval and gradcheck front end.
//
// Exit codes: 0 success, 1 unexpected error, 2 configuration or checkpoint
// mismatch, 3 data error, 4 non-finite loss, 5 gradient check failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpcnet/dpcnet.hpp"

namespace fs = std::filesystem;
using namespace dpcnet;

namespace {

enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kConfig = 2,
  kData = 3,
  kNan = 4,
  kGradcheck = 5,
};

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg.load_file(c.config);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  cfg.apply_environment();
  return cfg;
}

std::size_t next_pow2(std::size_t v) {
  std::size_t p = 1;
  while (p < v) p <<= 1;
  return p;
}

int cmd_train(const RunConfig& cfg) {
  const ModelConfig mc = cfg.model();
  const TrainOptions opt = cfg.training();
  const fs::path root = cfg.get("data.root");
  const std::vector<ImagePair> corpus = load_corpus(root);
  std::vector<ImagePair> eval;
  if (!cfg.get("data.eval_root").empty()) eval = load_corpus(cfg.get("data.eval_root"));

  const fs::path out = cfg.get("out.dir");
  fs::create_directories(out);
  {
    std::ofstream cf(out / "config.cfg");
    cfg.write(cf);
  }
  std::ofstream log(out / "train.log", std::ios::app);
  if (!log) throw IoError("cannot open " + (out / "train.log").string());

  DpcNet<float> net(mc);
  std::cout << "# corpus = " << corpus.size() << " pairs from " << root.string() << '\n';
  std::cout << "# parameters = " << net.parameters().scalar_count() << '\n';

  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r) {
    const std::string line = r.line();
    log << line << '\n' << std::flush;
    std::cout << line << '\n';
  };
  hooks.on_checkpoint = [&](std::uint64_t done) {
    const fs::path path =
        done == opt.schedule.total_steps ? out / "model.ckpt" : out / ("step_" + std::to_string(done) + ".ckpt");
    save_checkpoint(net.parameters(), path);
    std::cout << "# checkpoint " << path.string() << '\n';
  };
  train_loop(net, corpus, opt, hooks, eval.empty() ? nullptr : &eval);
  return kOk;
}

int cmd_infer(const RunConfig& cfg, const std::string& checkpoint, const std::string& input,
              const std::string& output) {
  DpcNet<float> net(cfg.model());
  load_checkpoint(checkpoint, net.parameters());

  std::vector<fs::path> inputs;
  if (fs::is_directory(input)) {
    for (const auto& id : png_ids(input)) inputs.push_back(fs::path(input) / (id + ".png"));
  } else {
    if (!fs::is_regular_file(input)) throw FileNotFoundError("no such input: " + input);
    inputs.emplace_back(input);
  }
  if (inputs.empty()) throw IoError("no PNG files under " + input);

  const std::size_t factor = std::size_t{1} << (cfg.model().levels - 1);
  for (const auto& path : inputs) {
    const Image img = load_png(path);
    const Shape& s = img.shape();
    const std::size_t h = std::max(next_pow2(s.h), factor);
    const std::size_t w = std::max(next_pow2(s.w), factor);
    const Image padded = (h == s.h && w == s.w) ? img : reflect_pad(img, h, w);
    const Image result = crop_top_left(net.derain(padded), s.h, s.w);
    const fs::path dst = fs::path(output) / (path.stem().string() + "_derained.png");
    save_png(result, dst);
    std::cout << path.stem().string() << " -> " << dst.string() << '\n';
  }
  return kOk;
}

// Prediction files may carry the "_derained" suffix written by infer.
std::string strip_suffix(const std::string& id) {
  static const std::string suffix = "_derained";
  if (id.size() > suffix.size() && id.compare(id.size() - suffix.size(), suffix.size(), suffix) == 0) {
    return id.substr(0, id.size() - suffix.size());
  }
  return id;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir) {
  std::map<std::string, std::string> pred;
  for (const auto& id : png_ids(pred_dir)) pred[strip_suffix(id)] = id;
  std::map<std::string, std::string> gt;
  for (const auto& id : png_ids(gt_dir)) gt[id] = id;

  std::vector<std::string> unmatched;
  for (const auto& [id, file] : pred) {
    if (!gt.count(id)) unmatched.push_back(file + " (pred only)");
  }
  for (const auto& [id, file] : gt) {
    if (!pred.count(id)) unmatched.push_back(file + " (gt only)");
  }
  if (!unmatched.empty() || pred.empty()) {
    std::cerr << "error: unmatched ids:";
    for (const auto& u : unmatched) std::cerr << ' ' << u;
    if (pred.empty()) std::cerr << " (no images)";
    std::cerr << '\n';
    return kData;
  }

  double sum_psnr = 0.0;
  double sum_ssim = 0.0;
  std::cout << std::setprecision(10);
  for (const auto& [id, file] : pred) {
    const Image p = load_png(fs::path(pred_dir) / (file + ".png"));
    const Image g = load_png(fs::path(gt_dir) / (id + ".png"));
    if (p.shape() != g.shape()) {
      std::cerr << "error: size mismatch for " << id << ": " << p.shape().str() << " vs " << g.shape().str()
                << '\n';
      return kData;
    }
    const double ps = psnr_y(p, g);
    const double ss = ssim_y(p, g);
    sum_psnr += ps;
    sum_ssim += ss;
    std::cout << "id=" << id << " psnr=" << ps << " ssim=" << ss << '\n';
  }
  const double n = static_cast<double>(pred.size());
  std::cout << "mean_psnr=" << sum_psnr / n << " mean_ssim=" << sum_ssim / n << '\n';
  return kOk;
}

int cmd_gradcheck(const RunConfig& cfg) {
  if (const char* op = std::getenv("DPCNET_TEST_SABOTAGE"); op && *op) {
    testing::sabotaged_op() = op;
    std::cout << "# sabotaged backward: " << op << '\n';
  }
  GradSuiteOptions o;
  o.network = cfg.model();
  o.h = cfg.get_double("gradcheck.h");
  o.tol = cfg.get_double("gradcheck.tol");
  o.extent = cfg.get_u64("gradcheck.size");
  o.coords = cfg.get_u64("gradcheck.coords");
  o.seed = cfg.get_u64("gradcheck.seed");

  std::vector<std::string> failed;
  std::size_t total = 0;
  for (const auto& r : run_gradient_suite(o)) {
    ++total;
    const bool ok = r.report.passed();
    if (!ok) failed.push_back(r.name);
    std::cout << std::left << std::setw(26) << r.name << std::right << " max_rel_err=" << std::scientific
              << std::setprecision(3) << r.report.max_rel_error << " coords=" << r.report.coords
              << " shrunk=" << r.report.shrunk << " straddled=" << r.report.straddled << " worst="
              << r.report.worst << (ok ? " PASS" : " FAIL") << '\n'
              << std::defaultfloat;
  }
  if (failed.empty()) {
    std::cout << "gradcheck: all " << total << " checks passed (tol " << o.tol << ")\n";
    return kOk;
  }
  std::cout << "gradcheck: FAILED:";
  for (const auto& f : failed) std::cout << ' ' << f;
  std::cout << '\n';
  return kGradcheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DPCNet dual-path deraining network"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "key = value run configuration file");
  app.add_option("--set", common.overrides, "override one key (key=value); repeatable")->take_all()->allow_extra_args(false);

  auto* train = app.add_subcommand("train", "train a model on data.root");
  train->fallthrough();

  std::string checkpoint, input, output = "out";
  auto* infer = app.add_subcommand("infer", "derain PNG images with a checkpoint");
  infer->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  infer->add_option("--input", input, "PNG file or directory of PNGs")->required();
  infer->add_option("--output", output, "output directory");
  infer->fallthrough();

  std::string pred_dir, gt_dir;
  auto* eval = app.add_subcommand("eval", "Y-channel PSNR/SSIM of predictions against ground truth");
  eval->add_option("--pred", pred_dir, "prediction directory")->required();
  eval->add_option("--gt", gt_dir, "ground-truth directory")->required();
  eval->fallthrough();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = resolve(common);
    cfg.echo(std::cout);
    if (eval->parsed()) {
      std::cout << "# eval.pred = " << pred_dir << "\n# eval.gt = " << gt_dir << '\n';
    }
    if (infer->parsed()) {
      std::cout << "# infer.checkpoint = " << checkpoint << "\n# infer.input = " << input
                << "\n# infer.output = " << output << '\n';
    }
    std::cout << std::flush;
    if (train->parsed()) return cmd_train(cfg);
    if (infer->parsed()) return cmd_infer(cfg, checkpoint, input, output);
    if (eval->parsed()) return cmd_eval(pred_dir, gt_dir);
    if (gradcheck->parsed()) return cmd_gradcheck(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NanLossError& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return kNan;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}

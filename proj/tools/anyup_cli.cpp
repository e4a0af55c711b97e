// anyup command-line tool. Talks to the library only through anyup.h.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "anyup/anyup.h"
#include "json.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitInternal = 1;

int exit_code(anyup_status s) {
  switch (s) {
    case ANYUP_OK: return kExitOk;
    case ANYUP_ERR_NUMERICAL: return kExitNumerical;
    case ANYUP_ERR_INTERNAL: return kExitInternal;
    default: return kExitUsage;
  }
}

struct Failure {
  anyup_status status;
};

void check(anyup_status s, const char* what) {
  if (s == ANYUP_OK) return;
  std::cerr << "error: " << what << ": " << anyup_last_error() << '\n';
  throw Failure{s};
}

template <typename T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using Features = std::unique_ptr<anyup_features, Deleter<anyup_features, anyup_features_free>>;
using Image = std::unique_ptr<anyup_image, Deleter<anyup_image, anyup_image_free>>;
using Model = std::unique_ptr<anyup_model, Deleter<anyup_model, anyup_model_free>>;
using Report = std::unique_ptr<anyup_report, Deleter<anyup_report, anyup_report_free>>;

Features read_features(const std::string& path) {
  anyup_features* f = nullptr;
  check(anyup_features_read(path.c_str(), &f), "reading features");
  return Features(f);
}

Image read_image(const std::string& path) {
  anyup_image* img = nullptr;
  check(anyup_image_load(path.c_str(), &img), "reading image");
  return Image(img);
}

Model read_model(const std::string& dir) {
  anyup_model* m = nullptr;
  check(anyup_model_load(dir.c_str(), &m), "loading checkpoint");
  return Model(m);
}

// Turns a flat JSON object into "--key value" arguments for one subcommand.
// Keys must name an option of that subcommand.
std::vector<std::string> config_arguments(const std::string& path, CLI::App& sub) {
  std::ifstream in(path);
  if (!in) throw CLI::ValidationError("--config", "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CLI::ValidationError("--config", path + ": " + e.what());
  }
  if (!j.is_object()) throw CLI::ValidationError("--config", path + ": expected a JSON object");
  std::vector<std::string> args;
  for (const auto& [key, value] : j.items()) {
    const std::string flag = "--" + key;
    if (key == "config") throw CLI::ValidationError("--config", "config files cannot nest");
    const CLI::Option* opt = sub.get_option_no_throw(flag);
    if (!opt) throw CLI::ValidationError("--config", "unknown key '" + key + "' for " + sub.get_name());
    if (value.is_boolean()) {
      if (opt->get_expected_min() != 0) throw CLI::ValidationError("--config", "'" + key + "' is not a flag");
      if (value.get<bool>()) args.push_back(flag);
      continue;
    }
    if (opt->get_expected_min() == 0) throw CLI::ValidationError("--config", "'" + key + "' expects true or false");
    const auto push = [&](const nlohmann::json& v) {
      if (v.is_string()) {
        args.push_back(flag);
        args.push_back(v.get<std::string>());
      } else if (v.is_number()) {
        args.push_back(flag);
        args.push_back(v.dump());
      } else {
        throw CLI::ValidationError("--config", "unsupported value for '" + key + "'");
      }
    };
    if (value.is_array())
      for (const auto& v : value) push(v);
    else
      push(value);
  }
  return args;
}

struct TrainArgs {
  int synthetic = 0;
  std::vector<std::string> images;
  std::string out, resume;
  int steps = 0, batch = 0, crops = 0, image_size = 0, crop_size = 0, interval = 0;
  double lr = 0, w_main = 0, w_input = 0, w_self = 0, weight_decay = 0, grad_clip = 0;
  std::uint64_t seed = 0;
  int image_dim = 0, radius = 0, feature_dim = 0, patch = 0;
  bool quiet = false;
  bool no_source_aug = false;
};

void on_train_row(const anyup_train_row* row, void* user) {
  const auto* args = static_cast<const TrainArgs*>(user);
  if (args->quiet) return;
  if (row->step == 1 || row->step % 50 == 0 || row->step == args->steps)
    std::printf("step %lld main %.5f input %.5f self %.5f total %.5f\n", static_cast<long long>(row->step),
                row->loss_main, row->loss_input, row->loss_self, row->loss_total);
}

void on_train_warning(const char* message, void*) { std::cerr << "warning: " << message << '\n'; }

int run_train(const TrainArgs& a) {
  anyup_train_options o;
  anyup_train_options_default(&o);
  o.learning_rate = a.lr;
  o.batch_size = a.batch;
  o.crops_per_image = a.crops;
  o.steps = a.steps;
  o.image_size = a.image_size;
  o.crop_size = a.crop_size;
  o.seed = a.seed;
  o.weight_main = a.w_main;
  o.weight_input = a.w_input;
  o.weight_self = a.w_self;
  o.weight_decay = a.weight_decay;
  o.grad_clip = a.grad_clip;
  o.checkpoint_interval = a.interval;
  o.source_augmentation = a.no_source_aug ? 0 : 1;
  o.encoder.patch_size = a.patch;
  o.encoder.feature_dim = a.feature_dim;
  o.model.image_dim = a.image_dim;
  o.model.window_radius = a.radius;
  std::vector<const char*> paths;
  for (const auto& p : a.images) paths.push_back(p.c_str());
  o.image_paths = paths.data();
  o.image_path_count = static_cast<int>(paths.size());
  o.synthetic_count = a.synthetic;
  if (paths.empty() && a.synthetic <= 0) {
    std::cerr << "error: give --images or --synthetic N\n";
    return kExitUsage;
  }
  o.out_dir = a.out.c_str();
  o.resume_from = a.resume.empty() ? nullptr : a.resume.c_str();
  o.on_step = on_train_row;
  o.on_warning = on_train_warning;
  o.user_data = const_cast<TrainArgs*>(&a);
  check(anyup_train(&o, nullptr), "training");
  if (!a.quiet) std::printf("checkpoint written to %s\n", a.out.c_str());
  return kExitOk;
}

struct UpsampleArgs {
  std::string checkpoint, features, image, out;
  int height = 0, width = 0, radius = -1;
};

int run_upsample(const UpsampleArgs& a) {
  Model model = read_model(a.checkpoint);
  if (a.radius >= 0) check(anyup_model_set_window_radius(model.get(), a.radius), "setting radius");
  Features features = read_features(a.features);
  Image image = read_image(a.image);
  anyup_features* out = nullptr;
  check(anyup_upsample(model.get(), image.get(), features.get(), a.height, a.width, &out), "upsampling");
  Features result(out);
  check(anyup_features_write(result.get(), a.out.c_str()), "writing features");
  int h, w, c;
  anyup_features_shape(result.get(), &h, &w, &c);
  std::printf("wrote %dx%dx%d features to %s\n", h, w, c, a.out.c_str());
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, method = "anyup", protocol = "probe", task = "segmentation", out;
  int count = 0, size = 0, ratio = 0, classes = 0, probe_steps = 0;
  double probe_lr = 0;
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& a) {
  anyup_eval_options o;
  anyup_eval_options_default(&o);
  o.method = a.method == "bilinear"  ? ANYUP_METHOD_BILINEAR
             : a.method == "nearest" ? ANYUP_METHOD_NEAREST
                                     : ANYUP_METHOD_MODEL;
  o.protocol = a.protocol == "preserve" ? ANYUP_PROTOCOL_PRESERVE : ANYUP_PROTOCOL_PROBE;
  o.task = a.task == "depth" ? ANYUP_TASK_DEPTH : ANYUP_TASK_SEGMENTATION;
  o.image_count = a.count;
  o.image_size = a.size;
  o.downsample_ratio = a.ratio;
  o.num_classes = a.classes;
  o.probe_steps = a.probe_steps;
  o.probe_learning_rate = a.probe_lr;
  o.seed = a.seed;
  Model model;
  if (o.method == ANYUP_METHOD_MODEL) {
    if (a.checkpoint.empty()) {
      std::cerr << "error: --checkpoint is required for --method anyup\n";
      return kExitUsage;
    }
    model = read_model(a.checkpoint);
  }
  anyup_report* r = nullptr;
  check(anyup_evaluate(model.get(), &o, &r), "evaluation");
  Report report(r);
  std::fputs(anyup_report_text(report.get()), stdout);
  if (!a.out.empty()) check(anyup_report_write(report.get(), a.out.c_str()), "writing report");
  return kExitOk;
}

struct PcaArgs {
  std::string features, basis, out;
};

int run_pca(const PcaArgs& a) {
  Features features = read_features(a.features);
  Features basis;
  if (!a.basis.empty()) basis = read_features(a.basis);
  anyup_image* img = nullptr;
  check(anyup_pca_rgb(features.get(), basis.get(), &img), "PCA");
  Image rgb(img);
  check(anyup_image_save(rgb.get(), a.out.c_str()), "writing PNG");
  return kExitOk;
}

struct ExportArgs {
  std::string image, out;
  int patch = 0, dim = 0, hidden = 0, stride = 0;
  std::uint64_t seed = 0;
};

int run_export(const ExportArgs& a) {
  Image image = read_image(a.image);
  anyup_encoder_options o{a.patch, a.dim, a.hidden, a.seed};
  anyup_features* f = nullptr;
  check(anyup_encode(image.get(), &o, a.stride, &f), "encoding");
  Features features(f);
  check(anyup_features_write(features.get(), a.out.c_str()), "writing features");
  return kExitOk;
}

struct SynthArgs {
  std::string out;
  int size = 64;
  std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a) {
  anyup_image* img = nullptr;
  check(anyup_image_synthetic(a.size, a.seed, &img), "generating image");
  Image image(img);
  check(anyup_image_save(image.get(), a.out.c_str()), "writing PNG");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Encoder-agnostic feature upsampling"};
  app.name("anyup");
  app.require_subcommand(1);
  app.option_defaults()->take_last();
  app.set_version_flag("--version", std::string(anyup_version()));

  anyup_train_options td;
  anyup_train_options_default(&td);
  TrainArgs train;
  train.steps = td.steps;
  train.batch = td.batch_size;
  train.crops = td.crops_per_image;
  train.image_size = td.image_size;
  train.crop_size = td.crop_size;
  train.lr = td.learning_rate;
  train.w_main = td.weight_main;
  train.w_input = td.weight_input;
  train.w_self = td.weight_self;
  train.weight_decay = td.weight_decay;
  train.grad_clip = td.grad_clip;
  train.interval = td.checkpoint_interval;
  train.image_dim = td.model.image_dim;
  train.radius = td.model.window_radius;
  train.feature_dim = td.encoder.feature_dim;
  train.patch = td.encoder.patch_size;

  std::string config_path;
  const auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Flat JSON file whose keys mirror this command's flags")
        ->check(CLI::ExistingFile);
  };

  CLI::App* cmd_train = app.add_subcommand("train", "Train an upsampler and write a checkpoint directory");
  add_config(cmd_train);
  cmd_train->add_option("--synthetic", train.synthetic, "Train on N procedural images");
  cmd_train->add_option("--images", train.images, "PNG training images")->check(CLI::ExistingFile);
  cmd_train->add_option("--out", train.out, "Checkpoint directory")->required();
  cmd_train->add_option("--resume", train.resume, "Resume from this checkpoint directory")->check(CLI::ExistingDirectory);
  cmd_train->add_option("--steps", train.steps, "Optimizer steps")->capture_default_str();
  cmd_train->add_option("--lr", train.lr, "Learning rate")->capture_default_str();
  cmd_train->add_option("--batch", train.batch, "Images per step")->capture_default_str();
  cmd_train->add_option("--crops", train.crops, "Crops per image")->capture_default_str();
  cmd_train->add_option("--image-size", train.image_size, "Training resolution S")->capture_default_str();
  cmd_train->add_option("--crop-size", train.crop_size, "Crop size in pixels")->capture_default_str();
  cmd_train->add_option("--seed", train.seed, "Random seed")->capture_default_str();
  cmd_train->add_option("--w-main", train.w_main, "Crop-consistency weight")->capture_default_str();
  cmd_train->add_option("--w-input", train.w_input, "Input-consistency weight")->capture_default_str();
  cmd_train->add_option("--w-self", train.w_self, "Self-consistency weight")->capture_default_str();
  cmd_train->add_option("--weight-decay", train.weight_decay, "AdamW weight decay")->capture_default_str();
  cmd_train->add_option("--grad-clip", train.grad_clip, "Global gradient norm limit, 0 disables")
      ->capture_default_str();
  cmd_train->add_option("--checkpoint-interval", train.interval, "Write step_XXXXXX checkpoints every N steps")
      ->capture_default_str();
  cmd_train->add_option("--image-dim", train.image_dim, "Width of the image conv paths")->capture_default_str();
  cmd_train->add_option("--radius", train.radius, "Attention window radius")->capture_default_str();
  cmd_train->add_option("--patch", train.patch, "Toy encoder patch size")->capture_default_str();
  cmd_train->add_option("--dim", train.feature_dim, "Toy encoder feature dimension")->capture_default_str();
  cmd_train->add_flag("--no-source-aug", train.no_source_aug,
                      "Train on the images as given, without random flips, rotations and RGB orders");
  cmd_train->add_flag("--quiet", train.quiet, "Suppress progress output");

  UpsampleArgs up;
  CLI::App* cmd_up = app.add_subcommand("upsample", "Upsample an ANYT feature map guided by a PNG");
  add_config(cmd_up);
  cmd_up->add_option("--checkpoint", up.checkpoint, "Checkpoint directory")->required();
  cmd_up->add_option("--features", up.features, "Input ANYT features")->required();
  cmd_up->add_option("--image", up.image, "Guidance PNG")->required();
  cmd_up->add_option("--out", up.out, "Output ANYT path")->required();
  cmd_up->add_option("--height", up.height, "Output height, 0 for image height")->capture_default_str();
  cmd_up->add_option("--width", up.width, "Output width, 0 for image width")->capture_default_str();
  cmd_up->add_option("--radius", up.radius, "Override the attention window radius");

  anyup_eval_options ed;
  anyup_eval_options_default(&ed);
  EvalArgs ev;
  ev.count = ed.image_count;
  ev.size = ed.image_size;
  ev.ratio = ed.downsample_ratio;
  ev.classes = ed.num_classes;
  ev.probe_steps = ed.probe_steps;
  ev.probe_lr = ed.probe_learning_rate;
  CLI::App* cmd_eval = app.add_subcommand("eval", "Linear-probe evaluation on the synthetic benchmark");
  add_config(cmd_eval);
  cmd_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory (method anyup)");
  cmd_eval->add_option("--method", ev.method, "Upsampler to evaluate")
      ->check(CLI::IsMember({"anyup", "bilinear", "nearest"}))
      ->capture_default_str();
  cmd_eval->add_option("--protocol", ev.protocol, "probe: fit on upsampled features; preserve: fit on low-res features")
      ->check(CLI::IsMember({"probe", "preserve"}))
      ->capture_default_str();
  cmd_eval->add_option("--task", ev.task, "Probe task")
      ->check(CLI::IsMember({"segmentation", "depth"}))
      ->capture_default_str();
  cmd_eval->add_option("--count", ev.count, "Images in the benchmark (half train, half test)")->capture_default_str();
  cmd_eval->add_option("--size", ev.size, "Image size")->capture_default_str();
  cmd_eval->add_option("--ratio", ev.ratio, "Downsampling ratio of the low-res input")->capture_default_str();
  cmd_eval->add_option("--classes", ev.classes, "Segmentation classes")->capture_default_str();
  cmd_eval->add_option("--probe-steps", ev.probe_steps, "Probe optimizer steps")->capture_default_str();
  cmd_eval->add_option("--probe-lr", ev.probe_lr, "Probe learning rate")->capture_default_str();
  cmd_eval->add_option("--seed", ev.seed, "Random seed")->capture_default_str();
  cmd_eval->add_option("--out", ev.out, "Write the key=value report here");

  PcaArgs pca;
  CLI::App* cmd_pca = app.add_subcommand("pca", "Render features as RGB via their top three principal components");
  add_config(cmd_pca);
  cmd_pca->add_option("--features", pca.features, "Input ANYT features")->required();
  cmd_pca->add_option("--basis", pca.basis, "Fit the components on these features instead");
  cmd_pca->add_option("--out", pca.out, "Output PNG")->required();

  anyup_encoder_options enc;
  anyup_encoder_options_default(&enc);
  ExportArgs ex;
  ex.patch = enc.patch_size;
  ex.dim = enc.feature_dim;
  ex.hidden = enc.hidden_dim;
  CLI::App* cmd_export = app.add_subcommand("export-features", "Encode a PNG with the toy patch encoder");
  add_config(cmd_export);
  cmd_export->add_option("--image", ex.image, "Input PNG")->required();
  cmd_export->add_option("--out", ex.out, "Output ANYT")->required();
  cmd_export->add_option("--patch", ex.patch, "Patch size")->capture_default_str();
  cmd_export->add_option("--dim", ex.dim, "Feature dimension")->capture_default_str();
  cmd_export->add_option("--hidden", ex.hidden, "Hidden width")->capture_default_str();
  cmd_export->add_option("--stride", ex.stride, "Dense stride, 0 for non-overlapping patches")->capture_default_str();
  cmd_export->add_option("--seed", ex.seed, "Encoder seed")->capture_default_str();

  SynthArgs sy;
  CLI::App* cmd_synth = app.add_subcommand("synth", "Write a procedural training image");
  add_config(cmd_synth);
  cmd_synth->add_option("--out", sy.out, "Output PNG")->required();
  cmd_synth->add_option("--size", sy.size, "Image size")->capture_default_str();
  cmd_synth->add_option("--seed", sy.seed, "Random seed")->capture_default_str();

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    // A --config file expands into flags placed before the user's own, so
    // explicit flags win under the take-last policy.
    for (std::size_t i = 0; i + 1 < args.size(); ++i) {
      if (args[i] != "--config") continue;
      CLI::App* sub = args.empty() ? nullptr : app.get_subcommand_no_throw(args[0]);
      if (!sub) throw CLI::ValidationError("--config", "must follow a command name");
      const std::vector<std::string> extra = config_arguments(args[i + 1], *sub);
      args.insert(args.begin() + 1, extra.begin(), extra.end());
      break;
    }
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*cmd_train) return run_train(train);
    if (*cmd_up) return run_upsample(up);
    if (*cmd_eval) return run_eval(ev);
    if (*cmd_pca) return run_pca(pca);
    if (*cmd_export) return run_export(ex);
    if (*cmd_synth) return run_synth(sy);
  } catch (const Failure& f) {
    return exit_code(f.status);
  }
  return kExitUsage;
}

#pragma once

#include <iostream>
#include <locale>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mscnn/checkpoint.hpp"
#include "mscnn/density.hpp"
#include "mscnn/io.hpp"
#include "mscnn/metrics.hpp"
#include "mscnn/model.hpp"
#include "mscnn/trainer.hpp"

namespace mscnn {

struct PipelineOptions {
  TrainConfig train;
  KernelParams kernel;
  std::string augment = "none";  // none | ninecrop | randomcrop
  std::size_t crop_n = 36;
  std::size_t crop_size = 225;
  std::size_t filter_divisor = 1;
};

inline std::vector<Sample> samples_from_entries(const std::vector<DatasetEntry>& entries, const KernelParams& kp) {
  std::vector<Sample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(make_sample(e.id, to_tensor(e.image), e.annotations, kp));
  return out;
}

inline std::vector<Sample> augment_samples(std::span<const Sample> samples, const PipelineOptions& opt) {
  if (opt.augment == "none") return {samples.begin(), samples.end()};
  std::vector<Sample> out;
  if (opt.augment == "ninecrop") {
    for (const auto& s : samples) {
      auto a = augment_ninecrop(s, opt.kernel);
      std::move(a.begin(), a.end(), std::back_inserter(out));
    }
    return out;
  }
  if (opt.augment == "randomcrop") {
    auto rng = make_rng(opt.train.seed, "crops");
    for (const auto& s : samples) {
      auto a = augment_randomcrop(s, opt.crop_n, opt.crop_size, rng, opt.kernel);
      std::move(a.begin(), a.end(), std::back_inserter(out));
    }
    return out;
  }
  throw std::invalid_argument("unknown augmentation '" + opt.augment + "' (expected none, ninecrop or randomcrop)");
}

/// Builds a freshly initialized model from the "init" seed stream and trains
/// it on the (augmented) samples.
inline Model<float> train_pipeline(std::span<const Sample> samples, const PipelineOptions& opt,
                                   std::vector<LossRecord>* history = nullptr) {
  auto model = build_mscnn<float>(ModelSpec::mscnn().scaled(opt.filter_divisor), opt.train.init_std,
                                  derive_seed(opt.train.seed, "init"));
  const auto data = augment_samples(samples, opt);
  auto h = train(model, std::span<const Sample>(data), opt.train);
  if (history) *history = std::move(h);
  return model;
}

namespace detail {

/// `--k` names the neighbour count except where it already means folds.
inline void add_kernel_options(CLI::App* cmd, KernelParams& kp, bool short_k = true) {
  cmd->add_option("--beta", kp.beta, "bandwidth factor: sigma = beta * mean kNN distance")->capture_default_str();
  cmd->add_option(short_k ? "--k,--knn" : "--knn", kp.k_neighbors, "nearest neighbours averaged per head")
      ->capture_default_str();
  cmd->add_option("--fallback-sigma", kp.fallback_sigma, "sigma (px) for a lone head")->capture_default_str();
  cmd->add_option("--truncation", kp.truncation_radius_sigmas, "kernel window radius in sigmas")
      ->capture_default_str();
}

inline void add_train_options(CLI::App* cmd, PipelineOptions& o, bool short_k = true) {
  cmd->add_option("--lr", o.train.lr, "learning rate")->capture_default_str();
  cmd->add_option("--momentum", o.train.momentum)->capture_default_str();
  cmd->add_option("--weight-decay", o.train.weight_decay)->capture_default_str();
  cmd->add_option("--epochs", o.train.epochs)->capture_default_str();
  cmd->add_option("--batch-size", o.train.batch_size)->capture_default_str();
  cmd->add_option("--max-iterations", o.train.max_iterations, "stop after this many steps (0 = no cap)")
      ->capture_default_str();
  cmd->add_option("--seed", o.train.seed, "master seed for init, shuffle and crop streams")->capture_default_str();
  cmd->add_option("--init-std", o.train.init_std, "std of the Gaussian weight init")->capture_default_str();
  cmd->add_flag("--subtract-mean", o.train.subtract_mean, "remove each image's mean before the forward pass");
  cmd->add_option("--augment", o.augment, "none | ninecrop | randomcrop")
      ->check(CLI::IsMember({"none", "ninecrop", "randomcrop"}))
      ->capture_default_str();
  cmd->add_option("--crop-n", o.crop_n, "random crops per image")->capture_default_str();
  cmd->add_option("--crop-size", o.crop_size, "random crop side (trimmed to a multiple of 4)")->capture_default_str();
  cmd->add_option("--filter-divisor", o.filter_divisor, "divide every filter count (desk-scale runs)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  add_kernel_options(cmd, o.kernel, short_k);
}

inline std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

}  // namespace detail

inline std::string describe(const PipelineOptions& o) {
  const auto& t = o.train;
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << "config lr " << t.lr << " momentum " << t.momentum << " weight_decay " << t.weight_decay << " epochs "
     << t.epochs << " batch_size " << t.batch_size << " max_iterations " << t.max_iterations << " seed " << t.seed
     << " init_std " << t.init_std << " subtract_mean " << (t.subtract_mean ? 1 : 0) << " augment " << o.augment
     << " filter_divisor " << o.filter_divisor << " beta " << o.kernel.beta << " k " << o.kernel.k_neighbors;
  return os.str();
}

inline void print_param_table(std::ostream& out, const ModelSpec& spec) {
  const auto rep = param_count(spec);
  for (const auto& l : rep.layers)
    out << l.name << ' ' << l.description << " weights " << l.weights << " biases " << l.biases << " total "
        << l.total() << '\n';
  const double published = PublishedReference::kMscnnParamsM * 1e6;
  const double dev = static_cast<double>(rep.total) - published;
  out << "PUBLISHED " << static_cast<std::uint64_t>(published) << '\n';
  out << "DEVIATION " << (dev >= 0 ? "+" : "") << static_cast<std::int64_t>(dev) << " ("
      << (dev >= 0 ? "+" : "") << format_fixed(100.0 * dev / published, 2) << "%)\n";
  out << "TOTAL " << rep.total << '\n';
}

/// Entry point for the `mscnn` tool. Returns the process exit code; every
/// failure produces one diagnostic line on `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-scale CNN crowd counting toolkit", "mscnn"};
  app.require_subcommand(1);

  // densitymap
  std::string ann_path, dmap_out;
  KernelParams dm_kernel;
  std::size_t downsample = 1;
  auto* dm = app.add_subcommand("densitymap", "render a geometry-adaptive density map from head annotations");
  dm->add_option("--ann", ann_path, "annotation JSON")->required()->check(CLI::ExistingFile);
  dm->add_option("--out", dmap_out, "output DMAP file")->required();
  dm->add_option("--downsample", downsample, "sum-pool factor")->check(CLI::PositiveNumber)->capture_default_str();
  detail::add_kernel_options(dm, dm_kernel);

  // train
  std::string data_dir, ckpt_out, history_out;
  PipelineOptions train_opt;
  auto* tr = app.add_subcommand("train", "train a model on an annotated dataset directory");
  tr->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", ckpt_out, "checkpoint to write")->required();
  tr->add_option("--history", history_out, "loss history CSV to write");
  detail::add_train_options(tr, train_opt);

  // eval
  std::string eval_data, model_path, report_path;
  KernelParams eval_kernel;
  TrainConfig infer_cfg;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (MAE, MSE, PARAMS)");
  ev->add_option("--data", eval_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--model", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--report", report_path, "JSON report to write")->required();
  ev->add_flag("--subtract-mean", infer_cfg.subtract_mean, "must match the flag used for training");
  detail::add_kernel_options(ev, eval_kernel);

  // predict
  std::string image_path, pred_model, pred_out;
  auto* pr = app.add_subcommand("predict", "estimate the density map and count of one image");
  pr->add_option("--image", image_path, "8-bit PGM image")->required()->check(CLI::ExistingFile);
  pr->add_option("--model", pred_model, "checkpoint")->required()->check(CLI::ExistingFile);
  pr->add_option("--out", pred_out, "output DMAP file")->required();
  pr->add_flag("--subtract-mean", infer_cfg.subtract_mean, "must match the flag used for training");

  // params
  std::string model_spec = "default";
  std::size_t spec_channels = 1, spec_divisor = 1;
  auto* pa = app.add_subcommand("params", "print the per-layer and total parameter count");
  pa->add_option("--model-spec", model_spec, "architecture (default)")
      ->check(CLI::IsMember({"default"}))
      ->capture_default_str();
  pa->add_option("--input-channels", spec_channels)->check(CLI::PositiveNumber)->capture_default_str();
  pa->add_option("--filter-divisor", spec_divisor)->check(CLI::PositiveNumber)->capture_default_str();

  // synth
  std::string synth_out;
  std::size_t synth_count = 20, synth_size = 64;
  SyntheticSceneConfig synth;
  auto* sy = app.add_subcommand("synth", "write a synthetic dot dataset");
  sy->add_option("--out", synth_out, "output directory")->required();
  sy->add_option("--count", synth_count, "number of images")->capture_default_str();
  sy->add_option("--seed", synth.seed)->capture_default_str();
  sy->add_option("--size", synth_size, "square image side")->check(CLI::PositiveNumber)->capture_default_str();
  sy->add_option("--min-heads", synth.min_heads)->capture_default_str();
  sy->add_option("--max-heads", synth.max_heads)->capture_default_str();
  sy->add_option("--dot-radius", synth.dot_radius)->capture_default_str();
  sy->add_option("--dot-intensity", synth.dot_intensity)->capture_default_str();
  sy->add_option("--noise", synth.noise_level)->capture_default_str();

  // kfold
  std::string kf_data, kf_report;
  std::size_t kf_k = 5;
  PipelineOptions kf_opt;
  auto* kf = app.add_subcommand("kfold", "k-fold cross-validated training and pooled evaluation");
  kf->add_option("--data", kf_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  kf->add_option("--k", kf_k, "number of folds")->capture_default_str();
  kf->add_option("--report", kf_report, "pooled JSON report to write");
  detail::add_train_options(kf, kf_opt, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "mscnn: " << detail::one_line(e.what()) << '\n';
    return e.get_exit_code() != 0 ? e.get_exit_code() : 2;
  }

  try {
    if (*dm) {
      const auto ann = read_annotation(ann_path);
      const auto img = read_pgm(fs::path(ann_path).parent_path() / ann.image);
      HeadAnnotations heads{ann.points, img.width, img.height};
      auto map = render_density_map(heads, dm_kernel);
      if (downsample > 1) map = downsample_sum(map, downsample);
      write_dmap(dmap_out, map);
      out << "count " << format_fixed(count_from_density(map), 2) << '\n';
    } else if (*tr) {
      const auto samples = samples_from_entries(load_dataset(data_dir), train_opt.kernel);
      out << describe(train_opt) << '\n';
      std::vector<LossRecord> history;
      const auto model = train_pipeline(samples, train_opt, &history);
      write_checkpoint(ckpt_out, model);
      if (!history_out.empty()) write_file_bytes(history_out, loss_history_csv(history));
      out << "trained " << history.size() << " sample visits; final loss "
          << format_fixed(history.empty() ? 0.0 : history.back().loss, 6) << '\n';
    } else if (*ev) {
      const auto model = read_checkpoint(model_path);
      const auto samples = samples_from_entries(load_dataset(eval_data), eval_kernel);
      const auto rep = evaluate(model, std::span<const Sample>(samples), infer_cfg);
      write_file_bytes(report_path, to_json(rep).dump(2) + "\n");
      out << "MAE " << format_fixed(rep.mae, 4) << " MSE " << format_fixed(rep.mse, 4) << " PARAMS " << rep.params
          << '\n';
    } else if (*pr) {
      const auto model = read_checkpoint(pred_model);
      const auto img = read_pgm(image_path);
      const auto s = make_sample(fs::path(image_path).stem().string(), to_tensor(img), {{}, img.width, img.height}, {});
      const auto map = predict_density(model, s, infer_cfg);
      write_dmap(pred_out, map);
      out << format_fixed(count_from_density(map), 2) << '\n';
    } else if (*pa) {
      print_param_table(out, ModelSpec::mscnn(spec_channels).scaled(spec_divisor));
    } else if (*sy) {
      synth.width = synth.height = synth_size;
      write_dataset(synth_out, generate_synthetic_dataset(synth, synth_count));
      out << "wrote " << synth_count << " images to " << synth_out << '\n';
    } else if (*kf) {
      const auto samples = samples_from_entries(load_dataset(kf_data), kf_opt.kernel);
      out << describe(kf_opt) << '\n';
      const auto folds = kfold_splits(samples.size(), kf_k, kf_opt.train.seed);
      std::vector<Model<float>> models;
      for (std::size_t f = 0; f < folds.size(); ++f) {
        const auto train_set = select(std::span<const Sample>(samples), std::span<const std::size_t>(folds[f].train));
        models.push_back(train_pipeline(train_set, kf_opt));
        out << "fold " << f + 1 << "/" << folds.size() << " trained on " << train_set.size() << " images\n";
      }
      const auto rep = kfold_evaluate(std::span<const Model<float>>(models), std::span<const Fold>(folds),
                                      std::span<const Sample>(samples), kf_opt.train);
      if (!kf_report.empty()) write_file_bytes(kf_report, to_json(rep).dump(2) + "\n");
      out << "pooled N " << rep.per_image.size() << " MAE " << format_fixed(rep.mae, 4) << " MSE "
          << format_fixed(rep.mse, 4) << '\n';
    }
  } catch (const std::exception& e) {
    err << "mscnn: error: " << detail::one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}

}  // namespace mscnn

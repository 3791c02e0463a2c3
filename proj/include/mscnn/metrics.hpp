#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mscnn/model.hpp"
#include "mscnn/trainer.hpp"

namespace mscnn {

namespace detail {
inline void check_pairs(std::span<const double> truth, std::span<const double> est) {
  if (truth.size() != est.size())
    throw std::invalid_argument("metric: " + std::to_string(truth.size()) + " ground-truth values but " +
                                std::to_string(est.size()) + " estimates");
  if (truth.empty()) throw std::invalid_argument("metric: no values");
}
}  // namespace detail

/// Mean absolute count error.
inline double mae(std::span<const double> truth, std::span<const double> est) {
  detail::check_pairs(truth, est);
  double acc = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) acc += std::abs(truth[i] - est[i]);
  return acc / static_cast<double>(truth.size());
}

/// Root of the mean squared count error. Crowd-counting literature labels
/// this quantity "MSE"; the name is kept for comparability.
inline double mse(std::span<const double> truth, std::span<const double> est) {
  detail::check_pairs(truth, est);
  double acc = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = truth[i] - est[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(truth.size()));
}

struct ImageResult {
  std::string id;
  double truth = 0.0;
  double estimate = 0.0;

  bool operator==(const ImageResult&) const = default;
};

struct EvalReport {
  double mae = 0.0;
  double mse = 0.0;
  std::uint64_t params = 0;
  std::vector<ImageResult> per_image;
};

/// Published parameter counts (millions) and headline errors, echoed for
/// context. None of these are reproduced or asserted by this toolkit.
struct PublishedReference {
  static constexpr double kMscnnParamsM = 2.9;
  static constexpr double kMcnnParamsM = 19.2;
  static constexpr double kZhangParamsM = 7.1;
  static constexpr double kCrowdNetParamsM = 14.8;
  static constexpr double kPartAMae = 83.8, kPartAMse = 127.4;
  static constexpr double kPartBMae = 17.7, kPartBMse = 30.2;
  static constexpr double kUcfMae = 363.7, kUcfMse = 468.4;
};

inline EvalReport make_report(std::vector<ImageResult> per_image, std::uint64_t params) {
  std::vector<double> t, e;
  for (const auto& r : per_image) {
    t.push_back(r.truth);
    e.push_back(r.estimate);
  }
  EvalReport rep;
  rep.mae = mae(t, e);
  rep.mse = mse(t, e);
  rep.params = params;
  rep.per_image = std::move(per_image);
  return rep;
}

using DensityPredictor = std::function<DensityMap(const Sample&)>;

/// Evaluates an arbitrary predictor over samples: truth is the head count
/// inside each sample's aligned region, the estimate is the predicted
/// density sum.
inline EvalReport evaluate_with(const DensityPredictor& predict, std::span<const Sample> samples,
                                std::uint64_t params) {
  std::vector<ImageResult> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) {
    DensityMap pred;
    try {
      pred = predict(s);
    } catch (const std::exception& e) {
      throw std::runtime_error("evaluate: image " + s.id + ": " + e.what());
    }
    rows.push_back({s.id, s.truth_count(), count_from_density(pred)});
  }
  return make_report(std::move(rows), params);
}

template <typename T>
DensityMap predict_density(const Model<T>& model, const Sample& s, const TrainConfig& cfg = {}) {
  const auto out = forward(model, prepare_input<T>(s, cfg));
  DensityMap m(out.dim(2), out.dim(1));
  for (std::size_t i = 0; i < out.size(); ++i) m.cells[i] = static_cast<float>(out[i]);
  return m;
}

template <typename T>
EvalReport evaluate(const Model<T>& model, std::span<const Sample> samples, const TrainConfig& cfg = {}) {
  return evaluate_with([&](const Sample& s) { return predict_density(model, s, cfg); }, samples,
                       param_count(model));
}

/// Concatenates per-image results of several reports and recomputes one
/// MAE/MSE over the pooled list.
inline EvalReport pool_reports(std::span<const EvalReport> reports) {
  if (reports.empty()) throw std::invalid_argument("pool_reports: no reports");
  std::vector<ImageResult> rows;
  for (const auto& r : reports) rows.insert(rows.end(), r.per_image.begin(), r.per_image.end());
  return make_report(std::move(rows), reports.front().params);
}

/// Evaluates models[f] on the validation part of folds[f] and pools.
template <typename T>
EvalReport kfold_evaluate(std::span<const Model<T>> models, std::span<const Fold> folds,
                          std::span<const Sample> samples, const TrainConfig& cfg = {}) {
  if (models.size() != folds.size())
    throw std::invalid_argument("kfold_evaluate: " + std::to_string(models.size()) + " models for " +
                                std::to_string(folds.size()) + " folds");
  std::vector<EvalReport> reports;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const auto val = select(samples, std::span<const std::size_t>(folds[f].validation));
    reports.push_back(evaluate(models[f], std::span<const Sample>(val), cfg));
  }
  return pool_reports(reports);
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  using PR = PublishedReference;
  nlohmann::ordered_json j;
  j["mae"] = r.mae;
  j["mse"] = r.mse;
  j["params"] = r.params;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& p : r.per_image) rows.push_back({{"id", p.id}, {"truth", p.truth}, {"estimate", p.estimate}});
  j["per_image"] = rows;
  j["definitions"] = {{"mae", "mean over images of |truth - estimate|"},
                      {"mse", "square root of the mean over images of (truth - estimate)^2"}};
  const double reported = PR::kMscnnParamsM * 1e6;
  j["params_vs_published"] = {{"published", reported},
                              {"deviation", static_cast<double>(r.params) - reported},
                              {"relative_deviation", (static_cast<double>(r.params) - reported) / reported}};
  j["published_reference"] = {
      {"note", "published full-scale results, echoed for context; not reproduced here"},
      {"params_millions", {{"MSCNN", PR::kMscnnParamsM}, {"MCNN", PR::kMcnnParamsM},
                           {"Zhang et al.", PR::kZhangParamsM}, {"CrowdNet", PR::kCrowdNetParamsM}}},
      {"shanghaitech_part_a", {{"mae", PR::kPartAMae}, {"mse", PR::kPartAMse}}},
      {"shanghaitech_part_b", {{"mae", PR::kPartBMae}, {"mse", PR::kPartBMse}}},
      {"ucf_cc_50", {{"mae", PR::kUcfMae}, {"mse", PR::kUcfMse}}}};
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.mae = j.at("mae").get<double>();
  r.mse = j.at("mse").get<double>();
  r.params = j.at("params").get<std::uint64_t>();
  for (const auto& p : j.at("per_image"))
    r.per_image.push_back({p.at("id").get<std::string>(), p.at("truth").get<double>(), p.at("estimate").get<double>()});
  return r;
}

}  // namespace mscnn

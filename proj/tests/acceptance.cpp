// Acceptance harness: one PASS/FAIL line per criterion.
//   acceptance            run every criterion
//   acceptance 2 6        run only the listed criteria
// Exit status is non-zero if any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mscnn/cli.hpp"
#include "mscnn/mscnn.hpp"
#include "oracles.hpp"

using namespace mscnn;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

std::string num(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

std::vector<Sample> synthetic_samples(std::size_t count, std::uint64_t seed) {
  SyntheticSceneConfig cfg;  // 64x64, 3-10 dots
  cfg.seed = seed;
  std::vector<Sample> out;
  for (const auto& e : generate_synthetic_dataset(cfg, count))
    out.push_back(make_sample(e.id, to_tensor(e.image), e.annotations, KernelParams{}));
  return out;
}

// 1 ----------------------------------------------------------------------

Outcome parameter_audit() {
  // (Cout, Cin, K) for every convolution, typed out independently of ModelSpec.
  const std::uint64_t rows[][3] = {{64, 1, 9},    {16, 64, 9},   {16, 64, 7},   {16, 64, 5},  {16, 64, 3},
                                   {32, 64, 9},   {32, 64, 7},   {32, 64, 5},   {32, 64, 3},  {32, 128, 9},
                                   {32, 128, 7},  {32, 128, 5},  {32, 128, 3},  {64, 128, 7}, {64, 128, 5},
                                   {64, 128, 3},  {64, 192, 7},  {64, 192, 5},  {64, 192, 3}, {1000, 192, 1},
                                   {1, 1000, 1}};
  std::uint64_t oracle_total = 0;
  for (const auto& r : rows) oracle_total += r[0] * r[1] * r[2] * r[2] + r[0];

  const auto analytic = param_count(ModelSpec::mscnn()).total;
  const auto held = param_count(build_mscnn<float>(ModelSpec::mscnn(), 0.01, 1));

  std::ostringstream table;
  print_param_table(table, ModelSpec::mscnn());
  const std::string t = table.str();
  const bool states_deviation = t.find("PUBLISHED 2900000") != std::string::npos &&
                                t.find("DEVIATION +175345 (+6.05%)") != std::string::npos &&
                                t.find("TOTAL 3075345\n") == t.size() - 14;
  const double rel = (static_cast<double>(analytic) - 2.9e6) / 2.9e6;
  const bool pass = oracle_total == 3075345 && analytic == oracle_total && held == oracle_total && states_deviation &&
                    rel >= 0.0 && rel <= 0.10;
  return {pass, "total " + std::to_string(analytic) + ", oracle " + std::to_string(oracle_total) + ", tensors " +
                    std::to_string(held) + ", deviation from 2.9M +" + num(100 * rel, 3) + "%"};
}

// 2 ----------------------------------------------------------------------

// Runs layers [first, end) with the library forward primitives.
Tensor<double> forward_from(const Model<double>& m, std::size_t first, Tensor<double> act) {
  std::size_t conv = 0;
  for (std::size_t i = 0; i < first; ++i)
    if (m.spec.layers[i].kind != LayerKind::MaxPool) conv += m.spec.layers[i].kernels.size();
  for (std::size_t i = first; i < m.spec.layers.size(); ++i) {
    const auto& l = m.spec.layers[i];
    if (l.kind == LayerKind::MaxPool) {
      act = maxpool2x2_forward(act).output;
      continue;
    }
    act = msb_forward<double>(act, std::span<const ConvLayer<double>>(m.convs.data() + conv, l.kernels.size()),
                              l.relu);
    conv += l.kernels.size();
  }
  return act;
}

Outcome gradient_check() {
  const auto start = std::chrono::steady_clock::now();
  auto spec = ModelSpec::mscnn().scaled(8);
  auto m = zero_model<double>(spec);
  oracle::he_init(m, 2);
  std::mt19937_64 rng(2);
  const auto x = oracle::random_tensor<double>({1, 16, 16}, rng, 0.0, 1.0);
  const auto target = oracle::random_tensor<double>({1, 4, 4}, rng, 0.0, 0.5);

  const auto trace = forward_trace(m, x);
  const auto grads = backward(m, trace, loss_and_grad(trace.output(), target).grad);

  // Layer owning each conv, so finite differences only rerun the suffix.
  std::vector<std::size_t> layer_of_conv;
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    for (std::size_t b = 0; b < spec.layers[i].kernels.size(); ++b) layer_of_conv.push_back(i);

  auto params = m.parameters();
  const auto names = m.parameter_names();
  std::size_t checked = 0, live = 0;
  double worst = 0.0;
  std::string worst_name;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::size_t layer = layer_of_conv[p / 2];
    const auto& in = trace.activations[layer];
    auto f = [&] { return loss_and_grad(forward_from(m, layer, in), target).loss; };
    const auto num_grad = oracle::central_differences(*params[p], f, 1e-6);
    for (std::size_t i = 0; i < num_grad.size(); ++i) {
      const double e = oracle::rel_error(grads[p][i], num_grad[i]);
      if (e > worst) {
        worst = e;
        worst_name = names[p] + "[" + std::to_string(i) + "]";
      }
      live += grads[p][i] != 0.0 ? 1 : 0;
      ++checked;
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool pass = checked == param_count(spec).total && worst < 1e-4 && secs < 60.0;
  return {pass, std::to_string(checked) + " parameters (" + std::to_string(live) +
                    " with non-zero gradient), max relative error " + num(worst, 3) + " at " + worst_name + ", " +
                    num(secs, 3) + " s"};
}

// 3 ----------------------------------------------------------------------

Outcome count_conservation() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> um(0, 50), ublocks(16, 64);
  double worst_render = 0.0, worst_pool = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t w = 4 * static_cast<std::size_t>(ublocks(rng));
    const std::size_t h = 4 * static_cast<std::size_t>(ublocks(rng));
    const std::size_t m = static_cast<std::size_t>(um(rng));
    std::uniform_real_distribution<double> ux(0.0, double(w)), uy(0.0, double(h));
    HeadAnnotations ann{{}, w, h};
    for (std::size_t i = 0; i < m; ++i) ann.points.push_back({ux(rng), uy(rng)});
    const auto map = render_density_map(ann, KernelParams{});
    const double full = count_from_density(map);
    worst_render = std::max(worst_render, std::abs(full - double(m)) / std::max<double>(double(m), 1.0));
    const double pooled = count_from_density(downsample_sum(map, 4));
    worst_pool = std::max(worst_pool, full == 0.0 ? std::abs(pooled) : std::abs(pooled - full) / full);
  }
  return {worst_render < 1e-6 && worst_pool < 1e-6,
          "max |sum - M| / max(M,1) = " + num(worst_render, 3) + ", max pooled relative change " + num(worst_pool, 3)};
}

// 4 ----------------------------------------------------------------------

Outcome metric_values() {
  const double t[] = {10, 20}, e[] = {12, 16};
  const double a = mae(t, e), r = mse(t, e);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-100, 100);
  std::uniform_int_distribution<int> un(1, 50);
  std::size_t violations = 0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> tt(static_cast<std::size_t>(un(rng))), ee(tt.size());
    for (std::size_t k = 0; k < tt.size(); ++k) {
      tt[k] = u(rng);
      ee[k] = u(rng);
    }
    if (!(mae(tt, ee) <= mse(tt, ee) * (1.0 + 1e-12))) ++violations;
  }
  const bool pass = a == 3.0 && std::abs(r - std::sqrt(10.0)) < 1e-9 && violations == 0;
  return {pass, "mae " + num(a, 17) + ", mse " + num(r, 17) + ", mae > mse on " + std::to_string(violations) +
                    " of 1000 vectors"};
}

// 5 ----------------------------------------------------------------------

Outcome augmentation_contract() {
  Tensor<float> img({1, 100, 100});
  for (std::size_t y = 0; y < 100; ++y)
    for (std::size_t x = 0; x < 100; ++x) img.at(0, y, x) = static_cast<float>(y * 1000 + x);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  HeadAnnotations ann{{{50, 50}}, 100, 100};
  for (int i = 0; i < 40; ++i) ann.points.push_back({u(rng), u(rng)});
  const auto s = make_sample("a", img, ann, KernelParams{});
  const auto crops = augment_ninecrop(s, KernelParams{});

  bool sizes_ok = crops.size() == 18, inside = true;
  std::set<std::pair<std::size_t, std::size_t>> origins;
  auto check_inside = [&](const Sample& c) {
    for (const auto& p : c.annotations.points)
      inside &= p.x >= 0 && p.y >= 0 && p.x < double(c.image.dim(2)) && p.y < double(c.image.dim(1));
    inside &= c.annotations.count() <= s.annotations.count();
  };
  for (std::size_t i = 0; i < crops.size(); ++i) {
    sizes_ok &= crops[i].image.shape() == Shape{1, 90, 90};
    check_inside(crops[i]);
    if (i % 2 == 0) {
      const auto v = static_cast<std::size_t>(crops[i].image.at(0, 0, 0));
      origins.insert({v % 1000, v / 1000});
    }
  }
  std::set<std::pair<std::size_t, std::size_t>> want;
  for (std::size_t y : {0u, 5u, 10u})
    for (std::size_t x : {0u, 5u, 10u}) want.insert({x, y});

  auto big = make_sample("b", oracle::random_tensor<float>({1, 300, 300}, rng, 0, 1), {{{150, 150}}, 300, 300},
                         KernelParams{});
  auto crng = make_rng(5, "crops");
  const auto rc = augment_randomcrop(big, 36, 225, crng, KernelParams{});
  bool rc_ok = rc.size() == 72;
  for (const auto& c : rc) {
    rc_ok &= c.image.shape() == Shape{1, 224, 224} && c.target.width == 56 && c.target.height == 56;
    check_inside(c);
  }
  const bool pass = sizes_ok && origins == want && inside && rc_ok;
  return {pass, std::to_string(crops.size()) + " nine-crop samples, " + std::to_string(origins.size()) +
                    " distinct origins, points inside: " + (inside ? "yes" : "no") + ", random-crop samples " +
                    std::to_string(rc.size())};
}

// 6 ----------------------------------------------------------------------

Outcome convergence() {
  const auto samples = synthetic_samples(20, 0);
  TrainConfig cfg;  // defaults: lr 1e-6, momentum 0.9, weight decay 5e-4, batch 1
  cfg.epochs = 10;
  cfg.max_iterations = 200;
  auto model = build_mscnn<float>(ModelSpec::mscnn(), cfg.init_std, derive_seed(cfg.seed, "init"));
  const auto start = std::chrono::steady_clock::now();
  const auto hist = train<float>(model, samples, cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  auto window = [&](std::size_t first) {
    double s = 0.0;
    for (std::size_t i = first; i < first + 20; ++i) s += hist[i].loss;
    return s / 20.0;
  };
  const double initial = window(0), final = window(hist.size() - 20);
  const double trained_mae = evaluate(model, samples, cfg).mae;
  const double zero_mae = evaluate(zero_model<float>(ModelSpec::mscnn()), samples, cfg).mae;
  double mean_count = 0.0;
  for (const auto& s : samples) mean_count += s.truth_count();
  mean_count /= double(samples.size());
  const bool pass = hist.size() == 200 && final <= 0.5 * initial && trained_mae <= 0.5 * zero_mae &&
                    std::abs(zero_mae - mean_count) < 1e-12;
  return {pass, "moving-average loss " + num(initial) + " -> " + num(final) + " (ratio " + num(final / initial, 3) +
                    ", need <= 0.5); MAE " + num(trained_mae) + " vs zero-model " + num(zero_mae) + " (ratio " +
                    num(trained_mae / zero_mae, 3) + ", need <= 0.5); " + num(secs, 3) + " s"};
}

// 7 ----------------------------------------------------------------------

nlohmann::ordered_json kfold_report_json;

Outcome kfold_orchestration() {
  const auto samples = synthetic_samples(50, 7);
  const auto folds = kfold_splits(samples.size(), 5, 7);
  std::vector<int> hits(samples.size(), 0);
  bool sizes_ok = folds.size() == 5;
  for (const auto& f : folds) {
    sizes_ok &= f.validation.size() == 10 && f.train.size() == 40;
    for (auto i : f.validation) ++hits[i];
  }
  const bool partition = std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; });

  TrainConfig cfg;
  cfg.max_iterations = 10;  // tiny budget: this criterion checks orchestration
  cfg.seed = 7;
  std::vector<Model<float>> models;
  for (const auto& f : folds) {
    auto m = build_mscnn<float>(ModelSpec::mscnn(), cfg.init_std, derive_seed(cfg.seed, "init"));
    const auto train_set = select(std::span<const Sample>(samples), std::span<const std::size_t>(f.train));
    train<float>(m, train_set, cfg);
    models.push_back(std::move(m));
  }
  const auto rep = kfold_evaluate<float>(models, folds, samples, cfg);
  std::set<std::string> ids;
  for (const auto& r : rep.per_image) ids.insert(r.id);
  kfold_report_json = to_json(rep);
  const bool pass = sizes_ok && partition && rep.per_image.size() == 50 && ids.size() == 50;
  return {pass, "validation sizes 10x5, partition: " + std::string(partition ? "yes" : "no") + ", pooled N " +
                    std::to_string(rep.per_image.size()) + ", pooled MAE " + num(rep.mae) + ", MSE " + num(rep.mse)};
}

// 8 ----------------------------------------------------------------------

Outcome non_reproducibility_statement() {
  auto j = kfold_report_json.empty() ? to_json(make_report({{"x", 1, 1}}, 0)) : kfold_report_json;
  const auto& ref = j["published_reference"];
  const bool echoed =
      ref["shanghaitech_part_a"]["mae"] == 83.8 && ref["shanghaitech_part_a"]["mse"] == 127.4 &&
      ref["shanghaitech_part_b"]["mae"] == 17.7 && ref["shanghaitech_part_b"]["mse"] == 30.2 &&
      ref["ucf_cc_50"]["mae"] == 363.7 && ref["ucf_cc_50"]["mse"] == 468.4 && ref["params_millions"]["MSCNN"] == 2.9 &&
      ref["note"].get<std::string>().find("not reproduced") != std::string::npos;
  std::cout << "  note: published full-scale results (Part_A 83.8/127.4, Part_B 17.7/30.2, UCF_CC_50 363.7/468.4)\n"
               "        are NOT reproducible at desk scale; reports echo them as reference constants only.\n";
  return {echoed, "reports carry published_reference with all six MAE/MSE values and the 2.9M figure"};
}

// 9 ----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  const auto b = read_file_bytes(p);
  return {b.begin(), b.end()};
}

int sh(const std::string& cmd) { return std::system((cmd + " > /dev/null").c_str()); }

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "mscnn_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cli = MSCNN_CLI_PATH;
  const std::string data = (dir / "data").string();
  if (sh(cli + " synth --out " + data + " --count 20 --seed 9") != 0) return {false, "synth failed"};
  std::string outputs[2][2];
  for (int run = 0; run < 2; ++run) {
    const std::string ck = (dir / ("model" + std::to_string(run) + ".ckpt")).string();
    const std::string rp = (dir / ("report" + std::to_string(run) + ".json")).string();
    if (sh(cli + " train --data " + data + " --out " + ck + " --seed 9 --epochs 2 --max-iterations 40") != 0)
      return {false, "train failed"};
    if (sh(cli + " eval --data " + data + " --model " + ck + " --report " + rp) != 0) return {false, "eval failed"};
    outputs[run][0] = slurp(ck);
    outputs[run][1] = slurp(rp);
  }
  const bool same_ckpt = outputs[0][0] == outputs[1][0], same_report = outputs[0][1] == outputs[1][1];
  return {same_ckpt && same_report && !outputs[0][0].empty(),
          "checkpoint " + std::to_string(outputs[0][0].size()) + " bytes identical: " + (same_ckpt ? "yes" : "no") +
              ", report identical: " + (same_report ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "parameter audit", parameter_audit},
      {2, "gradient correctness", gradient_check},
      {3, "count conservation", count_conservation},
      {4, "metric unit values", metric_values},
      {5, "augmentation contract", augmentation_contract},
      {6, "desk-scale convergence", convergence},
      {7, "5-fold orchestration", kfold_orchestration},
      {8, "non-reproducibility statement", non_reproducibility_statement},
      {9, "determinism", determinism},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail
              << std::endl;
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}

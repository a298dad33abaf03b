// Acceptance gate: one PASS/FAIL line per criterion.
//
//   acceptance [--criterion N]... [--cache-dir DIR] [--data-dir DIR]
//
// Exit status is 0 when every selected criterion passes, 1 otherwise.
// MNIST-heavy criteria (6-9) cache their expensive intermediate results in
// the cache directory, keyed by every parameter that affects them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <stack>
#include <string>
#include <vector>

#include "invariance/annotation.hpp"
#include "invariance/attack.hpp"
#include "invariance/dataset_io.hpp"
#include "invariance/mlp.hpp"
#include "invariance/robust.hpp"
#include "invariance/spectral.hpp"
#include "invariance/synthetic.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace invariance;

namespace {

// Pinned tolerances and sizes -------------------------------------------------

constexpr std::uint64_t kSeed = 0;

// 1
constexpr std::size_t kC1Samples = 100000;
constexpr double kC1AccLo = 0.983, kC1AccHi = 0.993;
constexpr double kC1RobustEps = 0.99;
constexpr double kC1MaxSeconds = 10.0;
// 2
constexpr std::size_t kC2Samples = 100000;
constexpr double kC2Eps = 0.99;
// 3
constexpr std::size_t kC3Perturbations = 1000000;
constexpr double kC3Radius = 0.499;
// 4
constexpr std::size_t kC4Samples = 100000;
constexpr double kC4MaxAttackedAgreement = 0.05, kC4MinCleanAgreement = 0.95;
// 5
constexpr std::size_t kC5Samples = 10000;
// 6
constexpr std::size_t kC6Attacks = 100;
constexpr double kC6Eps = 0.4;
constexpr double kC6EqualityTol = 1e-12;  // |linf - eps| counted as equality
// 7, 8
constexpr std::size_t kL0Attacks = 100;
constexpr double kC7MedianLo = 15.0, kC7MedianHi = 45.0;
constexpr double kC7MaxSecondsPerExample = 300.0;
constexpr double kC8MinMeanReduction = 0.30;
// 9
const std::vector<double> kC9EpsTrain{0.0, 0.1, 0.2, 0.3};
constexpr std::size_t kC9TrainSize = 10000;
constexpr double kC9GalleryEps = 0.3;
constexpr std::size_t kC9GalleryCount = 100;
constexpr double kC9EpsEval = 0.3;
constexpr int kC9EvalSteps = 40;
constexpr int kC9AllowedInversions = 1;
// 10
constexpr std::size_t kC10GradCases = 100;
constexpr double kC10GradRelTol = 1e-4;
constexpr double kC10EigenResidualTol = 1e-8;
constexpr std::size_t kC10Masks = 50;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path cache;
  fs::path data;

  bool have_mnist() const {
    for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                          "t10k-labels-idx1-ubyte"})
      if (!fs::exists(data / f)) return false;
    return true;
  }
  Dataset train() const { return load_idx_dataset(data / "train-images-idx3-ubyte", data / "train-labels-idx1-ubyte"); }
  Dataset test() const { return load_idx_dataset(data / "t10k-images-idx3-ubyte", data / "t10k-labels-idx1-ubyte"); }
};

template <typename... A>
std::string str(const A&... a) {
  std::ostringstream os;
  os.precision(6);
  (os << ... << a);
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

// Synthetic ------------------------------------------------------------------

Outcome c1_overly_robust_accuracy(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  const synthetic::SyntheticParams p;
  const auto data = synthetic::sample_labeled(p, kC1Samples, kSeed);
  const auto f = synthetic::overly_robust_classifier(p.d);
  const auto clean = synthetic::evaluate_classifier("sign_x2", f, data, 0.0);
  const auto attacked = synthetic::evaluate_classifier("sign_x2", f, data, kC1RobustEps);
  const double secs = seconds_since(t0);
  const bool in_window = clean.clean_acc >= kC1AccLo && clean.clean_acc <= kC1AccHi;
  const bool robust_equal = attacked.robust_acc == clean.clean_acc;
  return {in_window && robust_equal && secs < kC1MaxSeconds,
          str("clean acc=", clean.clean_acc, " window [", kC1AccLo, ", ", kC1AccHi, "] (oracle agreement ",
              clean.clean_oracle, ", analytic x2 agreement ", synthetic::x2_agreement(p.sanitized_k()),
              "); robust acc@", kC1RobustEps, "=", attacked.robust_acc, (robust_equal ? " == clean" : " != clean"),
              "; ", secs, " s (< ", kC1MaxSeconds, ")")};
}

Outcome c2_invariance_break(const Context&) {
  const synthetic::SyntheticParams p;
  const auto data = synthetic::sample_labeled(p, kC2Samples, kSeed + 2);
  const auto f = synthetic::overly_robust_classifier(p.d);
  std::size_t success = 0, agree = 0;
  for (const auto& s : data) {
    std::vector<double> adv;
    try {
      adv = synthetic::invariance_attack_synthetic(f, s.x, kC2Eps);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NotFound) throw;
      agree += f.predict(s.x) == synthetic::oracle(s.x);
      continue;
    }
    const bool in_ball = synthetic::linf_vector_distance(adv, s.x) <= kC2Eps;
    const bool keeps_f = f.predict(adv) == f.predict(s.x);
    const bool wrong = f.predict(adv) != synthetic::oracle(adv);
    success += in_ball && keeps_f && wrong;
    agree += !wrong;
  }
  const double n = static_cast<double>(data.size());
  return {success == data.size() && agree == 0,
          str("success ", success, "/", data.size(), " (", success / n, "); oracle agreement on outputs ", agree / n)};
}

Outcome c3_oracle_robust(const Context&) {
  const synthetic::SyntheticParams p;
  const auto base = synthetic::sample_dstar(p.d, p.k, 1000, kSeed + 3);
  CounterRng rng(kSeed + 3, 0x6f72);
  std::size_t flips = 0;
  for (std::size_t i = 0; i < kC3Perturbations; ++i) {
    const auto& s = base[i % base.size()];
    auto x = s.x;
    // Alternate interior draws with ball corners, the hardest points.
    const bool corner = i % 2 == 1;
    for (auto& v : x) v += corner ? kC3Radius * rng.sign() : rng.uniform(-kC3Radius, kC3Radius);
    flips += synthetic::oracle(x) != synthetic::oracle(s.x);
  }
  return {flips == 0, str(flips, " oracle flips over ", kC3Perturbations, " perturbations with linf <= ", kC3Radius)};
}

Outcome c4_standard_sensitivity(const Context&) {
  const synthetic::SyntheticParams p;
  const auto data = synthetic::sample_labeled(p, kC4Samples, kSeed + 4);
  const auto f = synthetic::standard_classifier(p);
  const double eps = 4.0 / std::sqrt(static_cast<double>(p.d));
  const auto m = synthetic::evaluate_classifier("standard", f, data, eps);
  return {m.robust_oracle <= kC4MaxAttackedAgreement && m.clean_oracle >= kC4MinCleanAgreement,
          str("oracle agreement clean=", m.clean_oracle, " (>= ", kC4MinCleanAgreement, "), under attack at eps=", eps,
              ": ", m.robust_oracle, " (<= ", kC4MaxAttackedAgreement, "); first weight ",
              synthetic::kStandardFirstWeight)};
}

Outcome c5_aligned_1nn(const Context&) {
  const double a = synthetic::aligned_distance_1nn_demo(kC5Samples, kSeed + 5);
  return {a == 1.0, str("aligned-distance 1-NN oracle agreement ", a, " on ", kC5Samples, " fresh samples")};
}

// MNIST attacks ----------------------------------------------------------------

Outcome c6_linf_budget(const Context& ctx) {
  if (!ctx.have_mnist()) return {false, "MNIST IDX files not found in " + ctx.data.string()};
  const auto train = ctx.train();
  const auto test = ctx.test();
  const auto cfg = AttackConfig::linf(kC6Eps);
  const auto donors = prepare_donor_set(train, cfg);
  const auto grid = enumerate_grid(cfg.grid);
  std::size_t within = 0, needs_full = 0, full = 0, n = 0;
  double worst = 0.0;
  for (auto pos : seeded_sample(test.size(), kC6Attacks, kSeed)) {
    const auto& x = test[pos];
    const auto ex = linf_attack(x, donors, cfg, grid);
    const auto match = nearest_donor(x, donors, cfg, AlignNorm::L2, grid);
    double max_delta = 0.0;
    for (std::size_t i = 0; i < x.image.pixels.size(); ++i)
      max_delta = std::max(max_delta, std::abs(ex.adversarial.pixels[i] - x.image.pixels[i]));
    worst = std::max(worst, max_delta);
    within += max_delta <= kC6Eps;
    if (linf_distance(match.alignment.image, x.image) >= kC6Eps) {
      ++needs_full;
      full += std::abs(max_delta - kC6Eps) <= kC6EqualityTol;
    }
    if (++n % 10 == 0) progress(str("linf attacks ", n, "/", kC6Attacks));
  }
  return {within == n && full == needs_full && n == kC6Attacks,
          str(within, "/", n, " within the budget (max per-pixel change ", worst, "); ", full, "/", needs_full,
              " inputs with a donor >= eps away use the full budget")};
}

struct L0Record {
  std::size_t source_index = 0;
  std::size_t best_l0 = 0;
  std::size_t full_l0 = 0;
  bool admissible = false;
  double seconds = 0.0;
};

/// The l0 runs shared by criteria 7 and 8, cached as CSV.
std::vector<L0Record> l0_runs(const Context& ctx) {
  const auto cfg = AttackConfig::l0();
  const fs::path path = ctx.cache / str("l0_runs_n", kL0Attacks, "_seed", kSeed, "_eps", cfg.epsilon, ".csv");
  std::vector<L0Record> out;
  if (std::ifstream in(path); in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      L0Record r;
      char c;
      ls >> r.source_index >> c >> r.best_l0 >> c >> r.full_l0 >> c >> r.admissible >> c >> r.seconds;
      if (ls) out.push_back(r);
    }
    if (out.size() == kL0Attacks) return out;
    out.clear();
  }
  const auto train = ctx.train();
  const auto test = ctx.test();
  const auto donors = prepare_donor_set(train, cfg);
  const auto grid = enumerate_grid(cfg.grid);
  for (auto pos : seeded_sample(test.size(), kL0Attacks, kSeed)) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = l0_attack(test[pos], donors, cfg, grid);
    out.push_back({test[pos].index, r.example.l0_distortion, r.candidates.candidates.back().l0_distortion,
                   r.example.admissible, seconds_since(t0)});
    if (out.size() % 10 == 0) progress(str("l0 attacks ", out.size(), "/", kL0Attacks));
  }
  fs::create_directories(ctx.cache);
  std::ofstream csv(path);
  csv << "source_index,best_l0,full_l0,admissible,seconds\n";
  for (const auto& r : out)
    csv << r.source_index << ',' << r.best_l0 << ',' << r.full_l0 << ',' << r.admissible << ',' << r.seconds << '\n';
  return out;
}

Outcome c7_l0_median(const Context& ctx) {
  if (!ctx.have_mnist()) return {false, "MNIST IDX files not found in " + ctx.data.string()};
  const auto runs = l0_runs(ctx);
  std::vector<double> l0;
  double slowest = 0.0, mean = 0.0;
  std::size_t admissible = 0;
  for (const auto& r : runs) {
    l0.push_back(static_cast<double>(r.best_l0));
    mean += static_cast<double>(r.best_l0) / static_cast<double>(runs.size());
    slowest = std::max(slowest, r.seconds);
    admissible += r.admissible;
  }
  const double med = median(l0);
  return {runs.size() == kL0Attacks && med >= kC7MedianLo && med <= kC7MedianHi && slowest <= kC7MaxSecondsPerExample,
          str("median l0=", med, " window [", kC7MedianLo, ", ", kC7MedianHi, "], mean ", mean, ", admissible ",
              admissible, "/", runs.size(), "; slowest example ", slowest, " s (<= ", kC7MaxSecondsPerExample, ")")};
}

Outcome c8_cluster_gain(const Context& ctx) {
  if (!ctx.have_mnist()) return {false, "MNIST IDX files not found in " + ctx.data.string()};
  const auto runs = l0_runs(ctx);
  double reduction = 0.0;
  std::size_t reduced = 0;
  for (const auto& r : runs) {
    const double gain = 1.0 - static_cast<double>(r.best_l0) / static_cast<double>(r.full_l0);
    reduction += gain / static_cast<double>(runs.size());
    reduced += gain > 0.0;
  }
  return {reduction >= kC8MinMeanReduction,
          str("mean l0 reduction of best vs full-mask candidate ", reduction, " (>= ", kC8MinMeanReduction, "); ",
              reduced, "/", runs.size(), " inputs reduced at all")};
}

// Trade-off trend ----------------------------------------------------------------

std::vector<GalleryEntry> c9_gallery(const Context& ctx, const Dataset& train, const Dataset& test) {
  const auto cfg = AttackConfig::linf(kC9GalleryEps);
  const fs::path path = ctx.cache / str("gallery_linf_eps", kC9GalleryEps, "_n", kC9GalleryCount, "_seed", kSeed, ".json");
  if (std::ifstream in(path); in) {
    std::stringstream ss;
    ss << in.rdbuf();
    auto g = parse_gallery_json(ss.str());
    if (g.size() == kC9GalleryCount) return g;
  }
  const auto donors = prepare_donor_set(train, cfg);
  const auto grid = enumerate_grid(cfg.grid);
  std::vector<GalleryEntry> gallery;
  for (auto pos : seeded_sample(test.size(), kC9GalleryCount, kSeed)) {
    gallery.push_back(to_gallery_entry(linf_attack(test[pos], donors, cfg, grid)));
    if (gallery.size() % 10 == 0) progress(str("gallery ", gallery.size(), "/", kC9GalleryCount));
  }
  fs::create_directories(ctx.cache);
  std::ofstream(path) << write_gallery_json(gallery);
  return gallery;
}

Mlp<float> c9_model(const Context& ctx, const Dataset& train, double eps_train) {
  TrainConfig cfg;
  cfg.eps_train = eps_train;
  cfg.seed = kSeed;
  const fs::path path = ctx.cache / str("model_eps", eps_train, "_n", train.size(), "_ep", cfg.epochs, "_pgd",
                                        cfg.pgd_steps, "_seed", kSeed, ".ivat");
  if (fs::exists(path)) return load_checkpoint<float>(path);
  progress(str("training eps_train=", eps_train));
  auto model = adversarial_train(train, cfg, [&](const EpochStats& s) {
    progress(str("eps_train=", eps_train, " epoch ", s.epoch, " eps=", s.eps, " loss=", s.mean_loss));
  });
  fs::create_directories(ctx.cache);
  save_checkpoint(path, model);
  return model;
}

int inversions(const std::vector<double>& v, bool increasing) {
  int n = 0;
  for (std::size_t i = 1; i < v.size(); ++i) n += increasing ? v[i] < v[i - 1] : v[i] > v[i - 1];
  return n;
}

Outcome c9_tradeoff(const Context& ctx) {
  if (!ctx.have_mnist()) return {false, "MNIST IDX files not found in " + ctx.data.string()};
  const auto full_train = ctx.train();
  const auto train = full_train.size() > kC9TrainSize ? full_train.head(kC9TrainSize) : full_train;
  const auto test = ctx.test();
  const auto gallery = c9_gallery(ctx, full_train, test);
  std::vector<double> rates, errors;
  std::ostringstream rows;
  for (double e : kC9EpsTrain) {
    const auto model = c9_model(ctx, train, e);
    rates.push_back(invariance_rate(model, std::span<const GalleryEntry>(gallery)));
    errors.push_back(robust_error(model, test, kC9EpsEval, EvalAttack{kC9EvalSteps, kSeed}).robust_error);
    rows << " [eps_train " << e << ": invariance " << rates.back() << ", robust err " << errors.back() << "]";
  }
  const int inv_rate = inversions(rates, true), inv_err = inversions(errors, false);
  return {inv_rate <= kC9AllowedInversions && inv_err == 0,
          str("train n=", train.size(), ", gallery ", gallery.size(), " at eps ", kC9GalleryEps, ";", rows.str(),
              "; invariance inversions ", inv_rate, " (<= ", kC9AllowedInversions, "), robust-error inversions ",
              inv_err, " (== 0)")};
}

// Numerical substrate --------------------------------------------------------------

std::vector<double> plain_forward(const Mlp<double>& m, std::vector<double> a) {
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const auto& w = m.weight(l);
    std::vector<double> z(static_cast<std::size_t>(w.rows()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      double s = m.bias(l)(r);
      for (Eigen::Index c = 0; c < w.cols(); ++c) s += w(r, c) * a[static_cast<std::size_t>(c)];
      z[static_cast<std::size_t>(r)] = l + 1 < m.num_layers() ? std::max(0.0, s) : s;
    }
    a = std::move(z);
  }
  return a;
}

double plain_cross_entropy(const std::vector<double>& z, int y) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return std::log(s) + mx - z[static_cast<std::size_t>(y)];
}

/// Worst relative error of the analytic input gradient against central
/// differences of an independent forward pass.
double gradient_check() {
  CounterRng rng(kSeed + 10, 0x6764);
  double worst = 0.0;
  for (std::size_t t = 0; t < kC10GradCases; ++t) {
    const auto m = Mlp<double>::random({24, 16, 12, 10}, 1000 + t);
    std::vector<double> x(24);
    for (auto& v : x) v = rng.uniform();
    const int y = static_cast<int>(rng.below(10));
    const auto g = m.grad_input(x, y);
    const double h = 1e-6;
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fd = (plain_cross_entropy(plain_forward(m, xp), y) - plain_cross_entropy(plain_forward(m, xm), y)) /
                        (2.0 * h);
      diff += (fd - g[i]) * (fd - g[i]);
      scale += fd * fd;
    }
    worst = std::max(worst, std::sqrt(diff) / std::max(std::sqrt(scale), 1e-12));
  }
  return worst;
}

std::vector<int> flood_fill(const Mask& m) {
  std::vector<int> lab(m.cells.size(), -1);
  int next = 0;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      if (!m.at(r, c) || lab[static_cast<std::size_t>(r * m.width + c)] >= 0) continue;
      std::stack<std::pair<int, int>> st;
      st.push({r, c});
      lab[static_cast<std::size_t>(r * m.width + c)] = next;
      while (!st.empty()) {
        const auto [y, x] = st.top();
        st.pop();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= m.height || xx >= m.width || !m.at(yy, xx)) continue;
            auto& l = lab[static_cast<std::size_t>(yy * m.width + xx)];
            if (l < 0) {
              l = next;
              st.push({yy, xx});
            }
          }
      }
      ++next;
    }
  std::vector<int> out;
  for (std::size_t i = 0; i < m.cells.size(); ++i)
    if (m.cells[i]) out.push_back(lab[i]);
  return out;
}

bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return false;
  std::map<int, int> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (ab.emplace(a[i], b[i]).first->second != b[i]) return false;
    if (ba.emplace(b[i], a[i]).first->second != a[i]) return false;
  }
  return true;
}

// Separated rectangular blobs on a 28x28 raster; each keeps an L-shaped
// spine so it stays one component.
Mask blob_mask(CounterRng& rng, int blobs) {
  Mask m(28, 28), reserved(28, 28);
  int placed = 0;
  for (int attempt = 0; attempt < 400 && placed < blobs; ++attempt) {
    const int h = 1 + static_cast<int>(rng.below(5)), w = 1 + static_cast<int>(rng.below(5));
    const int r0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(28 - h)));
    const int c0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(28 - w)));
    bool clash = false;
    for (int r = r0; r < r0 + h && !clash; ++r)
      for (int c = c0; c < c0 + w; ++c) clash |= reserved.at(r, c);
    if (clash) continue;
    for (int r = std::max(0, r0 - 1); r < std::min(28, r0 + h + 1); ++r)
      for (int c = std::max(0, c0 - 1); c < std::min(28, c0 + w + 1); ++c) reserved.set(r, c);
    for (int r = r0; r < r0 + h; ++r)
      for (int c = c0; c < c0 + w; ++c)
        if (rng.uniform() < 0.85 || r == r0 || c == c0) m.set(r, c);
    ++placed;
  }
  return m;
}

bool idx_round_trip(const std::vector<std::uint8_t>& images, const std::vector<std::uint8_t>& labels) {
  const auto imgs = parse_idx_images(images);
  const auto labs = parse_idx_labels(labels);
  return write_idx_images(imgs) == images && write_idx_labels(labs) == labels;
}

Outcome c10_numerics(const Context& ctx) {
  const double grad_err = gradient_check();

  CounterRng rng(kSeed + 10, 0x626c);
  double worst_residual = 0.0;
  std::size_t cluster_ok = 0;
  for (std::size_t t = 0; t < kC10Masks; ++t) {
    const auto m = blob_mask(rng, 2 + static_cast<int>(t % 5));
    const auto g = build_pixel_graph(m);
    const auto spec = laplacian_spectrum(g, g.size());
    const Eigen::MatrixXd r = g.laplacian() * spec.vectors - spec.vectors * spec.values.asDiagonal();
    worst_residual = std::max(worst_residual, r.cwiseAbs().maxCoeff());
    const auto want = flood_fill(m);
    const int comps = *std::max_element(want.begin(), want.end()) + 1;
    const auto a = cluster(m, 6);
    cluster_ok += a.k == comps && same_partition(a.cluster_id, want);
  }

  // Synthetic IDX files plus the MNIST files when present.
  std::vector<GrayImage> imgs;
  std::vector<int> labs;
  for (int i = 0; i < 37; ++i) {
    GrayImage img(5, 7);
    for (auto& p : img.pixels) p = dequantize(static_cast<std::uint8_t>(rng.below(256)));
    imgs.push_back(img);
    labs.push_back(static_cast<int>(rng.below(10)));
  }
  bool idx_ok = idx_round_trip(write_idx_images(imgs), write_idx_labels(labs));
  std::string idx_note = "synthetic";
  if (ctx.have_mnist()) {
    for (const auto& [i, l] : {std::pair{"train-images-idx3-ubyte", "train-labels-idx1-ubyte"},
                               std::pair{"t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}})
      idx_ok = idx_ok && idx_round_trip(read_file(ctx.data / i), read_file(ctx.data / l));
    idx_note += " + MNIST";
  }

  return {grad_err <= kC10GradRelTol && worst_residual <= kC10EigenResidualTol && cluster_ok == kC10Masks && idx_ok,
          str("gradient rel err max ", grad_err, " over ", kC10GradCases, " cases (<= ", kC10GradRelTol,
              "); eigen residual max ", worst_residual, " (<= ", kC10EigenResidualTol, "); clusters == components on ",
              cluster_ok, "/", kC10Masks, " masks; IDX round trip (", idx_note, ") ", idx_ok ? "exact" : "MISMATCH")};
}

// Human-study substitute -------------------------------------------------------------

Outcome c11_success_fixtures(const Context&) {
  using annotation::ItemVotes;
  using annotation::Verdict;
  // Hand-scored: 7/10 for 5 (original 3) succeeds, 7/10 for the original
  // label is an original-label consensus, a 5/5 split has no consensus.
  const std::vector<ItemVotes> items{
      {"seven-for-five", 3, true, {5, 5, 5, 5, 5, 5, 5, 3, 3, 8}},
      {"seven-for-original", 3, true, {3, 3, 3, 3, 3, 3, 3, 5, 5, 8}},
      {"split", 3, true, {5, 5, 5, 5, 5, 8, 8, 8, 8, 8}},
  };
  const std::vector<Verdict> expected{Verdict::Successful, Verdict::OriginalConsensus, Verdict::NoConsensus};
  const std::vector<int> expected_top{5, 3, 5};
  const std::vector<double> expected_agreement{0.7, 0.7, 0.5};

  auto check = [&](const annotation::SuccessReport& rep) {
    bool ok = rep.items.size() == 3 && rep.successful == 1 && rep.original_consensus == 1 && rep.no_consensus == 1 &&
              rep.unreadable_consensus == 0 && rep.crafted == 3 && rep.success_rate == 1.0 / 3.0;
    for (std::size_t i = 0; ok && i < 3; ++i)
      ok = rep.items[i].verdict == expected[i] && rep.items[i].top_label == expected_top[i] &&
           rep.items[i].top_count == static_cast<std::size_t>(expected_agreement[i] * 10 + 0.5) &&
           rep.items[i].votes == 10;
    return ok;
  };
  const auto rep = annotation::compute_success(items);
  bool ok = check(rep);

  // Order of votes must not matter.
  auto shuffled = items;
  CounterRng rng(kSeed + 11);
  for (auto& it : shuffled) rng.shuffle(it.labels);
  ok = ok && check(annotation::compute_success(shuffled));

  std::string verdicts;
  for (const auto& v : rep.items) verdicts += " " + v.item + "=" + to_string(v.verdict);
  return {ok, str("verdicts", verdicts, "; success rate ", rep.success_rate, " (expected 1/3)")};
}

// Driver --------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(const Context&)> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {1, "synthetic overly robust classifier accuracy", c1_overly_robust_accuracy},
      {2, "synthetic invariance break of sign(x2)", c2_invariance_break},
      {3, "oracle robust below 1/2", c3_oracle_robust},
      {4, "standard classifier sensitivity", c4_standard_sensitivity},
      {5, "aligned-distance 1-NN", c5_aligned_1nn},
      {6, "linf attack budget", c6_linf_budget},
      {7, "l0 distortion median", c7_l0_median},
      {8, "cluster refinement gain", c8_cluster_gain},
      {9, "robustness / invariance trade-off trend", c9_tradeoff},
      {10, "numerical substrate", c10_numerics},
      {11, "compute_success vote fixtures", c11_success_fixtures},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> selected;
  std::string cache = "acceptance_cache";
  std::string data;
  app.add_option("--criterion", selected, "Criterion number(s) to run; all when omitted")->check(CLI::Range(1, 11));
  app.add_option("--cache-dir", cache, "Directory for cached attack runs and trained models");
  app.add_option("--data-dir", data, "Directory with the MNIST IDX files");
  CLI11_PARSE(app, argc, argv);

  Context ctx;
  ctx.cache = cache;
  if (!data.empty())
    ctx.data = data;
  else if (const char* env = std::getenv("INVARIANCE_DATA_DIR"))
    ctx.data = env;
  else
    ctx.data = INVARIANCE_DATA_DIR;

  bool all_pass = true;
  for (const auto& c : criteria()) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all_pass = all_pass && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " C" << c.id << " " << c.name << ": " << o.detail << " ["
              << str(seconds_since(t0)) << " s]" << std::endl;
  }
  return all_pass ? 0 : 1;
}

#pragma once

// Model-agnostic invariance attacks: nearest transformed donor of another
// class, then a norm-specific refinement (cluster subsets for l0,
// budget-clipped interpolation for l-infinity).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "invariance/dataset_io.hpp"
#include "invariance/error.hpp"
#include "invariance/image.hpp"
#include "invariance/rng.hpp"
#include "invariance/spectral.hpp"
#include "invariance/transforms.hpp"

namespace invariance {

enum class AttackNorm { L0, Linf };

inline std::string to_string(AttackNorm n) { return n == AttackNorm::L0 ? "l0" : "linf"; }

inline AttackNorm parse_attack_norm(const std::string& s) {
  if (s == "l0" || s == "L0") return AttackNorm::L0;
  if (s == "linf" || s == "Linf" || s == "LINF") return AttackNorm::Linf;
  fail(ErrorCode::InvalidParams, "unknown norm '" + s + "' (expected l0 or linf)");
}

/// Source label -> labels a donor may carry.
using TargetMap = std::map<int, std::vector<int>>;

/// A 1 is always matched with a 7 or a 4; other labels take any donor label.
inline TargetMap default_linf_target_map() { return {{1, {7, 4}}}; }

struct AttackConfig {
  AttackNorm norm = AttackNorm::L0;
  /// Pixel count for l0, intensity for l-infinity.
  double epsilon = 25.0;
  TransformGrid grid;
  double delta_threshold = 0.5;
  int max_clusters = 6;
  double canonicality_fraction = 0.2;
  std::size_t canonicality_k = 10;
  std::size_t plausibility_k = 5;
  std::optional<TargetMap> target_map;
  /// Donors kept (by untransformed l2 distance) before the grid search; 0 keeps all.
  std::size_t donor_shortlist = 20;
  unsigned threads = 1;

  void validate() const {
    if (!(epsilon >= 0.0)) fail(ErrorCode::InvalidParams, "epsilon must be non-negative");
    if (!(delta_threshold > 0.0 && delta_threshold < 1.0))
      fail(ErrorCode::InvalidParams, "delta_threshold must lie in (0,1)");
    if (max_clusters < 1 || max_clusters > 16) fail(ErrorCode::InvalidParams, "max_clusters must lie in [1,16]");
    if (plausibility_k < 1) fail(ErrorCode::InvalidParams, "plausibility_k must be at least 1");
  }

  static AttackConfig l0(double pixels = 25.0) {
    AttackConfig c;
    c.epsilon = pixels;
    return c;
  }
  static AttackConfig linf(double eps) {
    AttackConfig c;
    c.norm = AttackNorm::Linf;
    c.epsilon = eps;
    c.target_map = default_linf_target_map();
    return c;
  }

  /// Effective target map: l-infinity attacks fall back to the default pairs.
  std::optional<TargetMap> effective_targets() const {
    if (target_map) return target_map;
    if (norm == AttackNorm::Linf) return default_linf_target_map();
    return std::nullopt;
  }
};

inline bool donor_label_allowed(const std::optional<TargetMap>& targets, int source, int donor) {
  if (donor == source) return false;
  if (!targets) return true;
  const auto it = targets->find(source);
  if (it == targets->end()) return true;
  return std::find(it->second.begin(), it->second.end(), donor) != it->second.end();
}

/// Training set with the least canonical fraction of every category removed.
inline Dataset prepare_donor_set(const Dataset& train, const AttackConfig& cfg) {
  return filter_least_canonical(train, cfg.canonicality_fraction, cfg.canonicality_k);
}

struct DonorMatch {
  std::size_t position = 0;     ///< index into the donor dataset
  std::size_t donor_index = 0;  ///< the donor's original dataset index
  int donor_label = 0;
  AlignResult alignment;
};

/// argmin over allowed donors and grid transforms of dist(x, t(donor)).
/// Ties resolve by donor position, then grid order.
inline DonorMatch nearest_donor(const LabeledExample& x, const Dataset& donors, const AttackConfig& cfg,
                                AlignNorm norm, std::span<const TransformParams> grid) {
  const auto targets = cfg.effective_targets();
  std::vector<std::size_t> allowed;
  for (std::size_t i = 0; i < donors.size(); ++i)
    if (donor_label_allowed(targets, x.label, donors[i].label)) allowed.push_back(i);
  if (allowed.empty())
    fail(ErrorCode::NoDonorAvailable, "no donor with an admissible label for source label " + std::to_string(x.label));
  require_same_shape(x.image, donors[allowed.front()].image, ErrorCode::DimensionMismatch);

  // Closest-first visiting order so the bound tightens quickly.
  std::vector<double> plain(donors.size(), 0.0);
  for (auto i : allowed) plain[i] = l2_distance(x.image.pixels, donors[i].image.pixels);
  std::stable_sort(allowed.begin(), allowed.end(), [&](auto a, auto b) { return plain[a] < plain[b]; });
  if (cfg.donor_shortlist > 0 && allowed.size() > cfg.donor_shortlist) allowed.resize(cfg.donor_shortlist);

  DonorMatch best;
  best.alignment.distance = std::numeric_limits<double>::infinity();
  bool found = false;
  for (auto pos : allowed) {
    auto a = align(x.image, donors[pos].image, grid, norm, cfg.threads, best.alignment.distance);
    if (!std::isfinite(a.distance)) continue;
    const bool better = !found || a.distance < best.alignment.distance ||
                        (a.distance == best.alignment.distance &&
                         (pos < best.position || (pos == best.position && a.grid_index < best.alignment.grid_index)));
    if (better) {
      best = {pos, donors[pos].index, donors[pos].label, std::move(a)};
      found = true;
    }
  }
  if (!found) fail(ErrorCode::NoDonorAvailable, "alignment produced no finite distance");
  return best;
}

/// mask[i] = |x[i] - x_star[i]| > thresh (strict).
inline Mask threshold_delta(const GrayImage& x, const GrayImage& x_star, double thresh) {
  require_same_shape(x, x_star);
  Mask m(x.width, x.height);
  for (std::size_t i = 0; i < x.pixels.size(); ++i) m.cells[i] = std::abs(x.pixels[i] - x_star.pixels[i]) > thresh;
  return m;
}

struct Candidate {
  std::uint64_t subset = 0;  ///< bit c set = cluster c applied
  GrayImage image;
  std::size_t l0_distortion = 0;
  double donor_score = std::numeric_limits<double>::quiet_NaN();
  double source_score = std::numeric_limits<double>::quiet_NaN();
  bool admissible = false;
};

struct CandidateSet {
  int num_clusters = 0;
  std::vector<Candidate> candidates;  ///< indexed by subset bitmask
};

/// One candidate per subset of clusters: x with the selected clusters'
/// pixels taken from x_star. Subset 0 is x itself.
inline CandidateSet enumerate_candidates(const GrayImage& x, const GrayImage& x_star, const ClusterAssignment& clusters) {
  require_same_shape(x, x_star);
  if (clusters.k > 20) fail(ErrorCode::InvalidParams, "too many clusters to enumerate");
  CandidateSet set;
  set.num_clusters = clusters.k;
  const std::uint64_t total = std::uint64_t{1} << clusters.k;
  set.candidates.reserve(total);
  for (std::uint64_t subset = 0; subset < total; ++subset) {
    Candidate c;
    c.subset = subset;
    c.image = x;
    for (std::size_t i = 0; i < clusters.nodes.size(); ++i)
      if (subset >> clusters.cluster_id[i] & 1) {
        const auto [r, col] = clusters.nodes[i];
        c.image.at(r, col) = x_star.at(r, col);
      }
    c.l0_distortion = l0_quantized(c.image, x);
    set.candidates.push_back(std::move(c));
  }
  return set;
}

/// Class-conditional k-NN plausibility: minus the mean l2 distance to the k
/// nearest examples carrying `label`. Higher is more plausible; 0 is the max.
inline double plausibility_score(const GrayImage& candidate, int label, const Dataset& ds, std::size_t k = 5) {
  std::vector<double> dist;
  for (const auto& ex : ds)
    if (ex.label == label) dist.push_back(l2_distance(candidate.pixels, ex.image.pixels));
  if (dist.size() < k)
    fail(ErrorCode::TooFewExamples, "label " + std::to_string(label) + " has " + std::to_string(dist.size()) +
                                        " examples, need " + std::to_string(k));
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  return -std::accumulate(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), 0.0) / static_cast<double>(k);
}

struct InvarianceExample {
  LabeledExample source;
  GrayImage adversarial;
  AttackNorm norm = AttackNorm::L0;
  double epsilon = 0.0;
  std::size_t donor_index = 0;
  int donor_label = 0;
  TransformParams transform;
  double align_distance = 0.0;
  std::uint64_t cluster_subset = 0;
  int num_clusters = 0;
  std::size_t l0_distortion = 0;
  double linf_distortion = 0.0;
  /// Plausibility of the adversarial image under the donor label.
  double score = 0.0;
  /// Whether the score-admissibility rule held (always true for l-infinity).
  bool admissible = true;

  /// Recompute distortions from pixels.
  bool accounting_consistent() const {
    return l0_quantized(adversarial, source.image) == l0_distortion &&
           linf_distance(adversarial, source.image) == linf_distortion;
  }
};

struct L0AttackResult {
  InvarianceExample example;
  CandidateSet candidates;
};

/// l0 pipeline on an already filtered donor set (see prepare_donor_set):
/// align the nearest donor under the soft l0 distance, threshold the
/// difference, cluster it, enumerate cluster subsets, and return the
/// smallest non-empty candidate whose plausibility under the donor label
/// strictly exceeds its plausibility under the source label. If no
/// candidate qualifies, the full-mask candidate is returned with
/// admissible = false.
inline L0AttackResult l0_attack(const LabeledExample& x, const Dataset& donors, const AttackConfig& cfg,
                                std::span<const TransformParams> grid) {
  cfg.validate();
  const auto match = nearest_donor(x, donors, cfg, AlignNorm::L0Soft, grid);
  const auto& x_star = match.alignment.image;
  const auto mask = threshold_delta(x.image, x_star, cfg.delta_threshold);
  if (mask.count() == 0) fail(ErrorCode::EmptyMask, "aligned donor matches the source after thresholding");
  const auto clusters = cluster(mask, cfg.max_clusters);
  auto set = enumerate_candidates(x.image, x_star, clusters);

  const Candidate* best = nullptr;
  for (auto& c : set.candidates) {
    c.donor_score = plausibility_score(c.image, match.donor_label, donors, cfg.plausibility_k);
    c.source_score = plausibility_score(c.image, x.label, donors, cfg.plausibility_k);
    c.admissible = c.donor_score > c.source_score;
    if (c.subset != 0 && c.admissible && (!best || c.l0_distortion < best->l0_distortion)) best = &c;
  }
  const bool admissible = best != nullptr;
  if (!best) best = &set.candidates.back();

  InvarianceExample ex;
  ex.source = x;
  ex.adversarial = best->image;
  ex.norm = AttackNorm::L0;
  ex.epsilon = cfg.epsilon;
  ex.donor_index = match.donor_index;
  ex.donor_label = match.donor_label;
  ex.transform = match.alignment.params;
  ex.align_distance = match.alignment.distance;
  ex.cluster_subset = best->subset;
  ex.num_clusters = set.num_clusters;
  ex.l0_distortion = best->l0_distortion;
  ex.linf_distortion = linf_distance(ex.adversarial, x.image);
  ex.score = best->donor_score;
  ex.admissible = admissible;
  return {std::move(ex), std::move(set)};
}

inline L0AttackResult l0_attack(const LabeledExample& x, const Dataset& donors, const AttackConfig& cfg) {
  const auto grid = enumerate_grid(cfg.grid);
  return l0_attack(x, donors, cfg, grid);
}

/// Move x towards x_star by at most eps per pixel; |result - x| <= eps holds
/// exactly in floating point.
inline GrayImage interpolate_linf(const GrayImage& x, const GrayImage& x_star, double eps) {
  require_same_shape(x, x_star);
  GrayImage out = x;
  for (std::size_t i = 0; i < x.pixels.size(); ++i) {
    const double a = x.pixels[i], b = x_star.pixels[i];
    if (std::abs(b - a) <= eps) {
      out.pixels[i] = b;
      continue;
    }
    double v = std::clamp(b > a ? a + eps : a - eps, 0.0, 1.0);
    while (std::abs(v - a) > eps) v = std::nextafter(v, a);
    out.pixels[i] = v;
  }
  return out;
}

inline InvarianceExample linf_attack(const LabeledExample& x, const Dataset& donors, const AttackConfig& cfg,
                                     std::span<const TransformParams> grid) {
  cfg.validate();
  const auto match = nearest_donor(x, donors, cfg, AlignNorm::L2, grid);
  InvarianceExample ex;
  ex.source = x;
  ex.adversarial = interpolate_linf(x.image, match.alignment.image, cfg.epsilon);
  ex.norm = AttackNorm::Linf;
  ex.epsilon = cfg.epsilon;
  ex.donor_index = match.donor_index;
  ex.donor_label = match.donor_label;
  ex.transform = match.alignment.params;
  ex.align_distance = match.alignment.distance;
  ex.l0_distortion = l0_quantized(ex.adversarial, x.image);
  ex.linf_distortion = linf_distance(ex.adversarial, x.image);
  ex.score = plausibility_score(ex.adversarial, match.donor_label, donors, cfg.plausibility_k);
  return ex;
}

inline InvarianceExample linf_attack(const LabeledExample& x, const Dataset& donors, const AttackConfig& cfg) {
  const auto grid = enumerate_grid(cfg.grid);
  return linf_attack(x, donors, cfg, grid);
}

/// Nearest transformed donor followed by the refinement for cfg.norm.
inline InvarianceExample gen_inv(const LabeledExample& x, const Dataset& donors, const AttackConfig& cfg,
                                 std::span<const TransformParams> grid) {
  return cfg.norm == AttackNorm::L0 ? l0_attack(x, donors, cfg, grid).example : linf_attack(x, donors, cfg, grid);
}

inline InvarianceExample gen_inv(const LabeledExample& x, const Dataset& donors, const AttackConfig& cfg) {
  const auto grid = enumerate_grid(cfg.grid);
  return gen_inv(x, donors, cfg, grid);
}

/// Upper bound on the smallest class-changing perturbation of x, assuming
/// every transformed donor keeps its label: the minimum over donors and grid
/// transforms of the soft-l0 (l0) or l-infinity distance.
inline double epsilon_star_estimate(const LabeledExample& x, const Dataset& donors, const AttackConfig& cfg) {
  const auto grid = enumerate_grid(cfg.grid);
  const auto norm = cfg.norm == AttackNorm::L0 ? AlignNorm::L0Soft : AlignNorm::Linf;
  return nearest_donor(x, donors, cfg, norm, grid).alignment.distance;
}

inline GalleryEntry to_gallery_entry(const InvarianceExample& ex, std::string provenance = "automated") {
  GalleryEntry e;
  e.source_index = ex.source.index;
  e.label = ex.source.label;
  e.norm = to_string(ex.norm);
  e.epsilon = ex.epsilon;
  e.width = ex.adversarial.width;
  e.height = ex.adversarial.height;
  e.pixels = ex.adversarial.to_bytes();
  e.source_pixels = ex.source.image.to_bytes();
  e.donor_index = ex.donor_index;
  e.donor_label = ex.donor_label;
  if (ex.norm == AttackNorm::L0) e.cluster_subset = ex.cluster_subset;
  e.l0_distortion = ex.l0_distortion;
  e.linf_distortion = ex.linf_distortion;
  e.score = ex.score;
  e.provenance = std::move(provenance);
  return e;
}

inline std::string provenance_line(const InvarianceExample& ex, double wall_seconds) {
  std::ostringstream os;
  os << std::setprecision(6) << "source_index=" << ex.source.index << " donor_index=" << ex.donor_index
     << " donor_label=" << ex.donor_label << " rotation=" << ex.transform.rotation_deg
     << " shift_x=" << ex.transform.shift_x << " shift_y=" << ex.transform.shift_y
     << " shear=" << ex.transform.shear_frac << " scale=" << ex.transform.scale << " subset=0x" << std::hex
     << ex.cluster_subset << std::dec << " clusters=" << ex.num_clusters << " l0=" << ex.l0_distortion
     << " linf=" << ex.linf_distortion << " score=" << ex.score << " admissible=" << ex.admissible
     << " wall_s=" << wall_seconds;
  return os.str();
}

struct DistortionSummary {
  std::size_t count = 0;
  double mean_l0 = 0.0;
  double median_l0 = 0.0;
  double mean_linf = 0.0;
  /// Examples whose l-infinity distortion equals the budget.
  std::size_t full_budget = 0;
  std::size_t admissible = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline DistortionSummary summarize(std::span<const InvarianceExample> examples) {
  DistortionSummary s;
  s.count = examples.size();
  if (examples.empty()) return s;
  std::vector<double> l0;
  for (const auto& ex : examples) {
    l0.push_back(static_cast<double>(ex.l0_distortion));
    s.mean_linf += ex.linf_distortion;
    s.full_budget += std::abs(ex.linf_distortion - ex.epsilon) <= 1e-12;
    s.admissible += ex.admissible;
  }
  s.mean_l0 = std::accumulate(l0.begin(), l0.end(), 0.0) / static_cast<double>(l0.size());
  s.median_l0 = median(l0);
  s.mean_linf /= static_cast<double>(examples.size());
  return s;
}

}  // namespace invariance

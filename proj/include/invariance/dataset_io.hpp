#pragma once

// IDX container parsing/writing, labeled datasets, canonicality filtering
// and the JSON attack-gallery format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "invariance/error.hpp"
#include "invariance/image.hpp"

namespace invariance {

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace detail

inline std::vector<GrayImage> parse_idx_images(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) fail(ErrorCode::MalformedHeader, "image file shorter than its 16-byte header");
  const auto magic = detail::read_be32(bytes, 0);
  if (magic != kIdxImageMagic)
    fail(ErrorCode::MalformedHeader, "expected image magic 2051, got " + std::to_string(magic));
  const auto count = detail::read_be32(bytes, 4);
  const auto rows = detail::read_be32(bytes, 8);
  const auto cols = detail::read_be32(bytes, 12);
  const std::uint64_t per_image = std::uint64_t{rows} * cols;
  if (bytes.size() - 16 < per_image * count)
    fail(ErrorCode::TruncatedPayload, "expected " + std::to_string(per_image * count) + " pixel bytes, found " +
                                          std::to_string(bytes.size() - 16));
  std::vector<GrayImage> images;
  images.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    images.push_back(GrayImage::from_bytes(static_cast<int>(cols), static_cast<int>(rows),
                                           bytes.subspan(16 + i * per_image, per_image)));
  }
  return images;
}

inline std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) fail(ErrorCode::MalformedHeader, "label file shorter than its 8-byte header");
  const auto magic = detail::read_be32(bytes, 0);
  if (magic != kIdxLabelMagic)
    fail(ErrorCode::MalformedHeader, "expected label magic 2049, got " + std::to_string(magic));
  const auto count = detail::read_be32(bytes, 4);
  if (bytes.size() - 8 < count)
    fail(ErrorCode::TruncatedPayload,
         "expected " + std::to_string(count) + " labels, found " + std::to_string(bytes.size() - 8));
  return {bytes.begin() + 8, bytes.begin() + 8 + count};
}

inline std::vector<std::uint8_t> write_idx_images(std::span<const GrayImage> images) {
  const int w = images.empty() ? 0 : images.front().width;
  const int h = images.empty() ? 0 : images.front().height;
  std::vector<std::uint8_t> out;
  out.reserve(16 + images.size() * static_cast<std::size_t>(w) * h);
  detail::write_be32(out, kIdxImageMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(images.size()));
  detail::write_be32(out, static_cast<std::uint32_t>(h));
  detail::write_be32(out, static_cast<std::uint32_t>(w));
  for (const auto& img : images) {
    if (img.width != w || img.height != h) fail(ErrorCode::DimensionMismatch, "images of different sizes");
    const auto bytes = img.to_bytes();
    out.insert(out.end(), bytes.begin(), bytes.end());
  }
  return out;
}

inline std::vector<std::uint8_t> write_idx_labels(std::span<const int> labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  detail::write_be32(out, kIdxLabelMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) fail(ErrorCode::DimensionMismatch, "label does not fit in a byte");
    out.push_back(static_cast<std::uint8_t>(l));
  }
  return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

struct LabeledExample {
  GrayImage image;
  int label = 0;
  /// Position in the dataset this example was first loaded from.
  std::size_t index = 0;
};

/// Immutable, non-empty collection of same-shape labeled images.
class Dataset {
 public:
  Dataset(std::vector<LabeledExample> examples, int num_categories)
      : examples_(std::move(examples)), num_categories_(num_categories) {
    if (examples_.empty()) fail(ErrorCode::EmptyInput, "dataset is empty");
    for (const auto& ex : examples_) {
      if (!ex.image.same_shape(examples_.front().image))
        fail(ErrorCode::DimensionMismatch, "dataset images differ in shape");
      if (ex.label < 0 || ex.label >= num_categories_)
        fail(ErrorCode::InvalidParams, "label " + std::to_string(ex.label) + " outside category range");
    }
  }

  static Dataset from_parts(std::vector<GrayImage> images, std::span<const int> labels, int num_categories) {
    if (images.size() != labels.size()) fail(ErrorCode::DimensionMismatch, "image and label counts differ");
    std::vector<LabeledExample> ex;
    ex.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) ex.push_back({std::move(images[i]), labels[i], i});
    return Dataset(std::move(ex), num_categories);
  }

  std::size_t size() const { return examples_.size(); }
  int num_categories() const { return num_categories_; }
  int width() const { return examples_.front().image.width; }
  int height() const { return examples_.front().image.height; }
  const LabeledExample& operator[](std::size_t i) const { return examples_[i]; }
  const std::vector<LabeledExample>& examples() const { return examples_; }
  auto begin() const { return examples_.begin(); }
  auto end() const { return examples_.end(); }

  std::vector<std::size_t> indices_with_label(int label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < examples_.size(); ++i)
      if (examples_[i].label == label) out.push_back(i);
    return out;
  }

  std::vector<int> labels() const {
    std::vector<int> out(examples_.size());
    std::transform(examples_.begin(), examples_.end(), out.begin(), [](const auto& e) { return e.label; });
    return out;
  }

  /// First `n` examples (or all if fewer).
  Dataset head(std::size_t n) const {
    return Dataset({examples_.begin(), examples_.begin() + static_cast<std::ptrdiff_t>(std::min(n, size()))},
                   num_categories_);
  }

 private:
  std::vector<LabeledExample> examples_;
  int num_categories_;
};

inline Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                                int num_categories = 10) {
  auto imgs = parse_idx_images(read_file(images));
  const auto lbls = parse_idx_labels(read_file(labels));
  return Dataset::from_parts(std::move(imgs), lbls, num_categories);
}

/// Mean l2 distance from each example to its k nearest same-label
/// neighbours, self excluded. Lower means more canonical.
inline std::vector<double> canonicality_score(const Dataset& ds, std::size_t k = 10) {
  if (k < 1) fail(ErrorCode::InvalidParams, "k must be at least 1");
  std::vector<double> scores(ds.size(), 0.0);
  for (int c = 0; c < ds.num_categories(); ++c) {
    const auto members = ds.indices_with_label(c);
    if (members.empty()) continue;
    if (members.size() <= k)
      fail(ErrorCode::TooFewExamples, "category " + std::to_string(c) + " has " + std::to_string(members.size()) +
                                          " members, need more than k=" + std::to_string(k));
    const std::size_t n = members.size();
    std::vector<double> dist(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        dist[i * n + j] = dist[j * n + i] = l2_distance(ds[members[i]].image.pixels, ds[members[j]].image.pixels);
    std::vector<double> row;
    for (std::size_t i = 0; i < n; ++i) {
      row.clear();
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) row.push_back(dist[i * n + j]);
      std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), row.end());
      scores[members[i]] = std::accumulate(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), 0.0) /
                           static_cast<double>(k);
    }
  }
  return scores;
}

/// Drops ceil(fraction * n_c) highest-score members of every category and
/// keeps survivors in their original order. Equal scores are cut from the
/// highest dataset position first.
inline Dataset filter_least_canonical(const Dataset& ds, double fraction, std::size_t k = 10) {
  if (!(fraction >= 0.0 && fraction < 1.0)) fail(ErrorCode::InvalidParams, "fraction must lie in [0,1)");
  if (fraction == 0.0) return ds;
  const auto scores = canonicality_score(ds, k);
  std::vector<char> keep(ds.size(), 1);
  for (int c = 0; c < ds.num_categories(); ++c) {
    auto members = ds.indices_with_label(c);
    const auto drop = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(members.size()) - 1e-9));
    std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return a > b;
    });
    for (std::size_t i = 0; i < drop && i < members.size(); ++i) keep[members[i]] = 0;
  }
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (keep[i]) out.push_back(ds[i]);
  return Dataset(std::move(out), ds.num_categories());
}

/// One crafted image in an exported gallery. Pixel arrays hold quantized
/// bytes. Optional fields are omitted from JSON when unset.
struct GalleryEntry {
  std::size_t source_index = 0;
  int label = 0;
  std::string norm;
  double epsilon = 0.0;
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> source_pixels;
  std::optional<std::size_t> donor_index;
  std::optional<int> donor_label;
  std::optional<std::uint64_t> cluster_subset;
  std::optional<std::size_t> l0_distortion;
  std::optional<double> linf_distortion;
  std::optional<double> score;
  std::string provenance = "automated";

  GrayImage image() const { return GrayImage::from_bytes(width, height, pixels); }
  GrayImage source_image() const { return GrayImage::from_bytes(width, height, source_pixels); }
};

inline nlohmann::json to_json(const GalleryEntry& e) {
  nlohmann::json j = {{"source_index", e.source_index}, {"label", e.label},   {"norm", e.norm},
                      {"epsilon", e.epsilon},           {"width", e.width},   {"height", e.height},
                      {"pixels", e.pixels},             {"provenance", e.provenance}};
  if (!e.source_pixels.empty()) j["source_pixels"] = e.source_pixels;
  if (e.donor_index) j["donor_index"] = *e.donor_index;
  if (e.donor_label) j["donor_label"] = *e.donor_label;
  if (e.cluster_subset) j["cluster_subset"] = *e.cluster_subset;
  if (e.l0_distortion) j["l0_distortion"] = *e.l0_distortion;
  if (e.linf_distortion) j["linf_distortion"] = *e.linf_distortion;
  if (e.score) j["score"] = *e.score;
  return j;
}

inline GalleryEntry gallery_entry_from_json(const nlohmann::json& j) {
  GalleryEntry e;
  try {
    e.source_index = j.at("source_index").get<std::size_t>();
    e.label = j.at("label").get<int>();
    e.norm = j.at("norm").get<std::string>();
    e.epsilon = j.at("epsilon").get<double>();
    e.width = j.at("width").get<int>();
    e.height = j.at("height").get<int>();
    e.pixels = j.at("pixels").get<std::vector<std::uint8_t>>();
    if (j.contains("source_pixels")) e.source_pixels = j["source_pixels"].get<std::vector<std::uint8_t>>();
    if (j.contains("donor_index")) e.donor_index = j["donor_index"].get<std::size_t>();
    if (j.contains("donor_label")) e.donor_label = j["donor_label"].get<int>();
    if (j.contains("cluster_subset")) e.cluster_subset = j["cluster_subset"].get<std::uint64_t>();
    if (j.contains("l0_distortion")) e.l0_distortion = j["l0_distortion"].get<std::size_t>();
    if (j.contains("linf_distortion")) e.linf_distortion = j["linf_distortion"].get<double>();
    if (j.contains("score")) e.score = j["score"].get<double>();
    if (j.contains("provenance")) e.provenance = j["provenance"].get<std::string>();
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::MalformedHeader, std::string("bad gallery entry: ") + ex.what());
  }
  if (e.pixels.size() != static_cast<std::size_t>(e.width) * static_cast<std::size_t>(e.height))
    fail(ErrorCode::DimensionMismatch, "gallery pixel count does not match width*height");
  if (!e.source_pixels.empty() && e.source_pixels.size() != e.pixels.size())
    fail(ErrorCode::DimensionMismatch, "gallery source pixel count does not match width*height");
  return e;
}

inline std::string write_gallery_json(std::span<const GalleryEntry> entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries) arr.push_back(to_json(e));
  return arr.dump(1);
}

inline std::vector<GalleryEntry> parse_gallery_json(const std::string& text) {
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::MalformedHeader, std::string("gallery is not valid JSON: ") + ex.what());
  }
  if (!arr.is_array()) fail(ErrorCode::MalformedHeader, "gallery must be a JSON array");
  std::vector<GalleryEntry> out;
  for (const auto& j : arr) out.push_back(gallery_entry_from_json(j));
  return out;
}

}  // namespace invariance

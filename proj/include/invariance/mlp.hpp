#pragma once

// Fully-connected rectifier network with hand-written gradients.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "invariance/dataset_io.hpp"
#include "invariance/error.hpp"
#include "invariance/rng.hpp"

namespace invariance {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Index of the largest entry; the lowest index wins ties.
template <typename Derived>
int argmax(const Eigen::MatrixBase<Derived>& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = static_cast<int>(i);
  return best;
}

template <typename T>
class Mlp {
 public:
  Mlp() = default;

  /// Zero-initialised network with the given layer sizes (input first).
  explicit Mlp(std::vector<int> sizes) : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) fail(ErrorCode::InvalidParams, "need at least input and output sizes");
    for (int s : sizes_)
      if (s < 1) fail(ErrorCode::InvalidParams, "layer sizes must be positive");
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      w_.push_back(Mat<T>::Zero(sizes_[l + 1], sizes_[l]));
      b_.push_back(Vec<T>::Zero(sizes_[l + 1]));
    }
  }

  /// He-normal weights, zero biases.
  static Mlp random(std::vector<int> sizes, std::uint64_t seed) {
    Mlp m(std::move(sizes));
    CounterRng rng(seed, 0x6d6c70);
    for (auto& w : m.w_) {
      const double sd = std::sqrt(2.0 / static_cast<double>(w.cols()));
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(rng.normal(0.0, sd));
    }
    return m;
  }

  const std::vector<int>& sizes() const { return sizes_; }
  int input_size() const { return sizes_.front(); }
  int num_classes() const { return sizes_.back(); }
  std::size_t num_layers() const { return w_.size(); }
  Mat<T>& weight(std::size_t l) { return w_[l]; }
  const Mat<T>& weight(std::size_t l) const { return w_[l]; }
  Vec<T>& bias(std::size_t l) { return b_[l]; }
  const Vec<T>& bias(std::size_t l) const { return b_[l]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < w_.size(); ++l) n += w_[l].size() + b_[l].size();
    return n;
  }

  bool finite() const {
    for (std::size_t l = 0; l < w_.size(); ++l)
      if (!w_[l].allFinite() || !b_[l].allFinite()) return false;
    return true;
  }

  template <typename U>
  Mlp<U> cast() const {
    Mlp<U> out(sizes_);
    for (std::size_t l = 0; l < w_.size(); ++l) {
      out.weight(l) = w_[l].template cast<U>();
      out.bias(l) = b_[l].template cast<U>();
    }
    return out;
  }

  /// Logits for a batch stored column-wise (input_size x B).
  Mat<T> forward_batch(const Mat<T>& x) const {
    check_rows(x.rows());
    Mat<T> a = x;
    for (std::size_t l = 0; l < w_.size(); ++l) {
      Mat<T> z = w_[l] * a;
      z.colwise() += b_[l];
      a = l + 1 < w_.size() ? Mat<T>(z.cwiseMax(T(0))) : std::move(z);
    }
    return a;
  }

  Vec<T> forward(std::span<const double> x) const {
    check_rows(static_cast<Eigen::Index>(x.size()));
    Mat<T> col(x.size(), 1);
    for (std::size_t i = 0; i < x.size(); ++i) col(static_cast<Eigen::Index>(i), 0) = static_cast<T>(x[i]);
    return forward_batch(col).col(0);
  }

  int predict(std::span<const double> x) const { return argmax(forward(x)); }

  double loss(std::span<const double> x, int label) const {
    check_label(label);
    return cross_entropy(forward(x), label);
  }

  /// Gradients of the summed cross-entropy over a batch.
  struct Gradients {
    std::vector<Mat<T>> dw;
    std::vector<Vec<T>> db;
    Mat<T> dx;  ///< input_size x B
    Vec<T> losses;
  };

  /// Forward and backward pass. Parameter gradients are skipped when
  /// `params` is false (PGD only needs the input gradient).
  Gradients backward_batch(const Mat<T>& x, std::span<const int> labels, bool params = true) const {
    check_rows(x.rows());
    const Eigen::Index batch = x.cols();
    if (static_cast<Eigen::Index>(labels.size()) != batch)
      fail(ErrorCode::DimensionMismatch, "label count does not match batch size");
    for (int y : labels) check_label(y);

    std::vector<Mat<T>> acts{x};
    for (std::size_t l = 0; l < w_.size(); ++l) {
      Mat<T> z = w_[l] * acts.back();
      z.colwise() += b_[l];
      acts.push_back(l + 1 < w_.size() ? Mat<T>(z.cwiseMax(T(0))) : std::move(z));
    }

    Gradients g;
    g.losses.resize(batch);
    Mat<T> delta = acts.back();
    for (Eigen::Index j = 0; j < batch; ++j) {
      auto col = delta.col(j);
      const int y = labels[static_cast<std::size_t>(j)];
      const T mx = col.maxCoeff();
      const T shifted_y = col(y) - mx;
      col = (col.array() - mx).exp().matrix();
      const T sum = col.sum();
      g.losses(j) = std::log(sum) - shifted_y;
      col /= sum;
      col(y) -= T(1);
    }
    if (params) {
      g.dw.resize(w_.size());
      g.db.resize(w_.size());
    }
    for (std::size_t l = w_.size(); l-- > 0;) {
      if (params) {
        g.dw[l].noalias() = delta * acts[l].transpose();
        g.db[l] = delta.rowwise().sum();
      }
      Mat<T> back = w_[l].transpose() * delta;
      if (l > 0) back = back.cwiseProduct(Mat<T>((acts[l].array() > T(0)).template cast<T>()));
      delta = std::move(back);
    }
    g.dx = std::move(delta);
    return g;
  }

  /// d loss / d input for one example.
  std::vector<double> grad_input(std::span<const double> x, int label) const {
    check_rows(static_cast<Eigen::Index>(x.size()));
    Mat<T> col(x.size(), 1);
    for (std::size_t i = 0; i < x.size(); ++i) col(static_cast<Eigen::Index>(i), 0) = static_cast<T>(x[i]);
    const int labels[1] = {label};
    const auto g = backward_batch(col, labels, false);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(g.dx(static_cast<Eigen::Index>(i), 0));
    return out;
  }

  static double cross_entropy(const Vec<T>& logits, int label) {
    const T mx = logits.maxCoeff();
    const T lse = mx + std::log((logits.array() - mx).exp().sum());
    return static_cast<double>(lse - logits(label));
  }

 private:
  void check_rows(Eigen::Index rows) const {
    if (sizes_.empty() || rows != sizes_.front())
      fail(ErrorCode::DimensionMismatch, "input has " + std::to_string(rows) + " entries, model expects " +
                                             std::to_string(sizes_.empty() ? 0 : sizes_.front()));
  }
  void check_label(int label) const {
    if (label < 0 || label >= sizes_.back()) fail(ErrorCode::InvalidParams, "label out of range");
  }

  std::vector<int> sizes_;
  std::vector<Mat<T>> w_;
  std::vector<Vec<T>> b_;
};

template <typename T>
class Adam {
 public:
  explicit Adam(const Mlp<T>& model, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (std::size_t l = 0; l < model.num_layers(); ++l) {
      mw_.push_back(Mat<T>::Zero(model.weight(l).rows(), model.weight(l).cols()));
      vw_.push_back(mw_.back());
      mb_.push_back(Vec<T>::Zero(model.bias(l).size()));
      vb_.push_back(mb_.back());
    }
  }

  /// One update with gradients already averaged over the batch.
  void step(Mlp<T>& model, const std::vector<Mat<T>>& dw, const std::vector<Vec<T>>& db, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const T a = static_cast<T>(lr * std::sqrt(c2) / c1);
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_), e = static_cast<T>(eps_ * std::sqrt(c2));
    for (std::size_t l = 0; l < model.num_layers(); ++l) {
      update(model.weight(l), mw_[l], vw_[l], dw[l], a, b1, b2, e);
      update(model.bias(l), mb_[l], vb_[l], db[l], a, b1, b2, e);
    }
  }

  long steps() const { return t_; }

 private:
  template <typename P, typename G>
  static void update(P& p, P& m, P& v, const G& g, T a, T b1, T b2, T e) {
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseAbs2();
    p.array() -= a * m.array() / (v.array().sqrt() + e);
  }

  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Mat<T>> mw_, vw_;
  std::vector<Vec<T>> mb_, vb_;
};

/// Images of a dataset as columns, optionally a subset by position.
template <typename T>
Mat<T> to_columns(const Dataset& ds, std::span<const std::size_t> positions) {
  const auto dim = static_cast<Eigen::Index>(ds.width() * ds.height());
  Mat<T> x(dim, static_cast<Eigen::Index>(positions.size()));
  for (std::size_t j = 0; j < positions.size(); ++j) {
    const auto& px = ds[positions[j]].image.pixels;
    for (Eigen::Index i = 0; i < dim; ++i) x(i, static_cast<Eigen::Index>(j)) = static_cast<T>(px[static_cast<std::size_t>(i)]);
  }
  return x;
}

// Checkpoint: "IVAT", u16 version, u16 layer-size count, u32 sizes, then
// little-endian f32 parameters; per layer the row-major (out x in) weights
// followed by the bias.

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint32_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_le(std::span<const std::uint8_t> in, std::size_t off, int bytes) {
  std::uint32_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint32_t>(in[off + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const Mlp<T>& m) {
  std::vector<std::uint8_t> out{'I', 'V', 'A', 'T'};
  detail::put_le(out, kCheckpointVersion, 2);
  detail::put_le(out, static_cast<std::uint32_t>(m.sizes().size()), 2);
  for (int s : m.sizes()) detail::put_le(out, static_cast<std::uint32_t>(s), 4);
  auto put_float = [&](T v) { detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4); };
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const auto& w = m.weight(l);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) put_float(w(r, c));
    for (Eigen::Index r = 0; r < m.bias(l).size(); ++r) put_float(m.bias(l)(r));
  }
  return out;
}

template <typename T = float>
Mlp<T> parse_checkpoint(std::span<const std::uint8_t> in) {
  if (in.size() < 8 || std::memcmp(in.data(), "IVAT", 4) != 0)
    fail(ErrorCode::MalformedHeader, "not a checkpoint (bad magic)");
  const auto version = detail::get_le(in, 4, 2);
  if (version != kCheckpointVersion)
    fail(ErrorCode::MalformedHeader, "unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_le(in, 6, 2);
  if (count < 2) fail(ErrorCode::MalformedHeader, "checkpoint needs at least two layer sizes");
  if (in.size() < 8 + 4 * static_cast<std::size_t>(count)) fail(ErrorCode::TruncatedPayload, "layer sizes cut short");
  std::vector<int> sizes;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto s = detail::get_le(in, 8 + 4 * i, 4);
    if (s == 0 || s > (1u << 24)) fail(ErrorCode::MalformedHeader, "implausible layer size");
    sizes.push_back(static_cast<int>(s));
  }
  Mlp<T> m(sizes);
  std::size_t off = 8 + 4 * static_cast<std::size_t>(count);
  if (in.size() != off + 4 * m.parameter_count())
    fail(ErrorCode::TruncatedPayload, "parameter block has the wrong length");
  auto get_float = [&] {
    const float f = std::bit_cast<float>(detail::get_le(in, off, 4));
    off += 4;
    return static_cast<T>(f);
  };
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    auto& w = m.weight(l);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = get_float();
    for (Eigen::Index r = 0; r < m.bias(l).size(); ++r) m.bias(l)(r) = get_float();
  }
  return m;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Mlp<T>& m) {
  write_file(path, serialize_checkpoint(m));
}

template <typename T = float>
Mlp<T> load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint<T>(read_file(path));
}

}  // namespace invariance

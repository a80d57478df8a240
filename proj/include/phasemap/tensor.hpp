#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "phasemap/errors.hpp"
#include "phasemap/rng.hpp"

namespace phasemap {

using Shape = std::vector<std::size_t>;
using Labels = std::vector<std::string>;
using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive");
    n *= e;
  }
  return n;
}

/// Dense real tensor with a fixed row-major linearization and optional
/// per-index labels. Values are immutable in spirit: every operation below
/// returns a fresh tensor.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw DimensionError("data length does not match shape");
  }

  Tensor(Shape shape, std::vector<double> data, Labels labels)
      : Tensor(std::move(shape), std::move(data)) {
    set_labels(std::move(labels));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  static Tensor random_uniform(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = rng.uniform_pm1();
    return t;
  }

  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t i) const { return shape_.at(i); }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  double at(std::size_t flat) const { return data_.at(flat); }
  double& at(std::size_t flat) { return data_.at(flat); }

  double operator()(std::initializer_list<std::size_t> idx) const {
    return data_[flat_index(idx)];
  }
  double& operator()(std::initializer_list<std::size_t> idx) {
    return data_[flat_index(idx)];
  }

  const Labels& labels() const { return labels_; }
  bool has_labels() const { return !labels_.empty(); }

  void set_labels(Labels labels) {
    if (labels.empty()) {
      labels_.clear();
      return;
    }
    if (labels.size() != shape_.size())
      throw ArgumentError("label count does not match tensor rank");
    for (std::size_t i = 0; i < labels.size(); ++i)
      for (std::size_t j = i + 1; j < labels.size(); ++j)
        if (labels[i] == labels[j]) throw ArgumentError("duplicate index label: " + labels[i]);
    labels_ = std::move(labels);
  }

  Tensor with_labels(Labels labels) const {
    Tensor t = *this;
    t.set_labels(std::move(labels));
    return t;
  }

  std::size_t label_position(const std::string& name) const {
    for (std::size_t i = 0; i < labels_.size(); ++i)
      if (labels_[i] == name) return i;
    throw ArgumentError("no index labeled '" + name + "'");
  }

  Tensor renamed(const std::string& from, const std::string& to) const {
    Tensor t = *this;
    t.labels_.at(t.label_position(from)) = to;
    t.set_labels(std::move(t.labels_));  // re-validate uniqueness
    return t;
  }

  double norm() const {
    double s = 0.0;
    for (double x : data_) s += x * x;
    return std::sqrt(s);
  }

  double max_abs() const {
    double m = 0.0;
    for (double x : data_) m = std::max(m, std::abs(x));
    return m;
  }

  Tensor scaled(double factor) const {
    Tensor t = *this;
    for (double& x : t.data_) x *= factor;
    return t;
  }

  void scale_inplace(double factor) {
    for (double& x : data_) x *= factor;
  }

  /// Row-major strides.
  std::vector<std::size_t> strides() const {
    std::vector<std::size_t> s(shape_.size(), 1);
    for (std::size_t i = shape_.size(); i-- > 1;) s[i - 1] = s[i] * shape_[i];
    return s;
  }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw DimensionError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t k = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[k]) throw DimensionError("index out of range");
      flat = flat * shape_[k] + i;
      ++k;
    }
    return flat;
  }

  Shape shape_;
  std::vector<double> data_;
  Labels labels_;
};

// ---------------------------------------------------------------------------
// permute / reshape
// ---------------------------------------------------------------------------

/// numpy-style transpose: result index k runs over a's index order[k];
/// out[j0,...,jr] = a[m] with m[order[k]] = jk.
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const std::size_t r = a.rank();
  if (order.size() != r) throw ArgumentError("permutation length mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t p : order) {
    if (p >= r || seen[p]) throw ArgumentError("invalid permutation");
    seen[p] = true;
  }

  bool ident = true;
  for (std::size_t k = 0; k < r; ++k) ident = ident && order[k] == k;
  if (ident) return a;

  Shape new_shape(r);
  for (std::size_t k = 0; k < r; ++k) new_shape[k] = a.extent(order[k]);

  Tensor out(new_shape);
  const auto astrides = a.strides();
  std::vector<std::size_t> stride(r);  // input stride walked by output axis k
  for (std::size_t k = 0; k < r; ++k) stride[k] = astrides[order[k]];

  const double* src = a.data().data();
  double* dst = out.data().data();
  const std::size_t inner_n = new_shape[r - 1];
  const std::size_t inner_stride = stride[r - 1];
  std::vector<std::size_t> counter(r, 0);
  std::size_t src_off = 0;
  const std::size_t total = out.size();
  for (std::size_t written = 0; written < total; written += inner_n) {
    const double* s = src + src_off;
    for (std::size_t i = 0; i < inner_n; ++i) dst[written + i] = s[i * inner_stride];
    // odometer over the outer axes
    for (std::size_t k = r - 1; k-- > 0;) {
      src_off += stride[k];
      if (++counter[k] < new_shape[k]) break;
      src_off -= stride[k] * new_shape[k];
      counter[k] = 0;
    }
  }

  if (a.has_labels()) {
    Labels lab(r);
    for (std::size_t k = 0; k < r; ++k) lab[k] = a.labels()[order[k]];
    out.set_labels(std::move(lab));
  }
  return out;
}

/// Reinterpret the same row-major data under a new shape. Labels are dropped.
inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_size(new_shape) != a.size()) throw DimensionError("reshape size mismatch");
  return Tensor(std::move(new_shape), a.data());
}

inline Tensor reshape(const Tensor& a, Shape new_shape, Labels labels) {
  Tensor t = reshape(a, std::move(new_shape));
  t.set_labels(std::move(labels));
  return t;
}

// ---------------------------------------------------------------------------
// contraction
// ---------------------------------------------------------------------------

using IndexPairs = std::vector<std::pair<std::size_t, std::size_t>>;

/// Pairwise contraction over the given (index-of-a, index-of-b) pairs.
/// Result indices are a's unpaired indices followed by b's unpaired indices,
/// both in their original order.
inline Tensor contract(const Tensor& a, const Tensor& b, const IndexPairs& pairs) {
  const std::size_t ra = a.rank();
  const std::size_t rb = b.rank();
  std::vector<bool> a_used(ra, false), b_used(rb, false);
  for (const auto& [ia, ib] : pairs) {
    if (ia >= ra || ib >= rb) throw ArgumentError("contraction index out of range");
    if (a_used[ia] || b_used[ib]) throw ArgumentError("index contracted twice");
    if (a.extent(ia) != b.extent(ib))
      throw DimensionError("contracted extents differ: " + std::to_string(a.extent(ia)) +
                           " vs " + std::to_string(b.extent(ib)));
    a_used[ia] = true;
    b_used[ib] = true;
  }

  std::vector<std::size_t> a_order, b_order;
  Shape out_shape;
  Labels out_labels;
  const bool labeled = a.has_labels() && b.has_labels();
  for (std::size_t i = 0; i < ra; ++i)
    if (!a_used[i]) {
      a_order.push_back(i);
      out_shape.push_back(a.extent(i));
      if (labeled) out_labels.push_back(a.labels()[i]);
    }
  std::size_t m = 1;
  for (std::size_t e : out_shape) m *= e;
  for (const auto& [ia, ib] : pairs) {
    (void)ib;
    a_order.push_back(ia);
  }
  std::size_t k = 1;
  for (const auto& [ia, ib] : pairs) {
    (void)ib;
    k *= a.extent(ia);
  }
  for (const auto& [ia, ib] : pairs) {
    (void)ia;
    b_order.push_back(ib);
  }
  std::size_t n = 1;
  for (std::size_t i = 0; i < rb; ++i)
    if (!b_used[i]) {
      b_order.push_back(i);
      out_shape.push_back(b.extent(i));
      n *= b.extent(i);
      if (labeled) out_labels.push_back(b.labels()[i]);
    }

  const Tensor ap = permute(a, a_order);
  const Tensor bp = permute(b, b_order);

  Tensor out(out_shape);
  Eigen::Map<const MatrixRM> ma(ap.data().data(), static_cast<Eigen::Index>(m),
                                static_cast<Eigen::Index>(k));
  Eigen::Map<const MatrixRM> mb(bp.data().data(), static_cast<Eigen::Index>(k),
                                static_cast<Eigen::Index>(n));
  Eigen::Map<MatrixRM> mc(out.data().data(), static_cast<Eigen::Index>(m),
                          static_cast<Eigen::Index>(n));
  mc.noalias() = ma * mb;

  if (labeled) {
    bool dup = false;
    for (std::size_t i = 0; i < out_labels.size() && !dup; ++i)
      for (std::size_t j = i + 1; j < out_labels.size(); ++j)
        if (out_labels[i] == out_labels[j]) {
          dup = true;
          break;
        }
    if (!dup) out.set_labels(std::move(out_labels));
  }
  return out;
}

using LabelPairs = std::vector<std::pair<std::string, std::string>>;

inline Tensor contract(const Tensor& a, const Tensor& b, const LabelPairs& label_pairs) {
  IndexPairs pairs;
  pairs.reserve(label_pairs.size());
  for (const auto& [la, lb] : label_pairs)
    pairs.emplace_back(a.label_position(la), b.label_position(lb));
  return contract(a, b, pairs);
}

// ---------------------------------------------------------------------------
// matrix views by label (used heavily by the environment contraction code)
// ---------------------------------------------------------------------------

struct MatrixView {
  Eigen::MatrixXd m;
  Shape row_shape, col_shape;
  Labels row_labels, col_labels;
};

/// Permute the tensor so that `rows` come first (in the given order) and
/// `cols` after, then expose it as a rows-by-cols matrix.
inline MatrixView to_matrix(const Tensor& t, const Labels& rows, const Labels& cols) {
  if (rows.size() + cols.size() != t.rank())
    throw ArgumentError("row/col labels must cover all indices");
  std::vector<std::size_t> order;
  MatrixView view;
  for (const auto& l : rows) {
    order.push_back(t.label_position(l));
    view.row_shape.push_back(t.extent(order.back()));
  }
  for (const auto& l : cols) {
    order.push_back(t.label_position(l));
    view.col_shape.push_back(t.extent(order.back()));
  }
  view.row_labels = rows;
  view.col_labels = cols;
  const Tensor p = permute(t, order);
  const std::size_t m = shape_size(view.row_shape);
  const std::size_t n = shape_size(view.col_shape);
  view.m = Eigen::Map<const MatrixRM>(p.data().data(), static_cast<Eigen::Index>(m),
                                      static_cast<Eigen::Index>(n));
  return view;
}

inline Tensor from_matrix(const Eigen::MatrixXd& m, Shape row_shape, Labels row_labels,
                          Shape col_shape, Labels col_labels) {
  Shape shape = row_shape;
  shape.insert(shape.end(), col_shape.begin(), col_shape.end());
  Labels labels = row_labels;
  labels.insert(labels.end(), col_labels.begin(), col_labels.end());
  MatrixRM rm = m;
  std::vector<double> data(rm.data(), rm.data() + rm.size());
  Tensor t(std::move(shape), std::move(data));
  t.set_labels(std::move(labels));
  return t;
}

// ---------------------------------------------------------------------------
// truncated SVD
// ---------------------------------------------------------------------------

struct SvdResult {
  Tensor u;               ///< left factor, shape (row extents..., kept)
  std::vector<double> s;  ///< singular values, descending, >= 0
  Tensor v;               ///< right factor, shape (kept, col extents...); a = u . diag(s) . v
  double truncation_error = 0.0;  ///< sqrt(sum of squares of discarded values) / ||a||
};

/// SVD of `a` split into (row_indices | remaining indices), keeping at most
/// max_rank values and discarding values below cutoff * s[0]. At least one
/// value is always kept.
inline SvdResult svd_truncated(const Tensor& a, const std::vector<std::size_t>& row_indices,
                               std::size_t max_rank, double cutoff) {
  if (max_rank < 1) throw ArgumentError("max_rank must be >= 1");
  if (cutoff < 0.0) throw ArgumentError("cutoff must be >= 0");
  const std::size_t r = a.rank();
  std::vector<bool> used(r, false);
  for (std::size_t i : row_indices) {
    if (i >= r || used[i]) throw ArgumentError("invalid split");
    used[i] = true;
  }
  std::vector<std::size_t> order(row_indices);
  Shape row_shape, col_shape;
  for (std::size_t i : row_indices) row_shape.push_back(a.extent(i));
  for (std::size_t i = 0; i < r; ++i)
    if (!used[i]) {
      order.push_back(i);
      col_shape.push_back(a.extent(i));
    }
  const Tensor p = permute(a, order);
  const std::size_t m = shape_size(row_shape);
  const std::size_t n = shape_size(col_shape);
  Eigen::MatrixXd mat =
      Eigen::Map<const MatrixRM>(p.data().data(), static_cast<Eigen::Index>(m),
                                 static_cast<Eigen::Index>(n));

  Eigen::BDCSVD<Eigen::MatrixXd> svd(mat, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw DecompositionError("SVD did not converge");

  const auto& sv = svd.singularValues();
  const std::size_t full = static_cast<std::size_t>(sv.size());
  double total_sq = 0.0;
  for (std::size_t i = 0; i < full; ++i) total_sq += sv[static_cast<Eigen::Index>(i)] * sv[static_cast<Eigen::Index>(i)];

  std::size_t above = 0;
  // values below 1e-14 * s0 are numerical zeros regardless of cutoff
  const double threshold = std::max(cutoff, 1e-14) * (full > 0 ? sv[0] : 0.0);
  for (std::size_t i = 0; i < full; ++i)
    if (sv[static_cast<Eigen::Index>(i)] > threshold) ++above;
  std::size_t keep = std::min(max_rank, above);
  keep = std::max<std::size_t>(keep, 1);
  keep = std::min(keep, full);

  double disc_sq = 0.0;
  for (std::size_t i = keep; i < full; ++i) disc_sq += sv[static_cast<Eigen::Index>(i)] * sv[static_cast<Eigen::Index>(i)];

  SvdResult res;
  res.s.assign(sv.data(), sv.data() + keep);
  res.truncation_error = total_sq > 0.0 ? std::sqrt(disc_sq / total_sq) : 0.0;

  Shape u_shape = row_shape;
  u_shape.push_back(keep);
  MatrixRM u_rm = svd.matrixU().leftCols(static_cast<Eigen::Index>(keep));
  res.u = Tensor(std::move(u_shape), std::vector<double>(u_rm.data(), u_rm.data() + u_rm.size()));

  Shape v_shape;
  v_shape.push_back(keep);
  v_shape.insert(v_shape.end(), col_shape.begin(), col_shape.end());
  MatrixRM v_rm = svd.matrixV().leftCols(static_cast<Eigen::Index>(keep)).transpose();
  res.v = Tensor(std::move(v_shape), std::vector<double>(v_rm.data(), v_rm.data() + v_rm.size()));
  return res;
}

// ---------------------------------------------------------------------------
// Hermitian (real symmetric) matrix exponential
// ---------------------------------------------------------------------------

/// exp(scale * h) for a symmetric matrix h, via eigendecomposition.
inline Tensor expm_hermitian(const Tensor& h, double scale) {
  if (h.rank() != 2 || h.extent(0) != h.extent(1))
    throw ArgumentError("expm_hermitian expects a square matrix");
  const std::size_t n = h.extent(0);
  Eigen::Map<const MatrixRM> m(h.data().data(), static_cast<Eigen::Index>(n),
                               static_cast<Eigen::Index>(n));
  const double tol = 1e-10 * std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > tol)
    throw ArgumentError("matrix is not symmetric");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw DecompositionError("eigendecomposition failed");
  Eigen::VectorXd w = es.eigenvalues();
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = std::exp(scale * w[i]);
  MatrixRM out = es.eigenvectors() * w.asDiagonal() * es.eigenvectors().transpose();
  // exact symmetry regardless of rounding in the triple product
  MatrixRM sym = 0.5 * (out + MatrixRM(out.transpose()));
  return Tensor({n, n}, std::vector<double>(sym.data(), sym.data() + sym.size()));
}

}  // namespace phasemap

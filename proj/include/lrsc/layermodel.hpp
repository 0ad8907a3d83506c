#pragma once

// Layer tensors, their matrix view, depth chunking and cross-layer grouping.
//
// Tensor layout: conv filter banks are (k_h, k_w, depth, filters) and fully
// connected layers (outputs, inputs), both stored last-dimension-fastest.
// A conv layer flattens to an (filters x k*k*depth) matrix whose row i is
// filter i unrolled depth-major, then kernel row, then kernel column. Depth
// chunking with chunk depth g keeps that order, so chunk c of filter i is the
// contiguous column slice [c*k*k*g, (c+1)*k*k*g) and lands on output row
// i*(depth/g) + c.

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "lrsc/decomposition.hpp"
#include "lrsc/error.hpp"
#include "lrsc/matrixcore.hpp"

namespace lrsc {

enum class LayerKind { conv, fully_connected };

struct LayerShape {
  LayerKind kind = LayerKind::fully_connected;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t depth = 0;    // input channels (conv) or input width p (fc)
  std::size_t outputs = 0;  // filters (conv) or output rows n (fc)

  static LayerShape conv(std::size_t kh, std::size_t kw, std::size_t depth, std::size_t filters) {
    return {LayerKind::conv, kh, kw, depth, filters};
  }
  static LayerShape fully_connected(std::size_t n, std::size_t p) { return {LayerKind::fully_connected, 1, 1, p, n}; }

  std::vector<std::size_t> dims() const {
    if (kind == LayerKind::conv) return {kernel_h, kernel_w, depth, outputs};
    return {outputs, depth};
  }
  std::size_t element_count() const { return kernel_h * kernel_w * depth * outputs; }
  std::size_t matrix_cols() const { return kernel_h * kernel_w * depth; }

  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

struct LayerTensor {
  std::string name;
  LayerShape shape;
  std::size_t depth_index = 1;  // 1-based position in network order
  std::vector<double> data;     // last-dimension-fastest

  void validate() const {
    if (data.size() != shape.element_count())
      throw PreconditionError("layer '" + name + "': data length " + std::to_string(data.size()) +
                              " does not match shape (" + std::to_string(shape.element_count()) + ")");
    if (shape.element_count() == 0) throw PreconditionError("layer '" + name + "' is empty");
  }
};

struct LayerMatrix {
  std::string source;
  DenseMatrix w;                 // n_t x p
  std::size_t chunk_factor = 1;  // depth / g
  LayerShape original_shape;
  std::size_t depth_index = 1;
};

struct Calibration {
  DenseMatrix x;  // p x s
  DenseMatrix y;  // n_t x s
};

class LayerGroup {
public:
  LayerGroup() = default;
  LayerGroup(std::vector<LayerMatrix> members, std::size_t receptive_field, std::size_t chunk_depth)
      : members_(std::move(members)), receptive_field_(receptive_field), chunk_depth_(chunk_depth) {
    if (members_.empty()) throw GroupingError("a layer group needs at least one member");
    const auto p = members_.front().w.cols();
    for (const auto& m : members_)
      if (m.w.cols() != p)
        throw GroupingError("member '" + m.source + "' has " + std::to_string(m.w.cols()) + " columns, group uses " +
                            std::to_string(p));
  }

  const std::vector<LayerMatrix>& members() const noexcept { return members_; }
  std::size_t size() const noexcept { return members_.size(); }
  std::size_t cols() const { return static_cast<std::size_t>(members_.front().w.cols()); }
  std::size_t receptive_field() const noexcept { return receptive_field_; }
  std::size_t chunk_depth() const noexcept { return chunk_depth_; }
  bool chunked() const {
    return std::any_of(members_.begin(), members_.end(), [](const LayerMatrix& m) { return m.chunk_factor > 1; });
  }

  bool has_calibration() const noexcept { return !calibration_.empty(); }
  const std::vector<Calibration>& calibration() const noexcept { return calibration_; }

  // Calibration pairs for every member, or none. Chunked groups have no
  // defined per-chunk output map and refuse calibration.
  void set_calibration(std::vector<Calibration> cal) {
    if (cal.empty()) {
      calibration_.clear();
      return;
    }
    if (chunked()) throw GroupingError("calibration pairs are not defined for depth-chunked groups");
    if (cal.size() != members_.size()) throw GroupingError("calibration must be given for all members or none");
    for (std::size_t t = 0; t < cal.size(); ++t) {
      const auto& m = members_[t];
      const auto& c = cal[t];
      if (c.x.rows() != m.w.cols() || c.y.rows() != m.w.rows() || c.x.cols() != c.y.cols() || c.x.cols() < 1)
        throw GroupingError("calibration for '" + m.source + "' has inconsistent shape (X " +
                            std::to_string(c.x.rows()) + "x" + std::to_string(c.x.cols()) + ", Y " +
                            std::to_string(c.y.rows()) + "x" + std::to_string(c.y.cols()) + ")");
      require_finite(c.x, "calibration X of '" + m.source + "'");
      require_finite(c.y, "calibration Y of '" + m.source + "'");
    }
    calibration_ = std::move(cal);
  }

private:
  std::vector<LayerMatrix> members_;
  std::size_t receptive_field_ = 1;
  std::size_t chunk_depth_ = 0;
  std::vector<Calibration> calibration_;
};

namespace detail {

inline std::size_t conv_offset(const LayerShape& s, std::size_t h, std::size_t w, std::size_t c, std::size_t f) {
  return ((h * s.kernel_w + w) * s.depth + c) * s.outputs + f;
}

}  // namespace detail

inline LayerMatrix flatten_layer(const LayerTensor& t) {
  t.validate();
  const auto& s = t.shape;
  LayerMatrix out{t.name, {}, 1, s, t.depth_index};
  if (s.kind == LayerKind::fully_connected) {
    out.w = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        t.data.data(), static_cast<Eigen::Index>(s.outputs), static_cast<Eigen::Index>(s.depth));
    return out;
  }
  if (s.kernel_h != s.kernel_w)
    throw UnsupportedShapeError("layer '" + t.name + "' has a non-square " + std::to_string(s.kernel_h) + "x" +
                                std::to_string(s.kernel_w) + " kernel");
  const std::size_t k = s.kernel_h;
  out.w.resize(static_cast<Eigen::Index>(s.outputs), static_cast<Eigen::Index>(s.matrix_cols()));
  for (std::size_t f = 0; f < s.outputs; ++f)
    for (std::size_t c = 0; c < s.depth; ++c)
      for (std::size_t h = 0; h < k; ++h)
        for (std::size_t w = 0; w < k; ++w)
          out.w(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>((c * k + h) * k + w)) =
              t.data[detail::conv_offset(s, h, w, c, f)];
  return out;
}

// Splits each conv filter depth-wise into slices of depth g.
inline LayerMatrix chunk_layer(const LayerMatrix& m, std::size_t g) {
  const auto& s = m.original_shape;
  if (s.kind != LayerKind::conv) throw GroupingError("layer '" + m.source + "' is not a conv layer");
  if (m.chunk_factor != 1) throw GroupingError("layer '" + m.source + "' is already chunked");
  if (g == 0 || s.depth % g != 0)
    throw GroupingError("chunk depth " + std::to_string(g) + " does not divide depth " + std::to_string(s.depth) +
                        " of layer '" + m.source + "'");
  const std::size_t factor = s.depth / g;
  const auto width = static_cast<Eigen::Index>(s.kernel_h * s.kernel_w * g);
  LayerMatrix out{m.source, DenseMatrix(m.w.rows() * static_cast<Eigen::Index>(factor), width), factor, s,
                  m.depth_index};
  for (Eigen::Index f = 0; f < m.w.rows(); ++f)
    for (std::size_t c = 0; c < factor; ++c)
      out.w.row(f * static_cast<Eigen::Index>(factor) + static_cast<Eigen::Index>(c)) =
          m.w.row(f).segment(static_cast<Eigen::Index>(c) * width, width);
  return out;
}

// Inverse of flatten_layer (and chunk_layer) on a dense matrix view.
inline LayerTensor reconstruct_layer(const DenseMatrix& w, const LayerShape& shape, const std::string& name,
                                     std::size_t depth_index = 1) {
  const std::size_t cols = shape.matrix_cols();
  const auto wc = static_cast<std::size_t>(w.cols());
  const auto wr = static_cast<std::size_t>(w.rows());
  if (wc == 0 || cols % wc != 0 || (cols / wc) * shape.outputs != wr)
    throw ReconstructionError("matrix " + std::to_string(wr) + "x" + std::to_string(wc) +
                              " does not match layer '" + name + "'");
  const std::size_t factor = cols / wc;
  if (factor > 1 && (shape.kind != LayerKind::conv || shape.depth % factor != 0))
    throw ReconstructionError("matrix of layer '" + name + "' is not a valid depth chunking");

  LayerTensor out{name, shape, depth_index, std::vector<double>(shape.element_count())};
  if (shape.kind == LayerKind::fully_connected) {
    for (std::size_t r = 0; r < shape.outputs; ++r)
      for (std::size_t c = 0; c < shape.depth; ++c)
        out.data[r * shape.depth + c] = w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    return out;
  }
  if (shape.kernel_h != shape.kernel_w) throw UnsupportedShapeError("layer '" + name + "' has a non-square kernel");
  const std::size_t k = shape.kernel_h;
  for (std::size_t f = 0; f < shape.outputs; ++f)
    for (std::size_t c = 0; c < shape.depth; ++c)
      for (std::size_t h = 0; h < k; ++h)
        for (std::size_t x = 0; x < k; ++x) {
          const std::size_t flat = (c * k + h) * k + x;
          out.data[detail::conv_offset(shape, h, x, c, f)] =
              w(static_cast<Eigen::Index>(f * factor + flat / wc), static_cast<Eigen::Index>(flat % wc));
        }
  return out;
}

inline LayerTensor reconstruct_layer(const Decomposition& d, const LayerShape& shape, std::size_t depth_index = 1) {
  if (d.u.rows() != static_cast<Eigen::Index>(d.s.rows()) || d.v_individual.cols() != static_cast<Eigen::Index>(d.s.cols()))
    throw ReconstructionError("decomposition factors of '" + d.layer + "' have inconsistent shapes");
  return reconstruct_layer(d.dense(), shape, d.layer, depth_index);
}

// One layer as its own unchunked group.
inline LayerGroup singleton_group(const LayerTensor& t) {
  auto m = flatten_layer(t);
  const std::size_t k = t.shape.kind == LayerKind::conv ? t.shape.kernel_h : 1;
  const std::size_t g = t.shape.depth;
  return LayerGroup({std::move(m)}, k, g);
}

// Partitions a network into compression groups: fully connected layers and a
// depth-3 first conv layer stand alone; other conv layers are split by
// receptive field and taken in network order in runs of at most `max_group`,
// each run chunked to the gcd of its depths.
inline std::vector<LayerGroup> group_layers(const std::vector<LayerTensor>& layers, std::size_t max_group = 4) {
  if (layers.empty()) throw PreconditionError("group_layers needs at least one layer");
  if (max_group < 1) throw PreconditionError("max_group must be at least 1");

  std::vector<const LayerTensor*> order;
  for (const auto& l : layers) order.push_back(&l);
  std::stable_sort(order.begin(), order.end(),
                   [](const LayerTensor* a, const LayerTensor* b) { return a->depth_index < b->depth_index; });
  std::set<std::string> names;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (!names.insert(order[i]->name).second) throw GroupingError("duplicate layer name '" + order[i]->name + "'");
    if (i > 0 && order[i]->depth_index == order[i - 1]->depth_index)
      throw GroupingError("layers '" + order[i - 1]->name + "' and '" + order[i]->name + "' share depth index");
  }

  std::vector<LayerGroup> groups;
  std::map<std::size_t, std::vector<const LayerTensor*>> by_kernel;
  bool seen_conv = false;
  for (const LayerTensor* l : order) {
    if (l->shape.kind == LayerKind::fully_connected) {
      groups.push_back(singleton_group(*l));
      continue;
    }
    const bool first_conv = !seen_conv;
    seen_conv = true;
    if (first_conv && l->shape.depth == 3) {
      groups.push_back(singleton_group(*l));
      continue;
    }
    if (l->shape.kernel_h != l->shape.kernel_w)
      throw UnsupportedShapeError("layer '" + l->name + "' has a non-square kernel");
    by_kernel[l->shape.kernel_h].push_back(l);
  }

  for (const auto& [k, run] : by_kernel) {
    for (std::size_t start = 0; start < run.size(); start += max_group) {
      const std::size_t end = std::min(run.size(), start + max_group);
      std::size_t g = 0;
      for (std::size_t i = start; i < end; ++i) g = std::gcd(g, run[i]->shape.depth);
      std::vector<LayerMatrix> members;
      for (std::size_t i = start; i < end; ++i) {
        auto flat = flatten_layer(*run[i]);
        members.push_back(g == run[i]->shape.depth ? std::move(flat) : chunk_layer(flat, g));
      }
      groups.emplace_back(std::move(members), k, g);
    }
  }

  std::stable_sort(groups.begin(), groups.end(), [](const LayerGroup& a, const LayerGroup& b) {
    return a.members().front().depth_index < b.members().front().depth_index;
  });
  return groups;
}

}  // namespace lrsc

#pragma once

// Random and planted instances shared by the test binaries.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "lrsc/layermodel.hpp"
#include "lrsc/matrixcore.hpp"
#include "lrsc/storage.hpp"

namespace fixtures {

using lrsc::DenseMatrix;

inline DenseMatrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  DenseMatrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = n(rng);
  return m;
}

// q distinct positions with magnitudes in [lo, hi] and random signs.
inline DenseMatrix planted_sparse(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, std::size_t q, double lo,
                                  double hi) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(rows * cols));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  DenseMatrix s = DenseMatrix::Zero(rows, cols);
  for (std::size_t i = 0; i < q; ++i) {
    const auto r = static_cast<Eigen::Index>(idx[i] / static_cast<std::size_t>(cols));
    const auto c = static_cast<Eigen::Index>(idx[i] % static_cast<std::size_t>(cols));
    s(r, c) = (sign(rng) ? 1.0 : -1.0) * mag(rng);
  }
  return s;
}

struct PlantedLayer {
  DenseMatrix low;
  DenseMatrix sparse;
  DenseMatrix w() const { return low + sparse; }
};

// Group of layers W_t = c U_t [Vc; Vt] + S_t with a shared Vc (common rows).
inline std::vector<PlantedLayer> planted_group(std::mt19937_64& rng, std::size_t layers, Eigen::Index n, Eigen::Index p,
                                               Eigen::Index common, Eigen::Index individual, std::size_t q) {
  const DenseMatrix vc = gaussian(rng, common, p);
  std::vector<PlantedLayer> out;
  for (std::size_t t = 0; t < layers; ++t) {
    DenseMatrix v(common + individual, p);
    v.topRows(common) = vc;
    v.bottomRows(individual) = gaussian(rng, individual, p);
    // Orthonormal U_t keeps the instance inside the model class; the scale
    // gives low-rank entries of unit variance.
    const DenseMatrix u = lrsc::qr_thin(gaussian(rng, n, common + individual)).q;
    const double scale = std::sqrt(double(n) / double(common + individual));
    out.push_back({scale * (u * v), planted_sparse(rng, n, p, q, 10.0, 15.0)});
  }
  return out;
}

// Five conv layers (3x3; first one on 3 input channels) and one fc layer, each
// planted rank 6 (3 common rows inside the 4-layer conv run) plus spikes at 1%
// density, with calibration pairs for every layer.
inline lrsc::Container planted_model(std::uint64_t seed = 7, Eigen::Index samples = 200) {
  std::mt19937_64 rng(seed);
  lrsc::Container c;
  auto add = [&](const std::string& name, const DenseMatrix& w, const lrsc::LayerShape& shape, std::size_t index) {
    c.push_back(lrsc::layer_entry(lrsc::reconstruct_layer(w, shape, name, index)));
    const DenseMatrix x = gaussian(rng, w.cols(), samples);
    c.push_back(lrsc::matrix_entry(name + ".X", x));
    c.push_back(lrsc::matrix_entry(name + ".Y", w * x));
  };
  add("conv1", planted_group(rng, 1, 32, 27, 0, 6, 9)[0].w(), lrsc::LayerShape::conv(3, 3, 3, 32), 1);
  const auto run = planted_group(rng, 4, 64, 144, 3, 3, 92);
  for (std::size_t t = 0; t < run.size(); ++t)
    add("conv" + std::to_string(t + 2), run[t].w(), lrsc::LayerShape::conv(3, 3, 16, 64), t + 2);
  add("fc6", planted_group(rng, 1, 32, 128, 0, 6, 41)[0].w(), lrsc::LayerShape::fully_connected(32, 128), 6);
  return c;
}

}  // namespace fixtures

#pragma once

// Non-parametric distortion model: k-NN regression of image residuals,
// optional resampling onto a bilinear grid, and K-fold cross-validated
// neighbourhood selection.

#include <cstdint>
#include <utility>
#include <variant>
#include <vector>

#include "fluorocal/geometry.hpp"
#include "fluorocal/kdtree.hpp"

namespace fluorocal {

/// One training point of the residual field.
struct ResidualSample {
  Vec2 position = Vec2::Zero();  // raw image coordinates, px
  Vec2 residual = Vec2::Zero();  // px
  Vec2 variance = Vec2::Ones();  // diag(C_r), px^2
};

/// Unweighted mean of the k nearest stored residuals.
class KnnRegressor {
 public:
  KnnRegressor() = default;
  KnnRegressor(std::vector<ResidualSample> samples, int k);

  Vec2 predict(const Vec2& query) const;
  int k() const { return k_; }
  const std::vector<ResidualSample>& samples() const { return samples_; }

 private:
  std::vector<ResidualSample> samples_;
  KdTree2d tree_;
  int k_ = 0;
};

/// Validates and builds the regressor.  Throws EmptyTrainingSet and
/// KOutOfRange (k < 1 or k > sample count).
KnnRegressor knn_fit(std::vector<ResidualSample> samples, int k);

/// Node lattice of a smoothed field: nx * ny nodes spanning [lo, hi].
struct GridSpec {
  int nx = 64;
  int ny = 64;
  Vec2 lo = Vec2::Zero();
  Vec2 hi = Vec2::Ones();
};

/// Bilinear interpolation of grid-node values; queries outside the grid are
/// clamped to the boundary.
class SmoothedField {
 public:
  SmoothedField() = default;
  SmoothedField(GridSpec grid, std::vector<Vec2> nodes);  // nodes[iy*nx+ix]

  Vec2 predict(const Vec2& query) const;
  const GridSpec& grid() const { return grid_; }
  const std::vector<Vec2>& nodes() const { return nodes_; }

 private:
  GridSpec grid_;
  std::vector<Vec2> nodes_;
};

/// Axis-aligned bounds of the sample positions expanded into a grid spec.
/// Throws DegenerateGrid when the extent collapses or nx/ny < 2.
GridSpec bounding_grid(const std::vector<ResidualSample>& samples, int nx,
                       int ny);

/// Resamples the regressor onto the grid nodes.
SmoothedField smooth(const KnnRegressor& regressor, const GridSpec& grid);

using FieldStage = std::variant<KnnRegressor, SmoothedField>;

Vec2 predict(const FieldStage& stage, const Vec2& query);

/// Distortion model accumulated over outer iterations: the prediction is the
/// ordered sum of stage predictions, so the total correction stays an exact
/// function of raw image position.
struct DistortionField {
  std::vector<FieldStage> stages;

  Vec2 predict(const Vec2& query) const;
  bool empty() const { return stages.empty(); }
};

/// Variance-weighted residual cost of a fitted field against samples:
/// sum over samples of (r - g)^T C_r^{-1} (r - g).
template <typename Field>
double cv_cost(const Field& field, const std::vector<ResidualSample>& samples) {
  double g = 0.0;
  for (const auto& s : samples) {
    const Vec2 d = s.residual - field.predict(s.position);
    g += d.x() * d.x() / s.variance.x() + d.y() * d.y() / s.variance.y();
  }
  return g;
}

double cv_cost(const FieldStage& stage,
               const std::vector<ResidualSample>& samples);

struct SelectKResult {
  int k = 0;
  std::vector<std::pair<int, double>> scores;  // candidate -> mean fold cost
};

/// K-fold cross-validation over the candidate neighbourhood sizes; ties pick
/// the smaller k.  Candidates larger than the smallest training fold are
/// dropped.  The fold assignment depends only on the sample multiset and the
/// seed, not on input order.  Throws TooFewSamples when samples < folds.
SelectKResult select_k(const std::vector<ResidualSample>& samples,
                       std::vector<int> candidates, int folds,
                       std::uint64_t seed);

}  // namespace fluorocal

#include "fluorocal/distortion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <tuple>

#include "fluorocal/errors.hpp"

namespace fluorocal {

KnnRegressor::KnnRegressor(std::vector<ResidualSample> samples, int k)
    : samples_(std::move(samples)), k_(k) {
  std::vector<Vec2> positions;
  positions.reserve(samples_.size());
  for (const auto& s : samples_) positions.push_back(s.position);
  tree_ = KdTree2d(std::move(positions));
}

Vec2 KnnRegressor::predict(const Vec2& query) const {
  if (samples_.empty()) throw EmptyTrainingSet("predict on empty regressor");
  Vec2 sum = Vec2::Zero();
  const auto neighbors = tree_.query(query, k_);
  for (const auto& nb : neighbors) sum += samples_[nb.index].residual;
  return sum / static_cast<double>(neighbors.size());
}

KnnRegressor knn_fit(std::vector<ResidualSample> samples, int k) {
  if (samples.empty()) throw EmptyTrainingSet("knn_fit: no samples");
  if (k < 1 || k > static_cast<int>(samples.size()))
    throw KOutOfRange("knn_fit: k = " + std::to_string(k) + " with " +
                      std::to_string(samples.size()) + " samples");
  return KnnRegressor(std::move(samples), k);
}

SmoothedField::SmoothedField(GridSpec grid, std::vector<Vec2> nodes)
    : grid_(grid), nodes_(std::move(nodes)) {
  if (grid_.nx < 2 || grid_.ny < 2)
    throw DegenerateGrid("grid needs at least 2x2 nodes");
  if (!(grid_.hi.x() > grid_.lo.x()) || !(grid_.hi.y() > grid_.lo.y()))
    throw DegenerateGrid("grid extent collapsed");
  if (static_cast<int>(nodes_.size()) != grid_.nx * grid_.ny)
    throw DegenerateGrid("node count does not match grid shape");
}

Vec2 SmoothedField::predict(const Vec2& query) const {
  if (nodes_.empty()) throw EmptyTrainingSet("predict on empty field");
  const double sx = (grid_.hi.x() - grid_.lo.x()) / (grid_.nx - 1);
  const double sy = (grid_.hi.y() - grid_.lo.y()) / (grid_.ny - 1);
  double fx = (query.x() - grid_.lo.x()) / sx;
  double fy = (query.y() - grid_.lo.y()) / sy;
  fx = std::clamp(fx, 0.0, static_cast<double>(grid_.nx - 1));
  fy = std::clamp(fy, 0.0, static_cast<double>(grid_.ny - 1));
  const int ix = std::min(static_cast<int>(fx), grid_.nx - 2);
  const int iy = std::min(static_cast<int>(fy), grid_.ny - 2);
  const double tx = fx - ix;
  const double ty = fy - iy;

  const auto node = [&](int jx, int jy) -> const Vec2& {
    return nodes_[static_cast<size_t>(jy) * grid_.nx + jx];
  };
  return (1 - tx) * (1 - ty) * node(ix, iy) + tx * (1 - ty) * node(ix + 1, iy) +
         (1 - tx) * ty * node(ix, iy + 1) + tx * ty * node(ix + 1, iy + 1);
}

GridSpec bounding_grid(const std::vector<ResidualSample>& samples, int nx,
                       int ny) {
  if (samples.empty()) throw EmptyTrainingSet("bounding_grid: no samples");
  GridSpec grid;
  grid.nx = nx;
  grid.ny = ny;
  grid.lo = grid.hi = samples.front().position;
  for (const auto& s : samples) {
    grid.lo = grid.lo.cwiseMin(s.position);
    grid.hi = grid.hi.cwiseMax(s.position);
  }
  if (nx < 2 || ny < 2) throw DegenerateGrid("grid needs at least 2x2 nodes");
  if (!(grid.hi.x() > grid.lo.x()) || !(grid.hi.y() > grid.lo.y()))
    throw DegenerateGrid("sample positions collapse in one dimension");
  return grid;
}

SmoothedField smooth(const KnnRegressor& regressor, const GridSpec& grid) {
  if (grid.nx < 2 || grid.ny < 2)
    throw DegenerateGrid("grid needs at least 2x2 nodes");
  std::vector<Vec2> nodes;
  nodes.reserve(static_cast<size_t>(grid.nx) * grid.ny);
  for (int iy = 0; iy < grid.ny; ++iy) {
    const double y = grid.lo.y() + (grid.hi.y() - grid.lo.y()) * iy / (grid.ny - 1);
    for (int ix = 0; ix < grid.nx; ++ix) {
      const double x =
          grid.lo.x() + (grid.hi.x() - grid.lo.x()) * ix / (grid.nx - 1);
      nodes.push_back(regressor.predict(Vec2(x, y)));
    }
  }
  return SmoothedField(grid, std::move(nodes));
}

Vec2 predict(const FieldStage& stage, const Vec2& query) {
  return std::visit([&](const auto& f) { return f.predict(query); }, stage);
}

double cv_cost(const FieldStage& stage,
               const std::vector<ResidualSample>& samples) {
  return std::visit([&](const auto& f) { return cv_cost(f, samples); }, stage);
}

Vec2 DistortionField::predict(const Vec2& query) const {
  Vec2 sum = Vec2::Zero();
  for (const auto& stage : stages) sum += fluorocal::predict(stage, query);
  return sum;
}

SelectKResult select_k(const std::vector<ResidualSample>& samples,
                       std::vector<int> candidates, int folds,
                       std::uint64_t seed) {
  const int n = static_cast<int>(samples.size());
  if (folds < 2) throw ConfigError("select_k: need at least 2 folds");
  if (n < folds)
    throw TooFewSamples("select_k: " + std::to_string(n) + " samples for " +
                        std::to_string(folds) + " folds");

  // Canonical order first so the fold assignment is invariant to input order.
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto& sa = samples[a];
    const auto& sb = samples[b];
    return std::make_tuple(sa.position.x(), sa.position.y(), sa.residual.x(),
                           sa.residual.y(), sa.variance.x(), sa.variance.y()) <
           std::make_tuple(sb.position.x(), sb.position.y(), sb.residual.x(),
                           sb.residual.y(), sb.variance.x(), sb.variance.y());
  });
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const int max_fold = (n + folds - 1) / folds;
  const int min_train = n - max_fold;
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()),
                   candidates.end());
  std::erase_if(candidates, [&](int k) { return k < 1 || k > min_train; });
  if (candidates.empty()) candidates.push_back(min_train);
  const int kmax = candidates.back();

  std::vector<double> total(candidates.size(), 0.0);
  int begin = 0;
  for (int f = 0; f < folds; ++f) {
    const int size = n / folds + (f < n % folds ? 1 : 0);
    const int end = begin + size;

    std::vector<Vec2> train_pos;
    std::vector<Vec2> train_res;
    train_pos.reserve(n - size);
    for (int i = 0; i < n; ++i) {
      if (i >= begin && i < end) continue;
      train_pos.push_back(samples[order[i]].position);
      train_res.push_back(samples[order[i]].residual);
    }
    const KdTree2d tree(std::move(train_pos));

    for (int i = begin; i < end; ++i) {
      const auto& s = samples[order[i]];
      const auto neighbors = tree.query(s.position, kmax);
      Vec2 run = Vec2::Zero();
      size_t next = 0;
      for (size_t c = 0; c < candidates.size(); ++c) {
        while (next < static_cast<size_t>(candidates[c])) {
          run += train_res[neighbors[next].index];
          ++next;
        }
        const Vec2 d = s.residual - run / static_cast<double>(next);
        total[c] += d.x() * d.x() / s.variance.x() +
                    d.y() * d.y() / s.variance.y();
      }
    }
    begin = end;
  }

  SelectKResult result;
  result.k = candidates.front();
  double best = std::numeric_limits<double>::infinity();
  for (size_t c = 0; c < candidates.size(); ++c) {
    const double score = total[c] / folds;
    result.scores.emplace_back(candidates[c], score);
    if (score < best) {
      best = score;
      result.k = candidates[c];
    }
  }
  return result;
}

}  // namespace fluorocal

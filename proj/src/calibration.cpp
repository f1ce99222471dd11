#include "fluorocal/calibration.hpp"

#include <cmath>
#include <limits>
#include <ostream>

#include "fluorocal/errors.hpp"
#include "fluorocal/format.hpp"

namespace fluorocal {

std::string to_string(LoopStatus status) {
  switch (status) {
    case LoopStatus::converged: return "converged";
    case LoopStatus::max_iterations: return "max_iterations";
    case LoopStatus::diverged: return "diverged";
  }
  throw Error("unreachable loop status");
}

LoopStatus loop_status_from_string(const std::string& name) {
  for (LoopStatus s : {LoopStatus::converged, LoopStatus::max_iterations,
                       LoopStatus::diverged})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown loop status '" + name + "'");
}

namespace {

std::uint64_t derive_seed(std::uint64_t seed, int iteration, int system) {
  std::uint64_t x = seed + 0x9E3779B97F4A7C15ull * (iteration + 1) +
                    0xBF58476D1CE4E5B9ull * (system + 1);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

std::vector<ResidualSample> system_samples(const Network& net,
                                           const ResidualSet& residuals,
                                           int system) {
  std::vector<ResidualSample> samples;
  for (size_t i = 0; i < net.observations.size(); ++i) {
    if (net.observations[i].system_id != system) continue;
    if (!residuals.inlier[i]) continue;
    samples.push_back({net.observations[i].image, residuals.residuals[i],
                       residuals.variances[i]});
  }
  return samples;
}

GridSpec observation_grid(const Network& net, int system, int nx, int ny) {
  std::vector<ResidualSample> positions;
  for (const auto& o : net.observations)
    if (o.system_id == system) positions.push_back({o.image, {}, {}});
  return bounding_grid(positions, nx, ny);
}

double zero_field_misfit(const std::vector<ResidualSample>& samples) {
  double total = 0.0;
  for (const auto& s : samples)
    total += s.residual.x() * s.residual.x() / s.variance.x() +
             s.residual.y() * s.residual.y() / s.variance.y();
  return total;
}

}  // namespace

CalibrationResult run_calibration(Network network,
                                  const LoopSettings& settings) {
  for (auto& o : network.observations) o.correction.setZero();

  const std::vector<int> systems = network.system_ids();
  std::map<int, GridSpec> grids;  // fixed per system across iterations
  if (scheme_learns_field(network.scheme) && network.smoothing())
    for (int s : systems)
      grids[s] = observation_grid(network, s, settings.grid_nx, settings.grid_ny);

  CalibrationResult best;
  bool have_best = false;
  std::map<int, DistortionField> fields;
  if (scheme_learns_field(network.scheme))
    for (int s : systems) fields[s];  // an unused system keeps a zero field
  std::map<int, int> frozen_k;
  std::vector<OuterRecord> history;

  double prev_combined = std::numeric_limits<double>::quiet_NaN();
  int increase_streak = 0;
  LoopStatus status = LoopStatus::max_iterations;

  for (int t = 1; t <= settings.max_outer_iterations; ++t) {
    SolveResult ba =
        levenberg_marquardt(network, settings.model, settings.solver);
    try {
      classify_inliers(ba.residuals, settings.inlier_tau);
    } catch (const AllOutliers&) {
      if (!have_best) throw;
      status = LoopStatus::diverged;
      break;
    }
    int inliers = 0;
    for (bool flag : ba.residuals.inlier) inliers += flag;

    OuterRecord record;
    record.iteration = t;
    record.ba_cost = ba.final_cost;

    double g_total = 0.0;
    std::map<int, FieldStage> stages;
    if (scheme_learns_field(network.scheme)) {
      for (int s : systems) {
        auto samples = system_samples(network, ba.residuals, s);
        const std::vector<int> candidates =
            settings.reselect_k || !frozen_k.count(s)
                ? settings.candidate_ks
                : std::vector<int>{frozen_k.at(s)};
        // Fold assignment stays fixed across outer iterations; reshuffling
        // per pass would inject selection noise into the combined cost.
        const SelectKResult sel =
            select_k(samples, candidates, settings.cv_folds,
                     derive_seed(settings.seed, 1, s));
        if (!frozen_k.count(s)) frozen_k[s] = sel.k;

        double chosen_score = std::numeric_limits<double>::infinity();
        for (const auto& [cand, score] : sel.scores)
          if (cand == sel.k) chosen_score = score;
        const double zero_misfit = zero_field_misfit(samples);

        // A stage joins the additive model only when the chosen k predicts
        // the held-out residuals better than the zero field does. Once the
        // remaining residuals carry no learnable structure, averaging them
        // would feed sampling noise back through the update and the
        // alternation would creep instead of reaching a fixed point.
        //
        // Either way the booked regression cost is the held-out misfit of
        // whichever field the iteration keeps (each sample is held out
        // exactly once, so both terms sum over the same set); booking the
        // accepted stage's in-sample fit instead would make the combined
        // cost jump by the overfit gap on the pass where the gate closes.
        const double heldout = chosen_score * settings.cv_folds;
        if (heldout < zero_misfit) {
          record.selected_k[s] = sel.k;
          KnnRegressor reg = knn_fit(samples, sel.k);
          FieldStage stage = network.smoothing()
                                 ? FieldStage(smooth(reg, grids.at(s)))
                                 : FieldStage(std::move(reg));
          g_total += heldout;
          stages.emplace(s, std::move(stage));
        } else {
          g_total += zero_misfit;
        }
      }
    }

    record.regression_cost = g_total;
    record.combined_cost = combined_cost(ba.final_cost, g_total);
    record.inliers = inliers;
    history.push_back(record);

    // Candidate state: the parameters this adjustment produced together with
    // the corrections (and stages) it consumed.
    if (!have_best || record.combined_cost < best.combined_cost) {
      best.network = network;
      best.fields = fields;
      best.residuals = ba.residuals;
      best.ba_cost = record.ba_cost;
      best.regression_cost = record.regression_cost;
      best.combined_cost = record.combined_cost;
      best.best_iteration = t;
      best.ba_trace = ba.trace;
      have_best = true;
    }

    // A pass that fits no stage (scheme none, or the gate closed for every
    // system) leaves the corrections, and with them the next adjustment,
    // exactly where they are: the alternation is at its fixed point, and
    // rerunning it could only accumulate rounding-level drift.
    if (stages.empty()) {
      status = LoopStatus::converged;
      break;
    }
    if (std::isfinite(prev_combined)) {
      const double change = prev_combined - record.combined_cost;
      if (std::abs(change) <=
          settings.combined_tolerance * std::max(1.0, std::abs(prev_combined))) {
        status = LoopStatus::converged;
        break;
      }
      increase_streak = change < 0.0 ? increase_streak + 1 : 0;
      if (increase_streak >= settings.divergence_patience) {
        status = LoopStatus::diverged;
        break;
      }
    }
    prev_combined = record.combined_cost;

    for (auto& [s, stage] : stages) {
      for (auto& o : network.observations)
        if (o.system_id == s) o.correction += predict(stage, o.image);
      fields[s].stages.push_back(std::move(stage));
    }
  }

  best.status = status;
  best.history = std::move(history);
  return best;
}

void write_outer_trace_csv(std::ostream& out,
                           const std::vector<OuterRecord>& history,
                           const std::vector<int>& system_ids) {
  out << "iteration,ba_cost,regression_cost,combined_cost,inliers";
  for (int s : system_ids) out << ",k_sys" << s;
  out << '\n';
  for (const auto& row : history) {
    out << row.iteration << ',' << format_double(row.ba_cost) << ','
        << format_double(row.regression_cost) << ','
        << format_double(row.combined_cost) << ',' << row.inliers;
    for (int s : system_ids) {
      out << ',';
      if (row.selected_k.count(s)) out << row.selected_k.at(s);
    }
    out << '\n';
  }
}

}  // namespace fluorocal

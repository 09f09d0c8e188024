// Error statistics and the three experiment drivers: test-trajectory
// evaluation per method, the perturbation-tolerance ablation over the
// four optimizer variants, and the truncation-offset sweep. Reports go to
// CSV and JSON with the seed recorded in every file.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "latitude/localizer.hpp"
#include "latitude/scene.hpp"

namespace latitude {

struct ErrorStats {
  double max = 0.0, mean = 0.0, min = 0.0, rmse = 0.0, std_dev = 0.0;

  // Population statistics, so rmse^2 = mean^2 + std^2 holds exactly.
  static ErrorStats from_samples(const std::vector<double>& errors);
};

struct MethodRow {
  std::string method;
  ErrorStats translation;
  double rotation_mean = 0.0;
  int failures = 0;  // localizations stopped by the divergence guard
};

struct TrajectoryReport {
  std::vector<MethodRow> rows;
  std::uint64_t seed = 0;
};

// Optimizer variant of the ablation: tangent-plane vs recursive stepping,
// with or without the truncated low-pass schedule.
struct Variant {
  bool manifold = true;  // tangent-plane optimization
  bool tdlf = true;
  std::string name() const;
};

struct AblationCell {
  double translation_offset = 0.0;  // scene units
  double rotation_offset_deg = 0.0;
};

struct AblationRow {
  AblationCell cell;
  Variant variant;
  double mean_translation_error = 0.0;
  double mean_rotation_error = 0.0;
  int failures = 0;
  int trials = 0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::uint64_t seed = 0;
};

struct SweepRow {
  double alpha0_percent = 0.0;
  double mean_translation_error = 0.0;
  double mean_rotation_error = 0.0;
  int failures = 0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::uint64_t seed = 0;
};

struct ExperimentContext {
  const Dataset* dataset = nullptr;
  const std::vector<Image>* images = nullptr;  // aligned with dataset->frames
  const PartitionedField<float>* field = nullptr;
  const RegressorNet* regressor = nullptr;  // only needed by trajectory_eval
  RenderOptions render;
  LocalizerConfig localizer;  // base configuration; drivers override mode/tdlf
  std::function<void(const std::string&)> progress;
};

// Per-test-image evaluation of the requested methods. Known methods:
// "regressor" (prior only), "full" (tangent + tdlf refinement), and
// "inerf" (recursive stepping, no tdlf, same priors).
TrajectoryReport trajectory_eval(const ExperimentContext& ctx,
                                 const std::vector<std::string>& methods);

// For every cell and variant, perturbs the ground-truth pose of n_positions
// test frames with seeds_per_cell random offsets each and refines from the
// perturbed prior. Perturbation draws depend only on (cell, position, seed),
// never on the variant, so variants face identical priors. Early stopping is
// disabled so iteration counts match across variants.
AblationReport perturbation_grid(const ExperimentContext& ctx,
                                 const std::vector<AblationCell>& cells,
                                 const std::vector<Variant>& variants, int n_positions,
                                 int seeds_per_cell);

// Helper shaping the usual two tables: translation-only levels then
// rotation-only levels.
std::vector<AblationCell> standard_cells(const std::vector<double>& translation_levels,
                                         const std::vector<double>& rotation_levels_deg);

// Full method at a fixed perturbation for each truncation offset
// (alpha0 = percent/100 * L).
SweepReport alpha0_sweep(const ExperimentContext& ctx, const std::vector<double>& percents,
                         const AblationCell& cell, int n_positions, int seeds_per_cell);

void write_trajectory_csv(const std::string& path, const TrajectoryReport& report);
void write_trajectory_json(const std::string& path, const TrajectoryReport& report);
void write_ablation_csv(const std::string& path, const AblationReport& report);
void write_ablation_json(const std::string& path, const AblationReport& report);
void write_sweep_csv(const std::string& path, const SweepReport& report);
void write_sweep_json(const std::string& path, const SweepReport& report);

}  // namespace latitude

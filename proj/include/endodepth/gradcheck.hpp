#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace endodepth {

/// Scalar probe of a function under test. `region` identifies the smooth
/// piece the evaluation lies in (validity masks, bilinear cells, signs of
/// L1 residuals). Elements whose ±h perturbation changes the region sit on
/// a kink and are skipped.
struct Probe {
  double value = 0.0;
  std::uint64_t region = 0;
};

struct ElementCheck {
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
};

/// Central differences with step `step_scale * max(|x_i|, 1)` against the
/// analytic gradient. Relative error is |a - n| / max(|a|, |n|, floor) with
/// floor = 1e-3 * max|a| so that components far below the gradient's own
/// scale are judged relative to it.
ElementCheck check_gradient(const std::function<Probe(std::span<const double>)>& f,
                            std::span<const double> x, std::span<const double> analytic,
                            double step_scale);

struct GradCheckOptions {
  int instances = 50;
  int rows = 8;
  int cols = 10;
  double step_scale = 1e-4;
  double tolerance = 1e-4;
  std::uint64_t seed = 20190220;
};

struct GradCheckResult {
  std::string name;
  int instances = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
  bool passed = false;
  double seconds = 0.0;
};

/// Every geometric layer and loss, plus the composed pair objective.
std::vector<GradCheckResult> run_gradient_suite(const GradCheckOptions& options = {});

}  // namespace endodepth

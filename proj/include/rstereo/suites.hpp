#pragma once

// Self-contained verification suites. Each runs in seconds, compares the
// engine against an independent reference and reports what it measured.

#include <string>

namespace rstereo::check {

struct Outcome {
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

/// Volume vs triple-loop reference on random 4x6 maps (D=8), `seeds` draws.
Outcome volume_oracle(int seeds = 100);
/// Extents of a 4-level pyramid over a width-64 volume and per-level
/// agreement with adjacent-pair means, double precision.
Outcome pyramid_contract();
/// Integer, half-integer and out-of-range lookups, plus on-the-fly vs
/// precomputed on 8x16 features.
Outcome lookup_contract();
/// Central differences (double, eps 1e-5) for every differentiable op and a
/// 2-update single-level model under the sequence loss.
Outcome gradient_suite();
/// Upsampling weights sum to one, constants scale by the factor, outputs stay
/// within the neighbourhood hull.
Outcome convex_upsample_contract();
/// Counted GRU multiply-accumulates across levels and schedules, and the
/// equal-count schedule reproducing the regular rollout bitwise.
Outcome slow_fast_contract();
/// PFM and checkpoint round trips, including inference after reload.
/// Scratch files go under `dir`.
Outcome io_round_trips(const std::string& dir);

}  // namespace rstereo::check

#pragma once

#include <span>
#include <string>
#include <vector>

#include "alloyforge/checkpoint.hpp"

namespace alloyforge {

struct MergeRule {
  std::string pattern;  // glob over tensor names, * and ? wildcards
  double t = 0.5;
};

struct MergeSchedule {
  std::vector<MergeRule> rules;  // first match wins
  double default_t = 0.5;

  void validate() const;  // every t in [0,1]
};

MergeSchedule load_schedule(const std::string& path);

enum class MergeMethod { slerp, lerp_fallback, copied };

struct MergeEntry {
  std::string name;
  double t_used = 0;
  double theta_radians = 0;
  MergeMethod method = MergeMethod::slerp;
};

struct MergeReport {
  std::vector<MergeEntry> entries;
  int n_slerp = 0, n_lerp_fallback = 0, n_copied = 0;

  void write_jsonl(const std::string& path) const;
};

// sin(theta) below this triggers the linear-interpolation fallback;
// theta above pi - kAntiparallelEps is an error.
inline constexpr double kParallelEps = 1e-7;
inline constexpr double kAntiparallelEps = 1e-7;

bool glob_match(const std::string& pattern, const std::string& name);

double angle_between(std::span<const double> w1, std::span<const double> w2);

std::vector<double> slerp_vectors(std::span<const double> w1,
                                  std::span<const double> w2, double t);

double resolve_t(const MergeSchedule& schedule, const std::string& tensor_name);

std::pair<Checkpoint, MergeReport> merge_checkpoints(const Checkpoint& a,
                                                     const Checkpoint& b,
                                                     const MergeSchedule& schedule);

struct SweepPoint {
  double t = 0;
  double param_l2 = 0;    // l2 norm over all merged parameters
  double val_loss = 0;    // NaN when no eval sequences were given
};

// Constant-schedule merge at each t; when eval_sequences is non-empty the
// merged model's mean next-token cross-entropy over them is reported.
std::vector<SweepPoint> sweep_merge(
    const Checkpoint& a, const Checkpoint& b, const std::vector<double>& t_values,
    const std::vector<std::vector<int>>& eval_sequences = {});

}  // namespace alloyforge

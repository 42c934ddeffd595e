#include "alloyforge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "alloyforge/kernels.hpp"
#include "alloyforge/transformer.hpp"

namespace alloyforge {

using nlohmann::json;

void MergeSchedule::validate() const {
  auto check = [](double t, const std::string& where) {
    if (!(t >= 0.0 && t <= 1.0))
      throw ValidationError("interpolation parameter out of [0,1] in " + where);
  };
  check(default_t, "default_t");
  for (const auto& r : rules) check(r.t, "rule '" + r.pattern + "'");
}

MergeSchedule load_schedule(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open schedule: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad schedule JSON: ") + e.what());
  }
  MergeSchedule s;
  s.default_t = j.at("default_t").get<double>();
  for (const auto& r : j.value("rules", json::array()))
    s.rules.push_back({r.at("pattern").get<std::string>(), r.at("t").get<double>()});
  s.validate();
  return s;
}

// Iterative glob with * and ? over the full name (dots are ordinary chars).
bool glob_match(const std::string& pattern, const std::string& name) {
  std::size_t p = 0, n = 0, star = std::string::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == name[n])) {
      ++p;
      ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (star != std::string::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

double angle_between(std::span<const double> w1, std::span<const double> w2) {
  if (w1.size() != w2.size())
    throw ValidationError("angle_between: length mismatch");
  const double n1 = kernels::l2_norm(w1);
  const double n2 = kernels::l2_norm(w2);
  if (n1 == 0.0 || n2 == 0.0)
    throw ValidationError("angle_between: zero-norm input");
  const double c = std::clamp(kernels::dot(w1, w2) / (n1 * n2), -1.0, 1.0);
  return std::acos(c);
}

namespace {
std::vector<double> slerp_impl(std::span<const double> w1,
                               std::span<const double> w2, double t,
                               double* theta_out, MergeMethod* method_out) {
  if (!(t >= 0.0 && t <= 1.0))
    throw ValidationError("slerp: t out of [0,1]");
  if (std::equal(w1.begin(), w1.end(), w2.begin(), w2.end())) {
    if (theta_out) *theta_out = 0.0;
    if (method_out) *method_out = MergeMethod::copied;
    return std::vector<double>(w1.begin(), w1.end());
  }
  const double theta = angle_between(w1, w2);
  if (theta_out) *theta_out = theta;
  std::vector<double> out(w1.size());
  const double s = std::sin(theta);
  if (theta > M_PI - kAntiparallelEps)
    throw ValidationError("slerp: antiparallel inputs, interpolation path undefined");
  if (s < kParallelEps) {
    if (method_out) *method_out = MergeMethod::lerp_fallback;
    kernels::axpby(1.0 - t, w1, t, w2, out);
    return out;
  }
  if (method_out) *method_out = MergeMethod::slerp;
  const double c1 = std::sin((1.0 - t) * theta) / s;
  const double c2 = std::sin(t * theta) / s;
  kernels::axpby(c1, w1, c2, w2, out);
  return out;
}
}  // namespace

std::vector<double> slerp_vectors(std::span<const double> w1,
                                  std::span<const double> w2, double t) {
  return slerp_impl(w1, w2, t, nullptr, nullptr);
}

double resolve_t(const MergeSchedule& schedule, const std::string& tensor_name) {
  for (const auto& r : schedule.rules)
    if (glob_match(r.pattern, tensor_name)) return r.t;
  return schedule.default_t;
}

std::pair<Checkpoint, MergeReport> merge_checkpoints(const Checkpoint& a,
                                                     const Checkpoint& b,
                                                     const MergeSchedule& schedule) {
  schedule.validate();
  if (!(a.config == b.config))
    throw ValidationError("merge: parent configs differ");
  if (a.tensors.size() != b.tensors.size())
    throw ValidationError("merge: tensor name sets differ");
  for (const auto& ta : a.tensors) {
    if (!b.has(ta.name))
      throw ValidationError("merge: tensor " + ta.name + " missing in second parent");
    if (b.at(ta.name).shape != ta.shape)
      throw ValidationError("merge: shape mismatch for tensor " + ta.name);
  }

  Checkpoint out;
  out.config = a.config;
  out.format_version = a.format_version;
  MergeReport report;
  report.entries.resize(a.tensors.size());

  // Per-tensor merges are independent; entries land at fixed indices so the
  // report order matches the output tensor order.
  std::string error;
  std::vector<TensorRecord> merged(a.tensors.size());
#pragma omp parallel for schedule(dynamic)
  for (long long i = 0; i < static_cast<long long>(a.tensors.size()); ++i) {
    const TensorRecord& ta = a.tensors[i];
    const TensorRecord& tb = b.at(ta.name);
    MergeEntry e;
    e.name = ta.name;
    e.t_used = resolve_t(schedule, ta.name);
    try {
      TensorRecord tr;
      tr.name = ta.name;
      tr.dtype = ta.dtype;
      tr.shape = ta.shape;
      tr.data = slerp_impl(ta.data, tb.data, e.t_used, &e.theta_radians, &e.method);
      merged[i] = std::move(tr);
    } catch (const std::exception& ex) {
      #pragma omp critical
      if (error.empty()) error = "tensor " + ta.name + ": " + ex.what();
    }
    report.entries[i] = std::move(e);
  }
  if (!error.empty()) throw ValidationError("merge failed: " + error);

  for (auto& t : merged) out.add(std::move(t));
  for (const auto& e : report.entries) {
    switch (e.method) {
      case MergeMethod::slerp: ++report.n_slerp; break;
      case MergeMethod::lerp_fallback: ++report.n_lerp_fallback; break;
      case MergeMethod::copied: ++report.n_copied; break;
    }
  }
  return {std::move(out), std::move(report)};
}

void MergeReport::write_jsonl(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ValidationError("cannot open report for writing: " + path);
  for (const auto& e : entries) {
    const char* m = e.method == MergeMethod::slerp ? "slerp"
                    : e.method == MergeMethod::lerp_fallback ? "lerp_fallback"
                                                             : "copied";
    json j{{"name", e.name},
           {"t_used", e.t_used},
           {"theta_radians", e.theta_radians},
           {"method", m}};
    f << j.dump() << "\n";
  }
}

std::vector<SweepPoint> sweep_merge(
    const Checkpoint& a, const Checkpoint& b, const std::vector<double>& t_values,
    const std::vector<std::vector<int>>& eval_sequences) {
  std::vector<SweepPoint> points;
  for (double t : t_values) {
    MergeSchedule sched;
    sched.default_t = t;
    auto [merged, report] = merge_checkpoints(a, b, sched);
    SweepPoint p;
    p.t = t;
    double sq = 0.0;
    for (const auto& tr : merged.tensors) {
      const double n = kernels::l2_norm(tr.data);
      sq += n * n;
    }
    p.param_l2 = std::sqrt(sq);
    p.val_loss = std::numeric_limits<double>::quiet_NaN();
    if (!eval_sequences.empty()) {
      ToyModel model(std::move(merged));
      double total = 0.0;
      std::size_t count = 0;
      for (const auto& seq : eval_sequences) {
        if (seq.size() < 2) continue;
        std::vector<int> prompt(seq.begin(), seq.begin() + 1);
        std::vector<int> target(seq.begin() + 1, seq.end());
        total += -model.sequence_log_prob(prompt, target) /
                 static_cast<double>(target.size());
        ++count;
      }
      if (count) p.val_loss = total / static_cast<double>(count);
    }
    points.push_back(p);
  }
  return points;
}

}  // namespace alloyforge

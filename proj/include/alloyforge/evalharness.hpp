#pragma once

#include <map>
#include <string>
#include <vector>

#include "alloyforge/transformer.hpp"

namespace alloyforge {

struct NiahSpec {
  std::vector<int> context_lengths;      // tokens
  std::vector<double> depth_fractions;   // sorted ascending, in [0,1]
  std::vector<int> needle;
  std::vector<int> question;
  std::vector<int> answer;
  std::vector<int> filler_corpus;        // token pool for haystack filler
  std::uint64_t seed = 0;
  int trials = 8;

  void validate() const;
};

NiahSpec load_niah_spec(const std::string& path);

struct NiahInstance {
  std::vector<int> document;  // haystack with the needle embedded
  std::vector<int> expected;  // answer tokens
};

NiahInstance niah_generate(const NiahSpec& spec, int length, double depth,
                           int trial_index);

int niah_score(const std::vector<int>& model_output,
               const std::vector<int>& expected);

// Model under test: produce an answer given the haystack and the question.
class NiahModel {
 public:
  virtual ~NiahModel() = default;
  virtual std::vector<int> answer(const std::vector<int>& document,
                                  const std::vector<int>& question,
                                  int max_new_tokens) const = 0;
};

class ToyNiahModel : public NiahModel {
 public:
  explicit ToyNiahModel(const ToyModel& model) : model_(model) {}
  std::vector<int> answer(const std::vector<int>& document,
                          const std::vector<int>& question,
                          int max_new_tokens) const override;

 private:
  const ToyModel& model_;
};

// Always returns the expected answer; scorer sanity stub.
class EchoStub : public NiahModel {
 public:
  explicit EchoStub(std::vector<int> answer) : answer_(std::move(answer)) {}
  std::vector<int> answer(const std::vector<int>&, const std::vector<int>&,
                          int) const override {
    return answer_;
  }

 private:
  std::vector<int> answer_;
};

class EmptyStub : public NiahModel {
 public:
  std::vector<int> answer(const std::vector<int>&, const std::vector<int>&,
                          int) const override {
    return {};
  }
};

struct AccuracyGrid {
  std::vector<int> lengths;
  std::vector<double> depths;
  std::vector<double> accuracy;  // (depths.size(), lengths.size()) row-major
  int trials = 0;

  double at(std::size_t depth_idx, std::size_t len_idx) const {
    return accuracy[depth_idx * lengths.size() + len_idx];
  }
  void write_csv(const std::string& path) const;
};

AccuracyGrid niah_grid(const NiahModel& model, const NiahSpec& spec,
                       int model_max_seq = 0);

// Markdown table; per row the best score is bold, second best underlined,
// ties broken by column order.
std::string format_benchmark_table(
    const std::vector<std::string>& model_names,
    const std::vector<std::string>& benchmark_names,
    const std::vector<std::vector<double>>& scores);  // (benchmark, model)

}  // namespace alloyforge

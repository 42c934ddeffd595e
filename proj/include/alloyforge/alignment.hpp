#pragma once

#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "alloyforge/transformer.hpp"

namespace alloyforge {

struct PreferencePair {
  std::vector<int> prompt;
  std::vector<int> chosen;
  std::vector<int> rejected;
  std::string source_tag;

  void validate(int max_seq_len) const;
};

std::vector<PreferencePair> load_preference_pairs(const std::string& path);
void save_preference_pairs(const std::vector<PreferencePair>& pairs,
                           const std::string& path);

struct DpoConfig {
  double beta = 0.1;
  double learning_rate = 1e-6;
  int epochs = 2;
};

struct SftConfig {
  double learning_rate = 2e-5;
  int epochs = 2;
  int max_seq = 512;
};

struct SkldConfig {
  double alpha = 0.1;        // skew coefficient, in [0,1)
  double sgo_ratio = 0.0;    // fraction of student-generated sequences per batch
  int buffer_capacity = 64;
  double adapt_step = 0.0;   // per-epoch additive change to sgo_ratio
  double learning_rate = 0.1;
  int epochs = 1;
  int batch_size = 4;
  int max_new_tokens = 8;
};

struct TrainLogRow {
  int step = 0;
  double loss = 0;
  double margin_mean = 0;
  double sgo_ratio = 0;
};

void write_train_log(const std::vector<TrainLogRow>& rows,
                     const std::string& path);

// Oldest-first-evicting ring buffer of student-generated sequences.
class ReplayBuffer {
 public:
  struct Item {
    std::vector<int> prompt;
    std::vector<int> response;
    int epoch = 0;
  };

  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {}

  void push(Item item);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<Item>& items() const { return items_; }  // oldest first
  const Item& sample(Rng& rng) const;

 private:
  std::size_t capacity_;
  std::deque<Item> items_;
};

struct LossResult {
  double loss = 0;
  GradMap grads;
};

LossResult sft_loss(const ToyModel& model, const std::vector<int>& prompt,
                    const std::vector<int>& target);

struct DpoLossResult {
  double loss = 0;
  double margin = 0;
};

DpoLossResult dpo_loss(double lp_pol_w, double lp_pol_l, double lp_ref_w,
                       double lp_ref_l, double beta);

ToyModel sft_train(ToyModel model, const std::vector<std::vector<int>>& prompts,
                   const std::vector<std::vector<int>>& targets,
                   const SftConfig& cfg, std::vector<TrainLogRow>* log = nullptr);

ToyModel dpo_train(ToyModel policy, const ToyModel& reference,
                   const std::vector<PreferencePair>& pairs,
                   const DpoConfig& cfg, std::vector<TrainLogRow>* log = nullptr);

using Scorer = std::function<double(const std::vector<int>& prompt,
                                    const std::vector<int>& response)>;

struct OnlineDpoParams {
  int max_new_tokens = 8;
  double temperature = 1.0;
};

ToyModel online_dpo_step(ToyModel policy, const ToyModel& reference,
                         const std::vector<std::vector<int>>& prompts,
                         const Scorer& scorer, const DpoConfig& cfg,
                         const OnlineDpoParams& params, Rng& rng,
                         std::vector<TrainLogRow>* log = nullptr);

// KL(p || alpha*p + (1-alpha)*q); +inf when alpha == 0 and supports disagree.
double skld(std::span<const double> p, std::span<const double> q, double alpha);

struct SkldTokenLoss {
  double loss = 0;
  std::vector<double> dstudent_logits;
};

// Mean over positions of KL(teacher || alpha*teacher + (1-alpha)*student).
SkldTokenLoss skld_token_loss(const std::vector<double>& student_logits,
                              const std::vector<double>& teacher_logits,
                              int positions, int vocab, double alpha);

struct SamplerParams {
  int max_new_tokens = 8;
  double temperature = 0.0;  // 0 = greedy
  std::uint64_t seed = 0;
};

std::vector<std::pair<std::vector<int>, std::vector<int>>> distill_generate(
    const ToyModel& teacher, const std::vector<std::vector<int>>& prompts,
    const SamplerParams& params);

ToyModel distill_train(ToyModel student, const ToyModel& teacher,
                       const std::vector<std::vector<int>>& prompts,
                       const SkldConfig& cfg, std::uint64_t seed,
                       std::vector<TrainLogRow>* log = nullptr);

// Mean SKLD of student vs teacher over teacher-generated continuations;
// the held-out metric used to track distillation progress.
double distill_eval(const ToyModel& student, const ToyModel& teacher,
                    const std::vector<std::vector<int>>& prompts,
                    const SkldConfig& cfg);

}  // namespace alloyforge

#include "alloyforge/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace alloyforge {

using nlohmann::json;

namespace {

double log_sigmoid(double z) {
  // -softplus(-z), stable for large |z|
  if (z >= 0.0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

std::vector<double> softmax_copy(const double* row, int n) {
  std::vector<double> p(row, row + n);
  double m = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (auto& x : p) {
    x = std::exp(x - m);
    z += x;
  }
  for (auto& x : p) x /= z;
  return p;
}

// d(sum log p(response)) / d(logits), scaled by coeff, over response
// positions of prompt++response.
std::vector<double> seq_logprob_dlogits(const std::vector<double>& logits,
                                        std::size_t prompt_len,
                                        const std::vector<int>& response,
                                        int vocab, double coeff) {
  std::vector<double> dlogits(logits.size(), 0.0);
  for (std::size_t i = 0; i < response.size(); ++i) {
    const std::size_t pos = prompt_len - 1 + i;
    const double* row = logits.data() + pos * vocab;
    std::vector<double> p = softmax_copy(row, vocab);
    double* drow = dlogits.data() + pos * vocab;
    for (int j = 0; j < vocab; ++j) drow[j] = -coeff * p[j];
    drow[response[i]] += coeff;
  }
  return dlogits;
}

struct SeqLogProb {
  double lp = 0;
  ForwardCache cache;
  std::vector<double> logits;
};

SeqLogProb forward_log_prob(const ToyModel& model,
                            const std::vector<int>& prompt,
                            const std::vector<int>& response) {
  SeqLogProb r;
  std::vector<int> tokens = prompt;
  tokens.insert(tokens.end(), response.begin(), response.end());
  r.logits = model.forward(tokens, &r.cache);
  const int V = model.config().vocab_size;
  for (std::size_t i = 0; i < response.size(); ++i) {
    const std::size_t pos = prompt.size() - 1 + i;
    const double* row = r.logits.data() + pos * V;
    double m = row[0];
    for (int j = 1; j < V; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (int j = 0; j < V; ++j) z += std::exp(row[j] - m);
    r.lp += row[response[i]] - m - std::log(z);
  }
  return r;
}

}  // namespace

void PreferencePair::validate(int max_seq_len) const {
  if (prompt.empty() || chosen.empty() || rejected.empty())
    throw ValidationError("preference pair: all sequences must be non-empty");
  if (chosen == rejected)
    throw ValidationError("preference pair: chosen equals rejected");
  const std::size_t longest = std::max(chosen.size(), rejected.size());
  if (prompt.size() + longest > static_cast<std::size_t>(max_seq_len))
    throw ValidationError("preference pair: exceeds max_seq_len");
}

std::vector<PreferencePair> load_preference_pairs(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open preference data: " + path);
  std::vector<PreferencePair> pairs;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(std::string("bad preference JSONL: ") + e.what());
    }
    PreferencePair p;
    p.prompt = j.at("prompt").get<std::vector<int>>();
    p.chosen = j.at("chosen").get<std::vector<int>>();
    p.rejected = j.at("rejected").get<std::vector<int>>();
    p.source_tag = j.value("source_tag", "");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

void save_preference_pairs(const std::vector<PreferencePair>& pairs,
                           const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ValidationError("cannot open for writing: " + path);
  for (const auto& p : pairs) {
    json j{{"prompt", p.prompt},
           {"chosen", p.chosen},
           {"rejected", p.rejected},
           {"source_tag", p.source_tag}};
    f << j.dump() << "\n";
  }
}

void write_train_log(const std::vector<TrainLogRow>& rows,
                     const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ValidationError("cannot open log for writing: " + path);
  f << "step,loss,margin_mean,sgo_ratio\n";
  f.precision(17);
  for (const auto& r : rows)
    f << r.step << "," << r.loss << "," << r.margin_mean << "," << r.sgo_ratio
      << "\n";
}

void ReplayBuffer::push(Item item) {
  if (capacity_ == 0) return;
  if (items_.size() == capacity_) items_.pop_front();
  items_.push_back(std::move(item));
}

const ReplayBuffer::Item& ReplayBuffer::sample(Rng& rng) const {
  if (items_.empty()) throw ValidationError("replay buffer empty");
  std::uniform_int_distribution<std::size_t> dist(0, items_.size() - 1);
  return items_[dist(rng)];
}

LossResult sft_loss(const ToyModel& model, const std::vector<int>& prompt,
                    const std::vector<int>& target) {
  if (target.empty()) throw ValidationError("sft_loss: empty target");
  if (prompt.empty()) throw ValidationError("sft_loss: empty prompt");
  SeqLogProb r = forward_log_prob(model, prompt, target);
  const double n = static_cast<double>(target.size());
  LossResult out;
  out.loss = -r.lp / n;
  const std::vector<double> dlogits = seq_logprob_dlogits(
      r.logits, prompt.size(), target, model.config().vocab_size, -1.0 / n);
  out.grads = model.backward(r.cache, dlogits);
  return out;
}

DpoLossResult dpo_loss(double lp_pol_w, double lp_pol_l, double lp_ref_w,
                       double lp_ref_l, double beta) {
  for (double x : {lp_pol_w, lp_pol_l, lp_ref_w, lp_ref_l})
    if (!std::isfinite(x))
      throw ValidationError("dpo_loss: non-finite log-probability");
  DpoLossResult r;
  r.margin = (lp_pol_w - lp_ref_w) - (lp_pol_l - lp_ref_l);
  r.loss = -log_sigmoid(beta * r.margin);
  return r;
}

namespace {
// One DPO gradient step on a single pair; returns (loss, margin).
DpoLossResult dpo_pair_step(ToyModel& policy, const ToyModel& reference,
                            const PreferencePair& pair, const DpoConfig& cfg) {
  const int V = policy.config().vocab_size;
  SeqLogProb pw = forward_log_prob(policy, pair.prompt, pair.chosen);
  SeqLogProb pl = forward_log_prob(policy, pair.prompt, pair.rejected);
  const double rw = reference.sequence_log_prob(pair.prompt, pair.chosen);
  const double rl = reference.sequence_log_prob(pair.prompt, pair.rejected);
  DpoLossResult r = dpo_loss(pw.lp, pl.lp, rw, rl, cfg.beta);

  // dL/d(lp_w) = -beta * sigmoid(-beta*margin); dL/d(lp_l) is its negation.
  const double coeff = -cfg.beta / (1.0 + std::exp(cfg.beta * r.margin));
  GradMap grads = policy.backward(
      pw.cache,
      seq_logprob_dlogits(pw.logits, pair.prompt.size(), pair.chosen, V, coeff));
  grad_accumulate(
      grads, policy.backward(pl.cache,
                             seq_logprob_dlogits(pl.logits, pair.prompt.size(),
                                                 pair.rejected, V, -coeff)));
  policy.apply_gradients(grads, cfg.learning_rate);
  return r;
}
}  // namespace

ToyModel sft_train(ToyModel model, const std::vector<std::vector<int>>& prompts,
                   const std::vector<std::vector<int>>& targets,
                   const SftConfig& cfg, std::vector<TrainLogRow>* log) {
  if (prompts.empty() || prompts.size() != targets.size())
    throw ValidationError("sft_train: bad dataset");
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      LossResult r = sft_loss(model, prompts[i], targets[i]);
      model.apply_gradients(r.grads, cfg.learning_rate);
      if (log) log->push_back({step, r.loss, 0.0, 0.0});
      ++step;
    }
  }
  return model;
}

ToyModel dpo_train(ToyModel policy, const ToyModel& reference,
                   const std::vector<PreferencePair>& pairs,
                   const DpoConfig& cfg, std::vector<TrainLogRow>* log) {
  if (pairs.empty()) throw ValidationError("dpo_train: empty pair list");
  for (const auto& p : pairs) p.validate(policy.config().max_seq_len);
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0, margin_sum = 0.0;
    for (const auto& pair : pairs) {
      DpoLossResult r = dpo_pair_step(policy, reference, pair, cfg);
      loss_sum += r.loss;
      margin_sum += r.margin;
      ++step;
    }
    if (log)
      log->push_back({step, loss_sum / pairs.size(),
                      margin_sum / pairs.size(), 0.0});
  }
  return policy;
}

ToyModel online_dpo_step(ToyModel policy, const ToyModel& reference,
                         const std::vector<std::vector<int>>& prompts,
                         const Scorer& scorer, const DpoConfig& cfg,
                         const OnlineDpoParams& params, Rng& rng,
                         std::vector<TrainLogRow>* log) {
  if (prompts.empty()) throw ValidationError("online_dpo_step: empty prompts");
  double loss_sum = 0.0, margin_sum = 0.0;
  int updates = 0;
  for (const auto& prompt : prompts) {
    std::vector<int> r1 =
        policy.generate(prompt, params.max_new_tokens, params.temperature, rng);
    std::vector<int> r2 =
        policy.generate(prompt, params.max_new_tokens, params.temperature, rng);
    if (r1.empty() || r2.empty() || r1 == r2) continue;  // tie or degenerate
    const double s1 = scorer(prompt, r1);
    const double s2 = scorer(prompt, r2);
    if (s1 == s2) continue;  // tie
    PreferencePair pair;
    pair.prompt = prompt;
    pair.chosen = s1 > s2 ? r1 : r2;
    pair.rejected = s1 > s2 ? r2 : r1;
    DpoLossResult r = dpo_pair_step(policy, reference, pair, cfg);
    loss_sum += r.loss;
    margin_sum += r.margin;
    ++updates;
  }
  if (log && updates)
    log->push_back({updates, loss_sum / updates, margin_sum / updates, 0.0});
  return policy;
}

double skld(std::span<const double> p, std::span<const double> q, double alpha) {
  if (p.size() != q.size()) throw ValidationError("skld: length mismatch");
  if (!(alpha >= 0.0 && alpha < 1.0))
    throw ValidationError("skld: alpha must be in [0,1)");
  auto check_simplex = [](std::span<const double> v, const char* which) {
    double sum = 0.0;
    for (double x : v) {
      if (x < 0.0)
        throw ValidationError(std::string("skld: negative entry in ") + which);
      sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ValidationError(std::string("skld: ") + which +
                            " does not sum to 1");
  };
  check_simplex(p, "p");
  check_simplex(q, "q");
  double r = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (p[i] == q[i]) continue;  // mixture equals p exactly, zero contribution
    const double m = alpha * p[i] + (1.0 - alpha) * q[i];
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    r += p[i] * std::log(p[i] / m);
  }
  return std::max(r, 0.0);
}

SkldTokenLoss skld_token_loss(const std::vector<double>& student_logits,
                              const std::vector<double>& teacher_logits,
                              int positions, int vocab, double alpha) {
  if (student_logits.size() != teacher_logits.size() ||
      student_logits.size() != static_cast<std::size_t>(positions) * vocab)
    throw ValidationError("skld_token_loss: shape mismatch");
  if (!(alpha >= 0.0 && alpha < 1.0))
    throw ValidationError("skld_token_loss: alpha must be in [0,1)");
  SkldTokenLoss out;
  out.dstudent_logits.assign(student_logits.size(), 0.0);
  for (int t = 0; t < positions; ++t) {
    const std::vector<double> pt =
        softmax_copy(teacher_logits.data() + static_cast<std::size_t>(t) * vocab,
                     vocab);
    const std::vector<double> qs =
        softmax_copy(student_logits.data() + static_cast<std::size_t>(t) * vocab,
                     vocab);
    double g_dot_q = 0.0;
    std::vector<double> g(vocab);
    for (int j = 0; j < vocab; ++j) {
      const double m = alpha * pt[j] + (1.0 - alpha) * qs[j];
      out.loss += pt[j] > 0.0 ? pt[j] * std::log(pt[j] / m) : 0.0;
      g[j] = -(1.0 - alpha) * pt[j] / m;  // d(KL)/d(q_j)
      g_dot_q += g[j] * qs[j];
    }
    double* drow = out.dstudent_logits.data() + static_cast<std::size_t>(t) * vocab;
    for (int j = 0; j < vocab; ++j) drow[j] = qs[j] * (g[j] - g_dot_q);
  }
  out.loss /= positions;
  for (auto& x : out.dstudent_logits) x /= positions;
  return out;
}

std::vector<std::pair<std::vector<int>, std::vector<int>>> distill_generate(
    const ToyModel& teacher, const std::vector<std::vector<int>>& prompts,
    const SamplerParams& params) {
  std::vector<std::pair<std::vector<int>, std::vector<int>>> out;
  Rng rng(params.seed);
  for (const auto& prompt : prompts) {
    std::vector<int> resp =
        teacher.generate(prompt, params.max_new_tokens, params.temperature, rng);
    out.emplace_back(prompt, std::move(resp));
  }
  return out;
}

namespace {
// SKLD training loss over the response positions of prompt++response.
double skld_sequence_step(ToyModel& student, const ToyModel& teacher,
                          const std::vector<int>& prompt,
                          const std::vector<int>& response, double alpha,
                          double lr) {
  if (response.empty()) return 0.0;
  std::vector<int> tokens = prompt;
  tokens.insert(tokens.end(), response.begin(), response.end());
  ForwardCache cache;
  const std::vector<double> s_logits = student.forward(tokens, &cache);
  const std::vector<double> t_logits = teacher.forward(tokens);
  const int V = student.config().vocab_size;
  const int T = static_cast<int>(tokens.size());
  const std::size_t start = prompt.size() - 1;
  const int n_pos = static_cast<int>(response.size());

  std::vector<double> s_rows(static_cast<std::size_t>(n_pos) * V);
  std::vector<double> t_rows(static_cast<std::size_t>(n_pos) * V);
  std::copy_n(s_logits.data() + start * V, s_rows.size(), s_rows.data());
  std::copy_n(t_logits.data() + start * V, t_rows.size(), t_rows.data());
  SkldTokenLoss l = skld_token_loss(s_rows, t_rows, n_pos, V, alpha);

  std::vector<double> dlogits(static_cast<std::size_t>(T) * V, 0.0);
  std::copy_n(l.dstudent_logits.data(), l.dstudent_logits.size(),
              dlogits.data() + start * V);
  GradMap grads = student.backward(cache, dlogits);
  student.apply_gradients(grads, lr);
  return l.loss;
}
}  // namespace

double distill_eval(const ToyModel& student, const ToyModel& teacher,
                    const std::vector<std::vector<int>>& prompts,
                    const SkldConfig& cfg) {
  SamplerParams sp;
  sp.max_new_tokens = cfg.max_new_tokens;
  sp.temperature = 0.0;
  auto pairs = distill_generate(teacher, prompts, sp);
  double total = 0.0;
  int n = 0;
  const int V = student.config().vocab_size;
  for (const auto& [prompt, response] : pairs) {
    if (response.empty()) continue;
    std::vector<int> tokens = prompt;
    tokens.insert(tokens.end(), response.begin(), response.end());
    const std::vector<double> s_logits = student.forward(tokens);
    const std::vector<double> t_logits = teacher.forward(tokens);
    const std::size_t start = prompt.size() - 1;
    const int n_pos = static_cast<int>(response.size());
    std::vector<double> s_rows(static_cast<std::size_t>(n_pos) * V);
    std::vector<double> t_rows(s_rows.size());
    std::copy_n(s_logits.data() + start * V, s_rows.size(), s_rows.data());
    std::copy_n(t_logits.data() + start * V, t_rows.size(), t_rows.data());
    // loss only; discard the gradient
    total += skld_token_loss(s_rows, t_rows, n_pos, V, cfg.alpha).loss;
    ++n;
  }
  return n ? total / n : 0.0;
}

ToyModel distill_train(ToyModel student, const ToyModel& teacher,
                       const std::vector<std::vector<int>>& prompts,
                       const SkldConfig& cfg, std::uint64_t seed,
                       std::vector<TrainLogRow>* log) {
  if (prompts.empty()) throw ValidationError("distill_train: empty prompts");
  if (!(cfg.alpha >= 0.0 && cfg.alpha < 1.0))
    throw ValidationError("distill_train: alpha must be in [0,1)");
  Rng rng(seed);
  ReplayBuffer buffer(static_cast<std::size_t>(cfg.buffer_capacity));
  double sgo_ratio = std::clamp(cfg.sgo_ratio, 0.0, 1.0);
  int step = 0;
  std::size_t prompt_cursor = 0;
  auto next_prompt = [&]() -> const std::vector<int>& {
    const auto& p = prompts[prompt_cursor];
    prompt_cursor = (prompt_cursor + 1) % prompts.size();
    return p;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::size_t steps_per_epoch =
        (prompts.size() + cfg.batch_size - 1) / cfg.batch_size;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const int n_sgo =
          static_cast<int>(std::lround(sgo_ratio * cfg.batch_size));
      double loss_sum = 0.0;
      for (int bi = 0; bi < cfg.batch_size; ++bi) {
        const bool use_sgo = bi < n_sgo;
        std::vector<int> prompt, response;
        if (use_sgo) {
          // refresh the buffer with a fresh student sample, then draw
          const auto& p = next_prompt();
          std::vector<int> fresh = student.generate(p, cfg.max_new_tokens, 1.0, rng);
          if (!fresh.empty()) buffer.push({p, std::move(fresh), epoch});
          if (buffer.size() == 0) continue;
          const auto& item = buffer.sample(rng);
          prompt = item.prompt;
          response = item.response;
        } else {
          prompt = next_prompt();
          Rng trng(seed ^ (0x9e3779b97f4a7c15ULL * (step * cfg.batch_size + bi + 1)));
          response = teacher.generate(prompt, cfg.max_new_tokens, 0.0, trng);
        }
        if (response.empty()) continue;
        loss_sum += skld_sequence_step(student, teacher, prompt, response,
                                       cfg.alpha, cfg.learning_rate);
      }
      if (log)
        log->push_back({step, loss_sum / cfg.batch_size, 0.0, sgo_ratio});
      ++step;
    }
    sgo_ratio = std::clamp(sgo_ratio + cfg.adapt_step, 0.0, 1.0);
  }
  return student;
}

}  // namespace alloyforge

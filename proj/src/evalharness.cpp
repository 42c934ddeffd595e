#include "alloyforge/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace alloyforge {

using nlohmann::json;

void NiahSpec::validate() const {
  if (needle.empty()) throw ValidationError("niah: empty needle");
  if (answer.empty()) throw ValidationError("niah: empty answer");
  if (context_lengths.empty() || depth_fractions.empty())
    throw ValidationError("niah: empty grid axes");
  if (!std::is_sorted(depth_fractions.begin(), depth_fractions.end()))
    throw ValidationError("niah: depth fractions must be sorted ascending");
  for (double d : depth_fractions)
    if (d < 0.0 || d > 1.0)
      throw ValidationError("niah: depth fraction out of [0,1]");
  for (int len : context_lengths)
    if (static_cast<std::size_t>(len) < needle.size() + question.size())
      throw ValidationError("niah: context length too small for needle + question");
  if (filler_corpus.empty())
    throw ValidationError("niah: empty filler corpus");
}

NiahSpec load_niah_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open niah spec: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad niah spec JSON: ") + e.what());
  }
  NiahSpec s;
  s.context_lengths = j.at("context_lengths").get<std::vector<int>>();
  s.depth_fractions = j.at("depth_fractions").get<std::vector<double>>();
  s.needle = j.at("needle").get<std::vector<int>>();
  s.question = j.at("question").get<std::vector<int>>();
  s.answer = j.at("answer").get<std::vector<int>>();
  s.filler_corpus = j.at("filler_corpus").get<std::vector<int>>();
  s.seed = j.value("seed", 0ULL);
  s.trials = j.value("trials", 8);
  s.validate();
  return s;
}

NiahInstance niah_generate(const NiahSpec& spec, int length, double depth,
                           int trial_index) {
  spec.validate();
  if (depth < 0.0 || depth > 1.0)
    throw ValidationError("niah_generate: depth out of [0,1]");
  const int needle_len = static_cast<int>(spec.needle.size());
  if (length < needle_len)
    throw ValidationError("niah_generate: length too small for needle");

  // Filler excludes the needle's first token, so the needle appears exactly
  // once: any occurrence must start at a filler position, and no filler
  // position carries the needle's first token.
  std::vector<int> pool;
  for (int tok : spec.filler_corpus)
    if (tok != spec.needle.front()) pool.push_back(tok);
  if (pool.empty())
    throw ValidationError("niah_generate: filler pool empty after excluding needle prefix");

  std::uint64_t h = spec.seed;
  h = fnv1a64(&length, sizeof(length), h);
  h = fnv1a64(&depth, sizeof(depth), h);
  h = fnv1a64(&trial_index, sizeof(trial_index), h);
  Rng rng(h);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);

  const int start = static_cast<int>(std::lround(depth * (length - needle_len)));
  NiahInstance inst;
  inst.document.resize(length);
  for (int i = 0; i < length; ++i) {
    if (i >= start && i < start + needle_len)
      inst.document[i] = spec.needle[i - start];
    else
      inst.document[i] = pool[pick(rng)];
  }
  inst.expected = spec.answer;
  return inst;
}

int niah_score(const std::vector<int>& model_output,
               const std::vector<int>& expected) {
  if (expected.empty()) throw ValidationError("niah_score: empty expected");
  if (model_output.size() < expected.size()) return 0;
  auto it = std::search(model_output.begin(), model_output.end(),
                        expected.begin(), expected.end());
  return it != model_output.end() ? 1 : 0;
}

std::vector<int> ToyNiahModel::answer(const std::vector<int>& document,
                                      const std::vector<int>& question,
                                      int max_new_tokens) const {
  std::vector<int> input = document;
  input.insert(input.end(), question.begin(), question.end());
  if (static_cast<int>(input.size()) + max_new_tokens >
      model_.config().max_seq_len)
    throw ValidationError("niah: context exceeds model capacity");
  Rng rng(0);
  return model_.generate(input, max_new_tokens, 0.0, rng);  // greedy
}

AccuracyGrid niah_grid(const NiahModel& model, const NiahSpec& spec,
                       int model_max_seq) {
  spec.validate();
  if (model_max_seq > 0) {
    const int max_len =
        *std::max_element(spec.context_lengths.begin(), spec.context_lengths.end());
    if (max_len > model_max_seq)
      throw ValidationError("niah_grid: max context length exceeds model max_seq_len");
  }
  AccuracyGrid grid;
  grid.lengths = spec.context_lengths;
  grid.depths = spec.depth_fractions;
  grid.trials = spec.trials;
  const std::size_t cells = grid.lengths.size() * grid.depths.size();
  grid.accuracy.assign(cells, 0.0);

  const int max_new = static_cast<int>(spec.answer.size());
  std::string error;
#pragma omp parallel for collapse(2) schedule(dynamic)
  for (long long di = 0; di < static_cast<long long>(grid.depths.size()); ++di) {
    for (long long li = 0; li < static_cast<long long>(grid.lengths.size()); ++li) {
      try {
        int hits = 0;
        for (int trial = 0; trial < spec.trials; ++trial) {
          NiahInstance inst = niah_generate(spec, grid.lengths[li],
                                            grid.depths[di], trial);
          const std::vector<int> out =
              model.answer(inst.document, spec.question, max_new);
          hits += niah_score(out, inst.expected);
        }
        grid.accuracy[di * grid.lengths.size() + li] =
            static_cast<double>(hits) / spec.trials;
      } catch (const std::exception& e) {
        #pragma omp critical
        if (error.empty()) error = e.what();
      }
    }
  }
  if (!error.empty()) throw ValidationError("niah_grid: " + error);
  return grid;
}

void AccuracyGrid::write_csv(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ValidationError("cannot open grid CSV for writing: " + path);
  f << "depth,length,accuracy,trials\n";
  f.precision(17);
  for (std::size_t di = 0; di < depths.size(); ++di)
    for (std::size_t li = 0; li < lengths.size(); ++li)
      f << depths[di] << "," << lengths[li] << "," << at(di, li) << ","
        << trials << "\n";
}

std::string format_benchmark_table(
    const std::vector<std::string>& model_names,
    const std::vector<std::string>& benchmark_names,
    const std::vector<std::vector<double>>& scores) {
  if (model_names.empty()) throw ValidationError("table: at least one column required");
  if (scores.size() != benchmark_names.size())
    throw ValidationError("table: row count mismatch");
  std::ostringstream os;
  os << "| Benchmark |";
  for (const auto& m : model_names) os << " " << m << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < model_names.size(); ++i) os << "---|";
  os << "\n";
  for (std::size_t r = 0; r < benchmark_names.size(); ++r) {
    const auto& row = scores[r];
    if (row.size() != model_names.size())
      throw ValidationError("table: column count mismatch in row " +
                            benchmark_names[r]);
    // best bold, second underlined; earlier column wins ties
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
      if (row[c] > row[best]) best = c;
    std::size_t second = row.size();
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c == best) continue;
      if (second == row.size() || row[c] > row[second]) second = c;
    }
    os << "| " << benchmark_names[r] << " |";
    for (std::size_t c = 0; c < row.size(); ++c) {
      std::ostringstream val;
      val.precision(4);
      val << row[c];
      if (c == best)
        os << " **" << val.str() << "** |";
      else if (c == second)
        os << " <u>" << val.str() << "</u> |";
      else
        os << " " << val.str() << " |";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace alloyforge

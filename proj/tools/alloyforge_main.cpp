#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "alloyforge/alignment.hpp"
#include "alloyforge/checkpoint.hpp"
#include "alloyforge/evalharness.hpp"
#include "alloyforge/merge.hpp"
#include "alloyforge/transformer.hpp"

using namespace alloyforge;
using nlohmann::json;

namespace {

std::string file_digest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return "";
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string s = ss.str();
  return hex64(fnv1a64(s.data(), s.size()));
}

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad JSON in ") + path + ": " + e.what());
  }
  return j;
}

struct ManifestWriter {
  std::string subcommand;
  std::string config_digest;
  std::uint64_t seed = 0;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  std::vector<std::string> outputs;

  void emit(const std::string& path) const {
    json m;
    m["subcommand"] = subcommand;
    m["config_digest"] = config_digest;
    m["seed"] = seed;
    m["toolkit_version"] = kToolkitVersion;
    m["wall_time_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    json outs = json::object();
    for (const auto& o : outputs) outs[o] = file_digest(o);
    m["output_digests"] = std::move(outs);
    std::ofstream f(path, std::ios::trunc);
    f << m.dump(2) << "\n";
  }
};

std::uint64_t default_seed() {
  if (const char* env = std::getenv("ALLOYFORGE_SEED"))
    return std::strtoull(env, nullptr, 10);
  return 0;
}

ModelConfig config_from_file_or_toy(const std::string& path) {
  if (path.empty() || path == "toy") return ModelConfig::toy_default();
  const json j = read_json_file(path);
  ModelConfig c = ModelConfig::toy_default();
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.d_ffn = j.value("d_ffn", c.d_ffn);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_kv_heads = j.value("n_kv_heads", c.n_kv_heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.rope_theta = j.value("rope_theta", c.rope_theta);
  c.rmsnorm_eps = j.value("rmsnorm_eps", c.rmsnorm_eps);
  c.swiglu_beta = j.value("swiglu_beta", c.swiglu_beta);
  c.tied_embedding = j.value("tied_embedding", c.tied_embedding);
  c.validate();
  return c;
}

std::vector<std::vector<int>> load_token_lines(const std::string& path,
                                               const char* key = "tokens") {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open: " + path);
  std::vector<std::vector<int>> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(std::string("bad JSONL in ") + path + ": " + e.what());
    }
    out.push_back(j.at(key).get<std::vector<int>>());
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"alloyforge: checkpoint merging, toy-transformer post-training, and long-context evaluation"};
  app.require_subcommand(1);
  std::uint64_t seed = default_seed();
  app.add_option("--seed", seed, "global RNG seed (default from ALLOYFORGE_SEED)");

  // ---- init ----
  auto* init = app.add_subcommand("init", "create a randomly initialized checkpoint");
  std::string init_config = "toy", init_out;
  init->add_option("--config", init_config, "model config JSON, or 'toy'");
  init->add_option("--out", init_out, "output checkpoint")->required();

  // ---- merge ----
  auto* merge = app.add_subcommand("merge", "SLERP-merge two parent checkpoints");
  std::string m_a, m_b, m_sched, m_out, m_report;
  merge->add_option("--a", m_a)->required();
  merge->add_option("--b", m_b)->required();
  merge->add_option("--schedule", m_sched, "JSON schedule file")->required();
  merge->add_option("--out", m_out)->required();
  merge->add_option("--report", m_report, "JSON-lines per-tensor report");

  // ---- train ----
  auto* train = app.add_subcommand("train", "run a training stage (sft|dpo|distill)");
  std::string t_stage, t_model, t_data, t_config, t_out, t_log, t_teacher;
  train->add_option("stage", t_stage, "sft | dpo | distill")->required();
  train->add_option("--model", t_model, "input checkpoint")->required();
  train->add_option("--data", t_data, "JSONL training data")->required();
  train->add_option("--config", t_config, "stage config JSON");
  train->add_option("--out", t_out, "output checkpoint")->required();
  train->add_option("--log", t_log, "CSV training log");
  train->add_option("--teacher", t_teacher, "teacher checkpoint (distill)");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "evaluation (niah-grid | table)");
  std::string e_mode, e_model, e_spec, e_out, e_scores, e_stub;
  eval->add_option("mode", e_mode, "niah-grid | table")->required();
  eval->add_option("--model", e_model, "model checkpoint (niah-grid)");
  eval->add_option("--stub", e_stub, "echo | empty (bypasses --model)");
  eval->add_option("--spec", e_spec, "NIAH spec JSON (niah-grid)");
  eval->add_option("--scores", e_scores, "scores JSON (table)");
  eval->add_option("--out", e_out)->required();

  // ---- inspect ----
  auto* inspect = app.add_subcommand("inspect", "print checkpoint config and tensor stats");
  std::string i_ckpt, i_tensor;
  inspect->add_option("--ckpt", i_ckpt)->required();
  inspect->add_option("--tensor", i_tensor, "restrict to one tensor");

  // let the global --seed appear after the subcommand name too
  for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; }))
    sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  ManifestWriter manifest;
  manifest.seed = seed;

  if (*init) {
    manifest.subcommand = "init";
    manifest.config_digest = init_config == "toy" ? "toy" : file_digest(init_config);
    ToyModel model = ToyModel::random_init(config_from_file_or_toy(init_config), seed);
    write_checkpoint(model.parameters(), init_out);
    manifest.outputs = {init_out};
    manifest.emit(init_out + ".manifest.json");
    return 0;
  }

  if (*merge) {
    manifest.subcommand = "merge";
    manifest.config_digest = file_digest(m_sched);
    const Checkpoint a = read_checkpoint(m_a);
    const Checkpoint b = read_checkpoint(m_b);
    const MergeSchedule sched = load_schedule(m_sched);
    auto [out, report] = merge_checkpoints(a, b, sched);
    write_checkpoint(out, m_out);
    manifest.outputs = {m_out};
    if (!m_report.empty()) {
      report.write_jsonl(m_report);
      manifest.outputs.push_back(m_report);
    }
    manifest.emit(m_out + ".manifest.json");
    return 0;
  }

  if (*train) {
    manifest.subcommand = "train-" + t_stage;
    manifest.config_digest = t_config.empty() ? "" : file_digest(t_config);
    const json cfg = t_config.empty() ? json::object() : read_json_file(t_config);
    ToyModel model(read_checkpoint(t_model));
    std::vector<TrainLogRow> log;

    if (t_stage == "sft") {
      SftConfig c;
      c.learning_rate = cfg.value("learning_rate", c.learning_rate);
      c.epochs = cfg.value("epochs", c.epochs);
      c.max_seq = cfg.value("max_seq", model.config().max_seq_len);
      std::vector<std::vector<int>> prompts, targets;
      for (const auto& seq : load_token_lines(t_data)) {
        if (seq.size() < 2) continue;
        prompts.push_back({seq.front()});
        targets.push_back({seq.begin() + 1, seq.end()});
      }
      model = c.epochs > 0 ? sft_train(std::move(model), prompts, targets, c, &log)
                           : std::move(model);
    } else if (t_stage == "dpo") {
      DpoConfig c;
      c.beta = cfg.value("beta", c.beta);
      c.learning_rate = cfg.value("learning_rate", c.learning_rate);
      c.epochs = cfg.value("epochs", c.epochs);
      const auto pairs = load_preference_pairs(t_data);
      const ToyModel reference = model;  // policy starts as a copy of it
      model = c.epochs > 0
                  ? dpo_train(std::move(model), reference, pairs, c, &log)
                  : std::move(model);
    } else if (t_stage == "distill") {
      if (t_teacher.empty())
        throw ValidationError("train distill requires --teacher");
      SkldConfig c;
      c.alpha = cfg.value("alpha", c.alpha);
      c.sgo_ratio = cfg.value("sgo_ratio", c.sgo_ratio);
      c.buffer_capacity = cfg.value("buffer_capacity", c.buffer_capacity);
      c.adapt_step = cfg.value("adapt_step", c.adapt_step);
      c.learning_rate = cfg.value("learning_rate", c.learning_rate);
      c.epochs = cfg.value("epochs", c.epochs);
      c.batch_size = cfg.value("batch_size", c.batch_size);
      c.max_new_tokens = cfg.value("max_new_tokens", c.max_new_tokens);
      ToyModel teacher(read_checkpoint(t_teacher));
      const auto prompts = load_token_lines(t_data);
      model = c.epochs > 0 ? distill_train(std::move(model), teacher, prompts,
                                           c, seed, &log)
                           : std::move(model);
    } else {
      throw ValidationError("unknown train stage: " + t_stage);
    }

    write_checkpoint(model.parameters(), t_out);
    manifest.outputs = {t_out};
    if (!t_log.empty()) {
      write_train_log(log, t_log);
      manifest.outputs.push_back(t_log);
    }
    manifest.emit(t_out + ".manifest.json");
    return 0;
  }

  if (*eval) {
    manifest.subcommand = "eval-" + e_mode;
    if (e_mode == "niah-grid") {
      if (e_spec.empty()) throw ValidationError("eval niah-grid requires --spec");
      manifest.config_digest = file_digest(e_spec);
      const NiahSpec spec = load_niah_spec(e_spec);
      AccuracyGrid grid;
      if (e_stub == "echo") {
        grid = niah_grid(EchoStub(spec.answer), spec);
      } else if (e_stub == "empty") {
        grid = niah_grid(EmptyStub(), spec);
      } else if (!e_stub.empty()) {
        throw ValidationError("unknown stub: " + e_stub);
      } else {
        if (e_model.empty())
          throw ValidationError("eval niah-grid requires --model or --stub");
        ToyModel model(read_checkpoint(e_model));
        grid = niah_grid(ToyNiahModel(model), spec, model.config().max_seq_len);
      }
      grid.write_csv(e_out);
    } else if (e_mode == "table") {
      if (e_scores.empty()) throw ValidationError("eval table requires --scores");
      manifest.config_digest = file_digest(e_scores);
      const json j = read_json_file(e_scores);
      const std::string table = format_benchmark_table(
          j.at("models").get<std::vector<std::string>>(),
          j.at("benchmarks").get<std::vector<std::string>>(),
          j.at("scores").get<std::vector<std::vector<double>>>());
      std::ofstream f(e_out, std::ios::trunc);
      if (!f) throw ValidationError("cannot open for writing: " + e_out);
      f << table;
    } else {
      throw ValidationError("unknown eval mode: " + e_mode);
    }
    manifest.outputs = {e_out};
    manifest.emit(e_out + ".manifest.json");
    return 0;
  }

  if (*inspect) {
    const Checkpoint ckpt = read_checkpoint(i_ckpt);
    json out;
    out["format_version"] = ckpt.format_version;
    out["config"] = {{"n_layers", ckpt.config.n_layers},
                     {"d_model", ckpt.config.d_model},
                     {"d_ffn", ckpt.config.d_ffn},
                     {"n_heads", ckpt.config.n_heads},
                     {"n_kv_heads", ckpt.config.n_kv_heads},
                     {"vocab_size", ckpt.config.vocab_size},
                     {"max_seq_len", ckpt.config.max_seq_len},
                     {"rope_theta", ckpt.config.rope_theta},
                     {"rmsnorm_eps", ckpt.config.rmsnorm_eps}};
    json tensors = json::object();
    for (const auto& t : ckpt.tensors) {
      if (!i_tensor.empty() && t.name != i_tensor) continue;
      const TensorStats s = tensor_stats(ckpt, t.name);
      tensors[t.name] = {{"dtype", dtype_name(t.dtype)},
                         {"shape", t.shape},
                         {"min", s.min},
                         {"max", s.max},
                         {"mean", s.mean},
                         {"l2_norm", s.l2_norm}};
    }
    if (!i_tensor.empty() && tensors.empty())
      throw ValidationError("unknown tensor: " + i_tensor);
    out["tensors"] = std::move(tensors);
    std::cout << out.dump(2) << "\n";
    return 0;
  }

  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}

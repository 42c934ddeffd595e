#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "alloyforge/common.hpp"

namespace alloyforge {

enum class Dtype { f32, f64 };

const char* dtype_name(Dtype d);
Dtype dtype_from_name(const std::string& s);
std::size_t dtype_size(Dtype d);

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int d_ffn = 224;
  int n_heads = 8;
  int n_kv_heads = 2;
  int vocab_size = 256;
  int max_seq_len = 512;
  double rope_theta = 500000.0;
  double rmsnorm_eps = 1e-5;
  double swiglu_beta = 1.0;
  bool tied_embedding = true;

  int head_dim() const { return d_model / n_heads; }
  int kv_dim() const { return n_kv_heads * head_dim(); }

  // Throws ValidationError on divisibility / positivity violations.
  void validate() const;

  static ModelConfig toy_default() { return ModelConfig{}; }

  bool operator==(const ModelConfig&) const = default;
};

struct TensorRecord {
  std::string name;
  Dtype dtype = Dtype::f64;
  std::vector<std::int64_t> shape;
  std::vector<double> data;  // row-major; held in f64 regardless of dtype

  std::int64_t numel() const;
};

struct TensorStats {
  double min = 0, max = 0, mean = 0, l2_norm = 0;
};

struct Checkpoint {
  std::vector<TensorRecord> tensors;  // iteration order == serialized order
  ModelConfig config;
  int format_version = 1;
  bool allow_nonfinite = false;

  void add(TensorRecord rec);  // throws on duplicate name
  bool has(const std::string& name) const;
  const TensorRecord& at(const std::string& name) const;
  TensorRecord& at(const std::string& name);

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

TensorStats tensor_stats(const Checkpoint& ckpt, const std::string& name);

// Checks that every tensor following the layers.<i>.<block>.<weight> naming
// convention has the shape the config dictates.
void validate_against_config(const Checkpoint& ckpt);

}  // namespace alloyforge

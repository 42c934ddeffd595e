#include "alloyforge/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace alloyforge {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'A', 'L', 'L', 'O', 'Y', 'C', 'K', '1'};
constexpr std::size_t kAlign = 64;
constexpr int kFormatVersion = 1;

std::size_t align_up(std::size_t x) { return (x + kAlign - 1) / kAlign * kAlign; }

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},
              {"d_model", c.d_model},
              {"d_ffn", c.d_ffn},
              {"n_heads", c.n_heads},
              {"n_kv_heads", c.n_kv_heads},
              {"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len},
              {"rope_theta", c.rope_theta},
              {"rmsnorm_eps", c.rmsnorm_eps},
              {"swiglu_beta", c.swiglu_beta},
              {"tied_embedding", c.tied_embedding}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_kv_heads = j.at("n_kv_heads").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.rope_theta = j.at("rope_theta").get<double>();
  c.rmsnorm_eps = j.at("rmsnorm_eps").get<double>();
  c.swiglu_beta = j.value("swiglu_beta", 1.0);
  c.tied_embedding = j.value("tied_embedding", true);
  return c;
}
}  // namespace

const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

Dtype dtype_from_name(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw ValidationError("unknown dtype: " + s);
}

std::size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 8; }

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || d_ffn < 1 || n_heads < 1 ||
      n_kv_heads < 1 || vocab_size < 1 || max_seq_len < 1)
    throw ValidationError("config: all dimensions must be positive");
  if (d_model % n_heads != 0)
    throw ValidationError("config: d_model not divisible by n_heads");
  if (n_heads % n_kv_heads != 0)
    throw ValidationError("config: n_heads not divisible by n_kv_heads");
  if (head_dim() % 2 != 0)
    throw ValidationError("config: head_dim must be even for RoPE pairing");
  if (rope_theta <= 1.0) throw ValidationError("config: rope_theta must be > 1");
  if (rmsnorm_eps <= 0.0) throw ValidationError("config: rmsnorm_eps must be > 0");
}

std::int64_t TensorRecord::numel() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

void Checkpoint::add(TensorRecord rec) {
  if (rec.name.empty()) throw ValidationError("tensor name must be non-empty");
  if (index_.count(rec.name))
    throw ValidationError("duplicate tensor name: " + rec.name);
  for (auto s : rec.shape)
    if (s <= 0) throw ValidationError("non-positive shape entry in " + rec.name);
  if (static_cast<std::int64_t>(rec.data.size()) != rec.numel())
    throw ValidationError("data length does not match shape for " + rec.name);
  index_[rec.name] = tensors.size();
  tensors.push_back(std::move(rec));
}

bool Checkpoint::has(const std::string& name) const {
  return index_.count(name) != 0;
}

const TensorRecord& Checkpoint::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown tensor: " + name);
  return tensors[it->second];
}

TensorRecord& Checkpoint::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown tensor: " + name);
  return tensors[it->second];
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  if (!ckpt.allow_nonfinite) {
    for (const auto& t : ckpt.tensors)
      for (double v : t.data)
        if (!std::isfinite(v))
          throw ValidationError("non-finite element in tensor " + t.name);
  }

  json index;
  index["format_version"] = ckpt.format_version;
  index["config"] = config_to_json(ckpt.config);
  if (ckpt.allow_nonfinite) index["allow_nonfinite"] = true;
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    offset = align_up(offset);
    const std::size_t nbytes = t.data.size() * dtype_size(t.dtype);
    tensors.push_back(json{{"name", t.name},
                           {"dtype", dtype_name(t.dtype)},
                           {"shape", t.shape},
                           {"offset", offset},
                           {"nbytes", nbytes}});
    offset += nbytes;
  }
  index["tensors"] = std::move(tensors);
  const std::string idx = index.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot open for writing: " + path);
  f.write(kMagic, 8);
  const std::uint64_t n = idx.size();
  f.write(reinterpret_cast<const char*>(&n), 8);
  f.write(idx.data(), static_cast<std::streamsize>(idx.size()));

  std::size_t pos = 0;
  std::vector<char> pad(kAlign, 0);
  for (const auto& t : ckpt.tensors) {
    const std::size_t aligned = align_up(pos);
    if (aligned > pos) f.write(pad.data(), static_cast<std::streamsize>(aligned - pos));
    pos = aligned;
    if (t.dtype == Dtype::f32) {
      std::vector<float> buf(t.data.size());
      for (std::size_t i = 0; i < t.data.size(); ++i)
        buf[i] = static_cast<float>(t.data[i]);
      f.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * 4));
      pos += buf.size() * 4;
    } else {
      f.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * 8));
      pos += t.data.size() * 8;
    }
  }
  if (!f) throw ValidationError("write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open: " + path);
  f.seekg(0, std::ios::end);
  const std::uint64_t file_size = static_cast<std::uint64_t>(f.tellg());
  f.seekg(0);

  char magic[8];
  if (file_size < 16 || !f.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw ValidationError("bad magic in " + path);
  std::uint64_t idx_len = 0;
  f.read(reinterpret_cast<char*>(&idx_len), 8);
  if (16 + idx_len > file_size)
    throw ValidationError("truncated index in " + path);
  std::string idx(idx_len, '\0');
  f.read(idx.data(), static_cast<std::streamsize>(idx_len));

  json index;
  try {
    index = json::parse(idx);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("corrupt index JSON: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.format_version = index.at("format_version").get<int>();
  if (ckpt.format_version != kFormatVersion)
    throw ValidationError("unsupported format_version " +
                          std::to_string(ckpt.format_version));
  ckpt.config = config_from_json(index.at("config"));
  ckpt.allow_nonfinite = index.value("allow_nonfinite", false);

  const std::uint64_t payload_start = 16 + idx_len;
  const std::uint64_t payload_size = file_size - payload_start;
  for (const auto& jt : index.at("tensors")) {
    TensorRecord t;
    t.name = jt.at("name").get<std::string>();
    t.dtype = dtype_from_name(jt.at("dtype").get<std::string>());
    t.shape = jt.at("shape").get<std::vector<std::int64_t>>();
    const std::uint64_t offset = jt.at("offset").get<std::uint64_t>();
    const std::uint64_t nbytes = jt.at("nbytes").get<std::uint64_t>();
    if (offset + nbytes > payload_size)
      throw ValidationError("truncated payload: tensor " + t.name +
                            " extends past end of file");
    if (nbytes != static_cast<std::uint64_t>(t.numel()) * dtype_size(t.dtype))
      throw ValidationError("nbytes/shape mismatch for " + t.name);
    f.seekg(static_cast<std::streamoff>(payload_start + offset));
    t.data.resize(static_cast<std::size_t>(t.numel()));
    if (t.dtype == Dtype::f32) {
      std::vector<float> buf(t.data.size());
      f.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(nbytes));
      for (std::size_t i = 0; i < buf.size(); ++i) t.data[i] = buf[i];
    } else {
      f.read(reinterpret_cast<char*>(t.data.data()),
             static_cast<std::streamsize>(nbytes));
    }
    if (!f) throw ValidationError("read failed for tensor " + t.name);
    ckpt.add(std::move(t));  // rejects duplicates
  }
  if (!ckpt.allow_nonfinite) {
    for (const auto& t : ckpt.tensors)
      for (double v : t.data)
        if (!std::isfinite(v))
          throw ValidationError("non-finite element in tensor " + t.name);
  }
  return ckpt;
}

TensorStats tensor_stats(const Checkpoint& ckpt, const std::string& name) {
  const TensorRecord& t = ckpt.at(name);
  TensorStats s;
  if (t.data.empty()) return s;
  s.min = std::numeric_limits<double>::infinity();
  s.max = -std::numeric_limits<double>::infinity();
  double sum = 0.0, sq = 0.0;
  for (double v : t.data) {
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
    sum += v;
    sq += v * v;
  }
  s.mean = sum / static_cast<double>(t.data.size());
  s.l2_norm = std::sqrt(sq);
  return s;
}

void validate_against_config(const Checkpoint& ckpt) {
  const ModelConfig& c = ckpt.config;
  c.validate();
  const std::int64_t d = c.d_model, f = c.d_ffn, v = c.vocab_size,
                     kv = c.kv_dim();
  auto expect = [&](const std::string& name,
                    std::vector<std::int64_t> want) {
    if (!ckpt.has(name)) return;
    const auto& got = ckpt.at(name).shape;
    if (got != want) {
      std::string msg = "tensor " + name + " shape mismatch: expected (";
      for (auto x : want) msg += std::to_string(x) + ",";
      msg += ") got (";
      for (auto x : got) msg += std::to_string(x) + ",";
      msg += ")";
      throw ValidationError(msg);
    }
  };
  expect("tok_embed", {v, d});
  expect("final.norm", {d});
  expect("output.w", {v, d});
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind("layers.", 0) != 0) continue;
    const auto dot1 = t.name.find('.', 7);
    if (dot1 == std::string::npos)
      throw ValidationError("malformed layer tensor name: " + t.name);
    int layer = -1;
    try {
      layer = std::stoi(t.name.substr(7, dot1 - 7));
    } catch (...) {
      throw ValidationError("malformed layer index in: " + t.name);
    }
    if (layer < 0 || layer >= c.n_layers)
      throw ValidationError("layer index out of range in: " + t.name);
    const std::string rest = t.name.substr(dot1 + 1);
    if (rest == "attn.norm" || rest == "ffn.norm") expect(t.name, {d});
    else if (rest == "attn.wq" || rest == "attn.wo") expect(t.name, {d, d});
    else if (rest == "attn.wk" || rest == "attn.wv") expect(t.name, {d, kv});
    else if (rest == "ffn.w_gate" || rest == "ffn.w_up") expect(t.name, {d, f});
    else if (rest == "ffn.w_down") expect(t.name, {f, d});
  }
}

}  // namespace alloyforge

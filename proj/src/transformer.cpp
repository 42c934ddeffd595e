#include "alloyforge/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "alloyforge/kernels.hpp"

namespace alloyforge {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::vector<std::string> param_names(const ModelConfig& c) {
  std::vector<std::string> names;
  names.push_back("tok_embed");
  for (int i = 0; i < c.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    for (const char* s : {"attn.norm", "attn.wq", "attn.wk", "attn.wv",
                          "attn.wo", "ffn.norm", "ffn.w_gate", "ffn.w_up",
                          "ffn.w_down"})
      names.push_back(p + s);
  }
  names.push_back("final.norm");
  if (!c.tied_embedding) names.push_back("output.w");
  return names;
}

std::vector<std::int64_t> param_shape(const ModelConfig& c,
                                      const std::string& name) {
  const std::int64_t d = c.d_model, f = c.d_ffn, v = c.vocab_size,
                     kv = c.kv_dim();
  if (name == "tok_embed" || name == "output.w") return {v, d};
  if (name == "final.norm") return {d};
  const std::string rest = name.substr(name.find('.', 7) + 1);
  if (rest == "attn.norm" || rest == "ffn.norm") return {d};
  if (rest == "attn.wq" || rest == "attn.wo") return {d, d};
  if (rest == "attn.wk" || rest == "attn.wv") return {d, kv};
  if (rest == "ffn.w_gate" || rest == "ffn.w_up") return {d, f};
  return {f, d};  // ffn.w_down
}

// rmsnorm over each row of x (rows, d), writing into out.
void rmsnorm_rows(const double* x, const double* gain, double eps, int rows,
                  int d, double* out) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + static_cast<std::size_t>(r) * d;
    double* yr = out + static_cast<std::size_t>(r) * d;
    double sq = 0.0;
    for (int i = 0; i < d; ++i) sq += xr[i] * xr[i];
    const double inv = 1.0 / std::sqrt(sq / d + eps);
    for (int i = 0; i < d; ++i) yr[i] = gain[i] * xr[i] * inv;
  }
}

// dy -> dx (added into dx), dgain accumulated.
void rmsnorm_rows_backward(const double* x, const double* gain, double eps,
                           int rows, int d, const double* dy, double* dx,
                           double* dgain) {
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + static_cast<std::size_t>(r) * d;
    const double* dyr = dy + static_cast<std::size_t>(r) * d;
    double* dxr = dx + static_cast<std::size_t>(r) * d;
    double sq = 0.0;
    for (int i = 0; i < d; ++i) sq += xr[i] * xr[i];
    const double r2 = sq / d + eps;
    const double inv = 1.0 / std::sqrt(r2);
    double dot_ux = 0.0;
    for (int i = 0; i < d; ++i) dot_ux += dyr[i] * gain[i] * xr[i];
    const double coef = dot_ux * inv / (r2 * d);
    for (int i = 0; i < d; ++i) {
      dxr[i] += dyr[i] * gain[i] * inv - xr[i] * coef;
      dgain[i] += dyr[i] * xr[i] * inv;
    }
  }
}

}  // namespace

RopeCache RopeCache::build(double rope_theta, int head_dim, int max_pos) {
  RopeCache c;
  c.head_dim = head_dim;
  c.max_pos = max_pos;
  const int half = head_dim / 2;
  c.cos_tab.resize(static_cast<std::size_t>(max_pos) * half);
  c.sin_tab.resize(static_cast<std::size_t>(max_pos) * half);
  for (int pos = 0; pos < max_pos; ++pos)
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(rope_theta, -2.0 * i / head_dim);
      const double angle = pos * freq;
      c.cos_tab[static_cast<std::size_t>(pos) * half + i] = std::cos(angle);
      c.sin_tab[static_cast<std::size_t>(pos) * half + i] = std::sin(angle);
    }
  return c;
}

std::vector<double> rmsnorm(std::span<const double> x,
                            std::span<const double> gain, double eps) {
  std::vector<double> out(x.size());
  rmsnorm_rows(x.data(), gain.data(), eps, 1, static_cast<int>(x.size()),
               out.data());
  return out;
}

std::vector<double> swiglu_ffn(std::span<const double> x,
                               std::span<const double> w_gate,
                               std::span<const double> w_up,
                               std::span<const double> w_down, int d_model,
                               int d_ffn, double beta) {
  std::vector<double> gate(d_ffn), up(d_ffn), out(d_model);
  kernels::matmul(x.data(), w_gate.data(), gate.data(), 1, d_model, d_ffn);
  kernels::matmul(x.data(), w_up.data(), up.data(), 1, d_model, d_ffn);
  for (int i = 0; i < d_ffn; ++i)
    gate[i] = gate[i] * sigmoid(beta * gate[i]) * up[i];
  kernels::matmul(gate.data(), w_down.data(), out.data(), 1, d_ffn, d_model);
  return out;
}

void rope_apply(std::vector<double>& heads, int seq, int n_heads, int head_dim,
                const std::vector<int>& positions, const RopeCache& cache) {
  const int half = head_dim / 2;
  for (int pos : positions)
    if (pos < 0 || pos >= cache.max_pos)
      throw ValidationError("rope: position out of cache range");
#pragma omp parallel for schedule(static)
  for (int t = 0; t < seq; ++t) {
    const int pos = positions[t];
    const double* ct = cache.cos_tab.data() + static_cast<std::size_t>(pos) * half;
    const double* st = cache.sin_tab.data() + static_cast<std::size_t>(pos) * half;
    for (int h = 0; h < n_heads; ++h) {
      double* v = heads.data() +
                  (static_cast<std::size_t>(t) * n_heads + h) * head_dim;
      for (int i = 0; i < half; ++i) {
        const double a = v[2 * i], b = v[2 * i + 1];
        v[2 * i] = a * ct[i] - b * st[i];
        v[2 * i + 1] = a * st[i] + b * ct[i];
      }
    }
  }
}

std::vector<double> gqa_attention(const std::vector<double>& q,
                                  const std::vector<double>& k,
                                  const std::vector<double>& v, int seq,
                                  int n_heads, int n_kv_heads, int head_dim,
                                  bool causal, std::vector<double>* probs_out) {
  if (n_heads % n_kv_heads != 0)
    throw ValidationError("gqa: n_heads not divisible by n_kv_heads");
  const std::size_t qd = static_cast<std::size_t>(n_heads) * head_dim;
  const std::size_t kvd = static_cast<std::size_t>(n_kv_heads) * head_dim;
  if (q.size() != static_cast<std::size_t>(seq) * qd ||
      k.size() != static_cast<std::size_t>(seq) * kvd || k.size() != v.size())
    throw ValidationError("gqa: shape mismatch");
  const int group = n_heads / n_kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<double> out(q.size(), 0.0);
  if (probs_out)
    probs_out->assign(static_cast<std::size_t>(n_heads) * seq * seq, 0.0);

#pragma omp parallel for collapse(2) schedule(static)
  for (int h = 0; h < n_heads; ++h) {
    for (int t = 0; t < seq; ++t) {
      const int kvh = h / group;
      const double* qt = q.data() + (static_cast<std::size_t>(t) * n_heads + h) * head_dim;
      const int limit = causal ? t + 1 : seq;
      std::vector<double> row(limit);
      for (int u = 0; u < limit; ++u) {
        const double* ku = k.data() + (static_cast<std::size_t>(u) * n_kv_heads + kvh) * head_dim;
        double s = 0.0;
        for (int i = 0; i < head_dim; ++i) s += qt[i] * ku[i];
        row[u] = s * scale;
      }
      kernels::softmax_row(row.data(), limit);
      double* ot = out.data() + (static_cast<std::size_t>(t) * n_heads + h) * head_dim;
      for (int u = 0; u < limit; ++u) {
        const double* vu = v.data() + (static_cast<std::size_t>(u) * n_kv_heads + kvh) * head_dim;
        for (int i = 0; i < head_dim; ++i) ot[i] += row[u] * vu[i];
      }
      if (probs_out) {
        double* pr = probs_out->data() +
                     (static_cast<std::size_t>(h) * seq + t) * seq;
        std::copy(row.begin(), row.end(), pr);
      }
    }
  }
  return out;
}

ToyModel::ToyModel(Checkpoint params) : params_(std::move(params)) {
  params_.config.validate();
  validate_against_config(params_);
  for (const auto& name : param_names(params_.config)) {
    if (!params_.has(name))
      throw ValidationError("model parameter missing: " + name);
    if (params_.at(name).shape != param_shape(params_.config, name))
      throw ValidationError("model parameter has wrong shape: " + name);
  }
  rope_ = RopeCache::build(params_.config.rope_theta, params_.config.head_dim(),
                           params_.config.max_seq_len);
}

ToyModel ToyModel::random_init(const ModelConfig& cfg, std::uint64_t seed,
                               double scale) {
  cfg.validate();
  Rng rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Checkpoint ckpt;
  ckpt.config = cfg;
  for (const auto& name : param_names(cfg)) {
    TensorRecord t;
    t.name = name;
    t.dtype = Dtype::f64;
    t.shape = param_shape(cfg, name);
    t.data.resize(static_cast<std::size_t>(t.numel()));
    const bool is_norm = name.ends_with(".norm");
    for (auto& x : t.data) x = is_norm ? 1.0 : dist(rng);
    ckpt.add(std::move(t));
  }
  return ToyModel(std::move(ckpt));
}

std::vector<double> ToyModel::forward(const std::vector<int>& tokens,
                                      ForwardCache* cache) const {
  const ModelConfig& c = params_.config;
  const int T = static_cast<int>(tokens.size());
  if (T == 0) throw ValidationError("forward: empty token sequence");
  if (T > c.max_seq_len) throw ValidationError("forward: sequence too long");
  for (int id : tokens)
    if (id < 0 || id >= c.vocab_size)
      throw ValidationError("forward: token id out of range");

  const int d = c.d_model, H = c.n_heads, KH = c.n_kv_heads,
            hd = c.head_dim(), kvd = c.kv_dim(), F = c.d_ffn,
            V = c.vocab_size;
  std::vector<int> positions(T);
  for (int t = 0; t < T; ++t) positions[t] = t;

  const auto& embed = params_.at("tok_embed").data;
  std::vector<double> x(static_cast<std::size_t>(T) * d);
  for (int t = 0; t < T; ++t)
    std::copy_n(embed.data() + static_cast<std::size_t>(tokens[t]) * d, d,
                x.data() + static_cast<std::size_t>(t) * d);

  if (cache) {
    cache->tokens = tokens;
    cache->layers.assign(c.n_layers, {});
  }

  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const auto& g_attn = params_.at(p + "attn.norm").data;
    const auto& wq = params_.at(p + "attn.wq").data;
    const auto& wk = params_.at(p + "attn.wk").data;
    const auto& wv = params_.at(p + "attn.wv").data;
    const auto& wo = params_.at(p + "attn.wo").data;
    const auto& g_ffn = params_.at(p + "ffn.norm").data;
    const auto& wg = params_.at(p + "ffn.w_gate").data;
    const auto& wu = params_.at(p + "ffn.w_up").data;
    const auto& wd = params_.at(p + "ffn.w_down").data;

    std::vector<double> normed(static_cast<std::size_t>(T) * d);
    rmsnorm_rows(x.data(), g_attn.data(), c.rmsnorm_eps, T, d, normed.data());

    std::vector<double> q(static_cast<std::size_t>(T) * d);
    std::vector<double> k(static_cast<std::size_t>(T) * kvd);
    std::vector<double> v(static_cast<std::size_t>(T) * kvd);
    kernels::matmul(normed.data(), wq.data(), q.data(), T, d, d);
    kernels::matmul(normed.data(), wk.data(), k.data(), T, d, kvd);
    kernels::matmul(normed.data(), wv.data(), v.data(), T, d, kvd);
    rope_apply(q, T, H, hd, positions, rope_);
    rope_apply(k, T, KH, hd, positions, rope_);

    std::vector<double> probs;
    std::vector<double> ctx = gqa_attention(q, k, v, T, H, KH, hd, true,
                                            cache ? &probs : nullptr);

    std::vector<double> attn_out(static_cast<std::size_t>(T) * d);
    kernels::matmul(ctx.data(), wo.data(), attn_out.data(), T, d, d);
    std::vector<double> x_mid(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) x_mid[i] = x[i] + attn_out[i];

    std::vector<double> ffn_normed(static_cast<std::size_t>(T) * d);
    rmsnorm_rows(x_mid.data(), g_ffn.data(), c.rmsnorm_eps, T, d,
                 ffn_normed.data());
    std::vector<double> gate_pre(static_cast<std::size_t>(T) * F);
    std::vector<double> up(static_cast<std::size_t>(T) * F);
    kernels::matmul(ffn_normed.data(), wg.data(), gate_pre.data(), T, d, F);
    kernels::matmul(ffn_normed.data(), wu.data(), up.data(), T, d, F);
    std::vector<double> act(gate_pre.size());
    for (std::size_t i = 0; i < act.size(); ++i)
      act[i] = gate_pre[i] * sigmoid(c.swiglu_beta * gate_pre[i]) * up[i];
    std::vector<double> ffn_out(static_cast<std::size_t>(T) * d);
    kernels::matmul(act.data(), wd.data(), ffn_out.data(), T, F, d);

    std::vector<double> x_out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) x_out[i] = x_mid[i] + ffn_out[i];

    if (cache) {
      LayerActs& a = cache->layers[l];
      a.x_in = std::move(x);
      a.attn_normed = std::move(normed);
      a.q = std::move(q);
      a.k = std::move(k);
      a.v = std::move(v);
      a.attn_probs = std::move(probs);
      a.attn_ctx = std::move(ctx);
      a.x_mid = std::move(x_mid);
      a.ffn_normed = std::move(ffn_normed);
      a.gate_pre = std::move(gate_pre);
      a.up = std::move(up);
      a.ffn_act = std::move(act);
    }
    x = std::move(x_out);
  }

  std::vector<double> final_normed(static_cast<std::size_t>(T) * d);
  rmsnorm_rows(x.data(), params_.at("final.norm").data.data(), c.rmsnorm_eps,
               T, d, final_normed.data());

  const auto& out_w =
      c.tied_embedding ? params_.at("tok_embed").data : params_.at("output.w").data;
  std::vector<double> logits(static_cast<std::size_t>(T) * V);
  kernels::matmul_bt(final_normed.data(), out_w.data(), logits.data(), T, V, d);

  for (double z : logits)
    if (!std::isfinite(z))
      throw ValidationError("forward: non-finite logit");

  if (cache) {
    cache->x_final = std::move(x);
    cache->final_normed = std::move(final_normed);
  }
  return logits;
}

double ToyModel::sequence_log_prob(const std::vector<int>& prompt,
                                   const std::vector<int>& response) const {
  if (prompt.empty()) throw ValidationError("sequence_log_prob: empty prompt");
  if (response.empty())
    throw ValidationError("sequence_log_prob: empty response");
  std::vector<int> tokens = prompt;
  tokens.insert(tokens.end(), response.begin(), response.end());
  const std::vector<double> logits = forward(tokens);
  const int V = params_.config.vocab_size;
  double lp = 0.0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    const std::size_t pos = prompt.size() - 1 + i;
    const double* row = logits.data() + pos * V;
    double m = row[0];
    for (int j = 1; j < V; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (int j = 0; j < V; ++j) z += std::exp(row[j] - m);
    lp += row[response[i]] - m - std::log(z);
  }
  return lp;
}

GradMap zero_grads_like(const Checkpoint& params) {
  GradMap g;
  for (const auto& t : params.tensors)
    g[t.name] = std::vector<double>(t.data.size(), 0.0);
  return g;
}

void grad_accumulate(GradMap& into, const GradMap& from, double scale) {
  for (const auto& [name, g] : from) {
    auto& dst = into[name];
    if (dst.empty()) dst.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += scale * g[i];
  }
}

GradMap ToyModel::backward(const ForwardCache& cache,
                           const std::vector<double>& dlogits) const {
  const ModelConfig& c = params_.config;
  const int T = static_cast<int>(cache.tokens.size());
  const int d = c.d_model, H = c.n_heads, KH = c.n_kv_heads,
            hd = c.head_dim(), kvd = c.kv_dim(), F = c.d_ffn,
            V = c.vocab_size;
  if (static_cast<int>(cache.layers.size()) != c.n_layers ||
      cache.final_normed.size() != static_cast<std::size_t>(T) * d)
    throw ValidationError("backward: stale or missing forward cache");
  if (dlogits.size() != static_cast<std::size_t>(T) * V)
    throw ValidationError("backward: dlogits shape mismatch");

  GradMap grads = zero_grads_like(params_);

  // Output projection (possibly tied to the embedding).
  const std::string out_name = c.tied_embedding ? "tok_embed" : "output.w";
  const auto& out_w = params_.at(out_name).data;
  std::vector<double> dfinal_normed(static_cast<std::size_t>(T) * d);
  kernels::matmul(dlogits.data(), out_w.data(), dfinal_normed.data(), T, V, d);
  kernels::matmul_at_acc(dlogits.data(), cache.final_normed.data(),
                         grads[out_name].data(), T, V, d);

  std::vector<double> dx(static_cast<std::size_t>(T) * d, 0.0);
  rmsnorm_rows_backward(cache.x_final.data(),
                        params_.at("final.norm").data.data(), c.rmsnorm_eps, T,
                        d, dfinal_normed.data(), dx.data(),
                        grads["final.norm"].data());

  const int group = H / KH;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const int half = hd / 2;

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const LayerActs& a = cache.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    const auto& wq = params_.at(p + "attn.wq").data;
    const auto& wk = params_.at(p + "attn.wk").data;
    const auto& wv = params_.at(p + "attn.wv").data;
    const auto& wo = params_.at(p + "attn.wo").data;
    const auto& wg = params_.at(p + "ffn.w_gate").data;
    const auto& wu = params_.at(p + "ffn.w_up").data;
    const auto& wd = params_.at(p + "ffn.w_down").data;

    // FFN block: x_out = x_mid + swiglu(ffn_normed) Wd
    std::vector<double> dact(static_cast<std::size_t>(T) * F);
    kernels::matmul_bt(dx.data(), wd.data(), dact.data(), T, F, d);
    kernels::matmul_at_acc(a.ffn_act.data(), dx.data(),
                           grads[p + "ffn.w_down"].data(), T, F, d);

    std::vector<double> dgate_pre(dact.size()), dup(dact.size());
    for (std::size_t i = 0; i < dact.size(); ++i) {
      const double z = a.gate_pre[i];
      const double s = sigmoid(c.swiglu_beta * z);
      const double swish = z * s;
      dup[i] = dact[i] * swish;
      dgate_pre[i] = dact[i] * a.up[i] * (s + c.swiglu_beta * z * s * (1.0 - s));
    }
    std::vector<double> dffn_normed(static_cast<std::size_t>(T) * d);
    kernels::matmul_bt(dgate_pre.data(), wg.data(), dffn_normed.data(), T, d, F);
    {
      std::vector<double> tmp(dffn_normed.size());
      kernels::matmul_bt(dup.data(), wu.data(), tmp.data(), T, d, F);
      for (std::size_t i = 0; i < tmp.size(); ++i) dffn_normed[i] += tmp[i];
    }
    kernels::matmul_at_acc(a.ffn_normed.data(), dgate_pre.data(),
                           grads[p + "ffn.w_gate"].data(), T, d, F);
    kernels::matmul_at_acc(a.ffn_normed.data(), dup.data(),
                           grads[p + "ffn.w_up"].data(), T, d, F);

    // dx currently holds d(x_out); residual passes it straight to x_mid.
    std::vector<double> dx_mid = dx;
    rmsnorm_rows_backward(a.x_mid.data(), params_.at(p + "ffn.norm").data.data(),
                          c.rmsnorm_eps, T, d, dffn_normed.data(),
                          dx_mid.data(), grads[p + "ffn.norm"].data());

    // Attention block: x_mid = x_in + ctx Wo
    std::vector<double> dctx(static_cast<std::size_t>(T) * d);
    kernels::matmul_bt(dx_mid.data(), wo.data(), dctx.data(), T, d, d);
    kernels::matmul_at_acc(a.attn_ctx.data(), dx_mid.data(),
                           grads[p + "attn.wo"].data(), T, d, d);

    std::vector<double> dq(static_cast<std::size_t>(T) * d, 0.0);
    std::vector<double> dk(static_cast<std::size_t>(T) * kvd, 0.0);
    std::vector<double> dv(static_cast<std::size_t>(T) * kvd, 0.0);
    for (int h = 0; h < H; ++h) {
      const int kvh = h / group;
      const double* probs = a.attn_probs.data() +
                            static_cast<std::size_t>(h) * T * T;
      for (int t = 0; t < T; ++t) {
        const double* pr = probs + static_cast<std::size_t>(t) * T;
        const double* dctx_t = dctx.data() +
                               (static_cast<std::size_t>(t) * H + h) * hd;
        // dP and the softmax Jacobian over the causal row 0..t
        double dot_pp = 0.0;
        std::vector<double> dp(t + 1);
        for (int u = 0; u <= t; ++u) {
          const double* vu = a.v.data() +
                             (static_cast<std::size_t>(u) * KH + kvh) * hd;
          double s = 0.0;
          for (int i = 0; i < hd; ++i) s += dctx_t[i] * vu[i];
          dp[u] = s;
          dot_pp += s * pr[u];
          double* dvu = dv.data() + (static_cast<std::size_t>(u) * KH + kvh) * hd;
          for (int i = 0; i < hd; ++i) dvu[i] += pr[u] * dctx_t[i];
        }
        const double* qt = a.q.data() + (static_cast<std::size_t>(t) * H + h) * hd;
        double* dqt = dq.data() + (static_cast<std::size_t>(t) * H + h) * hd;
        for (int u = 0; u <= t; ++u) {
          const double ds = pr[u] * (dp[u] - dot_pp) * scale;
          const double* ku = a.k.data() +
                             (static_cast<std::size_t>(u) * KH + kvh) * hd;
          double* dku = dk.data() + (static_cast<std::size_t>(u) * KH + kvh) * hd;
          for (int i = 0; i < hd; ++i) {
            dqt[i] += ds * ku[i];
            dku[i] += ds * qt[i];
          }
        }
      }
    }

    // RoPE backward: rotate gradients by the negative angle.
    auto unrotate = [&](std::vector<double>& g, int n_h) {
      for (int t = 0; t < T; ++t) {
        const double* ct = rope_.cos_tab.data() + static_cast<std::size_t>(t) * half;
        const double* st = rope_.sin_tab.data() + static_cast<std::size_t>(t) * half;
        for (int h = 0; h < n_h; ++h) {
          double* v = g.data() + (static_cast<std::size_t>(t) * n_h + h) * hd;
          for (int i = 0; i < half; ++i) {
            const double x0 = v[2 * i], x1 = v[2 * i + 1];
            v[2 * i] = x0 * ct[i] + x1 * st[i];
            v[2 * i + 1] = -x0 * st[i] + x1 * ct[i];
          }
        }
      }
    };
    unrotate(dq, H);
    unrotate(dk, KH);

    std::vector<double> dnormed(static_cast<std::size_t>(T) * d);
    kernels::matmul_bt(dq.data(), wq.data(), dnormed.data(), T, d, d);
    {
      std::vector<double> tmp(dnormed.size());
      kernels::matmul_bt(dk.data(), wk.data(), tmp.data(), T, d, kvd);
      for (std::size_t i = 0; i < tmp.size(); ++i) dnormed[i] += tmp[i];
      kernels::matmul_bt(dv.data(), wv.data(), tmp.data(), T, d, kvd);
      for (std::size_t i = 0; i < tmp.size(); ++i) dnormed[i] += tmp[i];
    }
    kernels::matmul_at_acc(a.attn_normed.data(), dq.data(),
                           grads[p + "attn.wq"].data(), T, d, d);
    kernels::matmul_at_acc(a.attn_normed.data(), dk.data(),
                           grads[p + "attn.wk"].data(), T, d, kvd);
    kernels::matmul_at_acc(a.attn_normed.data(), dv.data(),
                           grads[p + "attn.wv"].data(), T, d, kvd);

    std::vector<double> dx_in = dx_mid;
    rmsnorm_rows_backward(a.x_in.data(), params_.at(p + "attn.norm").data.data(),
                          c.rmsnorm_eps, T, d, dnormed.data(), dx_in.data(),
                          grads[p + "attn.norm"].data());
    dx = std::move(dx_in);
  }

  auto& dembed = grads["tok_embed"];
  for (int t = 0; t < T; ++t) {
    const double* dxt = dx.data() + static_cast<std::size_t>(t) * d;
    double* row = dembed.data() + static_cast<std::size_t>(cache.tokens[t]) * d;
    for (int i = 0; i < d; ++i) row[i] += dxt[i];
  }
  return grads;
}

void ToyModel::apply_gradients(const GradMap& grads, double lr) {
  for (auto& t : params_.tensors) {
    auto it = grads.find(t.name);
    if (it == grads.end()) continue;
    const auto& g = it->second;
    if (g.size() != t.data.size())
      throw ValidationError("gradient shape mismatch for " + t.name);
    for (std::size_t i = 0; i < g.size(); ++i) t.data[i] -= lr * g[i];
  }
}

std::vector<int> ToyModel::generate(const std::vector<int>& prompt, int max_new,
                                    double temperature, Rng& rng) const {
  if (prompt.empty()) throw ValidationError("generate: empty prompt");
  const int V = params_.config.vocab_size;
  std::vector<int> tokens = prompt;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(tokens.size()) >= params_.config.max_seq_len) break;
    const std::vector<double> logits = forward(tokens);
    const double* row = logits.data() + (tokens.size() - 1) * V;
    int next = 0;
    if (temperature <= 0.0) {
      for (int j = 1; j < V; ++j)
        if (row[j] > row[next]) next = j;
    } else {
      std::vector<double> probs(row, row + V);
      for (auto& z : probs) z /= temperature;
      kernels::softmax_row(probs.data(), V);
      std::uniform_real_distribution<double> uni(0.0, 1.0);
      double u = uni(rng), acc = 0.0;
      next = V - 1;
      for (int j = 0; j < V; ++j) {
        acc += probs[j];
        if (u < acc) {
          next = j;
          break;
        }
      }
    }
    tokens.push_back(next);
    out.push_back(next);
  }
  return out;
}

}  // namespace alloyforge

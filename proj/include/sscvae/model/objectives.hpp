#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sscvae/core/tensor.hpp"
#include "sscvae/model/bundle.hpp"

namespace sscvae::model {

enum class KlSign { kPlus, kMinus };

inline KlSign parse_kl_sign(const std::string& s) {
  if (s == "plus") return KlSign::kPlus;
  if (s == "minus") return KlSign::kMinus;
  throw std::invalid_argument("kl_sign must be 'plus' or 'minus', got: " + s);
}

inline const char* kl_sign_name(KlSign s) {
  return s == KlSign::kPlus ? "plus" : "minus";
}

template <typename T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// ---------------------------------------------------------------------------
// Primitive losses. Each returns the scalar value; the *_grad_into variants
// accumulate (never overwrite) input gradients scaled by `scale`, so callers
// can chain them into larger objectives.
// ---------------------------------------------------------------------------

template <typename T>
T mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (!pred.same_shape(target))
    throw std::invalid_argument("mse_loss: shape mismatch " + pred.shape_str() +
                                " vs " + target.shape_str());
  if (pred.numel() == 0) return T(0);
  T acc = T(0);
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const T d = pred[i] - target[i];
    acc += d * d;
  }
  return acc / static_cast<T>(pred.numel());
}

template <typename T>
void mse_grad_into(const Tensor<T>& pred, const Tensor<T>& target, T scale,
                   Tensor<T>& dpred) {
  const T k = scale * T(2) / static_cast<T>(pred.numel());
  for (std::int64_t i = 0; i < pred.numel(); ++i)
    dpred[i] += k * (pred[i] - target[i]);
}

inline constexpr double kBceEps = 1e-7;

// Mean binary cross entropy over probabilities clamped to [eps, 1-eps].
template <typename T>
T bce_loss(const Tensor<T>& p, const Tensor<T>& y) {
  if (!p.same_shape(y))
    throw std::invalid_argument("bce_loss: shape mismatch");
  if (p.numel() == 0) return T(0);
  const T eps = static_cast<T>(kBceEps);
  T acc = T(0);
  for (std::int64_t i = 0; i < p.numel(); ++i)
    acc += -(y[i] * std::log(std::max(p[i], eps)) +
             (T(1) - y[i]) * std::log(std::max(T(1) - p[i], eps)));
  return acc / static_cast<T>(p.numel());
}

// KL(N(mu, diag sigma^2) || N(0, I)) summed over dims, averaged over batch.
template <typename T>
T kl_standard_normal(const GaussianLatent<T>& g) {
  const int n = g.batch();
  T acc = T(0);
  for (std::int64_t i = 0; i < g.mean.numel(); ++i)
    acc += g.mean[i] * g.mean[i] + std::exp(g.log_var[i]) - T(1) - g.log_var[i];
  return acc / (T(2) * static_cast<T>(n));
}

template <typename T>
void kl_grad_into(const GaussianLatent<T>& g, T scale, Tensor<T>& dmean,
                  Tensor<T>& dlog_var) {
  const T k = scale / static_cast<T>(g.batch());
  for (std::int64_t i = 0; i < g.mean.numel(); ++i) {
    dmean[i] += k * g.mean[i];
    dlog_var[i] += k * (std::exp(g.log_var[i]) - T(1)) / T(2);
  }
}

// Same as kl_grad_into but restricted to batch rows [row0, row1) with its own
// scale; used when one encoder pass covers two sub-batches with different
// normalizations.
template <typename T>
void kl_rows_grad_into(const GaussianLatent<T>& g, int row0, int row1, T scale,
                       Tensor<T>& dmean, Tensor<T>& dlog_var) {
  const int d = g.dim();
  for (int i = row0; i < row1; ++i)
    for (int j = 0; j < d; ++j) {
      const std::int64_t idx = static_cast<std::int64_t>(i) * d + j;
      dmean[idx] += scale * g.mean[idx];
      dlog_var[idx] += scale * (std::exp(g.log_var[idx]) - T(1)) / T(2);
    }
}

// Per-sample KL summed over rows [row0, row1), not yet normalized.
template <typename T>
T kl_rows_sum(const GaussianLatent<T>& g, int row0, int row1) {
  const int d = g.dim();
  T acc = T(0);
  for (int i = row0; i < row1; ++i)
    for (int j = 0; j < d; ++j) {
      const std::int64_t idx = static_cast<std::int64_t>(i) * d + j;
      acc += g.mean[idx] * g.mean[idx] + std::exp(g.log_var[idx]) - T(1) -
             g.log_var[idx];
    }
  return acc / T(2);
}

// Reconstruction + weighted KL terms: mean-MSE likelihood plus
// lambda1 * KL(salient) + lambda2 * KL(background).
template <typename T>
T negative_elbo(const Tensor<T>& x, const Tensor<T>& recon,
                const GaussianLatent<T>& g_s, const GaussianLatent<T>& g_z,
                double lambda1, double lambda2) {
  return mse_loss(recon, x) + static_cast<T>(lambda1) * kl_standard_normal(g_s) +
         static_cast<T>(lambda2) * kl_standard_normal(g_z);
}

// ---------------------------------------------------------------------------
// InfoNCE with cosine similarity.
// ---------------------------------------------------------------------------

template <typename T>
struct InfoNceGrads {
  std::vector<T> danchor;
  std::vector<std::vector<T>> dpositives;
  std::vector<std::vector<T>> dnegatives;
};

namespace nce_detail {

template <typename T>
T norm(const T* v, int d) {
  T acc = T(0);
  for (int i = 0; i < d; ++i) acc += v[i] * v[i];
  return std::sqrt(acc);
}

template <typename T>
T dot(const T* a, const T* b, int d) {
  T acc = T(0);
  for (int i = 0; i < d; ++i) acc += a[i] * b[i];
  return acc;
}

// d cos(a,b) / da = b/(|a||b|) - cos(a,b) * a/|a|^2
template <typename T>
void cos_grad_a(const T* a, const T* b, int d, T na, T nb, T c, T w, T* out) {
  for (int i = 0; i < d; ++i) out[i] += w * (b[i] / (na * nb) - c * a[i] / (na * na));
}

}  // namespace nce_detail

// Mean over positives p of -ln[ e^{sim(a,p)/t} / (e^{sim(a,p)/t} +
// sum_n e^{sim(a,n)/t}) ], sim = cosine. Exponents are max-shifted so small
// temperatures stay finite.
template <typename T>
T info_nce(const T* anchor, const std::vector<const T*>& positives,
           const std::vector<const T*>& negatives, int dim, T temperature,
           InfoNceGrads<T>* grads = nullptr) {
  namespace d = nce_detail;
  if (positives.empty() || negatives.empty())
    throw std::invalid_argument("info_nce: need at least one positive and one negative");
  if (temperature <= T(0)) throw std::invalid_argument("info_nce: temperature must be > 0");
  const T na = d::norm(anchor, dim);
  if (na == T(0)) throw std::invalid_argument("info_nce: zero-norm anchor");

  const std::size_t np = positives.size(), nn = negatives.size();
  std::vector<T> norm_p(np), norm_n(nn), sim_p(np), sim_n(nn);
  for (std::size_t i = 0; i < np; ++i) {
    norm_p[i] = d::norm(positives[i], dim);
    if (norm_p[i] == T(0)) throw std::invalid_argument("info_nce: zero-norm positive");
    sim_p[i] = d::dot(anchor, positives[i], dim) / (na * norm_p[i]);
  }
  for (std::size_t i = 0; i < nn; ++i) {
    norm_n[i] = d::norm(negatives[i], dim);
    if (norm_n[i] == T(0)) throw std::invalid_argument("info_nce: zero-norm negative");
    sim_n[i] = d::dot(anchor, negatives[i], dim) / (na * norm_n[i]);
  }

  if (grads) {
    grads->danchor.assign(static_cast<std::size_t>(dim), T(0));
    grads->dpositives.assign(np, std::vector<T>(static_cast<std::size_t>(dim), T(0)));
    grads->dnegatives.assign(nn, std::vector<T>(static_cast<std::size_t>(dim), T(0)));
  }

  std::vector<T> dsim_p(np, T(0)), dsim_n(nn, T(0));
  T loss = T(0);
  for (std::size_t p = 0; p < np; ++p) {
    T m = sim_p[p];
    for (std::size_t n = 0; n < nn; ++n) m = std::max(m, sim_n[n]);
    m /= temperature;
    const T ep = std::exp(sim_p[p] / temperature - m);
    T den = ep;
    for (std::size_t n = 0; n < nn; ++n) den += std::exp(sim_n[n] / temperature - m);
    loss += -(sim_p[p] / temperature - m - std::log(den));
    if (grads) {
      const T inv_np = T(1) / static_cast<T>(np);
      dsim_p[p] += -inv_np / temperature * (T(1) - ep / den);
      for (std::size_t n = 0; n < nn; ++n)
        dsim_n[n] += inv_np / temperature *
                     std::exp(sim_n[n] / temperature - m) / den;
    }
  }
  loss /= static_cast<T>(np);

  if (grads) {
    for (std::size_t p = 0; p < np; ++p) {
      d::cos_grad_a(anchor, positives[p], dim, na, norm_p[p], sim_p[p], dsim_p[p],
                    grads->danchor.data());
      d::cos_grad_a(positives[p], anchor, dim, norm_p[p], na, sim_p[p], dsim_p[p],
                    grads->dpositives[p].data());
    }
    for (std::size_t n = 0; n < nn; ++n) {
      d::cos_grad_a(anchor, negatives[n], dim, na, norm_n[n], sim_n[n], dsim_n[n],
                    grads->danchor.data());
      d::cos_grad_a(negatives[n], anchor, dim, norm_n[n], na, sim_n[n], dsim_n[n],
                    grads->dnegatives[n].data());
    }
  }
  return loss;
}

// Convenience overload for plain vectors (tests, small call sites).
template <typename T>
T info_nce(const std::vector<T>& anchor, const std::vector<std::vector<T>>& positives,
           const std::vector<std::vector<T>>& negatives, T temperature,
           InfoNceGrads<T>* grads = nullptr) {
  std::vector<const T*> ps, ns;
  for (auto& p : positives) {
    if (static_cast<int>(p.size()) != static_cast<int>(anchor.size()))
      throw std::invalid_argument("info_nce: dim mismatch");
    ps.push_back(p.data());
  }
  for (auto& n : negatives) {
    if (static_cast<int>(n.size()) != static_cast<int>(anchor.size()))
      throw std::invalid_argument("info_nce: dim mismatch");
    ns.push_back(n.data());
  }
  return info_nce(anchor.data(), ps, ns, static_cast<int>(anchor.size()),
                  temperature, grads);
}

// ---------------------------------------------------------------------------
// Stage 1: joint disentanglement loss over a composite batch (with masks and
// paired backgrounds) and a plain background batch.
// ---------------------------------------------------------------------------

template <typename T>
struct Stage1LossBreakdown {
  T elbo_c = T(0);
  T elbo_b = T(0);
  T salient_map_mse = T(0);
  T background_mse = T(0);
  T bce = T(0);
  T total = T(0);
};

template <typename T>
struct Stage1Batch {
  Tensor<T> x_c;   // (N, C, S, S) composite patches
  Tensor<T> mask;  // (N, 1, S, S) pasted-cell maps
  Tensor<T> bg;    // (N, C, S, S) paired clean backgrounds
  Tensor<T> x_b;   // (M, C, S, S) plain background patches
};

template <typename T>
struct Stage1LossConfig {
  double lambda1 = 10.0;
  double lambda2 = 10.0;
  bool branch_salient_map = true;
  bool branch_background = true;
  bool branch_classifier = true;
  std::uint64_t noise_seed = 0;
};

// Raw network outputs for one combined pass; rows [0, n_c) are composites,
// rows [n_c, n_c + n_b) are plain backgrounds. Split out so the loss algebra
// is testable without running networks.
template <typename T>
struct Stage1Outputs {
  int n_c = 0, n_b = 0;
  Tensor<T> x;            // inputs, concatenated
  Tensor<T> recon;        // image decoder output
  GaussianLatent<T> g_s;
  GaussianLatent<T> g_z;
  Tensor<T> map_pred;     // empty when branch disabled
  Tensor<T> map_target;
  Tensor<T> bg_pred;
  Tensor<T> bg_target;
  Tensor<T> cls_prob;     // (n_c + n_b, 1), empty when branch disabled
  Tensor<T> cls_label;
};

template <typename T>
Stage1LossBreakdown<T> assemble_stage1(const Stage1Outputs<T>& o,
                                       const Stage1LossConfig<T>& cfg) {
  Stage1LossBreakdown<T> b;
  const int n = o.n_c, m = o.n_b;
  const std::int64_t img = o.x.numel() / (n + m);

  T sq_c = T(0), sq_b = T(0);
  const std::int64_t split = static_cast<std::int64_t>(n) * img;
  for (std::int64_t i = 0; i < o.x.numel(); ++i) {
    const T d = o.recon[i] - o.x[i];
    (i < split ? sq_c : sq_b) += d * d;
  }
  b.elbo_c = sq_c / static_cast<T>(split) +
             static_cast<T>(cfg.lambda1) * kl_rows_sum(o.g_s, 0, n) / static_cast<T>(n) +
             static_cast<T>(cfg.lambda2) * kl_rows_sum(o.g_z, 0, n) / static_cast<T>(n);
  b.elbo_b = sq_b / static_cast<T>(static_cast<std::int64_t>(m) * img) +
             static_cast<T>(cfg.lambda1) * kl_rows_sum(o.g_s, n, n + m) / static_cast<T>(m) +
             static_cast<T>(cfg.lambda2) * kl_rows_sum(o.g_z, n, n + m) / static_cast<T>(m);
  if (!o.map_pred.empty()) b.salient_map_mse = mse_loss(o.map_pred, o.map_target);
  if (!o.bg_pred.empty()) b.background_mse = mse_loss(o.bg_pred, o.bg_target);
  if (!o.cls_prob.empty()) b.bce = bce_loss(o.cls_prob, o.cls_label);
  b.total = b.elbo_c + b.elbo_b + b.salient_map_mse + b.background_mse + b.bce;
  return b;
}

// Full stage-1 objective. With compute_grads set, parameter gradients are
// accumulated into every non-GAN network (callers zero them first).
template <typename T>
Stage1LossBreakdown<T> stage1_loss(NetworkBundle<T>& net, const Stage1Batch<T>& batch,
                                   const Stage1LossConfig<T>& cfg,
                                   bool compute_grads) {
  const int n = batch.x_c.dim(0), m = batch.x_b.dim(0);
  if (n == 0 || m == 0)
    throw std::invalid_argument("stage1_loss: both batches must be non-empty");
  const int s = net.arch.image_size, ch = net.arch.in_channels;
  require_shape(batch.mask, {n, 1, s, s}, "stage1_loss: mask");
  require_shape(batch.bg, {n, ch, s, s}, "stage1_loss: paired background");

  Stage1Outputs<T> o;
  o.n_c = n;
  o.n_b = m;
  o.x = concat_batch(batch.x_c, batch.x_b);
  o.g_s = net.encode_salient(o.x, compute_grads);
  o.g_z = net.encode_background(o.x, compute_grads);
  ReparamSample<T> samp_s = reparameterize(o.g_s, derive_seed(cfg.noise_seed, {0}));
  ReparamSample<T> samp_z = reparameterize(o.g_z, derive_seed(cfg.noise_seed, {1}));
  o.recon = net.decode_image(concat_codes(samp_s.z, samp_z.z), compute_grads);

  if (cfg.branch_salient_map) {
    o.map_pred = net.decode_salient_map(o.g_s.mean, compute_grads);
    o.map_target = concat_batch(batch.mask, Tensor<T>({m, 1, s, s}));
  }
  if (cfg.branch_background) {
    o.bg_pred = net.decode_background(o.g_z.mean, compute_grads);
    o.bg_target = concat_batch(batch.bg, batch.x_b);
  }
  Tensor<T> logits;
  if (cfg.branch_classifier) {
    logits = net.classify_logit(o.g_s.mean, compute_grads);
    o.cls_prob = logits;
    for (std::int64_t i = 0; i < o.cls_prob.numel(); ++i)
      o.cls_prob[i] = sigmoid(o.cls_prob[i]);
    o.cls_label = Tensor<T>({n + m, 1});
    for (int i = 0; i < n; ++i) o.cls_label[i] = T(1);
  }

  Stage1LossBreakdown<T> b = assemble_stage1(o, cfg);
  if (!compute_grads) return b;

  const int ds = net.arch.latent_dim_s, dz = net.arch.latent_dim_z;
  Tensor<T> dmu_s({n + m, ds}), dlv_s({n + m, ds});
  Tensor<T> dmu_z({n + m, dz}), dlv_z({n + m, dz});

  // Reconstruction term: per-round mean over that round's pixels.
  const std::int64_t img = o.x.numel() / (n + m);
  Tensor<T> drecon(o.recon.shape());
  const std::int64_t split = static_cast<std::int64_t>(n) * img;
  for (std::int64_t i = 0; i < drecon.numel(); ++i) {
    const T denom = static_cast<T>(i < split ? split : o.x.numel() - split);
    drecon[i] = T(2) * (o.recon[i] - o.x[i]) / denom;
  }
  Tensor<T> dcode = net.image_decoder.backward(drecon, true);
  Tensor<T> dsamp_s({n + m, ds}), dsamp_z({n + m, dz});
  split_code_grad(dcode, ds, dsamp_s, dsamp_z);
  reparameterize_backward(o.g_s, samp_s, dsamp_s, dmu_s, dlv_s);
  reparameterize_backward(o.g_z, samp_z, dsamp_z, dmu_z, dlv_z);

  // KL terms, per-round batch means.
  kl_rows_grad_into(o.g_s, 0, n, static_cast<T>(cfg.lambda1) / static_cast<T>(n), dmu_s, dlv_s);
  kl_rows_grad_into(o.g_s, n, n + m, static_cast<T>(cfg.lambda1) / static_cast<T>(m), dmu_s, dlv_s);
  kl_rows_grad_into(o.g_z, 0, n, static_cast<T>(cfg.lambda2) / static_cast<T>(n), dmu_z, dlv_z);
  kl_rows_grad_into(o.g_z, n, n + m, static_cast<T>(cfg.lambda2) / static_cast<T>(m), dmu_z, dlv_z);

  if (cfg.branch_salient_map) {
    Tensor<T> dmap(o.map_pred.shape());
    mse_grad_into(o.map_pred, o.map_target, T(1), dmap);
    dmu_s.add_(net.salient_map_decoder.backward(dmap, true));
  }
  if (cfg.branch_background) {
    Tensor<T> dbg(o.bg_pred.shape());
    mse_grad_into(o.bg_pred, o.bg_target, T(1), dbg);
    dmu_z.add_(net.background_decoder.backward(dbg, true));
  }
  if (cfg.branch_classifier) {
    const T eps = static_cast<T>(kBceEps);
    Tensor<T> dlogit(logits.shape());
    for (std::int64_t i = 0; i < dlogit.numel(); ++i) {
      const T p = o.cls_prob[i], y = o.cls_label[i];
      T g = T(0);
      if (p > eps) g += -y * (T(1) - p);
      if (T(1) - p > eps) g += (T(1) - y) * p;
      dlogit[i] = g / static_cast<T>(n + m);
    }
    dmu_s.add_(net.classifier.backward(dlogit, true));
  }

  net.salient_encoder.backward(detail::merge_gaussian_grad(o.g_s, dmu_s, dlv_s), true);
  net.background_encoder.backward(detail::merge_gaussian_grad(o.g_z, dmu_z, dlv_z), true);
  return b;
}

// ---------------------------------------------------------------------------
// Stage 2: density contrast on the salient encoder.
// ---------------------------------------------------------------------------

template <typename T>
struct Stage2LossBreakdown {
  T info_nce = T(0);
  T kl_s = T(0);
  KlSign kl_sign = KlSign::kPlus;
  T total = T(0);
};

template <typename T>
struct Stage2LossConfig {
  double temperature = 0.1;
  KlSign kl_sign = KlSign::kPlus;
  int anchor_index = 0;  // into the HIGH batch
};

template <typename T>
Stage2LossBreakdown<T> stage2_loss(NetworkBundle<T>& net, const Tensor<T>& x_high,
                                   const Tensor<T>& x_low,
                                   const Stage2LossConfig<T>& cfg,
                                   bool compute_grads) {
  const int h = x_high.dim(0), l = x_low.dim(0);
  if (h < 2 || l < 1)
    throw std::invalid_argument(
        "stage2_loss: need >= 2 HIGH samples (anchor + positive) and >= 1 LOW");
  if (cfg.anchor_index < 0 || cfg.anchor_index >= h)
    throw std::invalid_argument("stage2_loss: anchor index out of range");

  Tensor<T> x = concat_batch(x_high, x_low);
  GaussianLatent<T> g = net.encode_salient(x, compute_grads);
  const int d = g.dim();

  const T* anchor = g.mean.data() + static_cast<std::int64_t>(cfg.anchor_index) * d;
  std::vector<const T*> pos, neg;
  std::vector<int> pos_rows;
  for (int i = 0; i < h; ++i)
    if (i != cfg.anchor_index) {
      pos.push_back(g.mean.data() + static_cast<std::int64_t>(i) * d);
      pos_rows.push_back(i);
    }
  for (int i = h; i < h + l; ++i)
    neg.push_back(g.mean.data() + static_cast<std::int64_t>(i) * d);

  Stage2LossBreakdown<T> b;
  b.kl_sign = cfg.kl_sign;
  InfoNceGrads<T> ig;
  b.info_nce = info_nce(anchor, pos, neg, d, static_cast<T>(cfg.temperature),
                        compute_grads ? &ig : nullptr);
  b.kl_s = kl_standard_normal(g);
  const T sign = cfg.kl_sign == KlSign::kPlus ? T(1) : T(-1);
  b.total = b.info_nce + sign * b.kl_s;
  if (!compute_grads) return b;

  Tensor<T> dmu({h + l, d}), dlv({h + l, d});
  for (int j = 0; j < d; ++j)
    dmu[static_cast<std::int64_t>(cfg.anchor_index) * d + j] += ig.danchor[static_cast<std::size_t>(j)];
  for (std::size_t p = 0; p < pos.size(); ++p)
    for (int j = 0; j < d; ++j)
      dmu[static_cast<std::int64_t>(pos_rows[p]) * d + j] += ig.dpositives[p][static_cast<std::size_t>(j)];
  for (std::size_t ni = 0; ni < neg.size(); ++ni)
    for (int j = 0; j < d; ++j)
      dmu[static_cast<std::int64_t>(h + static_cast<int>(ni)) * d + j] +=
          ig.dnegatives[ni][static_cast<std::size_t>(j)];
  kl_grad_into(g, sign, dmu, dlv);
  net.salient_encoder.backward(detail::merge_gaussian_grad(g, dmu, dlv), true);
  return b;
}

// ---------------------------------------------------------------------------
// Stage 3: non-saturating GAN on frozen codes, with distillation toward the
// (frozen) image decoder's reconstruction.
// ---------------------------------------------------------------------------

template <typename T>
struct GanLossParts {
  T loss_d = T(0);
  T loss_g = T(0);
  T adv_g = T(0);
  T distill = T(0);
};

// Discriminator phase: softplus(-D(real)) + softplus(D(G(code))), batch means.
// With compute_grads, gradients land in gan_discriminator only.
template <typename T>
T gan_loss_d(NetworkBundle<T>& net, const Tensor<T>& real, const Tensor<T>& codes,
             bool compute_grads) {
  if (real.dim(0) == 0 || codes.dim(0) == 0)
    throw std::invalid_argument("gan_loss_d: empty batch");
  Tensor<T> fake = net.gan_generate(codes, false);
  const int nr = real.dim(0), nf = fake.dim(0);
  Tensor<T> din = concat_batch(real, fake);
  Tensor<T> logit = net.gan_discriminate(din, compute_grads);
  T loss = T(0);
  for (int i = 0; i < nr; ++i) loss += softplus(-logit[i]) / static_cast<T>(nr);
  for (int i = nr; i < nr + nf; ++i) loss += softplus(logit[i]) / static_cast<T>(nf);
  if (compute_grads) {
    Tensor<T> dlogit(logit.shape());
    for (int i = 0; i < nr; ++i) dlogit[i] = -sigmoid(-logit[i]) / static_cast<T>(nr);
    for (int i = nr; i < nr + nf; ++i) dlogit[i] = sigmoid(logit[i]) / static_cast<T>(nf);
    net.gan_discriminator.backward(dlogit, true);
  }
  return loss;
}

// Generator phase: softplus(-D(G(code))) + distill_weight * MSE(G(code),
// distill_target). With compute_grads, gradients land in gan_generator only
// (the discriminator is traversed but not accumulated).
template <typename T>
GanLossParts<T> gan_loss_g(NetworkBundle<T>& net, const Tensor<T>& codes,
                           const Tensor<T>& distill_targets, double distill_weight,
                           bool compute_grads) {
  if (codes.dim(0) == 0) throw std::invalid_argument("gan_loss_g: empty batch");
  Tensor<T> fake = net.gan_generate(codes, compute_grads);
  if (distill_weight != 0.0 && !fake.same_shape(distill_targets))
    throw std::invalid_argument("gan_loss_g: distill target shape mismatch");
  Tensor<T> logit = net.gan_discriminate(fake, compute_grads);
  const int n = fake.dim(0);
  GanLossParts<T> parts;
  for (int i = 0; i < n; ++i) parts.adv_g += softplus(-logit[i]) / static_cast<T>(n);
  if (distill_weight != 0.0) parts.distill = mse_loss(fake, distill_targets);
  parts.loss_g = parts.adv_g + static_cast<T>(distill_weight) * parts.distill;
  if (compute_grads) {
    Tensor<T> dlogit(logit.shape());
    for (int i = 0; i < n; ++i) dlogit[i] = -sigmoid(-logit[i]) / static_cast<T>(n);
    Tensor<T> dfake = net.gan_discriminator.backward(dlogit, false);
    if (distill_weight != 0.0)
      mse_grad_into(fake, distill_targets, static_cast<T>(distill_weight), dfake);
    net.gan_generator.backward(dfake, true);
  }
  return parts;
}

// Value-only snapshot of both losses under the current parameters.
template <typename T>
GanLossParts<T> gan_losses(NetworkBundle<T>& net, const Tensor<T>& real,
                           const Tensor<T>& codes, const Tensor<T>& distill_targets,
                           double distill_weight) {
  GanLossParts<T> parts = gan_loss_g(net, codes, distill_targets, distill_weight, false);
  parts.loss_d = gan_loss_d(net, real, codes, false);
  return parts;
}

}  // namespace sscvae::model

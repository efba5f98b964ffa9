// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "kvedit/dataset.hpp"
#include "kvedit/errors.hpp"
#include "kvedit/model.hpp"
#include "kvedit/rng.hpp"

namespace kvedit {

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 16;
    double learning_rate = 1e-3;
    double cond_dropout = 0.1;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (!(cond_dropout >= 0.0 && cond_dropout < 1.0)) throw ConfigError("train: cond_dropout must be in [0,1)");
        if (batch == 0) throw ConfigError("train: batch must be >= 1");
        if (!(learning_rate >= 0.0)) throw ConfigError("train: learning_rate must be >= 0");
    }
};

/// One fully specified flow-matching example: everything random already
/// drawn, so the loss is a deterministic function of the weights.
template <class T>
struct FlowExample {
    Tensor<T> x0;  ///< clean patch tokens [P x pd]
    Tensor<T> eps; ///< noise, same shape
    double t = 0;
    ConditionId condition;

    /// Point on the straight path, (1 - t) x0 + t eps.
    Tensor<T> noised() const {
        Tensor<T> xt = x0;
        const T a = static_cast<T>(1.0 - t), b = static_cast<T>(t);
        for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = a * x0[i] + b * eps[i];
        return xt;
    }

    /// Velocity of the path, eps - x0.
    Tensor<T> target() const { return sub(eps, x0); }
};

/// Draws t ~ U(0,1), eps ~ N(0, I) and the condition dropout for each
/// clean item.
template <class T>
std::vector<FlowExample<T>> draw_flow_examples(const std::vector<SyntheticSample<T>>& batch, const ModelConfig& cfg,
                                               Rng& rng, double cond_dropout) {
    std::vector<FlowExample<T>> out;
    out.reserve(batch.size());
    for (const auto& s : batch) {
        FlowExample<T> ex;
        ex.x0 = patchify(s.image, cfg);
        ex.t = rng.uniform();
        ex.eps = sample_gaussian<T>(rng, ex.x0.shape());
        ex.condition = rng.bernoulli(cond_dropout) ? ConditionId::null(cfg) : s.condition;
        out.push_back(std::move(ex));
    }
    return out;
}

/// Mean squared error between a predictor's velocity and eps - x0, averaged
/// over every element of every example. `predict(state, condition)` returns
/// the velocity tokens.
template <class T, class Predict>
double flow_loss(const std::vector<FlowExample<T>>& examples, Predict&& predict) {
    double total = 0;
    std::size_t count = 0;
    for (const auto& ex : examples) {
        TokenState<T> st{ex.noised(), {}, ex.t};
        const Tensor<T> v = predict(st, ex.condition);
        const Tensor<T> target = ex.target();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double r = static_cast<double>(v[i]) - static_cast<double>(target[i]);
            total += r * r;
        }
        count += v.size();
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

/// Rectified-flow loss of a predictor on a clean batch; draws t, eps and
/// condition dropout from `rng`.
template <class T, class Predict>
double rf_loss(const std::vector<SyntheticSample<T>>& batch, const ModelConfig& cfg, Rng& rng, double cond_dropout,
               Predict&& predict) {
    return flow_loss(draw_flow_examples(batch, cfg, rng, cond_dropout), std::forward<Predict>(predict));
}

template <class T>
double rf_loss(const std::vector<SyntheticSample<T>>& batch, const ModelWeights<T>& w, Rng& rng,
               double cond_dropout = 0.1) {
    return rf_loss(batch, w.config, rng, cond_dropout, [&](const TokenState<T>& s, ConditionId c) {
        return forward_velocity(s, c, w).velocity;
    });
}

namespace detail {

/// Backward of y = nhat * gain * (1 + scale) + shift with nhat = x * inv.
/// Accumulates into dx, dgain, dshift, dscale.
template <class T>
void norm_modulate_backward(const Tensor<T>& dy, const Tensor<T>& nhat, const std::vector<T>& inv,
                            const Tensor<T>& gain, const T* scale, Tensor<T>& dx, Tensor<T>& dgain, T* dshift,
                            T* dscale) {
    const std::size_t n = dy.rows(), d = dy.cols();
    std::vector<T> dn(d);
    for (std::size_t r = 0; r < n; ++r) {
        const T* g = dy.row(r).data();
        const T* nh = nhat.row(r).data();
        T dot = 0;
        for (std::size_t c = 0; c < d; ++c) {
            dshift[c] += g[c];
            dscale[c] += g[c] * nh[c] * gain[c];
            dgain[c] += g[c] * nh[c] * (T(1) + scale[c]);
            dn[c] = g[c] * gain[c] * (T(1) + scale[c]);
            dot += dn[c] * nh[c];
        }
        dot /= T(d);
        T* out = dx.row(r).data();
        for (std::size_t c = 0; c < d; ++c) out[c] += (dn[c] - nh[c] * dot) * inv[r];
    }
}

template <class T>
void add_col_sums(const Tensor<T>& g, Tensor<T>& bias_grad) {
    for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) bias_grad[c] += g.at(r, c);
}

} // namespace detail

/// Accumulates d(loss)/d(weights) into `grads` given d(loss)/d(velocity)
/// for one plain forward pass recorded in `acts`.
template <class T>
void backward(const Activations<T>& acts, const Tensor<T>& dout, ConditionId c, const ModelWeights<T>& w,
              ModelWeights<T>& grads) {
    const ModelConfig& cfg = w.config;
    const std::size_t P = cfg.tokens(), d = cfg.token_dim, heads = cfg.heads, dh = cfg.head_dim();
    const T alpha = T(1) / std::sqrt(static_cast<T>(dh));

    Tensor<T> dcvec = Tensor<T>::matrix(1, d);

    // Head and final modulation.
    matmul_tn_acc(acts.f, dout, grads.w_head);
    detail::add_col_sums(dout, grads.b_head);
    Tensor<T> df = matmul_nt(dout, w.w_head);
    Tensor<T> dh_ = Tensor<T>::matrix(P, d);
    Tensor<T> dmod_f = Tensor<T>::matrix(1, 2 * d);
    detail::norm_modulate_backward(df, acts.nhat_f, acts.inv_f, w.norm_f, acts.mod_f.data() + d, dh_, grads.norm_f,
                                   dmod_f.data(), dmod_f.data() + d);
    matmul_tn_acc(acts.cvec, dmod_f, grads.wmod_f);
    detail::add_col_sums(dmod_f, grads.bmod_f);
    matmul_nt_acc(dmod_f, w.wmod_f, dcvec);

    for (std::size_t li = cfg.layers; li-- > 0;) {
        const LayerWeights<T>& L = w.layers[li];
        LayerWeights<T>& G = grads.layers[li];
        const auto& la = acts.layers[li];
        const Tensor<T>& mod = acts.mods[li];
        Tensor<T> dmod = Tensor<T>::matrix(1, 4 * d);

        // MLP sublayer.
        matmul_tn_acc(la.m2, dh_, G.w2);
        detail::add_col_sums(dh_, G.b2);
        Tensor<T> dm = matmul_nt(dh_, L.w2);
        for (std::size_t i = 0; i < dm.size(); ++i) dm[i] *= silu_grad(la.m1[i]);
        matmul_tn_acc(la.b, dm, G.w1);
        detail::add_col_sums(dm, G.b1);
        Tensor<T> db = matmul_nt(dm, L.w1);
        Tensor<T> dh_mid = dh_;
        detail::norm_modulate_backward(db, la.nhat2, la.inv2, L.norm2, mod.data() + 3 * d, dh_mid, G.norm2,
                                       dmod.data() + 2 * d, dmod.data() + 3 * d);

        // Attention sublayer.
        matmul_tn_acc(la.attn, dh_mid, G.wo);
        detail::add_col_sums(dh_mid, G.bo);
        Tensor<T> dattn = matmul_nt(dh_mid, L.wo);
        Tensor<T> dq = Tensor<T>::matrix(P, d), dk = Tensor<T>::matrix(P, d), dv = Tensor<T>::matrix(P, d);
        std::vector<T> dA(P);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            const Tensor<T>& A = la.probs[h];
            for (std::size_t q = 0; q < P; ++q) {
                const T* dO = dattn.row(q).data() + c0;
                T rowdot = 0;
                for (std::size_t k = 0; k < P; ++k) {
                    const T* vr = la.v.row(k).data() + c0;
                    T s = 0;
                    for (std::size_t cc = 0; cc < dh; ++cc) s += dO[cc] * vr[cc];
                    dA[k] = s;
                    rowdot += s * A.at(q, k);
                    T* dvr = dv.row(k).data() + c0;
                    const T a = A.at(q, k);
                    for (std::size_t cc = 0; cc < dh; ++cc) dvr[cc] += a * dO[cc];
                }
                const T* qr = la.q.row(q).data() + c0;
                T* dqr = dq.row(q).data() + c0;
                for (std::size_t k = 0; k < P; ++k) {
                    const T ds = A.at(q, k) * (dA[k] - rowdot) * alpha;
                    if (ds == T(0)) continue;
                    const T* kr = la.k.row(k).data() + c0;
                    T* dkr = dk.row(k).data() + c0;
                    for (std::size_t cc = 0; cc < dh; ++cc) {
                        dqr[cc] += ds * kr[cc];
                        dkr[cc] += ds * qr[cc];
                    }
                }
            }
        }
        matmul_tn_acc(la.a, dq, G.wq);
        matmul_tn_acc(la.a, dk, G.wk);
        matmul_tn_acc(la.a, dv, G.wv);
        Tensor<T> da = matmul_nt(dq, L.wq);
        matmul_nt_acc(dk, L.wk, da);
        matmul_nt_acc(dv, L.wv, da);
        Tensor<T> dh_in = dh_mid;
        detail::norm_modulate_backward(da, la.nhat1, la.inv1, L.norm1, mod.data() + d, dh_in, G.norm1, dmod.data(),
                                       dmod.data() + d);

        matmul_tn_acc(acts.cvec, dmod, G.wmod);
        detail::add_col_sums(dmod, G.bmod);
        matmul_nt_acc(dmod, L.wmod, dcvec);
        dh_ = std::move(dh_in);
    }

    // Patch and positional embedding.
    matmul_tn_acc(acts.patches, dh_, grads.w_embed);
    detail::add_col_sums(dh_, grads.b_embed);
    for (std::size_t r = 0; r < P; ++r)
        for (std::size_t cc = 0; cc < d; ++cc) grads.pos.at(r, cc) += dh_.at(r, cc);

    // Conditioning path.
    Tensor<T> de = dcvec;
    for (std::size_t i = 0; i < d; ++i) de[i] *= silu_grad(acts.e[i]);
    for (std::size_t i = 0; i < d; ++i) grads.cond_table.at(c.id, i) += de[i];
    matmul_tn_acc(acts.u2, de, grads.w_t2);
    detail::add_col_sums(de, grads.b_t2);
    Tensor<T> du = matmul_nt(de, w.w_t2);
    for (std::size_t i = 0; i < d; ++i) du[i] *= silu_grad(acts.u1[i]);
    matmul_tn_acc(acts.s.reshaped({1, d}), du, grads.w_t1);
    detail::add_col_sums(du, grads.b_t1);
}

/// Loss over fixed examples and, when `grads` is non-null, its gradient
/// (accumulated into `grads`).
template <class T>
double flow_loss_and_grad(const std::vector<FlowExample<T>>& examples, const ModelWeights<T>& w,
                          ModelWeights<T>* grads) {
    std::size_t count = 0;
    for (const auto& ex : examples) count += ex.x0.size();
    if (count == 0) return 0.0;
    const T norm = T(2) / static_cast<T>(count);
    double total = 0;
    Activations<T> acts;
    for (const auto& ex : examples) {
        TokenState<T> st{ex.noised(), {}, ex.t};
        auto out = forward_velocity(st, ex.condition, w, KvMode<T>::plain(), grads ? &acts : nullptr);
        Tensor<T> resid = sub(out.velocity, ex.target());
        for (T r : resid.values()) total += static_cast<double>(r) * static_cast<double>(r);
        if (grads) {
            for (auto& r : resid.values()) r *= norm;
            backward(acts, resid, ex.condition, w, *grads);
        }
    }
    return total / static_cast<double>(count);
}

template <class T>
struct AdamState {
    ModelWeights<T> m, v;
    std::size_t step = 0;

    static AdamState init(const ModelWeights<T>& w) { return {w.zeros_like(), w.zeros_like(), 0}; }
};

template <class T>
void adam_update(ModelWeights<T>& w, const ModelWeights<T>& grads, AdamState<T>& opt, const TrainConfig& cfg) {
    opt.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
    std::vector<Tensor<T>*> wp, mp, vp;
    std::vector<const Tensor<T>*> gp;
    w.for_each_param([&](const std::string&, Tensor<T>& t) { wp.push_back(&t); });
    grads.for_each_param([&](const std::string&, const Tensor<T>& t) { gp.push_back(&t); });
    opt.m.for_each_param([&](const std::string&, Tensor<T>& t) { mp.push_back(&t); });
    opt.v.for_each_param([&](const std::string&, Tensor<T>& t) { vp.push_back(&t); });
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T lr = static_cast<T>(cfg.learning_rate), eps = static_cast<T>(cfg.adam_eps);
    const T ibc1 = static_cast<T>(1.0 / bc1), ibc2 = static_cast<T>(1.0 / bc2);
    for (std::size_t p = 0; p < wp.size(); ++p) {
        Tensor<T>& W = *wp[p];
        const Tensor<T>& G = *gp[p];
        Tensor<T>& Mt = *mp[p];
        Tensor<T>& Vt = *vp[p];
        for (std::size_t i = 0; i < W.size(); ++i) {
            Mt[i] = b1 * Mt[i] + (T(1) - b1) * G[i];
            Vt[i] = b2 * Vt[i] + (T(1) - b2) * G[i] * G[i];
            const T mhat = Mt[i] * ibc1;
            const T vhat = Vt[i] * ibc2;
            W[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

/// One optimizer step on a clean batch. Returns the batch loss before the
/// update.
template <class T>
double train_step(ModelWeights<T>& w, const std::vector<SyntheticSample<T>>& batch, AdamState<T>& opt,
                  const TrainConfig& cfg, Rng& rng) {
    auto examples = draw_flow_examples(batch, w.config, rng, cfg.cond_dropout);
    ModelWeights<T> grads = w.zeros_like();
    const double loss = flow_loss_and_grad(examples, w, &grads);
    if (!std::isfinite(loss))
        throw NumericError("train: non-finite loss at step " + std::to_string(opt.step + 1));
    adam_update(w, grads, opt, cfg);
    return loss;
}

/// Fixed held-out examples used to measure progress without sampling noise.
template <class T>
std::vector<FlowExample<T>> eval_examples(const ModelConfig& cfg, std::uint64_t seed, std::size_t count) {
    auto data = gen_dataset<T>(seed ^ 0x5eedULL, count, cfg);
    Rng rng = Rng(seed).fork(0xe7a1ULL);
    return draw_flow_examples(data, cfg, rng, 0.0);
}

struct TrainReport {
    std::vector<double> step_losses;
    double eval_loss_initial = 0;
    double eval_loss_final = 0;
};

/// Trains from the given weights on the procedural data stream. Batch b of
/// step s uses samples [s*batch, (s+1)*batch) of stream `cfg.seed`.
template <class T>
TrainReport train(ModelWeights<T>& w, const TrainConfig& cfg,
                  const std::function<void(std::size_t, double)>& on_step = {}) {
    cfg.validate();
    TrainReport report;
    const auto eval = eval_examples<T>(w.config, cfg.seed, 32);
    report.eval_loss_initial = flow_loss_and_grad<T>(eval, w, nullptr);
    AdamState<T> opt = AdamState<T>::init(w);
    Rng noise = Rng(cfg.seed).fork(0x7a1bULL);
    std::vector<SyntheticSample<T>> batch(cfg.batch);
    for (std::size_t s = 0; s < cfg.steps; ++s) {
        for (std::size_t b = 0; b < cfg.batch; ++b) batch[b] = gen_sample<T>(cfg.seed, s * cfg.batch + b, w.config);
        const double loss = train_step(w, batch, opt, cfg, noise);
        report.step_losses.push_back(loss);
        if (on_step) on_step(s + 1, loss);
    }
    report.eval_loss_final = flow_loss_and_grad<T>(eval, w, nullptr);
    return report;
}

struct GradCheckResult {
    double max_rel_error = 0;
    double max_abs_error = 0;
    std::size_t coords_checked = 0;
    std::size_t worst_index = 0;
};

/// Compares analytic gradients of a scalar loss with a fourth-order central
/// difference, (-f(+2h) + 8 f(+h) - 8 f(-h) + f(-2h)) / 12h, at `samples`
/// random coordinates. A coordinate whose absolute disagreement is within
/// `abs_tol` counts as exact; otherwise its error is |a - n| / max(|a|, |n|).
inline GradCheckResult grad_check_coords(std::vector<double>& params, const std::vector<double>& analytic,
                                         const std::function<double()>& loss, std::size_t samples, Rng& rng,
                                         double step = 1e-3, double abs_tol = 1e-10) {
    GradCheckResult res;
    for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t i = rng.below(params.size());
        const double orig = params[i];
        auto at = [&](double h) {
            params[i] = orig + h;
            return loss();
        };
        const double f2 = at(2 * step), f1 = at(step), m1 = at(-step), m2 = at(-2 * step);
        params[i] = orig;
        const double numeric = (-f2 + 8 * f1 - 8 * m1 + m2) / (12 * step);
        const double a = analytic[i];
        const double diff = std::abs(a - numeric);
        const double rel = diff <= abs_tol ? 0.0 : diff / std::max(std::abs(a), std::abs(numeric));
        res.max_abs_error = std::max(res.max_abs_error, diff);
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_index = i;
        }
        ++res.coords_checked;
    }
    return res;
}

/// Finite-difference check of the DiT backward pass in double precision.
template <class T>
GradCheckResult grad_check(const ModelWeights<T>& weights, const std::vector<FlowExample<T>>& tiny_batch,
                           std::size_t samples = 128, std::uint64_t seed = 7) {
    static_assert(std::is_same_v<T, double>, "gradient checks run in double precision");
    ModelWeights<double> w = weights;
    ModelWeights<double> grads = w.zeros_like();
    flow_loss_and_grad(tiny_batch, w, &grads);
    std::vector<double> params = w.flat_params();
    const std::vector<double> analytic = grads.flat_params();
    auto load = [&]() {
        std::size_t off = 0;
        w.for_each_param([&](const std::string&, Tensor<double>& t) {
            for (auto& v : t.values()) v = params[off++];
        });
    };
    std::function<double()> loss = [&]() {
        load();
        return flow_loss_and_grad<double>(tiny_batch, w, nullptr);
    };
    Rng rng(seed);
    auto res = grad_check_coords(params, analytic, loss, samples, rng);
    load();
    return res;
}

} // namespace kvedit

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "kvedit/errors.hpp"
#include "kvedit/metrics.hpp"
#include "kvedit/model.hpp"

namespace kvedit {

enum class ScheduleKind { Uniform };

/// Time nodes t_0 = 0 < t_1 < ... < t_N. A grid of `total_steps` with
/// `skip` drops the last `skip` nodes at the noise end, so the top node is
/// (total_steps - skip) / total_steps.
struct TimeGrid {
    std::size_t total_steps = 28;
    std::size_t skip = 4;
    std::vector<double> t;

    std::size_t steps() const { return t.size() - 1; }
    double top() const { return t.back(); }
};

inline TimeGrid make_time_grid(std::size_t total_steps, std::size_t skip, ScheduleKind kind = ScheduleKind::Uniform) {
    if (total_steps < 1) throw ConfigError("time grid: steps must be >= 1");
    if (skip >= total_steps)
        throw ConfigError("time grid: skip " + std::to_string(skip) + " must be < steps " + std::to_string(total_steps));
    TimeGrid g;
    g.total_steps = total_steps;
    g.skip = skip;
    const std::size_t n = total_steps - skip;
    switch (kind) {
    case ScheduleKind::Uniform:
        for (std::size_t i = 0; i <= n; ++i) g.t.push_back(static_cast<double>(i) / static_cast<double>(total_steps));
        break;
    }
    return g;
}

/// x + dt * v, elementwise.
template <class T>
Tensor<T> euler_update(const Tensor<T>& x, const Tensor<T>& v, double dt) {
    if (x.shape() != v.shape())
        throw ShapeError("euler: state " + shape_str(x.shape()) + " vs velocity " + shape_str(v.shape()));
    Tensor<T> out = x;
    const T h = static_cast<T>(dt);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += h * v[i];
    return out;
}

template <class T>
struct StepResult {
    TokenState<T> state;
    std::vector<KVEntry<T>> kv; ///< filled in record modes; timestep set to the step index
};

namespace detail {

inline void require_on_grid(double t, const TimeGrid& grid, std::size_t node, const char* op) {
    if (node >= grid.t.size())
        throw ShapeError(std::string(op) + ": node " + std::to_string(node) + " outside a grid of " +
                         std::to_string(grid.steps()) + " steps");
    if (t != grid.t[node])
        throw ShapeError(std::string(op) + ": state time " + std::to_string(t) + " is not grid node " +
                         std::to_string(node) + " (" + std::to_string(grid.t[node]) + ")");
}

} // namespace detail

/// One explicit-Euler inversion step from node i-1 to node i. The velocity
/// is evaluated at the known earlier state (t_{i-1}); recorded K/V entries
/// are keyed by i.
template <class T, VelocityField<T> Field>
StepResult<T> invert_step(const Field& field, const TokenState<T>& x, const TimeGrid& grid, std::size_t i,
                          ConditionId c, double guidance, const KvMode<T>& kv = KvMode<T>::plain()) {
    if (i < 1 || i > grid.steps()) throw ShapeError("invert_step: step index " + std::to_string(i) + " out of range");
    detail::require_on_grid(x.t, grid, i - 1, "invert_step");
    VelocityOutput<T> out = field.velocity(x, c, guidance, kv);
    StepResult<T> res;
    res.state = {euler_update(x.tokens, out.velocity, grid.t[i] - grid.t[i - 1]), x.index, grid.t[i]};
    for (auto& e : out.kv) e.timestep = i;
    res.kv = std::move(out.kv);
    return res;
}

/// One Euler denoising step from node i to node i-1, velocity at node i.
template <class T, VelocityField<T> Field>
StepResult<T> denoise_step(const Field& field, const TokenState<T>& z, const TimeGrid& grid, std::size_t i,
                           ConditionId c, double guidance, const KvMode<T>& kv = KvMode<T>::plain()) {
    if (i < 1 || i > grid.steps()) throw ShapeError("denoise_step: step index " + std::to_string(i) + " out of range");
    detail::require_on_grid(z.t, grid, i, "denoise_step");
    VelocityOutput<T> out = field.velocity(z, c, guidance, kv);
    StepResult<T> res;
    res.state = {euler_update(z.tokens, out.velocity, grid.t[i - 1] - grid.t[i]), z.index, grid.t[i - 1]};
    for (auto& e : out.kv) e.timestep = i;
    res.kv = std::move(out.kv);
    return res;
}

template <class T>
struct Trajectory {
    std::vector<TokenState<T>> states; ///< node 0 .. N when recorded, otherwise just the final state

    const TokenState<T>& final_state() const { return states.back(); }
};

/// Inverts clean tokens from t_0 to the top of the grid.
template <class T, VelocityField<T> Field>
Trajectory<T> invert(const Field& field, const Tensor<T>& x0_tokens, ConditionId c, const TimeGrid& grid,
                     double guidance, bool record_trajectory = false) {
    Trajectory<T> traj;
    TokenState<T> x{x0_tokens, {}, grid.t[0]};
    if (record_trajectory) traj.states.push_back(x);
    for (std::size_t i = 1; i <= grid.steps(); ++i) {
        x = invert_step(field, x, grid, i, c, guidance).state;
        if (record_trajectory) traj.states.push_back(x);
    }
    if (!record_trajectory) traj.states.push_back(std::move(x));
    return traj;
}

/// Denoises from node `from` (default: the top) down to t_0.
template <class T, VelocityField<T> Field>
TokenState<T> denoise(const Field& field, TokenState<T> z, ConditionId c, const TimeGrid& grid, double guidance,
                      std::size_t from = static_cast<std::size_t>(-1)) {
    if (from == static_cast<std::size_t>(-1)) from = grid.steps();
    for (std::size_t i = from; i >= 1; --i) z = denoise_step(field, z, grid, i, c, guidance).state;
    return z;
}

/// Inversion-reconstruction error by depth: for each node i, the state
/// x_{t_i} reached by inversion is denoised back to t_0 and compared with
/// the input. Depth 0 is the input itself.
template <class T, VelocityField<T> Field>
std::vector<std::pair<std::size_t, double>> recon_error_curve(const Field& field, const Tensor<T>& x0_tokens,
                                                              ConditionId c, const TimeGrid& grid,
                                                              double guidance = 1.0) {
    const Trajectory<T> traj = invert(field, x0_tokens, c, grid, guidance, true);
    std::vector<std::pair<std::size_t, double>> curve;
    for (std::size_t i = 0; i <= grid.steps(); ++i) {
        const TokenState<T> rec = denoise(field, traj.states[i], c, grid, guidance, i);
        curve.emplace_back(i, mse(rec.tokens, x0_tokens));
    }
    return curve;
}

/// Per-node signal and noise coefficients of a deterministic sampler:
/// x_t = alpha_bar_t * x_0 + beta_bar_t * eps.
struct DdimSchedule {
    std::vector<double> alpha_bar;
    std::vector<double> beta_bar;
};

/// alpha_bar = 1 - t, beta_bar = t: the rectified-flow interpolation.
inline DdimSchedule linear_ddim_schedule(const TimeGrid& grid) {
    DdimSchedule s;
    for (double t : grid.t) {
        s.alpha_bar.push_back(1.0 - t);
        s.beta_bar.push_back(t);
    }
    return s;
}

/// Deterministic DDIM update from node i to node i-1 given the noise
/// prediction at node i.
template <class T>
Tensor<T> ddim_step(const Tensor<T>& x_t, const Tensor<T>& eps, const DdimSchedule& s, std::size_t i) {
    if (s.alpha_bar.size() != s.beta_bar.size()) throw ShapeError("ddim: schedule lengths differ");
    if (i < 1 || i >= s.alpha_bar.size()) throw ShapeError("ddim: node index " + std::to_string(i) + " out of range");
    if (x_t.shape() != eps.shape()) throw ShapeError("ddim: state and noise shapes differ");
    const double a = s.alpha_bar[i], b = s.beta_bar[i], a_prev = s.alpha_bar[i - 1], b_prev = s.beta_bar[i - 1];
    if (a == 0.0) throw NumericError("ddim: alpha_bar is zero at node " + std::to_string(i));
    Tensor<T> out(x_t.shape());
    for (std::size_t k = 0; k < out.size(); ++k) {
        const double x0_pred = (static_cast<double>(x_t[k]) - b * static_cast<double>(eps[k])) / a;
        out[k] = static_cast<T>(a_prev * x0_pred + b_prev * static_cast<double>(eps[k]));
    }
    return out;
}

/// Noise prediction equivalent to a velocity at time t on the straight
/// path: eps = x_t + (1 - t) v.
template <class T>
Tensor<T> velocity_to_eps(const Tensor<T>& x_t, const Tensor<T>& v, double t) {
    return euler_update(x_t, v, 1.0 - t);
}

// ---------------------------------------------------------------------------
// Stub fields for exactness tests.

/// Velocity k everywhere, independent of state, time and condition. In
/// record modes it reports each layer's background rows of the input as
/// both K and V, so cache plumbing can be exercised without a network.
template <class T>
class ConstantField {
public:
    ConstantField(ModelConfig cfg, T k, std::size_t layers) : cfg_(cfg), k_(k), layers_(layers) {}

    VelocityOutput<T> velocity(const TokenState<T>& s, ConditionId, double, const KvMode<T>& kv) const {
        VelocityOutput<T> out;
        out.velocity = Tensor<T>(s.tokens.shape(), k_);
        const std::size_t P = cfg_.tokens();
        if (kv.records()) {
            if (!kv.partition) throw ShapeError("stub: record mode without a partition");
            kv.partition->validate(P);
            if (s.tokens.rows() != P) throw ShapeError("stub: record mode needs the full sequence");
            for (std::size_t j = 1; j <= layers_; ++j) {
                KVEntry<T> e;
                e.layer = j;
                e.bg_positions = kv.partition->bg;
                e.k = gather_rows(s.tokens, std::span<const std::size_t>(e.bg_positions));
                e.v = e.k;
                out.kv.push_back(std::move(e));
            }
        } else if (kv.mode == AttentionMode::Inject) {
            if (kv.cache.size() != layers_)
                throw CacheError("stub: inject needs " + std::to_string(layers_) + " cached layers, got " +
                                 std::to_string(kv.cache.size()));
            for (const KVEntry<T>* e : kv.cache) {
                std::vector<char> covered(P, 0);
                for (std::size_t r = 0; r < s.tokens.rows(); ++r) covered.at(s.position(r)) = 1;
                for (std::size_t p : e->bg_positions) {
                    if (covered.at(p)) throw ShapeError("stub: cached position overlaps a foreground row");
                    covered[p] = 1;
                }
                for (char f : covered)
                    if (!f) throw ShapeError("stub: key/value assembly has a gap");
            }
        }
        return out;
    }

    std::size_t num_layers() const { return layers_; }
    const ModelConfig& config() const { return cfg_; }

private:
    ModelConfig cfg_;
    T k_;
    std::size_t layers_;
};

} // namespace kvedit

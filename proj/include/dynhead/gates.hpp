#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "dynhead/conv.hpp"
#include "dynhead/ops.hpp"
#include "dynhead/tape.hpp"
#include "dynhead/tensor.hpp"

namespace dynhead {

/// Configuration of the gate activation. tau controls the one-sided gradient
/// at 0+, which equals 1 - tanh(tau).
struct GateActivationConfig {
    double tau = 1.5;

    void validate() const {
        if (!(tau >= 0.0) || !std::isfinite(tau))
            throw std::invalid_argument("gate: tau must be finite and >= 0, got " +
                                        std::to_string(tau));
    }
};

/// Per-path, per-location gating factors in [0, 1], one channel at the owning
/// node's resolution.
struct GatingMap {
    Tensor values; // (B, 1, H, W)
};

/// delta(v) = max(0, (tanh(v - tau) + tanh(tau)) / (1 + tanh(tau))).
/// Zero for all v <= 0, strictly increasing for v > 0, saturates at 1.
inline double gate_activation_value(double v, double tau) {
    if (v <= 0.0) return 0.0;
    return (std::tanh(v - tau) + std::tanh(tau)) / (1.0 + std::tanh(tau));
}

/// Closed-form derivative: (1 - tanh^2(v - tau)) / (1 + tanh(tau)) for v > 0,
/// exactly 0 for v <= 0 (the max(0, .) subgradient convention at the kink).
inline double gate_activation_grad_value(double v, double tau) {
    if (v <= 0.0) return 0.0;
    const double t = std::tanh(v - tau);
    return (1.0 - t * t) / (1.0 + std::tanh(tau));
}

inline Tensor gate_activation(Tape& tape, Tensor v, const GateActivationConfig& cfg) {
    cfg.validate();
    const double tau = cfg.tau;
    Tensor out = Tensor::zeros(v.shape());
    const double* vd = v.data();
    double* od = out.data();
    const std::int64_t n = v.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] = gate_activation_value(vd[i], tau);
    tape.record({v}, out, [v, out, tau]() mutable {
        const double* vd = v.data();
        const double* g = out.grad().data();
        double* dv = v.grad().data();
        const std::int64_t n = v.numel();
        for (std::int64_t i = 0; i < n; ++i) dv[i] += g[i] * gate_activation_grad_value(vd[i], tau);
    });
    return out;
}

/// Elementwise derivative of the gate activation as a plain tensor (no tape).
inline Tensor gate_activation_grad(const Tensor& v, const GateActivationConfig& cfg) {
    cfg.validate();
    Tensor out = Tensor::zeros(v.shape());
    const double* vd = v.data();
    double* od = out.data();
    const std::int64_t n = v.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] = gate_activation_grad_value(vd[i], cfg.tau);
    return out;
}

/// One 3x3 convolution embedding C channels into a single gate channel.
struct SpatialGateParams {
    Tensor weight; // (1, C, 3, 3)
    Tensor bias;   // (1, 1, 1, 1)

    void validate(int channels) const {
        if (weight.shape().n != 1)
            throw std::invalid_argument("spatial gate: weight must have one output channel, got " +
                                        std::to_string(weight.shape().n));
        if (weight.shape().c != channels)
            throw std::invalid_argument("spatial gate: weight in-channels " +
                                        std::to_string(weight.shape().c) + " do not match input " +
                                        std::to_string(channels));
    }
};

/// Pre-activation of the gate: a single 3x3 conv to one channel.
inline Tensor spatial_gate_preact(Tape& tape, const Tensor& x, const SpatialGateParams& params) {
    params.validate(x.shape().c);
    return conv2d(tape, x, params.weight, params.bias, 1);
}

/// Fine-grained spatial gate: conv to one channel, then the gate activation.
inline GatingMap spatial_gate_forward(Tape& tape, const Tensor& x, const SpatialGateParams& params,
                                      const GateActivationConfig& cfg) {
    return GatingMap{gate_activation(tape, spatial_gate_preact(tape, x, params), cfg)};
}

/// Coarse-grained variant: global average pooling between the conv and the
/// activation, broadcast back to a spatially constant map.
inline GatingMap coarse_gate_forward(Tape& tape, const Tensor& x, const SpatialGateParams& params,
                                     const GateActivationConfig& cfg) {
    Tensor pre = spatial_gate_preact(tape, x, params);
    Tensor pooled = global_avg_pool(tape, pre);
    Tensor act = gate_activation(tape, pooled, cfg);
    return GatingMap{broadcast_spatial(tape, act, x.shape().h, x.shape().w)};
}

} // namespace dynhead

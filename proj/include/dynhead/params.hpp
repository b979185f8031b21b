#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynhead/tape.hpp"
#include "dynhead/tensor.hpp"

namespace dynhead {

using GradientMap = std::map<std::string, Tensor>;

/// Named map from parameter path to tensor, plus momentum buffers keyed
/// identically. Parameter shapes are immutable once added.
class ParameterSet {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (params_.count(name))
            throw std::invalid_argument("ParameterSet: duplicate parameter '" + name + "'");
        t.set_requires_grad(true);
        auto [it, ok] = params_.emplace(name, std::move(t));
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Tensor& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end())
            throw std::invalid_argument("ParameterSet: unknown parameter '" + name + "'");
        return it->second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end())
            throw std::invalid_argument("ParameterSet: unknown parameter '" + name + "'");
        return it->second;
    }

    std::map<std::string, Tensor>& entries() { return params_; }
    const std::map<std::string, Tensor>& entries() const { return params_; }

    std::map<std::string, Tensor>& momentum() { return momentum_; }
    const std::map<std::string, Tensor>& momentum() const { return momentum_; }

    std::size_t size() const { return params_.size(); }

    /// Deep copy of parameters and momentum state.
    ParameterSet clone() const {
        ParameterSet out;
        for (const auto& [name, t] : params_) out.params_.emplace(name, t.clone());
        for (const auto& [name, t] : momentum_) out.momentum_.emplace(name, t.clone());
        return out;
    }

private:
    std::map<std::string, Tensor> params_;
    std::map<std::string, Tensor> momentum_;
};

/// Runs the reverse sweep and returns gradients for every parameter with
/// requires_grad; parameters the loss does not reach get zero gradients.
inline GradientMap backward(Tape& tape, const Tensor& loss, const ParameterSet& params) {
    tape.backward(loss);
    GradientMap grads;
    for (const auto& [name, t] : params.entries()) {
        if (!t.requires_grad()) continue;
        Tensor g = Tensor::zeros(t.shape());
        if (t.has_grad()) {
            Tensor tt = t;
            std::copy(tt.grad().begin(), tt.grad().end(), g.values_mut().begin());
        }
        grads.emplace(name, std::move(g));
    }
    return grads;
}

/// Classic momentum SGD with L2 weight decay added to the gradient:
/// g' = g + wd * p; buf = momentum * buf + g'; p -= lr * buf.
inline void sgd_step(ParameterSet& params, const GradientMap& grads, double lr, double momentum,
                     double weight_decay) {
    if (grads.size() != params.size())
        throw std::invalid_argument("sgd_step: gradient count " + std::to_string(grads.size()) +
                                    " does not match parameter count " +
                                    std::to_string(params.size()));
    for (auto& [name, p] : params.entries()) {
        auto git = grads.find(name);
        if (git == grads.end())
            throw std::invalid_argument("sgd_step: missing gradient for parameter '" + name + "'");
        const Tensor& g = git->second;
        if (g.shape() != p.shape())
            throw std::invalid_argument("sgd_step: gradient shape " + g.shape().str() +
                                        " does not match parameter '" + name + "' shape " +
                                        p.shape().str());
        auto mit = params.momentum().find(name);
        if (mit == params.momentum().end())
            mit = params.momentum().emplace(name, Tensor::zeros(p.shape())).first;
        double* pv = p.data();
        double* mv = mit->second.data();
        const double* gv = g.data();
        const std::int64_t n = p.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const double gd = gv[i] + weight_decay * pv[i];
            mv[i] = momentum * mv[i] + gd;
            pv[i] -= lr * mv[i];
        }
    }
}

} // namespace dynhead

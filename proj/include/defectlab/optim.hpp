#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "network.hpp"

namespace defectlab::nn {

struct OptimizerConfig {
    enum class Kind { sgd, adam };
    Kind kind = Kind::adam;
    double lr = 1e-3;
    double momentum = 0.0;  // sgd
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static OptimizerConfig sgd(double lr, double momentum = 0.0) { return {Kind::sgd, lr, momentum}; }
    static OptimizerConfig adam(double lr = 1e-3, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
        return {Kind::adam, lr, 0.0, b1, b2, eps};
    }

    void validate() const {
        if (!(lr > 0)) throw ParameterError("learning rate must be positive");
        if (momentum < 0 || momentum >= 1) throw ParameterError("momentum must lie in [0, 1)");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ParameterError("Adam betas must lie in [0, 1)");
        if (!(epsilon > 0)) throw ParameterError("Adam epsilon must be positive");
    }
};

inline std::string to_string(OptimizerConfig::Kind k) { return k == OptimizerConfig::Kind::sgd ? "sgd" : "adam"; }

// One parameter tensor and its gradient, as seen by the optimizer.
struct ParamSlot {
    std::span<double> value;
    std::span<const double> grad;
};

/// SGD with momentum buffer (v <- m v + g; p <- p - lr v) or Adam with bias
/// correction. State is positional: slot i must always refer to the same
/// tensor.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const OptimizerConfig& config() const noexcept { return cfg_; }
    long steps() const noexcept { return t_; }

    void step(const std::vector<ParamSlot>& slots) {
        if (first_.size() < slots.size()) {
            first_.resize(slots.size());
            second_.resize(slots.size());
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t s = 0; s < slots.size(); ++s) {
            auto value = slots[s].value;
            auto grad = slots[s].grad;
            if (value.size() != grad.size()) throw InputError("parameter/gradient size mismatch in optimizer slot");
            auto& m = first_[s];
            if (m.size() != value.size()) m.assign(value.size(), 0.0);
            if (cfg_.kind == OptimizerConfig::Kind::sgd) {
                for (std::size_t i = 0; i < value.size(); ++i) {
                    m[i] = cfg_.momentum * m[i] + grad[i];
                    value[i] -= cfg_.lr * m[i];
                }
                continue;
            }
            auto& v = second_[s];
            if (v.size() != value.size()) v.assign(value.size(), 0.0);
            for (std::size_t i = 0; i < value.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * grad[i];
                v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * grad[i] * grad[i];
                const double mhat = m[i] / bc1, vhat = v[i] / bc2;
                value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
            }
        }
    }

private:
    OptimizerConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<double>> first_, second_;
};

// Slots for the parameterized layers in [lowest_layer, end).
inline std::vector<ParamSlot> network_slots(NetworkParams& params, const NetworkParams& grads, int lowest_layer = 0) {
    std::vector<ParamSlot> slots;
    for (std::size_t i = static_cast<std::size_t>(std::max(lowest_layer, 0)); i < params.layers.size(); ++i) {
        auto& p = params.layers[i];
        if (p.empty()) continue;
        slots.push_back({p.weight.values(), grads.layers[i].weight.values()});
        slots.push_back({p.bias.values(), grads.layers[i].bias.values()});
    }
    return slots;
}

}  // namespace defectlab::nn

#pragma once

#include <cmath>
#include <map>
#include <string>

#include "mimg/params.hpp"

namespace mimg {

// Bias-corrected Adam over the trainable entries of a parameter store.
// Moment buffers are keyed by parameter name so they can ride along in
// checkpoints and survive a save/resume cycle bit-for-bit.
template <class T>
class AdamT {
public:
    struct Slot {
        TensorT<T> m;
        TensorT<T> v;
    };

    AdamT() = default;
    AdamT(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Applies one update from the gradients currently accumulated in the
    // store and returns the new step count. Gradients are left untouched;
    // callers zero them when starting the next accumulation window.
    int64_t step(ParamStoreT<T>& store) {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(step_count_));
        for (auto& p : store.items()) {
            if (!p.trainable) continue;
            auto& slot = slots_[p.name];
            if (slot.m.shape != p.var.value().shape) {
                slot.m = TensorT<T>::zeros(p.var.value().shape);
                slot.v = TensorT<T>::zeros(p.var.value().shape);
            }
            const auto& g = p.var.grad().data;
            if (g.empty()) throw NumericError("adam: parameter '" + p.name + "' has no gradient");
            auto& val = p.var.value().data;
            for (size_t i = 0; i < val.size(); ++i) {
                const T gi = g[i];
                slot.m.data[i] = beta1_ * slot.m.data[i] + (T(1) - beta1_) * gi;
                slot.v.data[i] = beta2_ * slot.v.data[i] + (T(1) - beta2_) * gi * gi;
                const T mhat = static_cast<T>(slot.m.data[i] / bc1);
                const T vhat = static_cast<T>(slot.v.data[i] / bc2);
                val[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
        return step_count_;
    }

    T learning_rate() const { return lr_; }
    void set_learning_rate(T lr) { lr_ = lr; }
    T beta1() const { return beta1_; }
    T beta2() const { return beta2_; }
    T eps() const { return eps_; }
    int64_t step_count() const { return step_count_; }
    void set_step_count(int64_t n) { step_count_ = n; }
    std::map<std::string, Slot>& slots() { return slots_; }
    const std::map<std::string, Slot>& slots() const { return slots_; }

private:
    T lr_ = T(1e-3);
    T beta1_ = T(0.9);
    T beta2_ = T(0.999);
    T eps_ = T(1e-8);
    int64_t step_count_ = 0;
    std::map<std::string, Slot> slots_;
};

using Adam = AdamT<float>;

} // namespace mimg

#pragma once

#include <map>
#include <string>

#include "sarl/tensor.hpp"

namespace sarl {

// Adam with decoupled weight decay. Decay is applied directly to the
// parameters, never through the moment estimates.
template <class T>
class AdamW {
public:
    AdamW(T lr, T beta1, T beta2, T weight_decay, T eps = T(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {}

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }

    void step(const std::string& name, Tensor<T>& param, const Tensor<T>& grad,
              bool apply_decay) {
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.size() == 0) {
            m = Tensor<T>(param.shape);
            v = Tensor<T>(param.shape);
        }
        int64_t t = ++t_[name];
        T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t));
        T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t));
        for (int64_t i = 0; i < param.size(); ++i) {
            T gi = grad[i];
            m[i] = beta1_ * m[i] + (T(1) - beta1_) * gi;
            v[i] = beta2_ * v[i] + (T(1) - beta2_) * gi * gi;
            T mhat = m[i] / bc1;
            T vhat = v[i] / bc2;
            if (apply_decay) param[i] -= lr_ * wd_ * param[i];
            param[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }

    std::map<std::string, Tensor<T>>& moments1() { return m_; }
    std::map<std::string, Tensor<T>>& moments2() { return v_; }
    std::map<std::string, int64_t>& steps() { return t_; }

private:
    T lr_, beta1_, beta2_, wd_, eps_;
    std::map<std::string, Tensor<T>> m_, v_;
    std::map<std::string, int64_t> t_;
};

// Plain SGD with momentum (probe-head training for classification).
template <class T>
class SgdMomentum {
public:
    SgdMomentum(T lr, T momentum) : lr_(lr), mom_(momentum) {}

    void step(const std::string& name, Tensor<T>& param, const Tensor<T>& grad) {
        auto& v = v_[name];
        if (v.size() == 0) v = Tensor<T>(param.shape);
        for (int64_t i = 0; i < param.size(); ++i) {
            v[i] = mom_ * v[i] + grad[i];
            param[i] -= lr_ * v[i];
        }
    }

private:
    T lr_, mom_;
    std::map<std::string, Tensor<T>> v_;
};

}  // namespace sarl

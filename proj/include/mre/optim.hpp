#pragma once

#include <cmath>
#include <map>
#include <string>

#include "mre/error.hpp"
#include "mre/tensor.hpp"

namespace mre::optim {

// Piecewise-linear schedule over progress x = step / total: rises from 0 to
// `peak` at x = warmup, then falls to 0 at x = 1.
inline double warmup_linear(std::size_t step, std::size_t total, double peak, double warmup) {
    if (total == 0) return 0.0;
    const double x = static_cast<double>(step) / static_cast<double>(total);
    if (x < warmup) return peak * x / warmup;
    if (x >= 1.0) return 0.0;
    return peak * (1.0 - x) / (1.0 - warmup);
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double max_grad_norm = 1.0;  // <= 0 disables clipping
};

// Adaptive-moment update in the BertAdam form: no bias correction,
// decoupled weight decay, global-norm gradient clipping.
template <typename T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // `params` and `grads` are parallel name → tensor lists visited in the
    // same order.
    void step(std::vector<std::pair<std::string, Matrix<T>*>>& params,
              const std::vector<std::pair<std::string, Matrix<T>*>>& grads, double lr) {
        if (params.size() != grads.size()) throw ContractViolation("parameter/gradient lists differ");
        T scale{1};
        if (cfg_.max_grad_norm > 0) {
            T sq{0};
            for (const auto& [_, g] : grads)
                for (T v : g->data()) sq += v * v;
            const T norm = std::sqrt(sq);
            if (norm > static_cast<T>(cfg_.max_grad_norm)) scale = static_cast<T>(cfg_.max_grad_norm) / norm;
        }
        for (std::size_t t = 0; t < params.size(); ++t) {
            auto& [name, p] = params[t];
            const Matrix<T>& g = *grads[t].second;
            auto& st = state_[name];
            if (st.m.size() != p->size()) {
                st.m = Matrix<T>(p->rows(), p->cols());
                st.v = Matrix<T>(p->rows(), p->cols());
            }
            for (std::size_t i = 0; i < p->size(); ++i) {
                const T gi = g.data()[i] * scale;
                T& m = st.m.data()[i];
                T& v = st.v.data()[i];
                m = static_cast<T>(cfg_.beta1) * m + static_cast<T>(1 - cfg_.beta1) * gi;
                v = static_cast<T>(cfg_.beta2) * v + static_cast<T>(1 - cfg_.beta2) * gi * gi;
                T update = m / (std::sqrt(v) + static_cast<T>(cfg_.eps));
                if (cfg_.weight_decay > 0) update += static_cast<T>(cfg_.weight_decay) * p->data()[i];
                p->data()[i] -= static_cast<T>(lr) * update;
            }
        }
    }

private:
    struct Moments {
        Matrix<T> m, v;
    };
    AdamConfig cfg_;
    std::map<std::string, Moments> state_;
};

} // namespace mre::optim

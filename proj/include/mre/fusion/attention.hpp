#pragma once

// Multi-head scaled dot-product attention with key masking and its exact
// backward pass. Row-vector convention: Y = X·W.

#include <cmath>
#include <span>
#include <vector>

#include "mre/tensor.hpp"

namespace mre::fusion {

template <typename T>
struct AttentionParams {
    Matrix<T> wq, wk, wv, wo;  // d × d each

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + "/wq", wq);
        fn(prefix + "/wk", wk);
        fn(prefix + "/wv", wv);
        fn(prefix + "/wo", wo);
    }
};

template <typename T>
struct MhaCache {
    Matrix<T> q, k, v;
    std::vector<Matrix<T>> probs;  // one Lq × Lk matrix per head
    Matrix<T> context;             // concatenated heads, before wo
};

namespace detail {

inline bool key_active(std::span<const unsigned char> mask, std::size_t j) { return mask.empty() || mask[j]; }

template <typename T>
void check_attention_shapes(const Matrix<T>& xq, const Matrix<T>& kv, std::span<const unsigned char> kv_mask,
                            const AttentionParams<T>& p, std::size_t heads) {
    const std::size_t d = xq.cols();
    if (kv.cols() != d) throw ShapeError("attention: query " + xq.shape_str() + " and keys " + kv.shape_str() + " differ in width");
    for (const Matrix<T>* w : {&p.wq, &p.wk, &p.wv, &p.wo})
        if (w->rows() != d || w->cols() != d)
            throw ShapeError("attention: projection " + w->shape_str() + " does not match width " + std::to_string(d));
    if (heads == 0 || d % heads != 0)
        throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    if (!kv_mask.empty() && kv_mask.size() != kv.rows())
        throw ShapeError("attention: key mask length " + std::to_string(kv_mask.size()) + " vs " +
                         std::to_string(kv.rows()) + " keys");
    std::size_t active = 0;
    for (std::size_t j = 0; j < kv.rows(); ++j) active += key_active(kv_mask, j);
    if (active == 0 && xq.rows() > 0) throw ContractViolation("attention over an empty key set");
}

} // namespace detail

// Y = concat_h softmax(Q_h K_hᵀ / √d_h) V_h · W_o with Q = xq·W_q,
// K = kv·W_k, V = kv·W_v. Masked keys get exactly zero weight.
template <typename T>
Matrix<T> mha_forward(const Matrix<T>& xq, const Matrix<T>& kv, std::span<const unsigned char> kv_mask,
                      const AttentionParams<T>& p, std::size_t heads, MhaCache<T>* cache = nullptr) {
    detail::check_attention_shapes(xq, kv, kv_mask, p, heads);
    const std::size_t d = xq.cols(), dh = d / heads, lq = xq.rows(), lk = kv.rows();
    const T scale = T{1} / std::sqrt(static_cast<T>(dh));

    Matrix<T> q = matmul(xq, p.wq), k = matmul(kv, p.wk), v = matmul(kv, p.wv);
    Matrix<T> context(lq, d);
    std::vector<Matrix<T>> probs;
    probs.reserve(heads);
    std::vector<T> row(lk);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        Matrix<T> ph(lq, lk);
        for (std::size_t i = 0; i < lq; ++i) {
            for (std::size_t j = 0; j < lk; ++j) {
                if (!detail::key_active(kv_mask, j)) continue;
                T s{0};
                for (std::size_t c = 0; c < dh; ++c) s += q(i, off + c) * k(j, off + c);
                row[j] = s * scale;
            }
            softmax_inplace<T>(row, kv_mask);
            for (std::size_t j = 0; j < lk; ++j) {
                ph(i, j) = row[j];
                if (!detail::key_active(kv_mask, j)) continue;
                for (std::size_t c = 0; c < dh; ++c) context(i, off + c) += row[j] * v(j, off + c);
            }
        }
        probs.push_back(std::move(ph));
    }
    Matrix<T> y = matmul(context, p.wo);
    if (cache) *cache = {std::move(q), std::move(k), std::move(v), std::move(probs), std::move(context)};
    return y;
}

// Accumulates parameter gradients into `grad` and input gradients into
// `dxq` / `dkv` (which must already have the shapes of xq / kv).
template <typename T>
void mha_backward(const Matrix<T>& dy, const Matrix<T>& xq, const Matrix<T>& kv,
                  std::span<const unsigned char> kv_mask, const AttentionParams<T>& p, std::size_t heads,
                  const MhaCache<T>& c, AttentionParams<T>& grad, Matrix<T>& dxq, Matrix<T>& dkv) {
    const std::size_t d = xq.cols(), dh = d / heads, lq = xq.rows(), lk = kv.rows();
    const T scale = T{1} / std::sqrt(static_cast<T>(dh));

    grad.wo += matmul_tn(c.context, dy);
    const Matrix<T> dctx = matmul_nt(dy, p.wo);
    Matrix<T> dq(lq, d), dk(lk, d), dv(lk, d);
    std::vector<T> dp(lk);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        const Matrix<T>& ph = c.probs[h];
        for (std::size_t i = 0; i < lq; ++i) {
            T rowdot{0};
            for (std::size_t j = 0; j < lk; ++j) {
                dp[j] = T{0};
                if (!detail::key_active(kv_mask, j)) continue;
                T s{0};
                for (std::size_t cc = 0; cc < dh; ++cc) {
                    s += dctx(i, off + cc) * c.v(j, off + cc);
                    dv(j, off + cc) += ph(i, j) * dctx(i, off + cc);
                }
                dp[j] = s;
                rowdot += ph(i, j) * s;
            }
            for (std::size_t j = 0; j < lk; ++j) {
                if (!detail::key_active(kv_mask, j)) continue;
                const T ds = ph(i, j) * (dp[j] - rowdot) * scale;
                for (std::size_t cc = 0; cc < dh; ++cc) {
                    dq(i, off + cc) += ds * c.k(j, off + cc);
                    dk(j, off + cc) += ds * c.q(i, off + cc);
                }
            }
        }
    }
    grad.wq += matmul_tn(xq, dq);
    grad.wk += matmul_tn(kv, dk);
    grad.wv += matmul_tn(kv, dv);
    dxq += matmul_nt(dq, p.wq);
    dkv += matmul_nt(dk, p.wk);
    dkv += matmul_nt(dv, p.wv);
}

} // namespace mre::fusion

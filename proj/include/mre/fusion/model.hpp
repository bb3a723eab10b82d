#pragma once

// Cross-modal fusion: selection attention over text and visual streams,
// content/evidence pooling, consistency reweighting of retrieved evidence,
// and the feed-forward relation classifier, each with an exact backward pass.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mre/fusion/attention.hpp"
#include "mre/rng.hpp"
#include "mre/tensor.hpp"

namespace mre::fusion {

enum class VisualSource : std::uint8_t { content_image, content_object, retrieved };

inline bool is_content(VisualSource s) { return s != VisualSource::retrieved; }

struct FusionDims {
    std::size_t d_text = 16;
    std::size_t d_vis = 32;
    std::size_t heads_text = 2;
    std::size_t heads_vis = 2;
    std::size_t layers = 2;
    std::size_t hidden = 32;
    std::size_t labels = 0;

    std::size_t classifier_input() const noexcept { return 2 * d_text + 2 * d_vis; }

    static FusionDims toy(std::size_t labels) { return {16, 32, 2, 2, 2, 32, labels}; }
    static FusionDims paper(std::size_t labels = 23) { return {768, 2048, 8, 8, 2, 1024, labels}; }

    void validate() const {
        if (d_text == 0 || d_vis == 0 || hidden == 0) throw ConfigError("fusion dims must be positive", "fusion");
        if (heads_text == 0 || d_text % heads_text != 0)
            throw ConfigError("d_text " + std::to_string(d_text) + " not divisible by " + std::to_string(heads_text) +
                                  " heads",
                              "fusion");
        if (heads_vis == 0 || d_vis % heads_vis != 0)
            throw ConfigError("d_vis " + std::to_string(d_vis) + " not divisible by " + std::to_string(heads_vis) +
                                  " heads",
                              "fusion");
        if (labels == 0) throw ConfigError("label count must be positive", "fusion");
    }
};

struct FusionConfig {
    FusionDims dims;
    bool selection = true;    // false: streams bypass the selection stack
    bool consistency = true;  // false: uniform average over evidence rows
    double temp_text = 0.0;   // 0 selects d_text
    double temp_vis = 0.0;    // 0 selects d_vis

    double text_temperature() const { return temp_text > 0 ? temp_text : static_cast<double>(dims.d_text); }
    double vis_temperature() const { return temp_vis > 0 ? temp_vis : static_cast<double>(dims.d_vis); }
};

template <typename T>
struct SelectionLayer {
    AttentionParams<T> text;  // d_text
    AttentionParams<T> vis;   // d_vis
};

template <typename T>
struct FusionParams {
    std::vector<SelectionLayer<T>> layers;
    Matrix<T> w_phi, b_phi;      // d_vis → d_text
    Matrix<T> w_theta, b_theta;  // d_text → d_vis
    Matrix<T> w_t, w_t_prime;    // d_text × d_text
    Matrix<T> w_v, w_v_prime;    // d_vis × d_vis
    Matrix<T> w1, b1;            // h_R → hidden
    Matrix<T> w2, b2;            // hidden → labels

    static FusionParams zeros(const FusionDims& d) {
        FusionParams p;
        auto sq = [](std::size_t n) { return AttentionParams<T>{Matrix<T>(n, n), Matrix<T>(n, n), Matrix<T>(n, n), Matrix<T>(n, n)}; };
        for (std::size_t l = 0; l < d.layers; ++l) p.layers.push_back({sq(d.d_text), sq(d.d_vis)});
        p.w_phi = Matrix<T>(d.d_vis, d.d_text);
        p.b_phi = Matrix<T>(1, d.d_text);
        p.w_theta = Matrix<T>(d.d_text, d.d_vis);
        p.b_theta = Matrix<T>(1, d.d_vis);
        p.w_t = Matrix<T>(d.d_text, d.d_text);
        p.w_t_prime = Matrix<T>(d.d_text, d.d_text);
        p.w_v = Matrix<T>(d.d_vis, d.d_vis);
        p.w_v_prime = Matrix<T>(d.d_vis, d.d_vis);
        p.w1 = Matrix<T>(d.classifier_input(), d.hidden);
        p.b1 = Matrix<T>(1, d.hidden);
        p.w2 = Matrix<T>(d.hidden, d.labels);
        p.b2 = Matrix<T>(1, d.labels);
        return p;
    }

    // Weights ~ N(0, 1/fan_in), biases zero. Each tensor draws from its own
    // stream keyed by name, so a tensor's initial value does not depend on
    // which other tensors exist.
    static FusionParams init(const FusionDims& d, std::uint64_t seed) {
        FusionParams p = zeros(d);
        p.visit([&](const std::string& name, Matrix<T>& m) {
            if (is_bias(name)) return;
            Rng rng(seed, name);
            const double sd = 1.0 / std::sqrt(static_cast<double>(m.rows()));
            for (auto& v : m.data()) v = static_cast<T>(rng.normal() * sd);
        });
        return p;
    }

    static bool is_bias(const std::string& name) {
        return name.ends_with("/b") || name.ends_with("/b1") || name.ends_with("/b2");
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        visit_impl(*this, fn);
    }
    template <typename Fn>
    void visit(Fn&& fn) const {
        visit_impl(*this, fn);
    }

private:
    template <typename Self, typename Fn>
    static void visit_impl(Self& s, Fn& fn) {
        for (std::size_t l = 0; l < s.layers.size(); ++l) {
            const std::string pre = "fusion/selection/layer" + std::to_string(l);
            fn(pre + "/text/wq", s.layers[l].text.wq);
            fn(pre + "/text/wk", s.layers[l].text.wk);
            fn(pre + "/text/wv", s.layers[l].text.wv);
            fn(pre + "/text/wo", s.layers[l].text.wo);
            fn(pre + "/vis/wq", s.layers[l].vis.wq);
            fn(pre + "/vis/wk", s.layers[l].vis.wk);
            fn(pre + "/vis/wv", s.layers[l].vis.wv);
            fn(pre + "/vis/wo", s.layers[l].vis.wo);
        }
        fn(std::string("fusion/selection/phi/w"), s.w_phi);
        fn(std::string("fusion/selection/phi/b"), s.b_phi);
        fn(std::string("fusion/selection/theta/w"), s.w_theta);
        fn(std::string("fusion/selection/theta/b"), s.b_theta);
        fn(std::string("fusion/consistency/text/w"), s.w_t);
        fn(std::string("fusion/consistency/text/w_prime"), s.w_t_prime);
        fn(std::string("fusion/consistency/vis/w"), s.w_v);
        fn(std::string("fusion/consistency/vis/w_prime"), s.w_v_prime);
        fn(std::string("fusion/classifier/w1"), s.w1);
        fn(std::string("fusion/classifier/b1"), s.b1);
        fn(std::string("fusion/classifier/w2"), s.w2);
        fn(std::string("fusion/classifier/b2"), s.b2);
    }
};

// One encoded text sequence. Rows with mask 0 are padding.
template <typename T>
struct TextSequence {
    Matrix<T> x;
    std::vector<unsigned char> mask;  // empty: all rows valid
    std::size_t e1 = 0, e2 = 0, cls = 0;

    bool active(std::size_t r) const { return mask.empty() || mask[r]; }
};

template <typename T>
struct FusionInput {
    TextSequence<T> content;                // marked post sentence
    std::vector<TextSequence<T>> retrieved;  // one per textual evidence item
    Matrix<T> visual;                       // n × d_vis
    std::vector<VisualSource> sources;      // one tag per visual row
    std::vector<unsigned char> visual_mask;  // empty: all rows valid

    bool visual_active(std::size_t r) const { return visual_mask.empty() || visual_mask[r]; }
};

template <typename T>
struct FusionOutput {
    std::vector<T> h_t_content, h_t_retrieved, h_v_content, h_v_retrieved;
    std::vector<T> logits, probabilities;
    bool no_text_evidence = false;
    bool no_visual_evidence = false;
};

// ---- selection ---------------------------------------------------------------

template <typename T>
struct Streams {
    std::vector<Matrix<T>> text;  // [0] is the content sentence
    Matrix<T> vis;
};

template <typename T>
struct StreamMasks {
    std::vector<std::vector<unsigned char>> text;
    std::vector<unsigned char> vis;
};

template <typename T>
struct LayerCache {
    Streams<T> in;
    Matrix<T> v_phi;    // visual rows mapped to d_text
    Matrix<T> t_theta;  // content tokens mapped to d_vis
    std::vector<Matrix<T>> text_kv;
    std::vector<std::vector<unsigned char>> text_kv_mask;
    Matrix<T> vis_kv;
    std::vector<unsigned char> vis_kv_mask;
    std::vector<MhaCache<T>> text_mha;
    MhaCache<T> vis_mha;
};

namespace detail {

inline std::vector<unsigned char> concat_mask(const std::vector<unsigned char>& a, std::size_t na,
                                              const std::vector<unsigned char>& b, std::size_t nb) {
    std::vector<unsigned char> out(na + nb, 1);
    if (!a.empty()) std::copy(a.begin(), a.end(), out.begin());
    if (!b.empty()) std::copy(b.begin(), b.end(), out.begin() + static_cast<std::ptrdiff_t>(na));
    return out;
}

template <typename T>
Matrix<T> affine(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
    Matrix<T> y = matmul(x, w);
    add_row_bias<T>(y, b.row(0));
    return y;
}

} // namespace detail

// One selection layer. Every text sequence attends over
// [visual rows mapped through W_φ; its own tokens]; every visual row
// attends over [content-sentence tokens mapped through W_θ; visual rows].
template <typename T>
Streams<T> selection_layer(const Streams<T>& in, const StreamMasks<T>& masks, const SelectionLayer<T>& layer,
                           const FusionParams<T>& p, const FusionDims& dims, LayerCache<T>* cache = nullptr) {
    if (in.text.empty()) throw ContractViolation("selection layer needs the content text stream");
    if (in.vis.rows() && in.vis.cols() != dims.d_vis)
        throw ShapeError("visual stream " + in.vis.shape_str() + " vs d_vis " + std::to_string(dims.d_vis));
    for (const auto& t : in.text)
        if (t.cols() != dims.d_text)
            throw ShapeError("text stream " + t.shape_str() + " vs d_text " + std::to_string(dims.d_text));

    LayerCache<T> local;
    LayerCache<T>& c = cache ? *cache : local;
    c.in = in;
    c.v_phi = in.vis.rows() ? detail::affine(in.vis, p.w_phi, p.b_phi) : Matrix<T>(0, dims.d_text);
    c.t_theta = detail::affine(in.text[0], p.w_theta, p.b_theta);

    Streams<T> out;
    c.text_kv.clear();
    c.text_kv_mask.clear();
    c.text_mha.assign(in.text.size(), {});
    for (std::size_t s = 0; s < in.text.size(); ++s) {
        c.text_kv.push_back(vstack(c.v_phi, in.text[s]));
        c.text_kv_mask.push_back(detail::concat_mask(masks.vis, in.vis.rows(), masks.text[s], in.text[s].rows()));
        out.text.push_back(mha_forward<T>(in.text[s], c.text_kv[s], c.text_kv_mask[s], layer.text, dims.heads_text,
                                          &c.text_mha[s]));
    }
    c.vis_kv = vstack(c.t_theta, in.vis);
    c.vis_kv_mask = detail::concat_mask(masks.text[0], in.text[0].rows(), masks.vis, in.vis.rows());
    out.vis = in.vis.rows() ? mha_forward<T>(in.vis, c.vis_kv, c.vis_kv_mask, layer.vis, dims.heads_vis, &c.vis_mha)
                            : Matrix<T>(0, dims.d_vis);
    return out;
}

// Backward through one layer: `d_out` holds gradients w.r.t. the layer's
// outputs; returns gradients w.r.t. its inputs.
template <typename T>
Streams<T> selection_layer_backward(const Streams<T>& d_out, const LayerCache<T>& c, const SelectionLayer<T>& layer,
                                    const FusionParams<T>& p, const FusionDims& dims, SelectionLayer<T>& g_layer,
                                    FusionParams<T>& g) {
    Streams<T> d_in;
    const std::size_t n_vis = c.in.vis.rows();
    Matrix<T> d_vphi(n_vis, dims.d_text);
    Matrix<T> d_vis(n_vis, dims.d_vis);
    for (std::size_t s = 0; s < c.in.text.size(); ++s) {
        Matrix<T> dx(c.in.text[s].rows(), dims.d_text);
        Matrix<T> dkv(c.text_kv[s].rows(), dims.d_text);
        mha_backward<T>(d_out.text[s], c.in.text[s], c.text_kv[s], c.text_kv_mask[s], layer.text, dims.heads_text,
                        c.text_mha[s], g_layer.text, dx, dkv);
        for (std::size_t r = 0; r < n_vis; ++r)
            for (std::size_t j = 0; j < dims.d_text; ++j) d_vphi(r, j) += dkv(r, j);
        for (std::size_t r = 0; r < dx.rows(); ++r)
            for (std::size_t j = 0; j < dims.d_text; ++j) dx(r, j) += dkv(n_vis + r, j);
        d_in.text.push_back(std::move(dx));
    }
    const std::size_t n_content = c.in.text[0].rows();
    Matrix<T> d_ttheta(n_content, dims.d_vis);
    if (n_vis) {
        Matrix<T> dkv(c.vis_kv.rows(), dims.d_vis);
        mha_backward<T>(d_out.vis, c.in.vis, c.vis_kv, c.vis_kv_mask, layer.vis, dims.heads_vis, c.vis_mha, g_layer.vis,
                        d_vis, dkv);
        for (std::size_t r = 0; r < n_content; ++r)
            for (std::size_t j = 0; j < dims.d_vis; ++j) d_ttheta(r, j) += dkv(r, j);
        for (std::size_t r = 0; r < n_vis; ++r)
            for (std::size_t j = 0; j < dims.d_vis; ++j) d_vis(r, j) += dkv(n_content + r, j);

        // W_φ path
        g.w_phi += matmul_tn(c.in.vis, d_vphi);
        const auto db = column_sums(d_vphi);
        for (std::size_t j = 0; j < db.size(); ++j) g.b_phi(0, j) += db[j];
        d_vis += matmul_nt(d_vphi, p.w_phi);
    }
    // W_θ path
    g.w_theta += matmul_tn(c.in.text[0], d_ttheta);
    const auto db = column_sums(d_ttheta);
    for (std::size_t j = 0; j < db.size(); ++j) g.b_theta(0, j) += db[j];
    d_in.text[0] += matmul_nt(d_ttheta, p.w_theta);
    d_in.vis = std::move(d_vis);
    return d_in;
}

// Convenience form for a single text/visual pair.
template <typename T>
std::pair<Matrix<T>, Matrix<T>> selection_layer(const Matrix<T>& h_t, const std::vector<unsigned char>& mask_t,
                                                const Matrix<T>& h_v, const std::vector<unsigned char>& mask_v,
                                                const SelectionLayer<T>& layer, const FusionParams<T>& p,
                                                const FusionDims& dims) {
    Streams<T> in{{h_t}, h_v};
    StreamMasks<T> masks{{mask_t}, mask_v};
    auto out = selection_layer(in, masks, layer, p, dims);
    return {std::move(out.text[0]), std::move(out.vis)};
}

// ---- pooling -----------------------------------------------------------------

// Mean of the rows at the two opening-marker positions.
template <typename T>
std::vector<T> pool_content(const Matrix<T>& h, const std::vector<unsigned char>& mask, std::size_t e1, std::size_t e2) {
    auto active = [&](std::size_t r) { return r < h.rows() && (mask.empty() || mask[r]); };
    if (!active(e1) || !active(e2)) throw ContractViolation("entity marker position is masked or out of range");
    std::vector<T> out(h.cols());
    for (std::size_t j = 0; j < h.cols(); ++j) out[j] = (h(e1, j) + h(e2, j)) / T{2};
    return out;
}

template <typename T>
std::vector<T> pool_cls(const Matrix<T>& h, const std::vector<unsigned char>& mask, std::size_t cls) {
    if (cls >= h.rows() || !(mask.empty() || mask[cls])) throw ContractViolation("CLS position is masked or out of range");
    return {h.row(cls).begin(), h.row(cls).end()};
}

// ---- consistency -------------------------------------------------------------

template <typename T>
struct ConsistencyCache {
    std::vector<T> query;  // in the branch dimension, before W
    std::vector<T> q_proj;
    Matrix<T> evidence;
    Matrix<T> keys;
    std::vector<T> weights;
    T scale{};
    bool uniform = false;
};

template <typename T>
struct ConsistencyResult {
    std::vector<T> value;
    bool no_evidence = false;
};

// softmax_j((query·W)·(evidence_j·W′) / √temperature) weighted sum of
// evidence rows. N = 0 yields the zero vector with `no_evidence` set.
template <typename T>
ConsistencyResult<T> consistency(std::span<const T> query, const Matrix<T>& evidence, const Matrix<T>& w,
                                 const Matrix<T>& w_prime, double temperature, ConsistencyCache<T>* cache = nullptr) {
    if (!(temperature > 0)) throw ConfigError("consistency temperature must be positive", "fusion");
    const std::size_t d = query.size();
    if (w.rows() != d || w_prime.rows() != d || w.cols() != w_prime.cols())
        throw ShapeError("consistency projections " + w.shape_str() + "/" + w_prime.shape_str() + " vs query width " +
                         std::to_string(d));
    if (evidence.rows() && evidence.cols() != d)
        throw ShapeError("consistency evidence " + evidence.shape_str() + " vs query width " + std::to_string(d));
    ConsistencyResult<T> r;
    r.value.assign(d, T{0});
    if (evidence.rows() == 0) {
        r.no_evidence = true;
        if (cache) *cache = ConsistencyCache<T>{{query.begin(), query.end()}, {}, evidence, {}, {}, T{0}, false};
        return r;
    }
    auto q_proj = vecmat<T>(query, w);
    Matrix<T> keys = matmul(evidence, w_prime);
    const T scale = T{1} / static_cast<T>(std::sqrt(temperature));
    std::vector<T> weights(evidence.rows());
    for (std::size_t i = 0; i < evidence.rows(); ++i) {
        T s{0};
        for (std::size_t j = 0; j < keys.cols(); ++j) s += q_proj[j] * keys(i, j);
        weights[i] = s * scale;
    }
    softmax_inplace<T>(weights);
    for (std::size_t i = 0; i < evidence.rows(); ++i)
        for (std::size_t j = 0; j < d; ++j) r.value[j] += weights[i] * evidence(i, j);
    if (cache)
        *cache = ConsistencyCache<T>{{query.begin(), query.end()}, std::move(q_proj), evidence, std::move(keys),
                                     std::move(weights), scale, false};
    return r;
}

// Uniform average of the evidence rows (the consistency-ablated form).
template <typename T>
ConsistencyResult<T> uniform_average(const Matrix<T>& evidence, std::size_t d, ConsistencyCache<T>* cache = nullptr) {
    ConsistencyResult<T> r;
    r.value.assign(d, T{0});
    if (evidence.rows() == 0) {
        r.no_evidence = true;
    } else {
        for (std::size_t i = 0; i < evidence.rows(); ++i)
            for (std::size_t j = 0; j < d; ++j) r.value[j] += evidence(i, j);
        for (auto& v : r.value) v /= static_cast<T>(evidence.rows());
    }
    if (cache) {
        *cache = {};
        cache->evidence = evidence;
        cache->uniform = true;
    }
    return r;
}

// Accumulates into g_w / g_w_prime and returns (d_query, d_evidence).
template <typename T>
std::pair<std::vector<T>, Matrix<T>> consistency_backward(std::span<const T> d_out, const ConsistencyCache<T>& c,
                                                          const Matrix<T>& w, const Matrix<T>& w_prime,
                                                          Matrix<T>* g_w, Matrix<T>* g_w_prime) {
    const std::size_t n = c.evidence.rows(), d = d_out.size();
    std::vector<T> d_query(c.query.size(), T{0});
    Matrix<T> d_ev(n, d);
    if (n == 0) return {std::move(d_query), std::move(d_ev)};
    if (c.uniform) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) d_ev(i, j) = d_out[j] / static_cast<T>(n);
        return {std::move(d_query), std::move(d_ev)};
    }
    std::vector<T> da(n, T{0});
    T dot{0};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            da[i] += d_out[j] * c.evidence(i, j);
            d_ev(i, j) += c.weights[i] * d_out[j];
        }
        dot += c.weights[i] * da[i];
    }
    const std::size_t dk = c.keys.cols();
    std::vector<T> d_qproj(dk, T{0});
    Matrix<T> d_keys(n, dk);
    for (std::size_t i = 0; i < n; ++i) {
        const T ds = c.weights[i] * (da[i] - dot) * c.scale;
        for (std::size_t j = 0; j < dk; ++j) {
            d_qproj[j] += ds * c.keys(i, j);
            d_keys(i, j) = ds * c.q_proj[j];
        }
    }
    if (g_w)
        for (std::size_t a = 0; a < c.query.size(); ++a)
            for (std::size_t b = 0; b < dk; ++b) (*g_w)(a, b) += c.query[a] * d_qproj[b];
    for (std::size_t a = 0; a < c.query.size(); ++a)
        for (std::size_t b = 0; b < dk; ++b) d_query[a] += w(a, b) * d_qproj[b];
    if (g_w_prime) *g_w_prime += matmul_tn(c.evidence, d_keys);
    d_ev += matmul_nt(d_keys, w_prime);
    return {std::move(d_query), std::move(d_ev)};
}

// ---- classifier --------------------------------------------------------------

template <typename T>
T gelu(T x) {
    return T{0.5} * x * (T{1} + std::erf(x / std::sqrt(T{2})));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T{0.5} * (T{1} + std::erf(x / std::sqrt(T{2})));
    const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * T{3.14159265358979323846});
    return cdf + x * pdf;
}

template <typename T>
struct ClassifierCache {
    std::vector<T> z, pre, hidden;
};

template <typename T>
struct Classification {
    std::vector<T> logits, probabilities;
};

// [h_tc; h_tr; h_vc; h_vr] → hidden (GELU) → logits → softmax.
template <typename T>
Classification<T> classify(std::span<const T> h_tc, std::span<const T> h_tr, std::span<const T> h_vc,
                           std::span<const T> h_vr, const FusionParams<T>& p, ClassifierCache<T>* cache = nullptr) {
    std::vector<T> z;
    z.reserve(h_tc.size() * 2 + h_vc.size() * 2);
    for (auto part : {h_tc, h_tr, h_vc, h_vr}) z.insert(z.end(), part.begin(), part.end());
    if (h_tc.size() != h_tr.size() || h_vc.size() != h_vr.size() || z.size() != p.w1.rows())
        throw ShapeError("classifier input widths " + std::to_string(h_tc.size()) + "/" + std::to_string(h_tr.size()) +
                         "/" + std::to_string(h_vc.size()) + "/" + std::to_string(h_vr.size()) + " vs " +
                         p.w1.shape_str());
    auto pre = vecmat<T>(z, p.w1);
    for (std::size_t j = 0; j < pre.size(); ++j) pre[j] += p.b1(0, j);
    std::vector<T> hidden(pre.size());
    for (std::size_t j = 0; j < pre.size(); ++j) hidden[j] = gelu(pre[j]);
    Classification<T> out;
    out.logits = vecmat<T>(hidden, p.w2);
    for (std::size_t j = 0; j < out.logits.size(); ++j) out.logits[j] += p.b2(0, j);
    out.probabilities = out.logits;
    softmax_inplace<T>(out.probabilities);
    if (cache) *cache = {std::move(z), std::move(pre), std::move(hidden)};
    return out;
}

// ---- full model --------------------------------------------------------------

template <typename T>
struct FusionCache {
    StreamMasks<T> masks;
    std::vector<LayerCache<T>> layers;
    Streams<T> final_streams;
    std::vector<std::size_t> content_rows, retrieved_rows;  // visual row indices
    std::vector<std::size_t> text_evidence;                  // retrieved sequences contributing a CLS row
    std::vector<T> theta_query;
    ConsistencyCache<T> text_c, vis_c;
    ClassifierCache<T> cls;
    FusionOutput<T> out;
    const FusionInput<T>* input = nullptr;
};

namespace detail {

template <typename T>
void check_input(const FusionInput<T>& in, const FusionDims& d) {
    auto check_seq = [&](const TextSequence<T>& s, const char* what) {
        if (s.x.cols() != d.d_text)
            throw ShapeError(std::string(what) + " features " + s.x.shape_str() + " vs d_text " + std::to_string(d.d_text));
        if (!s.mask.empty() && s.mask.size() != s.x.rows())
            throw ShapeError(std::string(what) + " mask length does not match rows");
    };
    check_seq(in.content, "content text");
    for (const auto& r : in.retrieved) check_seq(r, "retrieved text");
    if (in.visual.rows() && in.visual.cols() != d.d_vis)
        throw ShapeError("visual features " + in.visual.shape_str() + " vs d_vis " + std::to_string(d.d_vis));
    if (in.sources.size() != in.visual.rows()) throw ShapeError("visual source tags do not match visual rows");
    if (!in.visual_mask.empty() && in.visual_mask.size() != in.visual.rows())
        throw ShapeError("visual mask length does not match rows");
}

} // namespace detail

template <typename T>
FusionOutput<T> forward(const FusionParams<T>& p, const FusionConfig& cfg, const FusionInput<T>& in,
                        FusionCache<T>* cache = nullptr) {
    const FusionDims& d = cfg.dims;
    detail::check_input(in, d);
    FusionCache<T> local;
    FusionCache<T>& c = cache ? *cache : local;
    c.input = &in;

    Streams<T> s;
    s.text.push_back(in.content.x);
    c.masks.text = {in.content.mask};
    for (const auto& r : in.retrieved) {
        s.text.push_back(r.x);
        c.masks.text.push_back(r.mask);
    }
    s.vis = in.visual;
    c.masks.vis = in.visual_mask;

    c.layers.clear();
    if (cfg.selection) {
        c.layers.resize(p.layers.size());
        for (std::size_t l = 0; l < p.layers.size(); ++l) s = selection_layer(s, c.masks, p.layers[l], p, d, &c.layers[l]);
    }

    FusionOutput<T> out;
    out.h_t_content = pool_content(s.text[0], in.content.mask, in.content.e1, in.content.e2);

    c.text_evidence.clear();
    Matrix<T> r_text(0, d.d_text);
    {
        std::vector<T> rows;
        for (std::size_t i = 0; i < in.retrieved.size(); ++i) {
            auto v = pool_cls(s.text[i + 1], in.retrieved[i].mask, in.retrieved[i].cls);
            rows.insert(rows.end(), v.begin(), v.end());
            c.text_evidence.push_back(i);
        }
        r_text = Matrix<T>(in.retrieved.size(), d.d_text, std::move(rows));
    }

    c.content_rows.clear();
    c.retrieved_rows.clear();
    for (std::size_t r = 0; r < in.visual.rows(); ++r) {
        if (!in.visual_active(r)) continue;
        (is_content(in.sources[r]) ? c.content_rows : c.retrieved_rows).push_back(r);
    }
    out.h_v_content.assign(d.d_vis, T{0});
    for (auto r : c.content_rows)
        for (std::size_t j = 0; j < d.d_vis; ++j) out.h_v_content[j] += s.vis(r, j);
    if (!c.content_rows.empty())
        for (auto& v : out.h_v_content) v /= static_cast<T>(c.content_rows.size());
    Matrix<T> r_vis(c.retrieved_rows.size(), d.d_vis);
    for (std::size_t i = 0; i < c.retrieved_rows.size(); ++i)
        for (std::size_t j = 0; j < d.d_vis; ++j) r_vis(i, j) = s.vis(c.retrieved_rows[i], j);

    ConsistencyResult<T> tr, vr;
    if (cfg.consistency) {
        tr = consistency<T>(out.h_t_content, r_text, p.w_t, p.w_t_prime, cfg.text_temperature(), &c.text_c);
        c.theta_query = vecmat<T>(out.h_t_content, p.w_theta);
        for (std::size_t j = 0; j < d.d_vis; ++j) c.theta_query[j] += p.b_theta(0, j);
        vr = consistency<T>(c.theta_query, r_vis, p.w_v, p.w_v_prime, cfg.vis_temperature(), &c.vis_c);
    } else {
        tr = uniform_average<T>(r_text, d.d_text, &c.text_c);
        vr = uniform_average<T>(r_vis, d.d_vis, &c.vis_c);
    }
    out.h_t_retrieved = std::move(tr.value);
    out.h_v_retrieved = std::move(vr.value);
    out.no_text_evidence = tr.no_evidence;
    out.no_visual_evidence = vr.no_evidence;

    auto cl = classify<T>(out.h_t_content, out.h_t_retrieved, out.h_v_content, out.h_v_retrieved, p, &c.cls);
    out.logits = std::move(cl.logits);
    out.probabilities = std::move(cl.probabilities);
    c.final_streams = std::move(s);
    c.out = out;
    return out;
}

template <typename T>
T cross_entropy(const FusionOutput<T>& out, std::size_t gold) {
    return -std::log(std::max(out.probabilities.at(gold), std::numeric_limits<T>::min()));
}

// Gradients w.r.t. the model inputs (for encoders upstream).
template <typename T>
struct InputGradients {
    Matrix<T> content;
    std::vector<Matrix<T>> retrieved;
    Matrix<T> visual;
};

// Cross-entropy gradients for every parameter, accumulated into `g`.
// `cache` must come from forward() on the same parameters and input.
template <typename T>
InputGradients<T> backward(const FusionParams<T>& p, const FusionConfig& cfg, const FusionCache<T>& c,
                           std::size_t gold, FusionParams<T>& g) {
    if (!c.input) throw ContractViolation("backward called without forward intermediates");
    const FusionDims& d = cfg.dims;
    const FusionInput<T>& in = *c.input;
    if (gold >= d.labels) throw ContractViolation("gold label out of range");

    // classifier
    std::vector<T> dlogits = c.out.probabilities;
    dlogits[gold] -= T{1};
    const std::size_t hid = d.hidden;
    for (std::size_t a = 0; a < hid; ++a)
        for (std::size_t b = 0; b < d.labels; ++b) g.w2(a, b) += c.cls.hidden[a] * dlogits[b];
    for (std::size_t b = 0; b < d.labels; ++b) g.b2(0, b) += dlogits[b];
    std::vector<T> dpre(hid, T{0});
    for (std::size_t a = 0; a < hid; ++a) {
        T s{0};
        for (std::size_t b = 0; b < d.labels; ++b) s += p.w2(a, b) * dlogits[b];
        dpre[a] = s * gelu_grad(c.cls.pre[a]);
    }
    for (std::size_t i = 0; i < c.cls.z.size(); ++i)
        for (std::size_t a = 0; a < hid; ++a) g.w1(i, a) += c.cls.z[i] * dpre[a];
    for (std::size_t a = 0; a < hid; ++a) g.b1(0, a) += dpre[a];
    std::vector<T> dz(c.cls.z.size(), T{0});
    for (std::size_t i = 0; i < dz.size(); ++i) {
        T s{0};
        for (std::size_t a = 0; a < hid; ++a) s += p.w1(i, a) * dpre[a];
        dz[i] = s;
    }
    const std::size_t dt = d.d_text, dv = d.d_vis;
    std::vector<T> d_htc(dz.begin(), dz.begin() + dt);
    std::span<const T> d_htr(dz.data() + dt, dt);
    std::span<const T> d_hvc(dz.data() + 2 * dt, dv);
    std::span<const T> d_hvr(dz.data() + 2 * dt + dv, dv);

    // consistency
    auto [dq_t, dR_t] = consistency_backward<T>(d_htr, c.text_c, p.w_t, p.w_t_prime, &g.w_t, &g.w_t_prime);
    auto [dq_v, dR_v] = consistency_backward<T>(d_hvr, c.vis_c, p.w_v, p.w_v_prime, &g.w_v, &g.w_v_prime);
    if (cfg.consistency) {
        for (std::size_t j = 0; j < dt; ++j) d_htc[j] += dq_t[j];
        if (c.vis_c.evidence.rows()) {
            for (std::size_t a = 0; a < dt; ++a)
                for (std::size_t b = 0; b < dv; ++b) {
                    g.w_theta(a, b) += c.out.h_t_content[a] * dq_v[b];
                    d_htc[a] += p.w_theta(a, b) * dq_v[b];
                }
            for (std::size_t b = 0; b < dv; ++b) g.b_theta(0, b) += dq_v[b];
        }
    }

    // pooling → final streams
    Streams<T> ds;
    ds.text.emplace_back(c.final_streams.text[0].rows(), dt);
    for (std::size_t i = 0; i < in.retrieved.size(); ++i) ds.text.emplace_back(c.final_streams.text[i + 1].rows(), dt);
    ds.vis = Matrix<T>(c.final_streams.vis.rows(), dv);
    for (std::size_t j = 0; j < dt; ++j) {
        ds.text[0](in.content.e1, j) += d_htc[j] / T{2};
        ds.text[0](in.content.e2, j) += d_htc[j] / T{2};
    }
    for (std::size_t k = 0; k < c.text_evidence.size(); ++k) {
        const std::size_t i = c.text_evidence[k];
        for (std::size_t j = 0; j < dt; ++j) ds.text[i + 1](in.retrieved[i].cls, j) += dR_t(k, j);
    }
    if (!c.content_rows.empty()) {
        const T inv = T{1} / static_cast<T>(c.content_rows.size());
        for (auto r : c.content_rows)
            for (std::size_t j = 0; j < dv; ++j) ds.vis(r, j) += d_hvc[j] * inv;
    }
    for (std::size_t k = 0; k < c.retrieved_rows.size(); ++k)
        for (std::size_t j = 0; j < dv; ++j) ds.vis(c.retrieved_rows[k], j) += dR_v(k, j);

    // selection stack, last layer first
    for (std::size_t l = c.layers.size(); l-- > 0;)
        ds = selection_layer_backward(ds, c.layers[l], p.layers[l], p, d, g.layers[l], g);

    InputGradients<T> ig;
    ig.content = std::move(ds.text[0]);
    for (std::size_t i = 1; i < ds.text.size(); ++i) ig.retrieved.push_back(std::move(ds.text[i]));
    ig.visual = std::move(ds.vis);
    return ig;
}

} // namespace mre::fusion

#pragma once

#include "mre/fusion/model.hpp"
#include "mre/rng.hpp"

namespace mre::test {

// Parameters with random (non-zero) biases so every tensor is exercised.
template <typename T>
fusion::FusionParams<T> random_params(const fusion::FusionDims& d, std::uint64_t seed) {
    auto p = fusion::FusionParams<T>::init(d, seed);
    Rng rng(seed, "biases");
    p.visit([&](const std::string& name, Matrix<T>& m) {
        if (fusion::FusionParams<T>::is_bias(name))
            for (auto& v : m.data()) v = static_cast<T>(0.3 * rng.normal());
    });
    return p;
}

template <typename T>
Matrix<T> random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Matrix<T> m(r, c);
    for (auto& v : m.data()) v = static_cast<T>(scale * rng.normal());
    return m;
}

struct InputShape {
    std::size_t content_len = 5;
    std::size_t n_retrieved = 2;
    std::size_t retrieved_len = 3;
    std::size_t n_content_vis = 2;
    std::size_t n_retrieved_vis = 2;
};

template <typename T>
fusion::FusionInput<T> random_input(Rng& rng, const fusion::FusionDims& d, const InputShape& s) {
    fusion::FusionInput<T> in;
    in.content.x = random_matrix<T>(rng, s.content_len, d.d_text);
    in.content.e1 = rng.below(s.content_len);
    in.content.e2 = rng.below(s.content_len);
    for (std::size_t i = 0; i < s.n_retrieved; ++i) {
        fusion::TextSequence<T> r;
        r.x = random_matrix<T>(rng, 1 + rng.below(s.retrieved_len), d.d_text);
        r.cls = 0;
        in.retrieved.push_back(std::move(r));
    }
    in.visual = random_matrix<T>(rng, s.n_content_vis + s.n_retrieved_vis, d.d_vis);
    for (std::size_t i = 0; i < s.n_content_vis; ++i)
        in.sources.push_back(i == 0 ? fusion::VisualSource::content_image : fusion::VisualSource::content_object);
    for (std::size_t i = 0; i < s.n_retrieved_vis; ++i) in.sources.push_back(fusion::VisualSource::retrieved);
    return in;
}

} // namespace mre::test

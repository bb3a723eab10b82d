#pragma once

// Desk-scale encoders and the feature-file boundary.
//
// Toy text: hashed token embedding + learned position embedding.
// Toy image: fixed seeded projection of a 64-bin grayscale histogram.
// Feature files carry precomputed matrices at any width (768/2048 for the
// pretrained encoders).

#include <cstdint>
#include <string>
#include <vector>

#include "mre/data_model.hpp"
#include "mre/fusion/model.hpp"
#include "mre/image.hpp"
#include "mre/rng.hpp"
#include "mre/xmrf.hpp"

namespace mre::encoders {

template <typename T>
using TextFeatures = fusion::TextSequence<T>;

template <typename T>
struct VisualFeatures {
    Matrix<T> x;
    std::vector<fusion::VisualSource> sources;
    std::vector<unsigned char> mask;
};

inline constexpr std::size_t kReservedIds = 5;  // [E1] [/E1] [E2] [/E2] [CLS]

struct TextEncoderConfig {
    std::size_t d_text = 16;
    std::size_t buckets = 4096;
    std::size_t max_length = kDefaultMaxLength;
    std::uint64_t hash_seed = 0x5eed;
};

// Token ids: the four markers and [CLS] own ids 0..4; every other token
// hashes into [5, 5 + buckets).
inline std::size_t token_id(std::string_view tok, const TextEncoderConfig& cfg) {
    if (tok == kHeadOpen) return 0;
    if (tok == kHeadClose) return 1;
    if (tok == kTailOpen) return 2;
    if (tok == kTailClose) return 3;
    if (tok == kCls) return 4;
    return kReservedIds + static_cast<std::size_t>(fnv1a(tok, cfg.hash_seed) % cfg.buckets);
}

template <typename T>
class ToyTextEncoder {
public:
    ToyTextEncoder() = default;
    ToyTextEncoder(TextEncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        token_ = Matrix<T>(kReservedIds + cfg.buckets, cfg.d_text);
        position_ = Matrix<T>(cfg.max_length, cfg.d_text);
        Rng rt(seed, "encoder/text/token"), rp(seed, "encoder/text/position");
        for (auto& v : token_.data()) v = static_cast<T>(rt.normal());
        for (auto& v : position_.data()) v = static_cast<T>(0.1 * rp.normal());
    }

    static ToyTextEncoder zeros_like(const ToyTextEncoder& o) {
        ToyTextEncoder z;
        z.cfg_ = o.cfg_;
        z.token_ = Matrix<T>(o.token_.rows(), o.token_.cols());
        z.position_ = Matrix<T>(o.position_.rows(), o.position_.cols());
        return z;
    }

    const TextEncoderConfig& config() const noexcept { return cfg_; }

    std::vector<std::size_t> ids(const std::vector<std::string>& tokens) const {
        if (tokens.size() > cfg_.max_length)
            throw ValidationError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max length " +
                                  std::to_string(cfg_.max_length), "encoders");
        std::vector<std::size_t> out;
        out.reserve(tokens.size());
        for (const auto& t : tokens) out.push_back(token_id(t, cfg_));
        return out;
    }

    // Row i = token_table[id_i] + position_table[i].
    Matrix<T> embed(const std::vector<std::size_t>& ids) const {
        Matrix<T> x(ids.size(), cfg_.d_text);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < cfg_.d_text; ++j) x(i, j) = token_(ids[i], j) + position_(i, j);
        return x;
    }

    TextFeatures<T> encode(const MarkedSequence& marked) const {
        TextFeatures<T> f;
        f.x = embed(ids(marked.tokens));
        f.e1 = marked.e1_pos;
        f.e2 = marked.e2_pos;
        f.cls = 0;
        return f;
    }

    // Evidence text: [CLS] followed by whitespace tokens, cut to max length.
    TextFeatures<T> encode_evidence(std::string_view text) const {
        TextFeatures<T> f;
        f.x = embed(ids(evidence_tokens(text, cfg_.max_length)));
        f.cls = 0;
        return f;
    }

    // Pads every sequence to the longest one; padded rows are zero and masked.
    std::vector<TextFeatures<T>> encode_batch(const std::vector<MarkedSequence>& batch) const {
        std::size_t longest = 0;
        for (const auto& m : batch) longest = std::max(longest, m.tokens.size());
        std::vector<TextFeatures<T>> out;
        for (const auto& m : batch) {
            auto f = encode(m);
            Matrix<T> padded(longest, cfg_.d_text);
            std::copy(f.x.data().begin(), f.x.data().end(), padded.data().begin());
            f.x = std::move(padded);
            f.mask.assign(longest, 0);
            std::fill(f.mask.begin(), f.mask.begin() + static_cast<std::ptrdiff_t>(m.tokens.size()), 1);
            out.push_back(std::move(f));
        }
        return out;
    }

    // Scatters row gradients back into the tables of `grad`.
    void backward(const std::vector<std::size_t>& ids, const Matrix<T>& dx, ToyTextEncoder& grad) const {
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < cfg_.d_text; ++j) {
                grad.token_(ids[i], j) += dx(i, j);
                grad.position_(i, j) += dx(i, j);
            }
    }

    static std::vector<std::string> evidence_tokens(std::string_view text, std::size_t max_length) {
        std::vector<std::string> toks{std::string(kCls)};
        std::size_t i = 0;
        while (i < text.size() && toks.size() < max_length) {
            while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
            const std::size_t b = i;
            while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
            if (i > b) {
                std::string tok(text.substr(b, i - b));
                // reserved strings in evidence text are ordinary words
                if (is_reserved_token(tok)) tok = "<" + tok + ">";
                toks.push_back(std::move(tok));
            }
        }
        return toks;
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        fn(std::string("encoder/text/token"), token_);
        fn(std::string("encoder/text/position"), position_);
    }
    template <typename Fn>
    void visit(Fn&& fn) const {
        fn(std::string("encoder/text/token"), token_);
        fn(std::string("encoder/text/position"), position_);
    }

    Matrix<T>& token_table() { return token_; }
    Matrix<T>& position_table() { return position_; }

private:
    TextEncoderConfig cfg_;
    Matrix<T> token_;
    Matrix<T> position_;
};

inline constexpr std::size_t kHistogramBins = 64;

class ToyImageEncoder {
public:
    ToyImageEncoder() = default;
    ToyImageEncoder(std::size_t d_vis, std::uint64_t seed) : projection_(kHistogramBins, d_vis) {
        Rng rng(seed, "encoder/image/projection");
        for (auto& v : projection_.data()) v = rng.normal();
    }

    std::size_t width() const noexcept { return projection_.cols(); }

    // L2-normalised histogram times the fixed projection.
    template <typename T = double>
    std::vector<T> encode(std::string_view bytes, const std::string& record = "image") const {
        Image img;
        try {
            img = decode_image(bytes);
        } catch (const DecodeError& e) {
            throw DecodeError("cannot decode " + record + ": " + e.what());
        }
        auto hist = gray_histogram(img, kHistogramBins);
        double norm = 0;
        for (double h : hist) norm += h * h;
        norm = std::sqrt(norm);
        std::vector<T> out(projection_.cols(), T{0});
        for (std::size_t b = 0; b < kHistogramBins; ++b) {
            const double w = hist[b] / norm;
            if (w == 0.0) continue;
            for (std::size_t j = 0; j < projection_.cols(); ++j) out[j] += static_cast<T>(w * projection_(b, j));
        }
        return out;
    }

private:
    Matrix<double> projection_;
};

// ---- feature files -------------------------------------------------------------

// Record keys shared with the exporter.
inline std::string content_key(const std::string& instance_id) { return "text/" + instance_id; }
inline std::string evidence_key(const std::string& instance_id, const std::string& source, const std::string& kind,
                                std::size_t index) {
    return "evidence/" + instance_id + "/" + source + "/" + kind + "/" + std::to_string(index);
}
inline std::string image_key(const std::string& digest) { return "image/" + digest; }

template <typename T>
TextFeatures<T> load_text_features(const xmrf::File& file, const std::string& key, std::size_t d_text) {
    const auto& r = file.at(key);
    if (r.values.cols() != d_text)
        throw ConfigError("record '" + key + "' has width " + std::to_string(r.values.cols()) + " but d_text is " +
                              std::to_string(d_text),
                          "encoders");
    if (!r.positions) throw FormatError("text record '" + key + "' carries no marker/CLS positions");
    TextFeatures<T> f;
    f.x = r.values.template cast<T>();
    f.e1 = r.positions->e1;
    f.e2 = r.positions->e2;
    f.cls = r.positions->cls;
    return f;
}

template <typename T>
std::vector<T> load_image_feature(const xmrf::File& file, const std::string& key, std::size_t d_vis) {
    const auto& r = file.at(key);
    if (r.values.cols() != d_vis || r.values.rows() != 1)
        throw ConfigError("record '" + key + "' has shape " + r.values.shape_str() + " but expected 1x" +
                              std::to_string(d_vis),
                          "encoders");
    return {r.values.data().begin(), r.values.data().end()};
}

template <typename T>
VisualFeatures<T> load_visual_features(const xmrf::File& file,
                                       const std::vector<std::pair<std::string, fusion::VisualSource>>& keys,
                                       std::size_t d_vis) {
    VisualFeatures<T> v;
    std::vector<T> rows;
    for (const auto& [key, src] : keys) {
        auto row = load_image_feature<T>(file, key, d_vis);
        rows.insert(rows.end(), row.begin(), row.end());
        v.sources.push_back(src);
    }
    v.x = Matrix<T>(keys.size(), d_vis, std::move(rows));
    return v;
}

} // namespace mre::encoders

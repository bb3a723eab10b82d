#include <bit>
#include <cstring>
#include <random>

#include <gtest/gtest.h>

#include "mre/encoders.hpp"
#include "test_util.hpp"

namespace mre {
namespace {

using encoders::TextEncoderConfig;
using encoders::ToyImageEncoder;
using encoders::ToyTextEncoder;

// Byte-level layout written out by hand from the format description.
std::string golden_bytes() {
    std::string b = "XMRF";
    auto u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>(v >> (8 * i)));
    };
    auto f32 = [&](float f) { u32(std::bit_cast<std::uint32_t>(f)); };
    u32(1);  // version
    u32(2);  // records
    b += std::string("\x02\x00", 2) + "ab";
    u32(1), u32(2), b.push_back('\x01'), u32(0), u32(0), u32(0);
    f32(1.5f), f32(-2.0f);
    b += std::string("\x01\x00", 2) + "z";
    u32(2), u32(1), b.push_back('\x00');
    f32(0.25f), f32(7.0f);
    return b;
}

TEST(Xmrf, MatchesHandWrittenLayout) {
    std::vector<xmrf::Record> recs{
        {"ab", Matrix<float>(1, 2, std::vector<float>{1.5f, -2.0f}), xmrf::Positions{0, 0, 0}},
        {"z", Matrix<float>(2, 1, std::vector<float>{0.25f, 7.0f}), std::nullopt}};
    EXPECT_EQ(xmrf::encode(recs), golden_bytes());
    EXPECT_EQ(xmrf::decode(golden_bytes()), recs);
}

TEST(Xmrf, RoundTripIsBitwiseAcrossSizes) {
    std::mt19937 rng(5);
    const std::vector<std::pair<std::size_t, std::size_t>> shapes{{1, 1}, {10, 768}, {3, 17}, {512, 2048}, {0, 4}};
    std::vector<xmrf::Record> recs;
    for (std::size_t s = 0; s < shapes.size(); ++s) {
        Matrix<float> m(shapes[s].first, shapes[s].second);
        // arbitrary bit patterns, including NaN payloads and denormals
        for (auto& v : m.data()) v = std::bit_cast<float>(static_cast<std::uint32_t>(rng()));
        std::optional<xmrf::Positions> pos;
        if (s % 2) pos = xmrf::Positions{static_cast<std::uint32_t>(rng() % std::max<std::size_t>(1, m.rows())), 0, 0};
        recs.push_back({"rec" + std::to_string(s), std::move(m), pos});
    }
    test::TempDir dir;
    xmrf::write_file(dir.path() / "f.xmrf", recs);
    EXPECT_EQ(xmrf::read_file(dir.path() / "f.xmrf"), recs);
}

TEST(Xmrf, RejectsCorruptInput) {
    const auto good = golden_bytes();
    EXPECT_THROW(xmrf::decode("XMRG" + good.substr(4)), FormatError);
    auto v2 = good;
    v2[4] = 2;
    EXPECT_THROW(xmrf::decode(v2), FormatError);
    EXPECT_THROW(xmrf::decode(good.substr(0, good.size() - 1)), FormatError);
    EXPECT_THROW(xmrf::decode(good + "x"), FormatError);
    auto flag = good;
    flag[4 + 4 + 4 + 2 + 2 + 8] = 7;
    EXPECT_THROW(xmrf::decode(flag), FormatError);
}

TEST(Xmrf, UnknownKeyIsNamed) {
    const xmrf::File f(xmrf::decode(golden_bytes()));
    try {
        f.at("zzz");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("zzz"), std::string::npos);
    }
    EXPECT_THROW(xmrf::File(std::vector<xmrf::Record>(2, xmrf::Record{"dup", Matrix<float>(1, 1), std::nullopt})),
                 FormatError);
}

TEST(Xmrf, ByteRecords) {
    const std::string s = "{\"a\": [1, 2]}\n\xff";
    EXPECT_EQ(xmrf::record_bytes(xmrf::bytes_record("cfg", s)), s);
}

TEST(FeatureFiles, LoadTextWithPositions) {
    Matrix<float> m(10, 768);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(i) * 0.001f;
    const xmrf::File f({{encoders::content_key("x1"), m, xmrf::Positions{2, 5, 0}}});
    const auto t = encoders::load_text_features<float>(f, encoders::content_key("x1"), 768);
    EXPECT_EQ(std::memcmp(t.x.data().data(), m.data().data(), m.size() * sizeof(float)), 0);
    EXPECT_EQ(t.e1, 2u);
    EXPECT_EQ(t.e2, 5u);
    EXPECT_EQ(t.cls, 0u);
}

TEST(FeatureFiles, WidthMismatchIsConfigError) {
    const xmrf::File f({{"text/a", Matrix<float>(4, 512), xmrf::Positions{}}, {"image/d", Matrix<float>(1, 512), {}}});
    EXPECT_THROW(encoders::load_text_features<double>(f, "text/a", 768), ConfigError);
    EXPECT_THROW(encoders::load_image_feature<double>(f, "image/d", 2048), ConfigError);
    EXPECT_THROW(encoders::load_text_features<double>(f, "zzz", 512), FormatError);
}

TEST(FeatureFiles, VisualRowsKeepSourceTags) {
    const xmrf::File f({{"image/a", Matrix<float>(1, 3, std::vector<float>{1, 2, 3}), {}},
                        {"image/b", Matrix<float>(1, 3, std::vector<float>{4, 5, 6}), {}}});
    const auto v = encoders::load_visual_features<double>(
        f, {{"image/b", fusion::VisualSource::retrieved}, {"image/a", fusion::VisualSource::content_image}}, 3);
    EXPECT_EQ(v.x(0, 0), 4.0);
    EXPECT_EQ(v.x(1, 2), 3.0);
    EXPECT_EQ(v.sources[0], fusion::VisualSource::retrieved);
}

MarkedSequence marked(std::vector<std::string> toks, std::size_t h, std::size_t t) {
    RelationInstance inst;
    inst.tokens = std::move(toks);
    inst.head = {h, h + 1};
    inst.tail = {t, t + 1};
    inst.relation = "r";
    return insert_entity_markers(inst);
}

TEST(ToyTextEncoder, DeterministicAndLocal) {
    const ToyTextEncoder<double> enc(TextEncoderConfig{}, 3), enc2(TextEncoderConfig{}, 3);
    const auto a = marked({"Ang", "Lee", "holds", "his", "Oscar"}, 0, 4);
    const auto b = marked({"Ang", "Lee", "grabs", "his", "Oscar"}, 0, 4);
    const auto fa = enc.encode(a), fa2 = enc2.encode(a), fb = enc.encode(b);
    EXPECT_EQ(fa.x, fa2.x);
    ASSERT_EQ(fa.x.rows(), 9u);
    EXPECT_EQ(fa.x.cols(), 16u);
    EXPECT_EQ(fa.e1, a.e1_pos);
    EXPECT_EQ(fa.e2, a.e2_pos);
    for (std::size_t r = 0; r < fa.x.rows(); ++r) {
        const bool same = std::equal(fa.x.row(r).begin(), fa.x.row(r).end(), fb.x.row(r).begin());
        EXPECT_EQ(same, a.tokens[r] == b.tokens[r]) << "row " << r;
    }
}

TEST(ToyTextEncoder, MarkersHaveReservedIds) {
    const TextEncoderConfig cfg;
    EXPECT_EQ(encoders::token_id("[E1]", cfg), 0u);
    EXPECT_EQ(encoders::token_id("[/E2]", cfg), 3u);
    for (const char* w : {"Oscar", "[e1]", "E1", "<[E1]>"}) EXPECT_GE(encoders::token_id(w, cfg), encoders::kReservedIds);
    // evidence text never yields marker ids
    const auto toks = ToyTextEncoder<double>::evidence_tokens("see [E1] here", 128);
    EXPECT_EQ(toks.front(), "[CLS]");
    EXPECT_EQ(toks[2], "<[E1]>");
}

TEST(ToyTextEncoder, PaperWidth) {
    TextEncoderConfig cfg;
    cfg.d_text = 768;
    cfg.buckets = 64;
    const ToyTextEncoder<double> enc(cfg, 1);
    EXPECT_EQ(enc.encode(marked({"a", "b", "c"}, 0, 2)).x.cols(), 768u);
}

TEST(ToyTextEncoder, BatchPaddingKeepsUnmaskedRows) {
    const ToyTextEncoder<double> enc(TextEncoderConfig{}, 9);
    const std::vector<MarkedSequence> batch{marked({"a", "b"}, 0, 1), marked({"x", "y", "z", "w", "v", "u"}, 2, 4),
                                            marked({"p", "q", "r"}, 1, 0)};
    const auto out = enc.encode_batch(batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto alone = enc.encode(batch[i]);
        ASSERT_EQ(out[i].x.rows(), 10u);
        for (std::size_t r = 0; r < out[i].x.rows(); ++r) {
            const bool active = r < batch[i].tokens.size();
            EXPECT_EQ(out[i].mask[r], active);
            if (active) {
                EXPECT_TRUE(std::equal(alone.x.row(r).begin(), alone.x.row(r).end(), out[i].x.row(r).begin()));
            }
        }
    }
}

TEST(ToyTextEncoder, EvidenceTruncatedToMaxLength) {
    TextEncoderConfig cfg;
    cfg.max_length = 8;
    const ToyTextEncoder<double> enc(cfg, 1);
    EXPECT_EQ(enc.encode_evidence("one two three four five six seven eight nine ten").x.rows(), 8u);
}

Image solid(std::size_t w, std::size_t h, unsigned char v) {
    Image img;
    img.width = w;
    img.height = h;
    img.pixels.assign(w * h, v);
    return img;
}

TEST(ToyImageEncoder, DeterministicWidthsAndDegenerateInput) {
    const ToyImageEncoder enc(32, 7), wide(2048, 7);
    const auto bytes = encode_image(solid(4, 3, 120));
    EXPECT_EQ(enc.encode(bytes), ToyImageEncoder(32, 7).encode(bytes));
    EXPECT_EQ(enc.encode(bytes).size(), 32u);
    EXPECT_EQ(wide.encode(bytes).size(), 2048u);
    const auto black = enc.encode(encode_image(solid(1, 1, 0)));
    for (double v : black) EXPECT_TRUE(std::isfinite(v));
    EXPECT_NE(enc.encode(encode_image(solid(1, 1, 0))), enc.encode(encode_image(solid(1, 1, 255))));
}

TEST(ToyImageEncoder, DecodeFailureNamesRecord) {
    const ToyImageEncoder enc(32, 7);
    try {
        enc.encode("not an image", "crop img1#obj2");
        FAIL();
    } catch (const DecodeError& e) {
        EXPECT_NE(std::string(e.what()).find("crop img1#obj2"), std::string::npos);
    }
}

} // namespace
} // namespace mre

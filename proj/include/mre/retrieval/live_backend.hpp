#pragma once

// Adapters for the hosted services:
//
//  * Cloud Vision `images:annotate` (WEB_DETECTION for reverse-image lookup,
//    OBJECT_LOCALIZATION for grounding)
//      POST https://vision.googleapis.com/v1/images:annotate?key=KEY
//      {"requests":[{"image":{"content":"<base64>"},
//                    "features":[{"type":"WEB_DETECTION","maxResults":k}]}]}
//      -> responses[0].webDetection.webEntities[].description
//         responses[0].webDetection.pagesWithMatchingImages[].url
//             with .fullMatchingImages[].url / .partialMatchingImages[].url
//      -> responses[0].localizedObjectAnnotations[].{score, boundingPoly.normalizedVertices[]}
//
//  * Custom Search JSON API (image search)
//      GET https://www.googleapis.com/customsearch/v1?key=KEY&cx=CX&q=TEXT&searchType=image&num=k
//      -> items[].link
//
// Credentials come from MRE_GOOGLE_API_KEY and MRE_GOOGLE_CSE_ID. Transport
// is injected so the adapters can be exercised offline.

#include <cstdlib>
#include <memory>

#include <json.hpp>

#include "mre/digest.hpp"
#include "mre/retrieval/backend.hpp"

namespace mre::retrieval {

struct HttpResponse {
    int status = 0;
    std::string body;
};

class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    virtual HttpResponse get(const std::string& url, std::chrono::milliseconds timeout) = 0;
    virtual HttpResponse post_json(const std::string& url, const std::string& body,
                                   std::chrono::milliseconds timeout) = 0;
};

struct Credentials {
    std::string api_key;
    std::string search_engine_id;

    static Credentials from_env() {
        Credentials c;
        if (const char* k = std::getenv("MRE_GOOGLE_API_KEY")) c.api_key = k;
        if (const char* cx = std::getenv("MRE_GOOGLE_CSE_ID")) c.search_engine_id = cx;
        return c;
    }
};

inline std::string url_encode(std::string_view s) {
    static constexpr char kHex[] = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back('%');
            out.push_back(kHex[c >> 4]);
            out.push_back(kHex[c & 0xF]);
        }
    }
    return out;
}

// Maps an HTTP status to the retrieval error taxonomy (2xx passes).
inline void check_status(const HttpResponse& r, std::string_view what) {
    if (r.status >= 200 && r.status < 300) return;
    using K = RetrievalError::Kind;
    const std::string msg = std::string(what) + ": HTTP " + std::to_string(r.status);
    if (r.status == 0 || r.status == 408 || r.status == 429 || r.status >= 500) throw RetrievalError(K::transient, msg);
    if (r.status == 401 || r.status == 403) throw RetrievalError(K::unavailable, msg);
    throw RetrievalError(K::not_found, msg);
}

class GoogleBackend : public Backend {
public:
    static constexpr const char* kVisionEndpoint = "https://vision.googleapis.com/v1/images:annotate";
    static constexpr const char* kSearchEndpoint = "https://www.googleapis.com/customsearch/v1";

    GoogleBackend(std::shared_ptr<HttpTransport> transport, Credentials creds,
                  std::chrono::milliseconds api_timeout = std::chrono::seconds(30))
        : transport_(std::move(transport)), creds_(std::move(creds)), api_timeout_(api_timeout) {}

    std::string name() const override { return "live"; }
    bool live() const override { return true; }

    static nlohmann::json annotate_request(std::string_view image_bytes, const char* feature, std::size_t max_results) {
        return {{"requests",
                 nlohmann::json::array({{{"image", {{"content", base64_encode(image_bytes)}}},
                                         {"features", nlohmann::json::array({{{"type", feature},
                                                                              {"maxResults", max_results}}})}}})}};
    }

    static WebDetection parse_web_detection(const nlohmann::json& resp, std::size_t max_results) {
        WebDetection out;
        const auto& r0 = first_response(resp);
        if (!r0.contains("webDetection")) return out;
        const auto& wd = r0.at("webDetection");
        for (const auto& e : wd.value("webEntities", nlohmann::json::array())) {
            if (out.entities.size() >= max_results) break;
            if (e.contains("description") && !e.at("description").get<std::string>().empty())
                out.entities.push_back(e.at("description").get<std::string>());
        }
        for (const auto& page : wd.value("pagesWithMatchingImages", nlohmann::json::array())) {
            const auto page_url = page.value("url", std::string());
            for (const char* kind : {"fullMatchingImages", "partialMatchingImages"})
                for (const auto& img : page.value(kind, nlohmann::json::array()))
                    out.matches.push_back({page_url, img.value("url", std::string())});
        }
        return out;
    }

    static std::vector<CandidateBox> parse_object_localization(const nlohmann::json& resp, std::size_t width,
                                                               std::size_t height) {
        std::vector<CandidateBox> out;
        const auto& r0 = first_response(resp);
        for (const auto& obj : r0.value("localizedObjectAnnotations", nlohmann::json::array())) {
            const auto& verts = obj.at("boundingPoly").at("normalizedVertices");
            double x0 = 1, y0 = 1, x1 = 0, y1 = 0;
            for (const auto& v : verts) {
                const double x = v.value("x", 0.0), y = v.value("y", 0.0);
                x0 = std::min(x0, x), y0 = std::min(y0, y), x1 = std::max(x1, x), y1 = std::max(y1, y);
            }
            auto px = [](double f, std::size_t n) {
                return static_cast<std::size_t>(std::clamp(f, 0.0, 1.0) * static_cast<double>(n) + 0.5);
            };
            const std::size_t bx = px(x0, width), by = px(y0, height);
            const std::size_t bx1 = px(x1, width), by1 = px(y1, height);
            if (bx1 <= bx || by1 <= by) continue;
            out.push_back({{bx, by, bx1 - bx, by1 - by}, obj.value("score", 0.0)});
        }
        return out;
    }

    static constexpr std::size_t kSearchPage = 10;  // API maximum for num

    // `start` is the 1-based rank of the first result on the page.
    static std::string image_search_url(const Credentials& c, std::string_view text, std::size_t max_results,
                                        std::size_t start = 1) {
        std::string url = std::string(kSearchEndpoint) + "?key=" + url_encode(c.api_key) +
                          "&cx=" + url_encode(c.search_engine_id) + "&q=" + url_encode(text) +
                          "&searchType=image&num=" + std::to_string(std::min(max_results, kSearchPage));
        if (start > 1) url += "&start=" + std::to_string(start);
        return url;
    }

    static std::vector<std::string> parse_image_search(const nlohmann::json& resp, std::size_t max_results) {
        std::vector<std::string> out;
        for (const auto& item : resp.value("items", nlohmann::json::array())) {
            if (out.size() >= max_results) break;
            if (item.contains("link")) out.push_back(item.at("link").get<std::string>());
        }
        return out;
    }

    std::vector<CandidateBox> ground_objects(const ImageQuery& image) override {
        require_key();
        const Image img = decode_image(image.bytes);
        const auto resp = call_vision(annotate_request(image.bytes, "OBJECT_LOCALIZATION", 50));
        return parse_object_localization(resp, img.width, img.height);
    }

    WebDetection reverse_image_lookup(const ImageQuery& image, std::size_t max_results) override {
        require_key();
        return parse_web_detection(call_vision(annotate_request(image.bytes, "WEB_DETECTION", max_results)), max_results);
    }

    std::vector<std::string> image_search(std::string_view text, std::size_t max_results) override {
        require_key();
        if (creds_.search_engine_id.empty())
            throw RetrievalError(RetrievalError::Kind::unavailable, "MRE_GOOGLE_CSE_ID is not set");
        std::vector<std::string> out;
        while (out.size() < max_results) {
            const std::size_t want = max_results - out.size();
            const auto r = transport_->get(image_search_url(creds_, text, want, out.size() + 1), api_timeout_);
            check_status(r, "custom search");
            const auto page = parse_image_search(parse_body(r.body), std::min(want, kSearchPage));
            out.insert(out.end(), page.begin(), page.end());
            if (page.size() < std::min(want, kSearchPage)) break;
        }
        return out;
    }

    std::string fetch(std::string_view url, std::chrono::milliseconds timeout) override {
        auto r = transport_->get(std::string(url), timeout);
        check_status(r, "fetch " + std::string(url));
        return std::move(r.body);
    }

    Provenance provenance_for(std::string_view url) const override { return {std::string(url), utc_timestamp(), ""}; }

private:
    static const nlohmann::json& first_response(const nlohmann::json& resp) {
        static const nlohmann::json kEmpty = nlohmann::json::object();
        if (!resp.contains("responses") || resp.at("responses").empty()) return kEmpty;
        const auto& r0 = resp.at("responses").at(0);
        if (r0.contains("error"))
            throw RetrievalError(RetrievalError::Kind::not_found,
                                 "vision API error: " + r0.at("error").value("message", std::string("unknown")));
        return r0;
    }

    static nlohmann::json parse_body(const std::string& body) {
        try {
            return nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception& e) {
            throw RetrievalError(RetrievalError::Kind::transient, std::string("malformed API response: ") + e.what());
        }
    }

    void require_key() const {
        if (creds_.api_key.empty()) throw RetrievalError(RetrievalError::Kind::unavailable, "MRE_GOOGLE_API_KEY is not set");
    }

    nlohmann::json call_vision(const nlohmann::json& request) {
        const auto r = transport_->post_json(std::string(kVisionEndpoint) + "?key=" + url_encode(creds_.api_key),
                                             request.dump(), api_timeout_);
        check_status(r, "vision annotate");
        return parse_body(r.body);
    }

    std::shared_ptr<HttpTransport> transport_;
    Credentials creds_;
    std::chrono::milliseconds api_timeout_;
};

} // namespace mre::retrieval

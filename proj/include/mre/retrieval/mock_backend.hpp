#pragma once

// File-fixture backend. Layout of the fixture directory:
//
//   objects.json   { "<image or crop id>": [{"bbox": [x, y, w, h], "salience": s}, ...] }
//   web.json       { "<image or crop id>": {"entities": [...],
//                                            "matches": [{"page": url, "image": url}, ...]} }
//   search.json    { "<sentence text>": [url, ...] }
//   pages/, images/  served for URLs of the form fixture://pages/<f>, fixture://images/<f>
//
// URLs under fixture://fail/ raise a transient error and fixture://timeout/
// a timeout. Unknown ids resolve to empty results.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>

#include <json.hpp>

#include "mre/retrieval/backend.hpp"

namespace mre::retrieval {

class MockBackend : public Backend {
public:
    MockBackend() = default;
    explicit MockBackend(const std::filesystem::path& fixtures) : root_(fixtures) {
        if (!std::filesystem::is_directory(fixtures))
            throw ConfigError("fixture directory not found: " + fixtures.string(), "evidence_retrieval");
        objects_ = load_json(fixtures / "objects.json");
        web_ = load_json(fixtures / "web.json");
        search_ = load_json(fixtures / "search.json");
    }

    std::string name() const override { return "mock"; }
    bool live() const override { return false; }

    std::vector<CandidateBox> ground_objects(const ImageQuery& image) override {
        begin_call();
        std::vector<CandidateBox> out;
        if (!objects_.contains(image.id)) return out;
        for (const auto& b : objects_.at(image.id)) {
            const auto& bb = b.at("bbox");
            out.push_back({{bb.at(0).get<std::size_t>(), bb.at(1).get<std::size_t>(), bb.at(2).get<std::size_t>(),
                            bb.at(3).get<std::size_t>()},
                           b.at("salience").get<double>()});
        }
        return out;
    }

    WebDetection reverse_image_lookup(const ImageQuery& image, std::size_t max_results) override {
        begin_call();
        WebDetection out;
        if (!web_.contains(image.id)) return out;
        const auto& w = web_.at(image.id);
        if (w.contains("entities"))
            for (const auto& e : w.at("entities")) {
                if (out.entities.size() >= max_results) break;
                out.entities.push_back(e.get<std::string>());
            }
        if (w.contains("matches"))
            for (const auto& m : w.at("matches"))
                out.matches.push_back({m.at("page").get<std::string>(), m.at("image").get<std::string>()});
        return out;
    }

    std::vector<std::string> image_search(std::string_view text, std::size_t max_results) override {
        begin_call();
        std::vector<std::string> out;
        const std::string key(text);
        if (!search_.contains(key)) return out;
        for (const auto& u : search_.at(key)) {
            if (out.size() >= max_results) break;
            out.push_back(u.get<std::string>());
        }
        return out;
    }

    std::string fetch(std::string_view url, std::chrono::milliseconds) override {
        begin_call();
        constexpr std::string_view kScheme = "fixture://";
        if (url.substr(0, kScheme.size()) != kScheme)
            throw RetrievalError(RetrievalError::Kind::not_found, "mock backend cannot fetch " + std::string(url));
        const auto rel = url.substr(kScheme.size());
        if (rel.substr(0, 5) == "fail/")
            throw RetrievalError(RetrievalError::Kind::transient, "simulated network failure for " + std::string(url));
        if (rel.substr(0, 8) == "timeout/")
            throw RetrievalError(RetrievalError::Kind::timeout, "simulated timeout for " + std::string(url));
        const auto path = root_ / std::filesystem::path(std::string(rel)).lexically_normal();
        std::ifstream in(path, std::ios::binary);
        if (rel.find("..") != std::string_view::npos || !in)
            throw RetrievalError(RetrievalError::Kind::not_found, "fixture not found: " + std::string(url));
        return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    }

    Provenance provenance_for(std::string_view url) const override { return {std::string(url), "", "mock"}; }

    // Test hooks.
    std::size_t calls() const noexcept { return calls_.load(); }
    void reset_calls() noexcept { calls_ = 0; }
    void set_unavailable(bool v) noexcept { unavailable_ = v; }
    // The next `n` calls fail with a transient error.
    void fail_next(int n) noexcept { fail_next_ = n; }

private:
    static nlohmann::json load_json(const std::filesystem::path& p) {
        if (!std::filesystem::exists(p)) return nlohmann::json::object();
        std::ifstream in(p, std::ios::binary);
        try {
            return nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad fixture file " + p.string() + ": " + e.what(), "evidence_retrieval");
        }
    }

    void begin_call() {
        ++calls_;
        if (unavailable_) throw RetrievalError(RetrievalError::Kind::unavailable, "mock backend marked unavailable");
        if (fail_next_.load() > 0) {
            --fail_next_;
            throw RetrievalError(RetrievalError::Kind::transient, "simulated transient failure");
        }
    }

    std::filesystem::path root_;
    nlohmann::json objects_ = nlohmann::json::object();
    nlohmann::json web_ = nlohmann::json::object();
    nlohmann::json search_ = nlohmann::json::object();
    std::atomic<std::size_t> calls_{0};
    std::atomic<bool> unavailable_{false};
    std::atomic<int> fail_next_{0};
};

} // namespace mre::retrieval

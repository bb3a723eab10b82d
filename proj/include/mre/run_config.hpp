#pragma once

// The single serializable configuration behind every CLI run: data paths,
// retrieval settings, the training recipe and the seed list. Relative paths
// in a config file resolve against the file's directory; the resolved form
// (absolute paths) is what gets echoed into artifact directories.

#include <filesystem>
#include <fstream>
#include <optional>

#include <json.hpp>

#include "mre/error.hpp"
#include "mre/retrieval/retriever.hpp"
#include "mre/training.hpp"

namespace mre {

struct RunConfig {
    struct Data {
        std::filesystem::path train, dev, test, images;
        std::size_t max_length = kDefaultMaxLength;
    } data;

    struct Retrieval {
        std::string backend = "mock";
        std::filesystem::path fixtures;
        std::size_t k = 10;
        std::size_t m = 3;
        std::size_t workers = 1;
        double rate = 0.0;
        std::size_t page_timeout_ms = 10000;
        std::size_t retries = 3;
        std::size_t backoff_ms = 1000;
    } retrieval;

    std::filesystem::path store;
    std::filesystem::path features_text, features_image;
    training::TrainConfig train;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::vector<std::size_t> sweep_counts = training::default_sweep_counts();
    std::filesystem::path out = "runs";

    retrieval::RetrievalConfig retrieval_config() const {
        retrieval::RetrievalConfig c;
        c.k = retrieval.k;
        c.m = retrieval.m;
        c.workers = retrieval.workers;
        c.rate = retrieval.rate;
        c.page_timeout = std::chrono::milliseconds(retrieval.page_timeout_ms);
        c.retry.attempts = static_cast<int>(retrieval.retries);
        c.retry.initial_backoff = std::chrono::milliseconds(retrieval.backoff_ms);
        return c;
    }

    void validate() const {
        if (retrieval.backend != "mock" && retrieval.backend != "live")
            throw ConfigError("retrieval.backend must be 'mock' or 'live', got '" + retrieval.backend + "'");
        if (retrieval.retries < 1) throw ConfigError("retrieval.retries must be at least 1");
        if (retrieval.workers < 1) throw ConfigError("retrieval.workers must be at least 1");
        if (!(retrieval.rate >= 0.0)) throw ConfigError("retrieval.rate must be >= 0");
        if (seeds.empty()) throw ConfigError("seeds must not be empty");
        train.validate();
    }
};

namespace run_config_detail {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline std::string path_str(const fs::path& p) { return p.empty() ? std::string() : p.generic_string(); }

inline fs::path resolve(const std::string& s, const fs::path& base) {
    if (s.empty()) return {};
    fs::path p(s);
    if (p.is_relative()) p = base / p;
    return fs::absolute(p).lexically_normal();
}

inline fs::path read_path(const json& j, const char* key, const fs::path& base, const std::string& where) {
    std::string s;
    training::detail::read(j, key, s, where);
    return resolve(s, base);
}

} // namespace run_config_detail

inline nlohmann::json to_json(const RunConfig& c) {
    using run_config_detail::path_str;
    const auto& r = c.retrieval;
    return {{"data",
             {{"train", path_str(c.data.train)},
              {"dev", path_str(c.data.dev)},
              {"test", path_str(c.data.test)},
              {"images", path_str(c.data.images)},
              {"max_length", c.data.max_length}}},
            {"retrieval",
             {{"backend", r.backend},
              {"fixtures", path_str(r.fixtures)},
              {"k", r.k},
              {"m", r.m},
              {"workers", r.workers},
              {"rate", r.rate},
              {"page_timeout_ms", r.page_timeout_ms},
              {"retries", r.retries},
              {"backoff_ms", r.backoff_ms}}},
            {"store", path_str(c.store)},
            {"features", {{"text", path_str(c.features_text)}, {"image", path_str(c.features_image)}}},
            {"train", training::to_json(c.train)},
            {"seeds", c.seeds},
            {"sweep", {{"counts", c.sweep_counts}}},
            {"out", path_str(c.out)}};
}

// `base` anchors relative paths (the config file's directory).
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base) {
    using namespace run_config_detail;
    using training::detail::check_keys;
    using training::detail::read;
    check_keys(j, {"data", "retrieval", "store", "features", "train", "seeds", "sweep", "out"}, "run config");
    RunConfig c;
    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d, {"train", "dev", "test", "images", "max_length"}, "data");
        c.data.train = read_path(d, "train", base, "data");
        c.data.dev = read_path(d, "dev", base, "data");
        c.data.test = read_path(d, "test", base, "data");
        c.data.images = read_path(d, "images", base, "data");
        read(d, "max_length", c.data.max_length, "data");
    }
    if (j.contains("retrieval")) {
        const auto& r = j.at("retrieval");
        check_keys(r, {"backend", "fixtures", "k", "m", "workers", "rate", "page_timeout_ms", "retries", "backoff_ms"},
                   "retrieval");
        read(r, "backend", c.retrieval.backend, "retrieval");
        c.retrieval.fixtures = read_path(r, "fixtures", base, "retrieval");
        read(r, "k", c.retrieval.k, "retrieval");
        read(r, "m", c.retrieval.m, "retrieval");
        read(r, "workers", c.retrieval.workers, "retrieval");
        read(r, "rate", c.retrieval.rate, "retrieval");
        read(r, "page_timeout_ms", c.retrieval.page_timeout_ms, "retrieval");
        read(r, "retries", c.retrieval.retries, "retrieval");
        read(r, "backoff_ms", c.retrieval.backoff_ms, "retrieval");
    }
    c.store = read_path(j, "store", base, "run config");
    if (j.contains("features")) {
        const auto& f = j.at("features");
        check_keys(f, {"text", "image"}, "features");
        c.features_text = read_path(f, "text", base, "features");
        c.features_image = read_path(f, "image", base, "features");
    }
    if (j.contains("train")) c.train = training::train_config_from_json(j.at("train"));
    read(j, "seeds", c.seeds, "run config");
    if (j.contains("sweep")) {
        check_keys(j.at("sweep"), {"counts"}, "sweep");
        read(j.at("sweep"), "counts", c.sweep_counts, "sweep");
    }
    if (j.contains("out")) c.out = read_path(j, "out", base, "run config");
    else c.out = resolve("runs", base);
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j, std::filesystem::absolute(path).parent_path());
}

} // namespace mre

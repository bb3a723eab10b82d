#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <functional>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "mre/error.hpp"
#include "mre/image.hpp"

namespace mre::retrieval {

class RetrievalError : public Error {
public:
    enum class Kind {
        unavailable,  // backend not reachable / not configured; not retried
        transient,    // network failure, 429, 5xx; retried
        timeout,      // per-request deadline exceeded
        not_found,    // resource does not exist; not retried
    };

    RetrievalError(Kind kind, const std::string& what) : Error("evidence_retrieval", what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }
    bool retryable() const noexcept { return kind_ == Kind::transient; }

private:
    Kind kind_;
};

struct DetectedObject {
    BoundingBox bbox;
    double salience = 0.0;
    std::string crop_id;
    bool operator==(const DetectedObject&) const = default;
};

// Raw candidate region as returned by a grounding backend.
struct CandidateBox {
    BoundingBox bbox;
    double salience = 0.0;
};

struct ImageQuery {
    std::string id;     // dataset image id or crop id
    std::string bytes;  // encoded image
};

struct WebMatch {
    std::string page_url;
    std::string image_url;
};

struct WebDetection {
    std::vector<std::string> entities;
    std::vector<WebMatch> matches;
};

// Where an evidence item came from. Live items carry a URL and a UTC
// timestamp; mock items carry a fixture tag instead of a timestamp.
struct Provenance {
    std::string source_url;
    std::string retrieved_at;
    std::string fixture;
    bool operator==(const Provenance&) const = default;
};

// One pluggable retrieval service: object grounding, reverse-image lookup,
// text-to-image search, and raw fetching (pages and images).
class Backend {
public:
    virtual ~Backend() = default;

    virtual std::string name() const = 0;
    virtual bool live() const = 0;

    virtual std::vector<CandidateBox> ground_objects(const ImageQuery& image) = 0;
    virtual WebDetection reverse_image_lookup(const ImageQuery& image, std::size_t max_results) = 0;
    virtual std::vector<std::string> image_search(std::string_view text, std::size_t max_results) = 0;
    virtual std::string fetch(std::string_view url, std::chrono::milliseconds timeout) = 0;

    virtual Provenance provenance_for(std::string_view url) const = 0;
};

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds initial_backoff{1000};
    std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
        std::this_thread::sleep_for(d);
    };
};

// Runs `fn`, retrying transient failures with exponential backoff
// (initial, 2·initial, ...). Other errors propagate immediately.
template <typename Fn>
auto with_retries(const RetryPolicy& policy, Fn&& fn) -> decltype(fn()) {
    auto delay = policy.initial_backoff;
    for (int attempt = 1;; ++attempt) {
        try {
            return fn();
        } catch (const RetrievalError& e) {
            if (!e.retryable() || attempt >= policy.attempts) throw;
            if (policy.sleep) policy.sleep(delay);
            delay *= 2;
        }
    }
}

// Spaces calls at least 1/rate seconds apart across all threads.
// rate <= 0 disables limiting.
class RateLimiter {
public:
    explicit RateLimiter(double calls_per_second = 0.0) : rate_(calls_per_second) {}

    void acquire() {
        if (rate_ <= 0.0) return;
        using clock = std::chrono::steady_clock;
        const auto interval = std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(1.0 / rate_));
        clock::time_point slot;
        {
            std::lock_guard lock(mu_);
            const auto now = clock::now();
            slot = std::max(now, next_);
            next_ = slot + interval;
        }
        std::this_thread::sleep_until(slot);
    }

    double rate() const noexcept { return rate_; }

private:
    double rate_;
    std::mutex mu_;
    std::chrono::steady_clock::time_point next_{};
};

} // namespace mre::retrieval

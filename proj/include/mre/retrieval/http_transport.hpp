#pragma once

// cpp-httplib transport for the live adapters. Kept out of the other
// headers so only the CLI pays for httplib.

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "mre/retrieval/live_backend.hpp"

namespace mre::retrieval {

class HttplibTransport : public HttpTransport {
public:
    HttpResponse get(const std::string& url, std::chrono::milliseconds timeout) override {
        auto [base, path] = split(url);
        auto cli = client(base, timeout);
        return convert(cli.Get(path), url);
    }

    HttpResponse post_json(const std::string& url, const std::string& body,
                           std::chrono::milliseconds timeout) override {
        auto [base, path] = split(url);
        auto cli = client(base, timeout);
        return convert(cli.Post(path, body, "application/json"), url);
    }

private:
    static std::pair<std::string, std::string> split(const std::string& url) {
        const auto scheme = url.find("://");
        if (scheme == std::string::npos) throw RetrievalError(RetrievalError::Kind::not_found, "bad URL " + url);
        const auto slash = url.find('/', scheme + 3);
        if (slash == std::string::npos) return {url, "/"};
        return {url.substr(0, slash), url.substr(slash)};
    }

    static httplib::Client client(const std::string& base, std::chrono::milliseconds timeout) {
        httplib::Client cli(base);
        cli.set_follow_location(true);
        cli.set_connection_timeout(timeout);
        cli.set_read_timeout(timeout);
        cli.set_write_timeout(timeout);
        return cli;
    }

    static HttpResponse convert(const httplib::Result& res, const std::string& url) {
        if (!res) {
            const auto err = res.error();
            if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read)
                throw RetrievalError(RetrievalError::Kind::timeout, "timed out fetching " + url);
            throw RetrievalError(RetrievalError::Kind::transient,
                                 "request failed for " + url + ": " + httplib::to_string(err));
        }
        return {res->status, res->body};
    }
};

} // namespace mre::retrieval

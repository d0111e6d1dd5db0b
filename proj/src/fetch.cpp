#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include "rankcell/corpus.hpp"

#include <fmt/format.h>

#include <chrono>
#include <fstream>
#include <regex>
#include <thread>

namespace rankcell {

namespace {

struct ParsedUrl {
    std::string scheme_host_port;
    std::string path;
};

ParsedUrl parse_url(const std::string& url) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) {
        throw UsageError("unsupported url: " + url);
    }
    return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

void download_once(const std::string& url, const std::filesystem::path& dest, const FetchOptions& options) {
    if (url.starts_with("file://")) {
        std::filesystem::path src = url.substr(7);
        std::error_code ec;
        std::filesystem::copy_file(src, dest, std::filesystem::copy_options::overwrite_existing, ec);
        if (ec) {
            throw NetworkError("cannot read " + src.string() + ": " + ec.message(), false);
        }
        return;
    }
    auto parsed = parse_url(url);
    httplib::Client client(parsed.scheme_host_port);
    client.set_follow_location(true);
    client.set_connection_timeout(options.timeout_s, 0);
    client.set_read_timeout(options.timeout_s, 0);

    std::ofstream out(dest, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + dest.string());
    }
    int status = 0;
    auto res = client.Get(
        parsed.path,
        [&](const httplib::Response& r) {
            status = r.status;
            return r.status == 200;
        },
        [&](const char* data, size_t len) {
            out.write(data, static_cast<std::streamsize>(len));
            return static_cast<bool>(out);
        });
    out.close();
    if (!res) {
        if (status != 0 && status != 200) {
            // 5xx responses may be transient; anything else is final.
            throw NetworkError(fmt::format("GET {} returned HTTP {}", url, status), status >= 500);
        }
        throw NetworkError(fmt::format("GET {} failed: {}", url, httplib::to_string(res.error())), true);
    }
    if (res->status != 200) {
        throw NetworkError(fmt::format("GET {} returned HTTP {}", url, res->status), res->status >= 500);
    }
}

}

std::filesystem::path fetch_dataset(const std::string& url, const std::filesystem::path& dest,
                                    const std::optional<std::string>& expected_sha256, const FetchOptions& options) {
    if (dest.has_parent_path()) {
        std::filesystem::create_directories(dest.parent_path());
    }
    const int attempts = std::max(1, options.max_attempts);
    for (int attempt = 1;; ++attempt) {
        try {
            download_once(url, dest, options);
            break;
        } catch (const NetworkError& e) {
            if (!e.retryable() || attempt >= attempts) {
                std::filesystem::remove(dest);
                throw NetworkError(fmt::format("{} (after {} attempt{})", e.what(), attempt, attempt == 1 ? "" : "s"),
                                   e.retryable());
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(options.backoff_ms * attempt));
        }
    }
    if (expected_sha256) {
        auto actual = sha256_file(dest);
        if (actual != *expected_sha256) {
            std::filesystem::remove(dest);
            throw DataError(fmt::format("integrity check failed for {}: expected sha256 {}, got {}", url, *expected_sha256, actual));
        }
    }
    return dest;
}

}

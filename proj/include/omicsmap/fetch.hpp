#pragma once

// Cached retrieval of catalog files over plain HTTP.

#include <filesystem>
#include <string>

#include "httplib.h"

#include "omicsmap/error.hpp"
#include "omicsmap/io.hpp"

namespace omicsmap {

inline constexpr const char* kDefaultCatalogUrl = "http://rest.kegg.jp/get/";

struct UrlParts {
    std::string host;
    int port = 80;
    std::string path;
};

inline UrlParts split_url(const std::string& url) {
    const std::string scheme = "http://";
    if (url.rfind(scheme, 0) != 0) fail(ErrorKind::NetworkUnavailable, "only http:// URLs are supported: " + url);
    const auto rest = url.substr(scheme.size());
    const auto slash = rest.find('/');
    UrlParts u;
    std::string authority = rest.substr(0, slash);
    u.path = slash == std::string::npos ? "/" : rest.substr(slash);
    if (auto colon = authority.find(':'); colon != std::string::npos) {
        u.port = std::stoi(authority.substr(colon + 1));
        authority.resize(colon);
    }
    u.host = authority;
    return u;
}

inline std::filesystem::path cache_entry(const std::filesystem::path& cache_dir, const std::string& resource_id) {
    return cache_dir / io::percent_encode(resource_id);
}

/// Returns the cached payload for `resource_id`, or performs one GET of
/// base_url + resource_id and stores the body. Existing entries are never
/// rewritten.
inline std::string fetch_catalog(const std::string& resource_id, const std::filesystem::path& cache_dir,
                                 const std::string& base_url = kDefaultCatalogUrl, int timeout_s = 30) {
    const auto entry = cache_entry(cache_dir, resource_id);
    std::error_code ec;
    if (std::filesystem::exists(entry, ec)) {
        if (std::filesystem::file_size(entry, ec) == 0 || ec)
            fail(ErrorKind::CacheCorrupt, "empty cache entry " + entry.string());
        return io::read_file(entry);
    }
    const auto url = split_url(base_url + resource_id);
    httplib::Client cli(url.host, url.port);
    cli.set_connection_timeout(timeout_s, 0);
    cli.set_read_timeout(timeout_s, 0);
    auto res = cli.Get(url.path);
    if (!res) fail(ErrorKind::NetworkUnavailable, "GET " + base_url + resource_id + ": " + httplib::to_string(res.error()));
    if (res->status != 200)
        fail(ErrorKind::NetworkUnavailable, "GET " + base_url + resource_id + ": HTTP " + std::to_string(res->status));
    if (res->body.empty()) fail(ErrorKind::NetworkUnavailable, "GET " + base_url + resource_id + ": empty body");
    if (!std::filesystem::exists(entry, ec)) io::write_file_atomic(entry, res->body);
    return io::read_file(entry);
}

} // namespace omicsmap

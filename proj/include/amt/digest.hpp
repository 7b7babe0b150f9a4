#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace amt {

/// Incremental SHA-256 (OpenSSL EVP underneath).
class Sha256 {
public:
    using Digest = std::array<std::uint8_t, 32>;

    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(std::span<const std::uint8_t> bytes);
    Sha256& update(std::string_view text);
    template <typename T>
    Sha256& update_value(const T& value) {
        return update(std::span(reinterpret_cast<const std::uint8_t*>(&value), sizeof(T)));
    }
    Digest finish();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::string to_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
/// Digest of a file's bytes; throws IoError if unreadable.
std::string sha256_file(const std::string& path);

}  // namespace amt

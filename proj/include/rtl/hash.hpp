#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace rtl {

/// Incremental 64-bit FNV-1a.
class Fnv1a {
public:
    static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
    static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

    void update(std::span<const unsigned char> bytes) noexcept {
        for (unsigned char b : bytes) {
            state_ ^= b;
            state_ *= kPrime;
        }
    }
    void update(std::string_view s) noexcept {
        update(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
    }
    void update(std::span<const double> values) noexcept {
        update(std::as_bytes(values));
    }
    void update(std::span<const std::byte> bytes) noexcept {
        update(std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()));
    }

    std::uint64_t digest() const noexcept { return state_; }

private:
    std::uint64_t state_ = kOffset;
};

inline std::uint64_t fnv1a(std::string_view bytes) noexcept {
    Fnv1a h;
    h.update(bytes);
    return h.digest();
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

}  // namespace rtl

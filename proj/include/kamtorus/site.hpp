#ifndef KAMTORUS_SITE_HPP
#define KAMTORUS_SITE_HPP

#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace kam {

/// A point of the integer lattice Z^2.
struct Site {
    std::int64_t x = 0;
    std::int64_t y = 0;

    friend constexpr auto operator<=>(const Site&, const Site&) = default;

    constexpr Site operator+(const Site& o) const { return {x + o.x, y + o.y}; }
    constexpr Site operator-(const Site& o) const { return {x - o.x, y - o.y}; }
    constexpr Site operator-() const { return {-x, -y}; }
    constexpr Site operator*(std::int64_t t) const { return {t * x, t * y}; }

    /// Squared Euclidean norm |a|^2 (exact).
    constexpr std::int64_t norm2() const { return x * x + y * y; }

    /// Counterclockwise perpendicular (-y, x).
    constexpr Site perp() const { return {-y, x}; }
};

constexpr std::int64_t dot(const Site& a, const Site& b) {
    return a.x * b.x + a.y * b.y;
}

/// z-component of the cross product; zero iff a, b are collinear.
constexpr std::int64_t cross(const Site& a, const Site& b) {
    return a.x * b.y - a.y * b.x;
}

inline std::ostream& operator<<(std::ostream& os, const Site& s) {
    return os << '(' << s.x << ',' << s.y << ')';
}

inline std::string to_string(const Site& s) {
    std::ostringstream os;
    os << s;
    return os.str();
}

/// Exact floor of sqrt(n) for n >= 0.
inline std::int64_t isqrt(std::int64_t n) {
    if (n < 0) return -1;
    auto r = static_cast<std::int64_t>(std::sqrt(static_cast<double>(n)));
    while (r > 0 && r * r > n) --r;
    while ((r + 1) * (r + 1) <= n) ++r;
    return r;
}

inline bool is_perfect_square(std::int64_t n, std::int64_t& root) {
    if (n < 0) return false;
    root = isqrt(n);
    return root * root == n;
}

}  // namespace kam

template <>
struct std::hash<kam::Site> {
    std::size_t operator()(const kam::Site& s) const noexcept {
        auto h = static_cast<std::uint64_t>(s.x) * 0x9e3779b97f4a7c15ULL;
        h ^= static_cast<std::uint64_t>(s.y) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        return static_cast<std::size_t>(h);
    }
};

#endif  // KAMTORUS_SITE_HPP

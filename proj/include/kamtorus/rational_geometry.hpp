#ifndef KAMTORUS_RATIONAL_GEOMETRY_HPP
#define KAMTORUS_RATIONAL_GEOMETRY_HPP

#include <gmpxx.h>

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <vector>

#include "site.hpp"

// Exact rational/integer plane geometry used by the admissibility checker.
// No floating point anywhere in this header: integer points on lines, circles
// and their intersections are decided with GMP integers and rationals.

namespace kam {

/// Line a*n1 + b*n2 = c with integer coefficients, kept in a canonical form
/// (coefficients divided by their gcd, leading nonzero of (a,b) positive) so
/// that coincident lines compare equal.
struct Line {
    mpz_class a, b, c;

    Line(mpz_class a_, mpz_class b_, mpz_class c_) : a(a_), b(b_), c(c_) {
        if (a == 0 && b == 0)
            throw std::invalid_argument("rational_geometry: degenerate line (a=b=0)");
        mpz_class g = gcd(gcd(abs(a), abs(b)), abs(c));
        if (g > 1) { a /= g; b /= g; c /= g; }
        if (a < 0 || (a == 0 && b < 0)) { a = -a; b = -b; c = -c; }
    }

    bool operator==(const Line& o) const { return a == o.a && b == o.b && c == o.c; }

    bool contains(const Site& n) const { return a * n.x + b * n.y == c; }
};

/// Circle with half-integer center sum/2 and squared radius d2/4, stored via
/// the doubled data (sum, d2) so that all arithmetic stays integral.  The
/// rational center and squared radius are (sum.x/2, sum.y/2) and d2/4.
struct Circle {
    Site sum;            // twice the center
    std::int64_t d2 = 0; // four times the squared radius

    bool operator==(const Circle& o) const { return sum == o.sum && d2 == o.d2; }

    /// |2n - sum|^2 == d2, i.e. n lies on the circle.
    bool contains(const Site& n) const {
        Site u = n * 2 - sum;
        return u.norm2() == d2;
    }
};

/// All integer solutions of x^2 + y^2 = R2, sorted lexicographically.
inline std::vector<Site> circle_sites(std::int64_t R2) {
    if (R2 < 0)
        throw std::invalid_argument("rational_geometry: circle_sites needs R2 >= 0");
    std::vector<Site> out;
    const std::int64_t r = isqrt(R2);
    for (std::int64_t x = -r; x <= r; ++x) {
        std::int64_t y2 = R2 - x * x, y = 0;
        if (is_perfect_square(y2, y)) {
            if (y == 0)
                out.push_back({x, 0});
            else {
                out.push_back({x, -y});
                out.push_back({x, y});
            }
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// Intersection point of two non-parallel lines, if it is rational (always)
/// and integral; std::nullopt when parallel, coincident, or non-integral.
inline std::optional<Site> line_line_integer_point(const Line& p, const Line& q) {
    mpz_class det = p.a * q.b - p.b * q.a;
    if (det == 0) return std::nullopt;
    mpz_class xnum = p.c * q.b - p.b * q.c;
    mpz_class ynum = p.a * q.c - p.c * q.a;
    if (xnum % det != 0 || ynum % det != 0) return std::nullopt;
    mpz_class xi = xnum / det, yi = ynum / det;
    if (!xi.fits_slong_p() || !yi.fits_slong_p()) return std::nullopt;
    return Site{xi.get_si(), yi.get_si()};
}

inline bool lines_parallel(const Line& p, const Line& q) {
    return p.a * q.b - p.b * q.a == 0;
}

inline bool lines_coincident(const Line& p, const Line& q) { return p == q; }

/// Any integer point on the line, if one exists (gcd(a,b) | c).
inline std::optional<Site> line_integer_point(const Line& L) {
    mpz_class g, s, t;
    mpz_gcdext(g.get_mpz_t(), s.get_mpz_t(), t.get_mpz_t(),
               L.a.get_mpz_t(), L.b.get_mpz_t());
    if (L.c % g != 0) return std::nullopt;
    mpz_class f = L.c / g;
    mpz_class x = s * f, y = t * f;
    // reduce along the direction (-b, a)/g to keep coordinates small
    mpz_class bg = L.b / g, ag = L.a / g;
    if (ag != 0 || bg != 0) {
        mpz_class n2 = ag * ag + bg * bg;
        mpz_class k = (x * (-bg) + y * ag) / n2;  // nearest lattice step, truncated
        x += k * bg;
        y -= k * ag;
    }
    if (!x.fits_slong_p() || !y.fits_slong_p()) return std::nullopt;
    return Site{x.get_si(), y.get_si()};
}

/// Direction vector of the line (primitive).
inline Site line_direction(const Line& L) {
    mpz_class g = gcd(abs(L.a), abs(L.b));
    mpz_class dx = -L.b / g, dy = L.a / g;
    return Site{dx.get_si(), dy.get_si()};
}

/// All integer points lying on both the line and the circle.  Derived by
/// parametrizing the line's integer points as p0 + t*dir and demanding
/// |2n - sum|^2 = d2, a quadratic in t whose discriminant must be a perfect
/// square.
inline std::vector<Site> line_circle_integer_points(const Line& L, const Circle& C) {
    std::vector<Site> out;
    auto p0 = line_integer_point(L);
    if (!p0) return out;
    const Site dir = line_direction(L);
    // u(t) = 2*(p0 + t*dir) - sum ; |u|^2 = d2 gives A t^2 + B t + Cc = 0
    const Site u0 = *p0 * 2 - C.sum;
    const Site d2v = dir * 2;
    const mpz_class A = d2v.norm2();  // 4|dir|^2 > 0
    const mpz_class B = 2 * dot(u0, d2v);
    const mpz_class Cc = u0.norm2() - C.d2;
    const mpz_class disc = B * B - 4 * A * Cc;
    if (disc < 0 || mpz_perfect_square_p(disc.get_mpz_t()) == 0) return out;
    const mpz_class rt = sqrt(disc);
    for (int sgn : {-1, +1}) {
        const mpz_class num = -B + sgn * rt;
        if (num % (2 * A) != 0) continue;
        const mpz_class t = num / (2 * A);
        if (!t.fits_slong_p()) continue;
        out.push_back(*p0 + dir * t.get_si());
        if (rt == 0) break;
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

/// All integer points on the circle: |2n - sum|^2 = d2 with 2n = u + sum, so u
/// runs over circle_sites(d2) filtered by the parity of sum.
inline std::vector<Site> circle_integer_points(const Circle& C) {
    std::vector<Site> out;
    for (const Site& u : circle_sites(C.d2)) {
        if (((u.x - C.sum.x) & 1) == 0 && ((u.y - C.sum.y) & 1) == 0)
            out.push_back({(u.x + C.sum.x) / 2, (u.y + C.sum.y) / 2});
    }
    return out;
}

/// All integer points on both circles.  Distinct circles reduce to a
/// line-circle problem via the radical line; coincident circles are the
/// caller's case to handle (this returns their full point set).
inline std::vector<Site> circle_circle_integer_points(const Circle& c1, const Circle& c2) {
    if (c1 == c2) return circle_integer_points(c1);
    if (c1.sum == c2.sum) return {};  // concentric, different radii
    // |2n-s1|^2 - |2n-s2|^2 = d2_1 - d2_2 simplifies to the radical line
    // 4 <n, s2-s1> = d2_1 - d2_2 + |s2|^2 - |s1|^2.
    const Site d = c2.sum - c1.sum;
    Line radical(4 * d.x, 4 * d.y,
                 mpz_class(c1.d2 - c2.d2) + c2.sum.norm2() - c1.sum.norm2());
    return line_circle_integer_points(radical, c1);
}

}  // namespace kam

#endif  // KAMTORUS_RATIONAL_GEOMETRY_HPP

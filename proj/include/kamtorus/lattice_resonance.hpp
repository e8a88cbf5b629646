#ifndef KAMTORUS_LATTICE_RESONANCE_HPP
#define KAMTORUS_LATTICE_RESONANCE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "rational_geometry.hpp"
#include "site.hpp"

// Resonance combinatorics on Z^2: classification of first/second-type
// resonant pairs against a set of tangential sites, the four admissibility
// conditions (decided by exact line/circle intersections and cross-checked by
// brute force), block partitions of equal-norm clusters, and the lattice-line
// decomposition used by the divisor analysis.

namespace kam {

enum class LocusKind { FirstType, SecondType };

/// A resonance triplet ({i,j}, m): unordered tangential pair plus the partner
/// site.  Two triplets are the same precisely when kind, {i,j} and m agree.
struct Triplet {
    LocusKind kind;
    Site i, j;  // stored lexicographically sorted
    Site m;

    Triplet(LocusKind k, Site i_, Site j_, Site m_) : kind(k), i(i_), j(j_), m(m_) {
        if (j < i) std::swap(i, j);
    }
    friend auto operator<=>(const Triplet&, const Triplet&) = default;
};

/// A classified resonant pair (n,m) together with its tangential pair (i,j).
/// For FirstType the order of (i,j) realizes n - m + i - j = 0; for SecondType
/// (i,j) is stored lexicographically (the defining equations are symmetric).
struct ResonantPair {
    LocusKind kind;
    Site n, m;
    Site i, j;
    friend auto operator<=>(const ResonantPair&, const ResonantPair&) = default;
};

/// Locus of resonant partners for a tangential pair: a line (first type,
/// perpendicular to i-j) or the Thales circle over the diameter ij (second
/// type).  Exposes exact integer/rational data only.
struct ResonanceLocus {
    LocusKind kind;
    Site i, j;
    std::optional<Line> line;      // FirstType: a n1 + b n2 = c
    std::optional<Circle> circle;  // SecondType: center sum/2, r^2 = d2/4

    Site partner(const Site& n) const {
        return kind == LocusKind::FirstType ? n + i - j : i + j - n;
    }
    bool contains(const Site& n) const {
        return kind == LocusKind::FirstType ? line->contains(n) : circle->contains(n);
    }
    mpq_class center_x() const { return canonical(mpq_class(circle->sum.x, 2)); }
    mpq_class center_y() const { return canonical(mpq_class(circle->sum.y, 2)); }
    mpq_class radius2() const { return canonical(mpq_class(circle->d2, 4)); }

private:
    static mpq_class canonical(mpq_class q) {
        q.canonicalize();
        return q;
    }
};

/// True iff one of the three points sees the other two at a right angle
/// (equivalently: the three are vertices of a rectangle).
inline bool right_angle_triple(const Site& a, const Site& b, const Site& c) {
    if (a == b || b == c || a == c)
        throw std::invalid_argument("lattice_resonance: right_angle_triple needs distinct points");
    return dot(a - b, c - b) == 0 || dot(b - a, c - a) == 0 || dot(a - c, b - c) == 0;
}

/// Locus of sites n resonant with the pair (i,j).  FirstType substitutes
/// m = n + i - j into |n|^2 - |m|^2 + |i|^2 - |j|^2 = 0, giving the line
/// -2<n, i-j> = |i-j|^2 - |i|^2 + |j|^2; SecondType substitutes m = i + j - n
/// into |n|^2 + |m|^2 = |i|^2 + |j|^2, giving the Thales circle on ij.
inline ResonanceLocus resonance_locus(const Site& i, const Site& j, LocusKind kind) {
    if (i == j)
        throw std::invalid_argument("lattice_resonance: resonance_locus needs i != j");
    ResonanceLocus loc{kind, i, j, std::nullopt, std::nullopt};
    const Site d = i - j;
    if (kind == LocusKind::FirstType) {
        loc.line.emplace(mpz_class(-2 * d.x), mpz_class(-2 * d.y),
                         mpz_class(d.norm2() - i.norm2() + j.norm2()));
    } else {
        loc.circle = Circle{i + j, d.norm2()};
    }
    return loc;
}

namespace detail {

/// All first/second-type triplets at n (n outside S), exactly as defined:
/// first type checks every ordered pair, second type every unordered pair.
inline std::pair<std::set<Triplet>, std::set<Triplet>>
triplets_at(const Site& n, const std::vector<Site>& S) {
    std::set<Triplet> t1, t2;
    auto in_S = [&](const Site& s) {
        return std::find(S.begin(), S.end(), s) != S.end();
    };
    for (const Site& i : S)
        for (const Site& j : S) {
            if (i == j) continue;
            const Site m = n + i - j;
            if (!in_S(m) && n.norm2() - m.norm2() + i.norm2() - j.norm2() == 0)
                t1.emplace(LocusKind::FirstType, i, j, m);
        }
    for (std::size_t p = 0; p < S.size(); ++p)
        for (std::size_t q = p + 1; q < S.size(); ++q) {
            const Site i = S[p], j = S[q];
            const Site m = i + j - n;
            if (!in_S(m) && n.norm2() + m.norm2() - i.norm2() - j.norm2() == 0)
                t2.emplace(LocusKind::SecondType, i, j, m);
        }
    return {std::move(t1), std::move(t2)};
}

}  // namespace detail

/// Error carrying every triplet found when a site admits more than one
/// (only possible over a non-admissible tangential set).
class MultipleTripletsError : public std::runtime_error {
public:
    std::vector<Triplet> triplets;
    explicit MultipleTripletsError(std::vector<Triplet> t)
        : std::runtime_error("lattice_resonance: site admits " +
                             std::to_string(t.size()) + " resonance triplets"),
          triplets(std::move(t)) {}
};

/// The unique resonant pair containing n, or nullopt when n is non-resonant.
/// Throws MultipleTripletsError when several triplets exist.
inline std::optional<ResonantPair>
classify_site(const Site& n, const std::vector<Site>& S) {
    if (std::find(S.begin(), S.end(), n) != S.end())
        throw std::invalid_argument("lattice_resonance: classify_site needs n outside S");
    auto [t1, t2] = detail::triplets_at(n, S);
    const std::size_t total = t1.size() + t2.size();
    if (total == 0) return std::nullopt;
    if (total > 1) {
        std::vector<Triplet> all(t1.begin(), t1.end());
        all.insert(all.end(), t2.begin(), t2.end());
        throw MultipleTripletsError(std::move(all));
    }
    if (!t1.empty()) {
        const Triplet& t = *t1.begin();
        // recover the equation order: m = n + i - j
        Site i = t.i, j = t.j;
        if (n + i - j != t.m) std::swap(i, j);
        return ResonantPair{LocusKind::FirstType, n, t.m, i, j};
    }
    const Triplet& t = *t2.begin();
    return ResonantPair{LocusKind::SecondType, n, t.m, t.i, t.j};
}

struct AdmissibilityWitness {
    int condition = 0;                // 1..4
    std::optional<Site> n;            // violating site (conditions 2-4)
    std::vector<Site> sites;          // right-angle triple (condition 1)
    std::vector<Triplet> triplets;    // the clashing triplets (conditions 2-4)
    std::string note;
};

struct AdmissibilityReport {
    enum class Verdict { Admissible, Violation };
    Verdict verdict = Verdict::Admissible;
    std::optional<AdmissibilityWitness> witness;
    std::int64_t search_bound_used = 0;

    bool admissible() const { return verdict == Verdict::Admissible; }
};

namespace detail {

inline void validate_tangential_set(const std::vector<Site>& S) {
    if (S.size() < 2)
        throw std::invalid_argument("lattice_resonance: tangential set needs b >= 2");
    std::set<Site> uniq(S.begin(), S.end());
    if (uniq.size() != S.size())
        throw std::invalid_argument("lattice_resonance: tangential sites must be distinct");
}

/// Brute-force admissibility scan over |n| <= bound, counting triplets site by
/// site.  Conditions are checked in the order 1,2,3,4; among violating sites
/// of the winning condition the smallest (|n|^2, lex) witness is reported.
inline AdmissibilityReport
brute_force_admissible(const std::vector<Site>& S, std::int64_t bound) {
    validate_tangential_set(S);
    AdmissibilityReport rep;
    rep.search_bound_used = bound;
    for (std::size_t a = 0; a < S.size(); ++a)
        for (std::size_t b = a + 1; b < S.size(); ++b)
            for (std::size_t c = b + 1; c < S.size(); ++c)
                if (right_angle_triple(S[a], S[b], S[c])) {
                    rep.verdict = AdmissibilityReport::Verdict::Violation;
                    rep.witness = AdmissibilityWitness{1, std::nullopt,
                                                       {S[a], S[b], S[c]}, {}, ""};
                    return rep;
                }
    auto in_S = [&](const Site& s) {
        return std::find(S.begin(), S.end(), s) != S.end();
    };
    std::optional<AdmissibilityWitness> best;
    auto better = [](const AdmissibilityWitness& w, const AdmissibilityWitness& b) {
        if (w.condition != b.condition) return w.condition < b.condition;
        if (w.n->norm2() != b.n->norm2()) return w.n->norm2() < b.n->norm2();
        return *w.n < *b.n;
    };
    for (std::int64_t x = -bound; x <= bound; ++x)
        for (std::int64_t y = -bound; y <= bound; ++y) {
            const Site n{x, y};
            if (n.norm2() > bound * bound || in_S(n)) continue;
            auto [t1, t2] = triplets_at(n, S);
            AdmissibilityWitness w;
            if (t1.size() >= 2) {
                w = {2, n, {}, {t1.begin(), t1.end()}, ""};
            } else if (t2.size() >= 2) {
                w = {3, n, {}, {t2.begin(), t2.end()}, ""};
            } else if (!t1.empty() && !t2.empty()) {
                std::vector<Triplet> all(t1.begin(), t1.end());
                all.insert(all.end(), t2.begin(), t2.end());
                w = {4, n, {}, std::move(all), ""};
            } else {
                continue;
            }
            if (!best || better(w, *best)) best = std::move(w);
        }
    if (best) {
        rep.verdict = AdmissibilityReport::Verdict::Violation;
        rep.witness = std::move(best);
    }
    return rep;
}

struct LineLocus {
    Line line;
    Site i, j;  // ordered: partner m = n + i - j
};
struct CircleLocus {
    Circle circle;
    Site i, j;  // unordered
};

/// Exact admissibility decision over all of Z^2 by finitely many line/circle
/// intersections.  Reports the smallest violated condition; among its integer
/// witnesses the smallest (|n|^2, lex) one found.
inline AdmissibilityReport exact_admissible(const std::vector<Site>& S) {
    validate_tangential_set(S);
    AdmissibilityReport rep;
    for (std::size_t a = 0; a < S.size(); ++a)
        for (std::size_t b = a + 1; b < S.size(); ++b)
            for (std::size_t c = b + 1; c < S.size(); ++c)
                if (right_angle_triple(S[a], S[b], S[c])) {
                    rep.verdict = AdmissibilityReport::Verdict::Violation;
                    rep.witness = AdmissibilityWitness{1, std::nullopt,
                                                       {S[a], S[b], S[c]}, {}, ""};
                    return rep;
                }
    auto in_S = [&](const Site& s) {
        return std::find(S.begin(), S.end(), s) != S.end();
    };

    std::vector<LineLocus> lines;
    for (const Site& i : S)
        for (const Site& j : S)
            if (!(i == j)) {
                auto loc = resonance_locus(i, j, LocusKind::FirstType);
                lines.push_back({*loc.line, i, j});
            }
    std::vector<CircleLocus> circles;
    for (std::size_t p = 0; p < S.size(); ++p)
        for (std::size_t q = p + 1; q < S.size(); ++q) {
            auto loc = resonance_locus(S[p], S[q], LocusKind::SecondType);
            circles.push_back({*loc.circle, S[p], S[q]});
        }

    auto same_pair = [](const Site& i1, const Site& j1, const Site& i2, const Site& j2) {
        return (i1 == i2 && j1 == j2) || (i1 == j2 && j1 == i2);
    };

    std::optional<AdmissibilityWitness> best;
    auto offer = [&](AdmissibilityWitness w) {
        if (!best || w.condition < best->condition ||
            (w.condition == best->condition &&
             (w.n->norm2() < best->n->norm2() ||
              (w.n->norm2() == best->n->norm2() && *w.n < *best->n))))
            best = std::move(w);
    };
    // candidate n must avoid S, and both partners must avoid S
    auto try_first_pair = [&](const Site& n, const LineLocus& P, const LineLocus& Q,
                              const std::string& note) {
        const Site m1 = n + P.i - P.j, m2 = n + Q.i - Q.j;
        if (in_S(n) || in_S(m1) || in_S(m2)) return false;
        offer({2, n, {},
               {Triplet(LocusKind::FirstType, P.i, P.j, m1),
                Triplet(LocusKind::FirstType, Q.i, Q.j, m2)},
               note});
        return true;
    };

    // condition 2: two distinct first-type triplets at one site
    for (std::size_t p = 0; p < lines.size(); ++p)
        for (std::size_t q = p + 1; q < lines.size(); ++q) {
            const auto& P = lines[p];
            const auto& Q = lines[q];
            if (same_pair(P.i, P.j, Q.i, Q.j)) continue;  // swapped lines are parallel
            if (lines_coincident(P.line, Q.line)) {
                // infinitely many integer witnesses once one exists
                if (auto p0 = line_integer_point(P.line)) {
                    const Site dir = line_direction(P.line);
                    for (std::int64_t t = 0;
                         t <= 4 * static_cast<std::int64_t>(S.size()) + 4; ++t) {
                        for (std::int64_t sgn : {1, -1}) {
                            const Site n = *p0 + dir * (sgn * t);
                            if (try_first_pair(n, P, Q, "coincident first-type loci"))
                                goto next_line_pair;
                            if (t == 0) break;
                        }
                    }
                }
            } else if (!lines_parallel(P.line, Q.line)) {
                if (auto n = line_line_integer_point(P.line, Q.line))
                    try_first_pair(*n, P, Q, "");
            }
        next_line_pair:;
        }

    // condition 3: two distinct second-type triplets at one site
    for (std::size_t p = 0; p < circles.size(); ++p)
        for (std::size_t q = p + 1; q < circles.size(); ++q) {
            const auto& P = circles[p];
            const auto& Q = circles[q];
            const bool coincident = P.circle == Q.circle;
            for (const Site& n : circle_circle_integer_points(P.circle, Q.circle)) {
                const Site m1 = P.circle.sum - n, m2 = Q.circle.sum - n;
                if (in_S(n) || in_S(m1) || in_S(m2)) continue;
                offer({3, n, {},
                       {Triplet(LocusKind::SecondType, P.i, P.j, m1),
                        Triplet(LocusKind::SecondType, Q.i, Q.j, m2)},
                       coincident ? "coincident second-type loci" : ""});
                break;
            }
        }

    // condition 4: one first-type and one second-type triplet at one site
    for (const auto& P : lines)
        for (const auto& Q : circles)
            for (const Site& n : line_circle_integer_points(P.line, Q.circle)) {
                const Site m1 = n + P.i - P.j, m2 = Q.circle.sum - n;
                if (in_S(n) || in_S(m1) || in_S(m2)) continue;
                offer({4, n, {},
                       {Triplet(LocusKind::FirstType, P.i, P.j, m1),
                        Triplet(LocusKind::SecondType, Q.i, Q.j, m2)},
                       ""});
                break;
            }

    if (best) {
        rep.verdict = AdmissibilityReport::Verdict::Violation;
        rep.witness = std::move(best);
    }
    return rep;
}

}  // namespace detail

/// Decide admissibility of S exactly (all four conditions, over all of Z^2)
/// and cross-check with a brute-force scan over |n| <= check_bound.  A
/// brute-force violation that the exact decision missed is a logic error; the
/// converse (exact witness beyond the scan bound) keeps the exact verdict.
inline AdmissibilityReport
verify_admissible(const std::vector<Site>& S, std::int64_t check_bound) {
    for (const Site& s : S)
        if (s.norm2() > check_bound * check_bound)
            throw std::invalid_argument(
                "lattice_resonance: check_bound must cover every site");
    AdmissibilityReport exact = detail::exact_admissible(S);
    AdmissibilityReport brute = detail::brute_force_admissible(S, check_bound);
    exact.search_bound_used = check_bound;
    if (brute.verdict == AdmissibilityReport::Verdict::Violation) {
        if (exact.admissible())
            throw std::logic_error(
                "lattice_resonance: brute-force witness missed by exact checker at " +
                (brute.witness->n ? to_string(*brute.witness->n) : std::string("cond 1")));
        if (brute.witness->condition < exact.witness->condition)
            throw std::logic_error(
                "lattice_resonance: brute-force found a smaller condition index than exact");
    }
    return exact;
}

class SearchExhaustedError : public std::runtime_error {
public:
    int attempts = 0;
    explicit SearchExhaustedError(int n)
        : std::runtime_error("lattice_resonance: admissible-set search exhausted after " +
                             std::to_string(n) + " attempts"),
          attempts(n) {}
};

/// Deterministic random search for an admissible b-set with coordinates in
/// [-site_bound, site_bound].  Throws SearchExhaustedError after max_attempts
/// candidate sets.
inline std::vector<Site>
search_admissible(int b, std::int64_t site_bound, std::uint64_t seed,
                  int max_attempts = 5000, std::int64_t check_bound = 60) {
    if (b < 2)
        throw std::invalid_argument("lattice_resonance: search_admissible needs b >= 2");
    if (site_bound < 1)
        throw std::invalid_argument("lattice_resonance: search_admissible needs site_bound >= 1");
    const std::int64_t box = 2 * site_bound + 1;
    if (box * box < b) throw SearchExhaustedError(0);
    check_bound = std::max(check_bound, 2 * site_bound);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int64_t> coord(-site_bound, site_bound);
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
        std::set<Site> picked;
        while (static_cast<int>(picked.size()) < b)
            picked.insert(Site{coord(rng), coord(rng)});
        std::vector<Site> S(picked.begin(), picked.end());
        if (verify_admissible(S, check_bound).admissible()) return S;
    }
    throw SearchExhaustedError(max_attempts);
}

/// Equivalence class of the relation generated by |a|^2 = |b|^2, |a-b| <= Δ.
struct Block {
    std::int64_t norm_sq = 0;
    std::vector<Site> members;  // sorted
};

/// Partition of the given sites into blocks: transitive closure of the
/// pre-relation (equal squared norm, Euclidean distance at most delta).
inline std::vector<Block>
block_partition(const std::vector<Site>& sites, std::int64_t delta) {
    if (delta < 0)
        throw std::invalid_argument("lattice_resonance: block_partition needs delta >= 0");
    std::vector<std::size_t> parent(sites.size());
    for (std::size_t k = 0; k < parent.size(); ++k) parent[k] = k;
    std::function<std::size_t(std::size_t)> find = [&](std::size_t v) {
        while (parent[v] != v) v = parent[v] = parent[parent[v]];
        return v;
    };
    std::map<std::int64_t, std::vector<std::size_t>> by_norm;
    for (std::size_t k = 0; k < sites.size(); ++k)
        by_norm[sites[k].norm2()].push_back(k);
    for (const auto& [norm, idx] : by_norm)
        for (std::size_t a = 0; a < idx.size(); ++a)
            for (std::size_t b = a + 1; b < idx.size(); ++b)
                if ((sites[idx[a]] - sites[idx[b]]).norm2() <= delta * delta)
                    parent[find(idx[a])] = find(idx[b]);
    std::map<std::size_t, Block> blocks;
    for (std::size_t k = 0; k < sites.size(); ++k) {
        Block& blk = blocks[find(k)];
        blk.norm_sq = sites[k].norm2();
        blk.members.push_back(sites[k]);
    }
    std::vector<Block> out;
    for (auto& [root, blk] : blocks) {
        std::sort(blk.members.begin(), blk.members.end());
        out.push_back(std::move(blk));
    }
    std::sort(out.begin(), out.end(), [](const Block& a, const Block& b) {
        return a.norm_sq != b.norm_sq ? a.norm_sq < b.norm_sq
                                      : a.members.front() < b.members.front();
    });
    return out;
}

struct ClusterReport {
    std::int64_t delta = 0, scan_bound = 0;
    std::int64_t near_threshold_sq = 0;      // floor(delta^{2/3}), exact
    int small_max_count = 0;                 // max r2(N) over 0 < N <= delta^2
    std::int64_t small_max_norm2 = 0;
    double small_reference_bound = 0;        // exp(log(delta)/loglog(delta))
    int large_max_count = 1;                 // cluster size within delta^{1/3}, |a| > delta
    std::vector<Site> pair_example;          // {a, b} attaining 2, if any
    std::vector<std::array<Site, 3>> counterexamples;  // 3-clusters (should be empty)
};

/// Equal-norm cluster cardinalities: for |a| <= delta the circle count r2, and
/// for delta < |a| <= scan_bound the number of equal-norm sites within
/// distance delta^{1/3}.  The large-|a| part is exhaustive over ALL such a:
/// a 3-cluster requires two distinct offsets d1, d2 with <a,d_i> = -|d_i|^2/2,
/// finitely many offset pairs each pinning a to one rational point (or one
/// line), all of which are enumerated exactly.
inline ClusterReport cluster_cardinalities(std::int64_t delta, std::int64_t scan_bound) {
    if (scan_bound <= delta)
        throw std::invalid_argument("lattice_resonance: cluster scan needs scan_bound > delta");
    ClusterReport rep;
    rep.delta = delta;
    rep.scan_bound = scan_bound;
    // exact floor((delta^2)^{1/3})
    std::int64_t t = static_cast<std::int64_t>(std::cbrt(static_cast<double>(delta) * delta));
    while (t > 0 && t * t * t > delta * delta) --t;
    while ((t + 1) * (t + 1) * (t + 1) <= delta * delta) ++t;
    rep.near_threshold_sq = t;
    if (delta > 1)
        rep.small_reference_bound =
            std::exp(std::log(static_cast<double>(delta)) /
                     std::log(std::log(static_cast<double>(delta))));

    for (std::int64_t N = 1; N <= delta * delta; ++N) {
        const int c = static_cast<int>(circle_sites(N).size());
        if (c > rep.small_max_count) {
            rep.small_max_count = c;
            rep.small_max_norm2 = N;
        }
    }

    // offsets with even |d|^2 <= floor(delta^{2/3}) (odd |d|^2 admits no solution)
    std::vector<Site> offs;
    const std::int64_t r = isqrt(rep.near_threshold_sq);
    for (std::int64_t x = -r; x <= r; ++x)
        for (std::int64_t y = -r; y <= r; ++y) {
            const Site d{x, y};
            if (d.norm2() > 0 && d.norm2() <= rep.near_threshold_sq && d.norm2() % 2 == 0)
                offs.push_back(d);
        }

    auto in_range = [&](const Site& a) {
        return a.norm2() > delta * delta && a.norm2() <= scan_bound * scan_bound;
    };
    // a single offset suffices for a pair (cluster of 2)
    for (const Site& d : offs) {
        if (!rep.pair_example.empty()) break;
        // <a,d> = -|d|^2/2: integer points a on this line, pushed beyond delta
        Line L(d.x, d.y, -d.norm2() / 2);
        if (auto p0 = line_integer_point(L)) {
            const Site dir = line_direction(L);
            for (std::int64_t k = 0; k <= 2 * (delta + 2); ++k)
                for (std::int64_t sgn : {1, -1}) {
                    const Site a = *p0 + dir * (sgn * k);
                    if (in_range(a) && in_range(a + d)) {
                        rep.pair_example = {a, a + d};
                        rep.large_max_count = 2;
                        goto pair_found;
                    }
                    if (k == 0) break;
                }
        }
    pair_found:;
    }
    // two distinct offsets pin a to a point (or a full line when coincident)
    for (std::size_t p = 0; p < offs.size(); ++p)
        for (std::size_t q = p + 1; q < offs.size(); ++q) {
            const Site d1 = offs[p], d2 = offs[q];
            Line L1(d1.x, d1.y, -d1.norm2() / 2);
            Line L2(d2.x, d2.y, -d2.norm2() / 2);
            if (lines_coincident(L1, L2)) {
                if (auto p0 = line_integer_point(L1)) {
                    const Site dir = line_direction(L1);
                    for (std::int64_t k = 0; k <= 2 * (delta + 2); ++k)
                        for (std::int64_t sgn : {1, -1}) {
                            const Site a = *p0 + dir * (sgn * k);
                            if (in_range(a)) {
                                rep.counterexamples.push_back({a, a + d1, a + d2});
                                goto next_pair;
                            }
                            if (k == 0) break;
                        }
                }
            } else if (!lines_parallel(L1, L2)) {
                if (auto a = line_line_integer_point(L1, L2))
                    if (in_range(*a))
                        rep.counterexamples.push_back({*a, *a + d1, *a + d2});
            }
        next_pair:;
        }
    if (!rep.counterexamples.empty()) rep.large_max_count = 3;
    return rep;
}

/// Decomposition n = n0 + t c, n' = n0' + t c with small base points, used to
/// track divisors along lattice lines.
struct LineDecomposition {
    Site n0, n0_prime, c;
    std::int64_t t = 0;
};
struct LargeDivisor {};

/// If |<n-n', n'>| > K^2 the divisor is uniformly large (LargeDivisor);
/// otherwise returns the decomposition with |n0|, |n0'|, |c| <= 3K^2.
inline std::variant<LargeDivisor, LineDecomposition>
line_decomposition(const Site& n, const Site& n_prime, std::int64_t K) {
    if (K < 1)
        throw std::invalid_argument("lattice_resonance: line_decomposition needs K >= 1");
    const Site d = n - n_prime;
    if (d.norm2() > K * K)
        throw std::invalid_argument("lattice_resonance: line_decomposition needs |n-n'| <= K");
    if (d == Site{0, 0})
        return LineDecomposition{n, n_prime, Site{1, 0}, 0};
    if (std::abs(dot(d, n_prime)) > K * K) return LargeDivisor{};
    const Site c = d.perp();  // (-d.y, d.x), |c| = |d|
    // n' = x1 c + x2 d in the orthogonal basis {c, d}; t = floor(x1)
    const std::int64_t num = dot(n_prime, c), den = c.norm2();
    std::int64_t t = num / den;
    if (num % den != 0 && (num < 0) != (den < 0)) --t;  // mathematical floor
    LineDecomposition out{n - c * t, n_prime - c * t, c, t};
    const std::int64_t bound = 9 * K * K * K * K;
    if (out.n0.norm2() > bound || out.n0_prime.norm2() > bound || c.norm2() > bound)
        throw std::logic_error("lattice_resonance: line_decomposition bound violated");
    return out;
}

}  // namespace kam

#endif  // KAMTORUS_LATTICE_RESONANCE_HPP

#pragma once

#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>

#include "kamtorus/site.hpp"

namespace kam {

// A series monomial is  e^{i<k,theta>} * I^l * w^alpha * wbar^beta  where
// theta/I carry at most kMaxB angle-action slots and alpha/beta are sparse
// exponent maps over lattice modes with at most kMaxModeSlots distinct modes.
inline constexpr int kMaxB = 4;
inline constexpr int kMaxModeSlots = 8;

// One (mode, exponent) entry of a sparse exponent map.  Unused slots are kept
// value-initialized so whole-object comparison and hashing stay canonical.
struct ModePow {
  int16_t x = 0;
  int16_t y = 0;
  int16_t pow = 0;

  Site site() const { return Site{x, y}; }
  auto operator<=>(const ModePow&) const = default;
  bool operator==(const ModePow&) const = default;
};

inline ModePow make_mode_pow(const Site& n, int pow) {
  constexpr int64_t lo = std::numeric_limits<int16_t>::min();
  constexpr int64_t hi = std::numeric_limits<int16_t>::max();
  if (n.x < lo || n.x > hi || n.y < lo || n.y > hi) {
    throw std::overflow_error("make_mode_pow: mode coordinates exceed int16 range");
  }
  if (pow < 1 || pow > hi) {
    throw std::invalid_argument("make_mode_pow: exponent must be a small positive integer");
  }
  return ModePow{static_cast<int16_t>(n.x), static_cast<int16_t>(n.y),
                 static_cast<int16_t>(pow)};
}

struct MultiIndex {
  std::array<int16_t, kMaxB> k{};
  std::array<int16_t, kMaxB> l{};
  int16_t na = 0;  // used alpha slots
  int16_t nb = 0;  // used beta slots
  std::array<ModePow, kMaxModeSlots> alpha{};
  std::array<ModePow, kMaxModeSlots> beta{};

  auto operator<=>(const MultiIndex&) const = default;
  bool operator==(const MultiIndex&) const = default;

  bool is_constant() const {
    return k1() == 0 && l1() == 0 && na == 0 && nb == 0;
  }

  int k1() const {
    int s = 0;
    for (int16_t v : k) s += std::abs(static_cast<int>(v));
    return s;
  }
  int kinf() const {
    int s = 0;
    for (int16_t v : k) s = std::max(s, std::abs(static_cast<int>(v)));
    return s;
  }
  int l1() const {
    int s = 0;
    for (int16_t v : l) s += static_cast<int>(v);
    return s;
  }
  int alpha_degree() const {
    int s = 0;
    for (int i = 0; i < na; ++i) s += alpha[i].pow;
    return s;
  }
  int beta_degree() const {
    int s = 0;
    for (int i = 0; i < nb; ++i) s += beta[i].pow;
    return s;
  }
  int z_degree() const { return alpha_degree() + beta_degree(); }

  // sum over modes of |n| * (alpha_n + beta_n) with Euclidean |n|; the
  // exponential mode weight in the majorant norm.
  double mode_weight() const {
    double s = 0.0;
    for (int i = 0; i < na; ++i) {
      s += std::sqrt(static_cast<double>(alpha[i].site().norm2())) * alpha[i].pow;
    }
    for (int i = 0; i < nb; ++i) {
      s += std::sqrt(static_cast<double>(beta[i].site().norm2())) * beta[i].pow;
    }
    return s;
  }

  int alpha_pow(const Site& n) const {
    for (int i = 0; i < na; ++i) {
      if (alpha[i].site() == n) return alpha[i].pow;
    }
    return 0;
  }
  int beta_pow(const Site& n) const {
    for (int i = 0; i < nb; ++i) {
      if (beta[i].site() == n) return beta[i].pow;
    }
    return 0;
  }

  // Fluent builders for tests and fixture construction.
  MultiIndex with_k(int slot, int v) const {
    MultiIndex m = *this;
    m.k[check_slot(slot)] = checked_int16(v, "with_k");
    return m;
  }
  MultiIndex with_l(int slot, int v) const {
    if (v < 0) throw std::invalid_argument("with_l: negative action exponent");
    MultiIndex m = *this;
    m.l[check_slot(slot)] = checked_int16(v, "with_l");
    return m;
  }
  MultiIndex with_alpha(const Site& n, int pow) const {
    MultiIndex m = *this;
    if (!m.add_alpha(n, pow)) {
      throw std::overflow_error("with_alpha: too many distinct modes in one monomial");
    }
    return m;
  }
  MultiIndex with_beta(const Site& n, int pow) const {
    MultiIndex m = *this;
    if (!m.add_beta(n, pow)) {
      throw std::overflow_error("with_beta: too many distinct modes in one monomial");
    }
    return m;
  }

  // Adds `pow` to the alpha exponent of mode n, keeping slots sorted by mode.
  // Returns false on slot overflow; pow may be negative (exponent decrement).
  bool add_alpha(const Site& n, int pow) { return add_entry(alpha, na, n, pow); }
  bool add_beta(const Site& n, int pow) { return add_entry(beta, nb, n, pow); }

 private:
  static int check_slot(int slot) {
    if (slot < 0 || slot >= kMaxB) {
      throw std::out_of_range("MultiIndex: angle/action slot out of range");
    }
    return slot;
  }
  static int16_t checked_int16(int v, const char* who) {
    if (v < std::numeric_limits<int16_t>::min() || v > std::numeric_limits<int16_t>::max()) {
      throw std::overflow_error(std::string(who) + ": exponent exceeds int16 range");
    }
    return static_cast<int16_t>(v);
  }

  static bool add_entry(std::array<ModePow, kMaxModeSlots>& arr, int16_t& count,
                        const Site& n, int pow) {
    if (pow == 0) return true;
    ModePow key = make_mode_pow(n, std::abs(pow));
    key.pow = 0;  // comparison key only
    int pos = 0;
    while (pos < count && std::pair(arr[pos].x, arr[pos].y) < std::pair(key.x, key.y)) {
      ++pos;
    }
    if (pos < count && arr[pos].x == key.x && arr[pos].y == key.y) {
      int updated = arr[pos].pow + pow;
      if (updated < 0) {
        throw std::invalid_argument("MultiIndex: exponent decrement below zero");
      }
      if (updated == 0) {
        for (int i = pos; i + 1 < count; ++i) arr[i] = arr[i + 1];
        arr[count - 1] = ModePow{};
        --count;
      } else {
        arr[pos].pow = checked_int16(updated, "add_entry");
      }
      return true;
    }
    if (pow < 0) {
      throw std::invalid_argument("MultiIndex: exponent decrement of absent mode");
    }
    if (count == kMaxModeSlots) return false;
    for (int i = count; i > pos; --i) arr[i] = arr[i - 1];
    arr[pos] = make_mode_pow(n, pow);
    ++count;
    return true;
  }
};

static_assert(std::has_unique_object_representations_v<MultiIndex>,
              "MultiIndex must be padding-free for byte hashing");

struct MultiIndexHash {
  size_t operator()(const MultiIndex& m) const {
    // FNV-1a over the object bytes; canonical zero-initialized unused slots
    // plus the padding-free layout make this well-defined.
    const unsigned char* p = reinterpret_cast<const unsigned char*>(&m);
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < sizeof(MultiIndex); ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
    return static_cast<size_t>(h);
  }
};

// Product of two monomial indices; nullopt when the merged exponent maps need
// more than kMaxModeSlots distinct modes (caller decides how to account).
inline std::optional<MultiIndex> mul_index(const MultiIndex& a, const MultiIndex& b) {
  MultiIndex out;
  for (int j = 0; j < kMaxB; ++j) {
    int kk = a.k[j] + b.k[j];
    int ll = a.l[j] + b.l[j];
    if (kk < std::numeric_limits<int16_t>::min() || kk > std::numeric_limits<int16_t>::max() ||
        ll > std::numeric_limits<int16_t>::max()) {
      throw std::overflow_error("mul_index: exponent exceeds int16 range");
    }
    out.k[j] = static_cast<int16_t>(kk);
    out.l[j] = static_cast<int16_t>(ll);
  }
  auto merge = [](const std::array<ModePow, kMaxModeSlots>& x, int16_t nx,
                  const std::array<ModePow, kMaxModeSlots>& y, int16_t ny,
                  std::array<ModePow, kMaxModeSlots>& dst, int16_t& nd) -> bool {
    int i = 0, j = 0, d = 0;
    while (i < nx || j < ny) {
      if (d == kMaxModeSlots) return false;
      if (j == ny || (i < nx && std::pair(x[i].x, x[i].y) < std::pair(y[j].x, y[j].y))) {
        dst[d++] = x[i++];
      } else if (i == nx || std::pair(y[j].x, y[j].y) < std::pair(x[i].x, x[i].y)) {
        dst[d++] = y[j++];
      } else {
        int pw = x[i].pow + y[j].pow;
        if (pw > std::numeric_limits<int16_t>::max()) {
          throw std::overflow_error("mul_index: mode exponent exceeds int16 range");
        }
        dst[d] = x[i];
        dst[d].pow = static_cast<int16_t>(pw);
        ++d, ++i, ++j;
      }
    }
    nd = static_cast<int16_t>(d);
    return true;
  };
  if (!merge(a.alpha, a.na, b.alpha, b.na, out.alpha, out.na)) return std::nullopt;
  if (!merge(a.beta, a.nb, b.beta, b.nb, out.beta, out.nb)) return std::nullopt;
  return out;
}

}  // namespace kam

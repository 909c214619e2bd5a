// Attention visibility for context sequences of 2K tokens laid out as
// (x_1|a_1), y_1, (x_2|a_2), y_2, ...
//
// Three rules stack on top of each other:
//   causal          query i sees keys j <= i
//   pair exclusion  y_k does not see its own (x_k|a_k) token
//   random drop     each query row independently hides every complete
//                   preceding pair with probability p (both tokens at once)
#pragma once

#include <cstdint>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctxssl/error.hpp"
#include "ctxssl/rng.hpp"

namespace ctxssl {

struct MaskConfig {
  double p = 0.9;
  bool enable_pair_exclusion = true;
  bool enable_random_drop = true;
  /// Independent drop draws per query row. When false a single draw per pair
  /// is shared by every row after it.
  bool per_row_draws = true;

  void validate() const {
    require(p >= 0.0 && p <= 1.0, ErrorKind::Config, "mask p must lie in [0,1]");
  }
};

/// Row = query token, column = key token.
class MaskMatrix {
 public:
  MaskMatrix() = default;
  explicit MaskMatrix(int n) : n_(n), v_(static_cast<std::size_t>(n) * n, 0) {}

  int size() const { return n_; }

  bool visible(int row, int col) const { return v_[idx(row, col)] != 0; }
  void set(int row, int col, bool vis) { v_[idx(row, col)] = vis ? 1 : 0; }

  std::size_t visible_count() const {
    std::size_t c = 0;
    for (auto b : v_) c += b;
    return c;
  }

  friend bool operator==(const MaskMatrix&, const MaskMatrix&) = default;

  /// '#' = visible, '.' = hidden; one line per query row.
  std::string ascii() const {
    std::string s;
    for (int i = 0; i < n_; ++i) {
      for (int j = 0; j < n_; ++j) s.push_back(visible(i, j) ? '#' : '.');
      s.push_back('\n');
    }
    return s;
  }

  /// Plain PBM (P1); black pixels mark hidden entries.
  std::string pbm() const {
    std::ostringstream os;
    os << "P1\n" << n_ << ' ' << n_ << '\n';
    for (int i = 0; i < n_; ++i) {
      for (int j = 0; j < n_; ++j) os << (j ? " " : "") << (visible(i, j) ? '0' : '1');
      os << '\n';
    }
    return os.str();
  }

 private:
  std::size_t idx(int r, int c) const {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(n_) + static_cast<std::size_t>(c);
  }

  int n_ = 0;
  std::vector<std::uint8_t> v_;
};

inline MaskMatrix causal_mask(int n) {
  require(n >= 0, ErrorKind::Config, "mask size must be non-negative");
  MaskMatrix m(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

inline void check_pair_map(const MaskMatrix& mask, const std::vector<std::pair<int, int>>& pairs) {
  for (const auto& [a, y] : pairs)
    require(a >= 0 && y >= 0 && a < y && y < mask.size(), ErrorKind::Shape,
            "malformed pair map entry");
}

inline MaskMatrix pair_exclusion(MaskMatrix mask, const std::vector<std::pair<int, int>>& pairs) {
  check_pair_map(mask, pairs);
  for (const auto& [a, y] : pairs) mask.set(y, a, false);
  return mask;
}

/// Draw order: rows ascending, and within a row the complete preceding pairs
/// in ascending order; one uniform per (row, pair) even for p in {0, 1}, so
/// the stream consumption does not depend on p.
inline MaskMatrix random_pair_drop(MaskMatrix mask, const std::vector<std::pair<int, int>>& pairs,
                                   double p, Rng& rng, bool per_row_draws = true) {
  require(p >= 0.0 && p <= 1.0, ErrorKind::Config, "mask p must lie in [0,1]");
  check_pair_map(mask, pairs);
  std::vector<std::uint8_t> shared;
  if (!per_row_draws) {
    shared.reserve(pairs.size());
    for (std::size_t k = 0; k < pairs.size(); ++k) shared.push_back(rng.uniform() < p);
  }
  for (int i = 0; i < mask.size(); ++i) {
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const auto [a, y] = pairs[k];
      if (y >= i) continue;
      const bool drop = per_row_draws ? rng.uniform() < p : shared[k] != 0;
      if (drop) {
        mask.set(i, a, false);
        mask.set(i, y, false);
      }
    }
  }
  return mask;
}

inline std::vector<std::pair<int, int>> context_pairs(int K) {
  std::vector<std::pair<int, int>> m;
  for (int i = 0; i < K; ++i) m.emplace_back(2 * i, 2 * i + 1);
  return m;
}

inline MaskMatrix compose(const MaskConfig& cfg, int K, Rng& rng) {
  cfg.validate();
  require(K >= 0, ErrorKind::Config, "context size must be non-negative");
  const auto pairs = context_pairs(K);
  MaskMatrix m = causal_mask(2 * K);
  if (cfg.enable_pair_exclusion) m = pair_exclusion(std::move(m), pairs);
  if (cfg.enable_random_drop) m = random_pair_drop(std::move(m), pairs, cfg.p, rng, cfg.per_row_draws);
  return m;
}

}  // namespace ctxssl

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <string>

#include "polymlm/error.hpp"

namespace polymlm {

struct ComputeBudget {
  std::uint64_t batch_size = 0;
  std::uint64_t seq_len = 0;
  std::uint64_t updates = 0;
  std::uint64_t dataset_tokens = 0;  // optional; 0 when unknown

  void validate() const {
    if (batch_size == 0 || seq_len == 0 || updates == 0) {
      throw ConfigError("compute budget: batch size, sequence length and updates must be positive");
    }
  }
};

namespace detail {
inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
    throw ConfigError("compute budget: token count overflows 64 bits");
  }
  return a * b;
}
}  // namespace detail

/// batch_size x seq_len x updates, exact in integers.
inline std::uint64_t tokens_seen(const ComputeBudget& b) {
  b.validate();
  return detail::checked_mul(detail::checked_mul(b.batch_size, b.seq_len), b.updates);
}

inline std::uint64_t tokens_seen(std::uint64_t batch_size, std::uint64_t seq_len, std::uint64_t updates) {
  return tokens_seen(ComputeBudget{batch_size, seq_len, updates, 0});
}

/// Size ratio between two corpora given in tokens.
inline double dataset_ratio(double tokens_a, double tokens_b) {
  if (!(tokens_a > 0.0) || !(tokens_b > 0.0)) throw ConfigError("dataset sizes must be positive");
  return tokens_a / tokens_b;
}

/// Decimal digits with thousands separators, e.g. 524,288,000,000.
inline std::string group_thousands(std::uint64_t v) {
  std::string digits = std::to_string(v);
  std::string out;
  const std::size_t n = digits.size();
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(digits[i]);
    const std::size_t left = n - i - 1;
    if (left > 0 && left % 3 == 0) out.push_back(',');
  }
  return out;
}

}  // namespace polymlm

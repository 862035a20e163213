#pragma once

// Closed-form parameter and multiply-add counters for the network described
// by a ModelConfig, with a per-module breakdown.  Counting conventions:
// conv = k^2*Cin*Cout*Ho*Wo (per-channel for depth-wise), linear = T*in*out
// over T tokens, attention = 2*heads*Tq*Tk*d per window (the score product
// plus the value aggregation); normalization, softmax, activations and
// other elementwise work are excluded; the upsampling tail is included.

#include <cstdint>
#include <string>
#include <vector>

#include "hat/model.hpp"

namespace hat {

struct ComplexityRow {
  std::string name;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

struct ComplexityReport {
  std::vector<ComplexityRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  std::int64_t input_h = 0;
  std::int64_t input_w = 0;

  // Human-oriented aligned table with a totals row.
  std::string to_table() const;
  // Machine-oriented lines: name<TAB>params<TAB>macs.
  std::string to_records() const;
};

// Multiply-adds are counted at the given input size (after the same pad-to-
// window rule the forward pass applies).
ComplexityReport complexity_report(const ModelConfig& cfg, std::int64_t in_h,
                                   std::int64_t in_w);

std::int64_t count_params(const ModelConfig& cfg);
std::int64_t count_macs(const ModelConfig& cfg, std::int64_t in_h,
                        std::int64_t in_w);

}  // namespace hat

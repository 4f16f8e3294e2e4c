#pragma once

#include <optional>
#include <string>
#include <vector>

#include "covidfact/tensor.hpp"

namespace covidfact {

enum class Label { covid, cap, normal, unknown };

inline std::string to_string(Label l) {
  switch (l) {
    case Label::covid: return "COVID";
    case Label::cap: return "CAP";
    case Label::normal: return "Normal";
    default: return "Unknown";
  }
}

inline Label parse_label(const std::string& s) {
  if (s == "COVID") return Label::covid;
  if (s == "CAP") return Label::cap;
  if (s == "Normal") return Label::normal;
  if (s == "Unknown") return Label::unknown;
  throw DataError("unknown patient label '" + s + "'");
}

struct SliceRecord {
  Tensor pixels;                      // [H,W], values in [0,1]
  std::optional<Tensor> lung_mask;    // [H,W], 0/1
  std::optional<bool> infection_label;
  std::size_t source_index = 0;       // position in the original scan
};

struct Volume {
  std::string patient_id;
  std::vector<SliceRecord> slices;
  Label label = Label::unknown;
  std::size_t original_slice_count = 0;  // before lung-free slices were removed
};

}  // namespace covidfact

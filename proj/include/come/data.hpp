#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "come/autodiff.hpp"

namespace come {

// Label carried by rows drawn from classes unseen during training.
inline constexpr int kOutlierLabel = -1;

struct LabeledBatch {
  Tensor features;          // [B x d]
  std::vector<int> labels;  // class index, or kOutlierLabel
  std::string corruption;   // human-readable corruption tag, empty when clean
  std::size_t index = 0;    // position in its stream
  std::size_t segment = 0;  // lifelong segment; batches in one segment share a shift

  std::size_t size() const { return labels.size(); }
  bool is_outlier(std::size_t row) const { return labels[row] == kOutlierLabel; }
};

}  // namespace come

#pragma once

#include <cstddef>

#include "spot/tensor.hpp"

namespace spot {

// Output of the prediction heads for one decoder stage. Rows are queries
// (match queries first, then noised queries); heatmap columns follow the
// finest grid's active-voxel order.
template <class T>
struct LayerPrediction {
  Tensor<T> class_logits;   // (Nq + Nd) x Ncls, column 0 is the empty / no-object class
  Tensor<T> mask_heatmaps;  // (Nq + Nd) x Nv
};

}  // namespace spot

#pragma once

#include <string>
#include <vector>

#include "mmfusion/tensor.hpp"

namespace mmfusion {

// Named view of a trainable tensor owned by a module's parameter struct.
struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
};

using ParamList = std::vector<ParamRef>;

}  // namespace mmfusion

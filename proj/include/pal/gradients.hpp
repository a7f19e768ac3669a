#pragma once

#include <map>
#include <string>

#include "pal/matrix.hpp"

namespace pal {

// Named gradient store: parameter identifier -> gradient of the loss with
// respect to that parameter, same shape as the parameter.
using Gradients = std::map<std::string, Matrix>;

inline void accumulate(Gradients& grads, const std::string& name, const Matrix& g) {
  accumulate(grads[name], g);
}

inline void merge(Gradients& into, const Gradients& from) {
  for (const auto& [name, g] : from) accumulate(into, name, g);
}

}  // namespace pal

#pragma once

#include <cstdint>

#include "capsar/gradcheck.hpp"
#include "capsar/model.hpp"

namespace capsar {

// Finite-difference check of the full training objective (margin loss plus
// lambda times reconstruction loss, dropout active with a fixed mask) summed
// over two short sentences, in 64-bit precision, for every parameter of the
// toy configuration. The aspect vectors are frozen at the starting point.
// The relative-error floor is 1e-6: with |f| near 1 and eps 1e-5 the
// differencing noise is about 1e-11, which a 1e-8 floor would still turn into
// errors near 1e-3 on coordinates whose true gradient is ~1e-8.
inline constexpr double kToyGradFloor = 1e-6;
GradCheckReport toy_model_gradcheck(std::uint64_t seed = 7, double eps = 1e-5,
                                    const ModelConfig& config = ModelConfig::toy());

}  // namespace capsar

#pragma once

namespace vecroute {

// Global precision choice: 32-bit by default for training speed.
// Gradient checking always instantiates the 64-bit variants.
#ifdef VECROUTE_PRECISION64
using real = double;
#else
using real = float;
#endif

}  // namespace vecroute

#ifndef EMVQ_SYNTH_HPP
#define EMVQ_SYNTH_HPP

#include <cstdint>

#include "emvq/pixeldata.hpp"

namespace emvq {

// Band-limited noise plus randomly curved dark membranes; a self-contained
// stand-in for electron-microscopy texture. Deterministic per seed.
Frame synth_frame(int64_t size, uint64_t seed);

}  // namespace emvq

#endif

#ifndef EMVQ_PIXELDATA_HPP
#define EMVQ_PIXELDATA_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace emvq {

// Single-channel raster normalized to [-0.5, 0.5].
struct Frame {
    torch::Tensor values;  // (H, W) float32
    int64_t height = 0;
    int64_t width = 0;
    int source_bit_depth = 8;
};

Frame make_frame(torch::Tensor values, int source_bit_depth = 8);

// Reads an 8- or 16-bit grayscale PNG/TIFF. Multi-channel input is rejected
// unless allow_channel_collapse is set, in which case only inputs whose
// channels are all identical are accepted.
Frame load_grayscale(const std::string& path, bool allow_channel_collapse = false);

void save_grayscale_png(const Frame& frame, const std::string& path);

// [-0.5, 0.5] -> rounded pixel values at the given bit depth.
torch::Tensor to_pixel_values(const torch::Tensor& values, int bit_depth = 8);

struct TilePlan {
    int64_t tile_size = 0;
    int64_t stride = 0;
    std::vector<std::pair<int64_t, int64_t>> origins;  // (row, col), row-major
};

// Origins at multiples of stride; the last origin per axis is clamped so the
// tile ends exactly at the frame edge. Every pixel is covered at least once.
TilePlan plan_tiles(int64_t height, int64_t width, int64_t tile_size, int64_t stride);

struct BlendWindow {
    int64_t size = 0;
    double floor = 0.0;
    torch::Tensor axis_weights;  // (size,) float64
    torch::Tensor weights;       // (size, size) float64, outer product of axis weights
};

// Separable Hann window with an additive floor per axis:
//   w[n] = eps + 0.5 * (1 - cos(2*pi*n / (size-1)))
BlendWindow make_hann_window(int64_t size, double floor_eps = 1e-3);

// Weighted accumulation of tile predictions at their origins, normalized by
// the summed window weights. Accumulates in float64. Output is clamped to
// [-0.5, 0.5].
Frame overlap_add(const std::vector<std::pair<std::pair<int64_t, int64_t>, torch::Tensor>>& tile_predictions,
                  int64_t height, int64_t width, const BlendWindow& window);

}  // namespace emvq

#endif

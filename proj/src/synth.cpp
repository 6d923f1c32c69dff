#include "emvq/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace emvq {

namespace {

torch::Tensor gaussian_kernel1d(double sigma) {
    int64_t radius = std::max<int64_t>(1, std::llround(3.0 * sigma));
    torch::Tensor x = torch::arange(-radius, radius + 1, torch::kFloat32);
    torch::Tensor k = torch::exp(-(x * x) / (2.0 * sigma * sigma));
    return k / k.sum();
}

torch::Tensor blur(const torch::Tensor& img, double sigma) {
    torch::Tensor k = gaussian_kernel1d(sigma);
    int64_t r = (k.size(0) - 1) / 2;
    torch::Tensor x = img.unsqueeze(0).unsqueeze(0);
    x = torch::reflection_pad2d(x, {r, r, 0, 0});
    x = torch::conv2d(x, k.reshape({1, 1, 1, -1}));
    x = torch::reflection_pad2d(x, {0, 0, r, r});
    x = torch::conv2d(x, k.reshape({1, 1, -1, 1}));
    return x.squeeze(0).squeeze(0);
}

}  // namespace

Frame synth_frame(int64_t size, uint64_t seed) {
    if (size < 16) throw std::invalid_argument("synthetic frames must be at least 16 pixels");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // Background: white noise blurred at two spatial scales plus a gentle
    // illumination ramp.
    torch::manual_seed(seed ^ 0x53594e5448ULL);
    torch::Tensor img = blur(torch::randn({size, size}), 1.5) * 0.06 +
                        blur(torch::randn({size, size}), 6.0) * 0.10;
    double gx = (unit(rng) - 0.5) * 0.2;
    double gy = (unit(rng) - 0.5) * 0.2;
    torch::Tensor axis = torch::linspace(-0.5, 0.5, size, torch::kFloat32);
    img = img + gx * axis.reshape({1, size}) + gy * axis.reshape({size, 1});

    // Membranes: quadratic Bezier paths stamped with a Gaussian cross-section;
    // max-combined so a slow path does not darken twice.
    torch::Tensor canvas = torch::zeros({size, size}, torch::kFloat32);
    auto acc = canvas.accessor<float, 2>();
    int64_t membranes = 4 + static_cast<int64_t>(unit(rng) * 5.0);
    for (int64_t m = 0; m < membranes; ++m) {
        double x0 = unit(rng) * size, y0 = unit(rng) * size;
        double x1 = unit(rng) * size, y1 = unit(rng) * size;
        double cx = unit(rng) * size, cy = unit(rng) * size;
        double width = 1.2 + unit(rng) * 2.3;
        double depth = 0.25 + unit(rng) * 0.2;
        int64_t radius = static_cast<int64_t>(std::ceil(3.0 * width));
        int64_t steps = size * 3;
        for (int64_t i = 0; i <= steps; ++i) {
            double t = static_cast<double>(i) / static_cast<double>(steps);
            double u = 1.0 - t;
            double px = u * u * x0 + 2.0 * u * t * cx + t * t * x1;
            double py = u * u * y0 + 2.0 * u * t * cy + t * t * y1;
            int64_t r0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(py)) - radius);
            int64_t r1 = std::min<int64_t>(size - 1, static_cast<int64_t>(std::ceil(py)) + radius);
            int64_t c0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(px)) - radius);
            int64_t c1 = std::min<int64_t>(size - 1, static_cast<int64_t>(std::ceil(px)) + radius);
            for (int64_t r = r0; r <= r1; ++r) {
                for (int64_t c = c0; c <= c1; ++c) {
                    double d2 = (r - py) * (r - py) + (c - px) * (c - px);
                    float v = static_cast<float>(depth * std::exp(-d2 / (2.0 * width * width)));
                    if (v > acc[r][c]) acc[r][c] = v;
                }
            }
        }
    }

    img = (img - canvas).clamp(-0.5, 0.5).contiguous();
    return make_frame(img);
}

}  // namespace emvq

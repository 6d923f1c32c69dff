#include "emvq/objective.hpp"

#include <atomic>
#include <cmath>
#include <iostream>
#include <limits>
#include <vector>

namespace emvq {

namespace {

constexpr int kWindowSize = 11;
constexpr double kWindowSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2 with L = 1
constexpr double kC2 = 0.03 * 0.03;

// Standard five-scale MS-SSIM weights.
const std::vector<double> kScaleWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

torch::Tensor as_nchw(const torch::Tensor& t) {
    switch (t.dim()) {
        case 2:
            return t.unsqueeze(0).unsqueeze(0);
        case 3:
            return t.unsqueeze(1);
        case 4:
            return t;
        default:
            TORCH_CHECK(false, "expected 2-, 3- or 4-D image tensor, got ", t.dim(), " dims");
    }
}

void check_pair(const torch::Tensor& x, const torch::Tensor& xhat) {
    TORCH_CHECK(x.sizes() == xhat.sizes(), "image shape mismatch: ", x.sizes(), " vs ", xhat.sizes());
}

torch::Tensor gaussian_kernel(torch::Dtype dtype) {
    torch::Tensor g = torch::empty({kWindowSize}, torch::kFloat64);
    auto acc = g.accessor<double, 1>();
    const double c = (kWindowSize - 1) / 2.0;
    for (int i = 0; i < kWindowSize; ++i) {
        const double d = i - c;
        acc[i] = std::exp(-d * d / (2.0 * kWindowSigma * kWindowSigma));
    }
    g /= g.sum();
    return torch::outer(g, g).reshape({1, 1, kWindowSize, kWindowSize}).to(dtype);
}

torch::Tensor filter_valid(const torch::Tensor& img, const torch::Tensor& kernel) {
    return torch::nn::functional::conv2d(img, kernel);
}

// Per-window luminance and contrast-structure maps over the valid region.
std::pair<torch::Tensor, torch::Tensor> ssim_maps(const torch::Tensor& a, const torch::Tensor& b) {
    torch::Tensor kernel = gaussian_kernel(a.scalar_type());
    torch::Tensor mu_a = filter_valid(a, kernel);
    torch::Tensor mu_b = filter_valid(b, kernel);
    torch::Tensor mu_aa = mu_a * mu_a;
    torch::Tensor mu_bb = mu_b * mu_b;
    torch::Tensor mu_ab = mu_a * mu_b;
    torch::Tensor sigma_aa = filter_valid(a * a, kernel) - mu_aa;
    torch::Tensor sigma_bb = filter_valid(b * b, kernel) - mu_bb;
    torch::Tensor sigma_ab = filter_valid(a * b, kernel) - mu_ab;

    torch::Tensor l = (2.0 * mu_ab + kC1) / (mu_aa + mu_bb + kC1);
    torch::Tensor cs = (2.0 * sigma_ab + kC2) / (sigma_aa + sigma_bb + kC2);
    return {l, cs};
}

int reduce_scales(int scales, int64_t min_side) {
    int used = scales;
    while (used > 1 && min_side < static_cast<int64_t>(kWindowSize) * (1LL << (used - 1))) {
        --used;
    }
    TORCH_CHECK(min_side >= kWindowSize, "image side ", min_side, " smaller than the ", kWindowSize,
                "x", kWindowSize, " SSIM window");
    return used;
}

std::atomic<bool> g_warned_scale_reduction{false};

}  // namespace

torch::Tensor grad_l1(const torch::Tensor& x, const torch::Tensor& xhat) {
    check_pair(x, xhat);
    torch::Tensor a = as_nchw(x);
    torch::Tensor b = as_nchw(xhat);

    auto fwd_diff = [](const torch::Tensor& t, int64_t dim) {
        torch::Tensor d = t.diff(1, dim);
        auto pad_shape = t.sizes().vec();
        pad_shape[dim] = 1;
        // replicate padding at the trailing edge makes the last difference 0
        return torch::cat({d, torch::zeros(pad_shape, t.options())}, dim);
    };

    torch::Tensor h = (fwd_diff(a, 3) - fwd_diff(b, 3)).abs().mean();
    torch::Tensor v = (fwd_diff(a, 2) - fwd_diff(b, 2)).abs().mean();
    return h + v;
}

torch::Tensor ssim(const torch::Tensor& x, const torch::Tensor& xhat) {
    check_pair(x, xhat);
    torch::Tensor a = as_nchw(x) + 0.5;
    torch::Tensor b = as_nchw(xhat) + 0.5;
    auto [l, cs] = ssim_maps(a, b);
    return (l * cs).mean();
}

torch::Tensor ms_ssim(const torch::Tensor& x, const torch::Tensor& xhat, int scales) {
    check_pair(x, xhat);
    TORCH_CHECK(scales >= 1 && scales <= static_cast<int>(kScaleWeights.size()),
                "scales must be in [1, ", kScaleWeights.size(), "]");
    torch::Tensor a = as_nchw(x) + 0.5;
    torch::Tensor b = as_nchw(xhat) + 0.5;

    const int64_t min_side = std::min(a.size(2), a.size(3));
    const int used = reduce_scales(scales, min_side);
    if (used < scales && !g_warned_scale_reduction.exchange(true)) {
        std::cerr << "ms_ssim: side " << min_side << " too small for " << scales
                  << " scales, using " << used << "\n";
    }

    double weight_sum = 0.0;
    for (int s = 0; s < used; ++s) weight_sum += kScaleWeights[s];

    torch::Tensor score = torch::ones({}, a.options());
    for (int s = 0; s < used; ++s) {
        auto [l, cs] = ssim_maps(a, b);
        const double w = kScaleWeights[s] / weight_sum;
        if (s + 1 < used) {
            score = score * cs.mean().relu().pow(w);
            a = torch::avg_pool2d(a, 2);
            b = torch::avg_pool2d(b, 2);
        } else {
            score = score * (l * cs).mean().relu().pow(w);
        }
    }
    return score;
}

double psnr(const torch::Tensor& x, const torch::Tensor& xhat, double peak) {
    check_pair(x, xhat);
    const double mse = torch::mse_loss(x.to(torch::kFloat64), xhat.to(torch::kFloat64)).item<double>();
    if (mse == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return 10.0 * std::log10(peak * peak / mse);
}

torch::Tensor rec_loss(const torch::Tensor& x, const torch::Tensor& xhat, const LossWeights& weights) {
    check_pair(x, xhat);
    torch::Tensor l1 = (x - xhat).abs().mean();
    torch::Tensor ms = 1.0 - ms_ssim(x, xhat);
    torch::Tensor g = grad_l1(x, xhat);
    return weights.alpha * l1 + weights.beta_ms * ms + weights.gamma_grad * g;
}

std::pair<torch::Tensor, LossReport> total_loss(const torch::Tensor& x, const torch::Tensor& xhat,
                                                const LossWeights& weights,
                                                const CommitmentTerms& commitments) {
    TORCH_CHECK(commitments.lambda_top >= 0.0 && commitments.lambda_bottom >= 0.0,
                "commitment weights must be non-negative");

    torch::Tensor l1 = (x - xhat).abs().mean();
    torch::Tensor ms = 1.0 - ms_ssim(x, xhat);
    torch::Tensor g = grad_l1(x, xhat);
    torch::Tensor total = weights.alpha * l1 + weights.beta_ms * ms + weights.gamma_grad * g;

    LossReport report;
    report.rec_l1 = l1.item<double>();
    report.ms_ssim_term = ms.item<double>();
    report.grad_l1 = g.item<double>();

    if (commitments.top.has_value()) {
        total = total + commitments.lambda_top * *commitments.top;
        report.commitment_top = commitments.top->item<double>();
    }
    if (commitments.bottom.has_value()) {
        total = total + commitments.lambda_bottom * *commitments.bottom;
        report.commitment_bottom = commitments.bottom->item<double>();
    }
    report.total = total.item<double>();
    return {total, report};
}

}  // namespace emvq

#ifndef EMVQ_OBJECTIVE_HPP
#define EMVQ_OBJECTIVE_HPP

#include <optional>
#include <utility>

#include <torch/torch.h>

namespace emvq {

struct LossWeights {
    double alpha = 1.0;      // L1 term
    double beta_ms = 0.5;    // 1 - MS-SSIM term
    double gamma_grad = 0.1; // gradient-L1 term
};

struct LossReport {
    double rec_l1 = 0.0;
    double ms_ssim_term = 0.0;  // 1 - MS-SSIM
    double grad_l1 = 0.0;
    double commitment_top = 0.0;
    double commitment_bottom = 0.0;
    double total = 0.0;
};

// Mean absolute difference of forward-difference gradients, one mean per
// axis, summed over the two axes. Replicate padding at the trailing edge.
torch::Tensor grad_l1(const torch::Tensor& x, const torch::Tensor& xhat);

// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid convolution.
// Inputs are shifted from [-0.5, 0.5] to [0, 1] internally; peak 1.
torch::Tensor ssim(const torch::Tensor& x, const torch::Tensor& xhat);

// Multi-scale SSIM with the standard five published scale weights. If the
// image is too small for the requested scale count it is reduced (the first
// reduction per process emits a warning) and the weights are renormalized.
torch::Tensor ms_ssim(const torch::Tensor& x, const torch::Tensor& xhat, int scales = 5);

// 10*log10(peak^2 / MSE); +inf when MSE is zero.
double psnr(const torch::Tensor& x, const torch::Tensor& xhat, double peak = 1.0);

// alpha*mean|x - xhat| + beta*(1 - MS-SSIM) + gamma*grad_l1
torch::Tensor rec_loss(const torch::Tensor& x, const torch::Tensor& xhat, const LossWeights& weights);

struct CommitmentTerms {
    std::optional<torch::Tensor> top;
    double lambda_top = 0.25;
    std::optional<torch::Tensor> bottom;
    double lambda_bottom = 0.25;
};

// Reconstruction loss plus the weighted per-level commitment terms.
std::pair<torch::Tensor, LossReport> total_loss(const torch::Tensor& x, const torch::Tensor& xhat,
                                                const LossWeights& weights,
                                                const CommitmentTerms& commitments);

}  // namespace emvq

#endif

#ifndef EMVQ_QUANTIZER_HPP
#define EMVQ_QUANTIZER_HPP

#include <cstdint>

#include <torch/torch.h>

namespace emvq {

// K learned embeddings plus the EMA statistics that maintain them.
struct Codebook {
    torch::Tensor embeddings;  // (K, D) float32
    torch::Tensor ema_counts;  // (K,) float64
    torch::Tensor ema_sums;    // (K, D) float64
    double decay = 0.99;
    double smoothing = 1e-5;

    int64_t size() const { return embeddings.size(0); }
    int64_t dim() const { return embeddings.size(1); }
};

// Gaussian init with std 1/sqrt(D); EMA sums seeded from the embeddings so the
// first update behaves like a warm moving average.
Codebook make_codebook(int64_t codes, int64_t dim, double decay = 0.99, double smoothing = 1e-5);

struct QuantResult {
    torch::Tensor indices;    // (N, H, W) int64
    torch::Tensor quantized;  // (N, D, H, W) float32, rows of the codebook
    double perplexity = 1.0;
};

// Nearest embedding under squared Euclidean distance, computed in float64;
// ties break toward the lowest index.
QuantResult quantize(const torch::Tensor& z, const Codebook& codebook);

// EMA update of cluster counts and code means from one batch of assignments.
// counts <- decay*counts + (1-decay)*n_i, sums likewise; embeddings are the
// Laplace-smoothed means. Single writer only.
void ema_update(Codebook& codebook, const torch::Tensor& z, const torch::Tensor& indices);

// Re-seeds codes whose EMA count fell below the threshold from random vectors
// of the given batch. Returns the number of restarted codes.
int64_t restart_dead_codes(Codebook& codebook, const torch::Tensor& z, double count_threshold = 1e-3);

// Forward value of `quantized`, identity Jacobian onto `z`; no gradient
// reaches the codebook through this path.
torch::Tensor straight_through(const torch::Tensor& z, const torch::Tensor& quantized);

// exp of the entropy of the usage histogram; in [1, K].
double perplexity(const torch::Tensor& usage_histogram);

// Mean squared error against a gradient-detached copy of `quantized`.
torch::Tensor commitment_loss(const torch::Tensor& z, const torch::Tensor& quantized);

}  // namespace emvq

#endif

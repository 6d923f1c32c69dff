#include "emvq/quantizer.hpp"

#include <cmath>

namespace emvq {

Codebook make_codebook(int64_t codes, int64_t dim, double decay, double smoothing) {
    TORCH_CHECK(codes >= 2, "codebook needs at least 2 codes");
    TORCH_CHECK(dim >= 1, "embedding dim must be positive");
    TORCH_CHECK(decay > 0.0 && decay < 1.0, "decay must be in (0, 1)");
    TORCH_CHECK(smoothing > 0.0, "smoothing must be positive");

    Codebook cb;
    cb.embeddings = torch::randn({codes, dim}, torch::kFloat32) / std::sqrt(static_cast<double>(dim));
    cb.ema_counts = torch::ones({codes}, torch::kFloat64);
    cb.ema_sums = cb.embeddings.to(torch::kFloat64).clone();
    cb.decay = decay;
    cb.smoothing = smoothing;
    return cb;
}

namespace {

// (n, D) flattened view of a (N, D, H, W) or (n, D) feature tensor.
torch::Tensor flatten_features(const torch::Tensor& z, int64_t dim) {
    TORCH_CHECK(z.dim() == 2 || z.dim() == 4, "expected (n, D) or (N, D, H, W) features");
    if (z.dim() == 2) {
        TORCH_CHECK(z.size(1) == dim, "feature dim ", z.size(1), " != codebook dim ", dim);
        return z.reshape({-1, dim});
    }
    TORCH_CHECK(z.size(1) == dim, "feature dim ", z.size(1), " != codebook dim ", dim);
    return z.permute({0, 2, 3, 1}).reshape({-1, dim});
}

}  // namespace

QuantResult quantize(const torch::Tensor& z, const Codebook& codebook) {
    TORCH_CHECK(z.is_floating_point(), "features must be floating point");
    TORCH_CHECK(torch::isfinite(z).all().item<bool>(), "non-finite features");
    const int64_t k = codebook.size();
    const int64_t d = codebook.dim();

    torch::NoGradGuard ng;
    torch::Tensor flat = flatten_features(z, d).to(torch::kFloat64);
    torch::Tensor emb = codebook.embeddings.to(torch::kFloat64);

    // ||z||^2 - 2 z.e + ||e||^2, all in float64.
    torch::Tensor dist = flat.pow(2).sum(1, true) - 2.0 * flat.mm(emb.t()) + emb.pow(2).sum(1).unsqueeze(0);

    const int64_t n = dist.size(0);
    torch::Tensor indices_flat = torch::empty({n}, torch::kInt64);
    {
        auto dacc = dist.accessor<double, 2>();
        auto iacc = indices_flat.accessor<int64_t, 1>();
        for (int64_t i = 0; i < n; ++i) {
            int64_t best = 0;
            double bestd = dacc[i][0];
            for (int64_t j = 1; j < k; ++j) {
                if (dacc[i][j] < bestd) {  // strict: ties keep the lowest index
                    bestd = dacc[i][j];
                    best = j;
                }
            }
            iacc[i] = best;
        }
    }

    torch::Tensor quant_flat = codebook.embeddings.index_select(0, indices_flat);

    QuantResult result;
    if (z.dim() == 2) {
        result.indices = indices_flat.clone();
        result.quantized = quant_flat;
    } else {
        result.indices = indices_flat.reshape({z.size(0), z.size(2), z.size(3)});
        result.quantized = quant_flat.reshape({z.size(0), z.size(2), z.size(3), d}).permute({0, 3, 1, 2}).contiguous();
    }
    torch::Tensor hist = torch::bincount(indices_flat, {}, k).to(torch::kFloat64);
    result.perplexity = perplexity(hist);
    return result;
}

void ema_update(Codebook& codebook, const torch::Tensor& z, const torch::Tensor& indices) {
    torch::NoGradGuard ng;
    const int64_t k = codebook.size();
    const int64_t d = codebook.dim();

    torch::Tensor flat = flatten_features(z.detach(), d).to(torch::kFloat64);
    torch::Tensor idx = indices.reshape({-1});
    TORCH_CHECK(idx.size(0) == flat.size(0), "indices do not match features");

    torch::Tensor onehot = torch::zeros({flat.size(0), k}, torch::kFloat64);
    onehot.scatter_(1, idx.unsqueeze(1), 1.0);
    torch::Tensor batch_counts = onehot.sum(0);          // (K,)
    torch::Tensor batch_sums = onehot.t().mm(flat);      // (K, D)

    const double g = codebook.decay;
    codebook.ema_counts.mul_(g).add_(batch_counts, 1.0 - g);
    codebook.ema_sums.mul_(g).add_(batch_sums, 1.0 - g);

    // Laplace-smoothed counts: (c_i + eta) * N / (N + K*eta)
    const double total = codebook.ema_counts.sum().item<double>();
    torch::Tensor smoothed = (codebook.ema_counts + codebook.smoothing) *
                             (total / (total + static_cast<double>(k) * codebook.smoothing));
    codebook.embeddings = (codebook.ema_sums / smoothed.unsqueeze(1)).to(torch::kFloat32);
}

int64_t restart_dead_codes(Codebook& codebook, const torch::Tensor& z, double count_threshold) {
    torch::NoGradGuard ng;
    torch::Tensor flat = flatten_features(z.detach(), codebook.dim());
    torch::Tensor dead = codebook.ema_counts < count_threshold;
    const int64_t n_dead = dead.sum().item<int64_t>();
    if (n_dead == 0) {
        return 0;
    }
    torch::Tensor picks = torch::randint(flat.size(0), {n_dead}, torch::kInt64);
    torch::Tensor replacements = flat.index_select(0, picks).to(torch::kFloat32);
    torch::Tensor dead_idx = dead.nonzero().squeeze(1);
    codebook.embeddings.index_copy_(0, dead_idx, replacements);
    codebook.ema_sums.index_copy_(0, dead_idx, replacements.to(torch::kFloat64));
    codebook.ema_counts.index_fill_(0, dead_idx, 1.0);
    return n_dead;
}

torch::Tensor straight_through(const torch::Tensor& z, const torch::Tensor& quantized) {
    TORCH_CHECK(z.sizes() == quantized.sizes(), "shape mismatch in straight-through");
    return z + (quantized.to(z.dtype()) - z).detach();
}

double perplexity(const torch::Tensor& usage_histogram) {
    TORCH_CHECK(usage_histogram.dim() == 1, "histogram must be 1-D");
    torch::Tensor counts = usage_histogram.to(torch::kFloat64);
    TORCH_CHECK((counts >= 0).all().item<bool>(), "negative count in histogram");
    const double total = counts.sum().item<double>();
    TORCH_CHECK(total > 0.0, "all-zero usage histogram");
    torch::Tensor p = counts / total;
    torch::Tensor logp = torch::where(p > 0, p.log(), torch::zeros_like(p));
    const double entropy = -(p * logp).sum().item<double>();
    return std::exp(entropy);
}

torch::Tensor commitment_loss(const torch::Tensor& z, const torch::Tensor& quantized) {
    TORCH_CHECK(z.sizes() == quantized.sizes(), "shape mismatch in commitment loss");
    return torch::mse_loss(z, quantized.detach().to(z.dtype()));
}

}  // namespace emvq

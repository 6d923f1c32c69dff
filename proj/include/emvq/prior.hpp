#ifndef EMVQ_PRIOR_HPP
#define EMVQ_PRIOR_HPP

#include <cstdint>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace emvq {

struct Sampling {
    enum class Mode { kGreedy, kStochastic };
    Mode mode = Mode::kGreedy;
    double temperature = 1.0;
    int64_t top_k = 0;  // 0 = full distribution
};

struct PriorConfig {
    int64_t layers = 6;
    int64_t model_width = 256;
    int64_t heads = 8;
    int64_t k_top = 256;
    int64_t k_bottom = 256;
    int64_t top_rows = 32, top_cols = 32;
    int64_t bottom_rows = 64, bottom_cols = 64;

    int64_t top_len() const { return top_rows * top_cols; }
    int64_t bottom_len() const { return bottom_rows * bottom_cols; }
    int64_t context() const { return top_len() + bottom_len() + 2; }
    int64_t vocab() const { return k_top + k_bottom + 2; }  // + BOS, SEP
    int64_t bos_id() const { return k_top + k_bottom; }
    int64_t sep_id() const { return k_top + k_bottom + 1; }
};

void validate_prior_config(const PriorConfig& cfg);

struct AttentionCache {
    std::vector<torch::Tensor> keys;    // per layer (1, heads, t, head_dim)
    std::vector<torch::Tensor> values;
};

// Decoder-only transformer over the sequence BOS, top tokens, SEP, bottom
// tokens, with learned 2-D positional embeddings per grid. The output head
// covers only the bottom vocabulary and is zero-initialized.
struct TransformerPriorImpl : torch::nn::Module {
    explicit TransformerPriorImpl(const PriorConfig& cfg);

    // (N, context) token ids -> (N, bottom_len, k_bottom) next-token logits
    // for every bottom position.
    torch::Tensor bottom_logits(const torch::Tensor& sequence);

    // Incremental step: x is the embedded current position; returns logits.
    torch::Tensor step(const torch::Tensor& token_id, int64_t position, AttentionCache& cache);

    // Teacher-forced cross-entropy in nats per bottom token.
    torch::Tensor nll(const torch::Tensor& sequence);

    torch::Tensor embed_sequence(const torch::Tensor& sequence);
    torch::Tensor position_embedding(int64_t position);

    PriorConfig config;
    torch::nn::Embedding token_embed{nullptr};
    torch::nn::Embedding special_pos{nullptr};
    torch::nn::Embedding top_row_pos{nullptr}, top_col_pos{nullptr};
    torch::nn::Embedding bottom_row_pos{nullptr}, bottom_col_pos{nullptr};
    torch::nn::ModuleList block_norm1, block_attn, block_norm2, block_mlp;
    torch::nn::LayerNorm final_norm{nullptr};
    torch::nn::Linear head{nullptr};

private:
    torch::Tensor run_blocks(torch::Tensor x, const torch::Tensor& mask);
};
TORCH_MODULE(TransformerPrior);

// BOS + offset top tokens + SEP + offset bottom tokens as one id sequence.
torch::Tensor build_sequence(const PriorConfig& cfg, const torch::Tensor& top_grid,
                             const torch::Tensor& bottom_grid);

struct PriorTrainOptions {
    int64_t steps = 300;
    int64_t batch_size = 1;
    double learning_rate = 3e-4;
    double weight_decay = 1e-2;
    uint64_t seed = 0;
};

// Teacher-forced training on (top, bottom) grid pairs from a frozen encoder.
// Returns the per-step loss curve (nats per bottom token).
std::vector<double> prior_train(TransformerPrior& prior,
                                const std::vector<std::pair<torch::Tensor, torch::Tensor>>& pairs,
                                const PriorTrainOptions& options);

// Raster-order autoregressive generation of a bottom grid from top tokens.
// Deterministic under greedy sampling or a fixed seed.
torch::Tensor prior_sample(TransformerPrior& prior, const torch::Tensor& top_grid,
                           const Sampling& sampling, uint64_t seed = 0);

}  // namespace emvq

#endif

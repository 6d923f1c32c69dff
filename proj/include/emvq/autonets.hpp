#ifndef EMVQ_AUTONETS_HPP
#define EMVQ_AUTONETS_HPP

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace emvq {

struct EncoderConfig {
    int64_t downsample_stages = 4;  // d_s; compression points use {2,3,4,5}
    int64_t hidden_width = 128;
    int64_t embed_dim = 96;
    int64_t residual_blocks = 2;
};

void validate_encoder_config(const EncoderConfig& cfg);

// Two 3x3 convolutions with ReLU pre-activations and an additive skip.
struct ResidualBlockImpl : torch::nn::Module {
    explicit ResidualBlockImpl(int64_t width);
    torch::Tensor forward(torch::Tensor x);

    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ResidualBlock);

// Stride-2 convolutional pyramid with d_s stages, two residual blocks, and a
// 1x1 projection to the embedding dimension.
struct EncoderImpl : torch::nn::Module {
    explicit EncoderImpl(const EncoderConfig& cfg);
    torch::Tensor forward(torch::Tensor tile);  // (N,1,H,W) -> (N,D,H/2^ds,W/2^ds)

    EncoderConfig config;
    torch::nn::ModuleList stages;
    std::vector<ResidualBlock> blocks;
    torch::nn::Conv2d project{nullptr};
};
TORCH_MODULE(Encoder);

// d_s stages of transposed convolutions with ReLU and a final 3x3 prediction
// head. Output is an unclipped raster.
struct TopDecoderImpl : torch::nn::Module {
    explicit TopDecoderImpl(const EncoderConfig& cfg);
    torch::Tensor forward(torch::Tensor quantized);  // (N,D,h,w) -> (N,1,h*2^ds,w*2^ds)

    EncoderConfig config;
    torch::nn::Conv2d project{nullptr};
    std::vector<ResidualBlock> blocks;
    torch::nn::ModuleList stages;
    torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(TopDecoder);

// h^b * (1 + gamma) + beta, elementwise.
torch::Tensor film_modulate(const torch::Tensor& bottom, const torch::Tensor& gamma,
                            const torch::Tensor& beta);

// Fuses a coarse (top) and fine (bottom) quantized latent: the top latent is
// upsampled to the bottom grid, produces FiLM parameters via 1x1 convolutions
// (zero-initialized, so training starts at identity modulation), modulates
// the bottom latent, and the concatenation is refined by residual blocks
// before the transposed-convolution stack.
struct FusionDecoderImpl : torch::nn::Module {
    FusionDecoderImpl(const EncoderConfig& top_cfg, const EncoderConfig& bottom_cfg);
    torch::Tensor forward(torch::Tensor top_quantized, torch::Tensor bottom_quantized);

    EncoderConfig top_config, bottom_config;
    torch::nn::ModuleList top_upsample;
    torch::nn::Conv2d film_gamma{nullptr}, film_beta{nullptr};
    torch::nn::Conv2d fuse{nullptr};
    std::vector<ResidualBlock> blocks;
    torch::nn::ModuleList stages;
    torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(FusionDecoder);

}  // namespace emvq

#endif

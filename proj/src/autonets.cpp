#include "emvq/autonets.hpp"

namespace emvq {

namespace nn = torch::nn;

void validate_encoder_config(const EncoderConfig& cfg) {
    TORCH_CHECK(cfg.downsample_stages >= 1 && cfg.downsample_stages <= 5,
                "downsample stages must be in [1, 5], got ", cfg.downsample_stages);
    TORCH_CHECK(cfg.hidden_width >= 1 && cfg.embed_dim >= 1, "widths must be positive");
    TORCH_CHECK(cfg.residual_blocks >= 0, "residual block count must be non-negative");
}

ResidualBlockImpl::ResidualBlockImpl(int64_t width) {
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(width, width, 3).padding(1)));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(width, width, 3).padding(1)));
}

torch::Tensor ResidualBlockImpl::forward(torch::Tensor x) {
    torch::Tensor h = conv1->forward(torch::relu(x));
    h = conv2->forward(torch::relu(h));
    return x + h;
}

EncoderImpl::EncoderImpl(const EncoderConfig& cfg) : config(cfg) {
    validate_encoder_config(cfg);
    stages = register_module("stages", nn::ModuleList());
    int64_t in_ch = 1;
    for (int64_t s = 0; s < cfg.downsample_stages; ++s) {
        stages->push_back(nn::Conv2d(nn::Conv2dOptions(in_ch, cfg.hidden_width, 4).stride(2).padding(1)));
        in_ch = cfg.hidden_width;
    }
    for (int64_t b = 0; b < cfg.residual_blocks; ++b) {
        blocks.push_back(ResidualBlock(cfg.hidden_width));
        register_module("block" + std::to_string(b), blocks.back());
    }
    project = register_module("project", nn::Conv2d(nn::Conv2dOptions(cfg.hidden_width, cfg.embed_dim, 1)));
}

torch::Tensor EncoderImpl::forward(torch::Tensor tile) {
    TORCH_CHECK(tile.dim() == 4 && tile.size(1) == 1, "encoder expects (N,1,H,W)");
    const int64_t factor = 1LL << config.downsample_stages;
    TORCH_CHECK(tile.size(2) % factor == 0 && tile.size(3) % factor == 0,
                "tile side must be divisible by 2^d_s = ", factor);
    torch::Tensor x = tile;
    for (const auto& stage : *stages) {
        x = torch::relu(stage->as<nn::Conv2d>()->forward(x));
    }
    for (auto& block : blocks) {
        x = block->forward(x);
    }
    return project->forward(x);
}

TopDecoderImpl::TopDecoderImpl(const EncoderConfig& cfg) : config(cfg) {
    validate_encoder_config(cfg);
    project = register_module("project", nn::Conv2d(nn::Conv2dOptions(cfg.embed_dim, cfg.hidden_width, 1)));
    for (int64_t b = 0; b < cfg.residual_blocks; ++b) {
        blocks.push_back(ResidualBlock(cfg.hidden_width));
        register_module("block" + std::to_string(b), blocks.back());
    }
    stages = register_module("stages", nn::ModuleList());
    for (int64_t s = 0; s < cfg.downsample_stages; ++s) {
        stages->push_back(nn::ConvTranspose2d(
            nn::ConvTranspose2dOptions(cfg.hidden_width, cfg.hidden_width, 4).stride(2).padding(1)));
    }
    head = register_module("head", nn::Conv2d(nn::Conv2dOptions(cfg.hidden_width, 1, 3).padding(1)));
}

torch::Tensor TopDecoderImpl::forward(torch::Tensor quantized) {
    TORCH_CHECK(quantized.dim() == 4 && quantized.size(1) == config.embed_dim,
                "decoder expects (N,", config.embed_dim, ",h,w)");
    TORCH_CHECK(torch::isfinite(quantized).all().item<bool>(), "non-finite latent");
    torch::Tensor x = project->forward(quantized);
    for (auto& block : blocks) {
        x = block->forward(x);
    }
    for (const auto& stage : *stages) {
        x = torch::relu(stage->as<nn::ConvTranspose2d>()->forward(x));
    }
    return head->forward(x);
}

torch::Tensor film_modulate(const torch::Tensor& bottom, const torch::Tensor& gamma,
                            const torch::Tensor& beta) {
    TORCH_CHECK(bottom.sizes() == gamma.sizes() && bottom.sizes() == beta.sizes(),
                "FiLM parameter shape mismatch");
    return bottom * (1.0 + gamma) + beta;
}

FusionDecoderImpl::FusionDecoderImpl(const EncoderConfig& top_cfg, const EncoderConfig& bottom_cfg)
    : top_config(top_cfg), bottom_config(bottom_cfg) {
    validate_encoder_config(top_cfg);
    validate_encoder_config(bottom_cfg);
    TORCH_CHECK(top_cfg.downsample_stages > bottom_cfg.downsample_stages,
                "top latent must be coarser than bottom");
    TORCH_CHECK(top_cfg.embed_dim == bottom_cfg.embed_dim, "levels must share the embedding dim");
    const int64_t d = top_cfg.embed_dim;
    const int64_t w = bottom_cfg.hidden_width;
    const int64_t octaves = top_cfg.downsample_stages - bottom_cfg.downsample_stages;

    top_upsample = register_module("top_upsample", nn::ModuleList());
    for (int64_t s = 0; s < octaves; ++s) {
        top_upsample->push_back(
            nn::ConvTranspose2d(nn::ConvTranspose2dOptions(d, d, 4).stride(2).padding(1)));
    }
    film_gamma = register_module("film_gamma", nn::Conv2d(nn::Conv2dOptions(d, d, 1)));
    film_beta = register_module("film_beta", nn::Conv2d(nn::Conv2dOptions(d, d, 1)));
    {
        torch::NoGradGuard ng;
        film_gamma->weight.zero_();
        film_gamma->bias.zero_();
        film_beta->weight.zero_();
        film_beta->bias.zero_();
    }
    fuse = register_module("fuse", nn::Conv2d(nn::Conv2dOptions(2 * d, w, 3).padding(1)));
    for (int64_t b = 0; b < bottom_cfg.residual_blocks; ++b) {
        blocks.push_back(ResidualBlock(w));
        register_module("block" + std::to_string(b), blocks.back());
    }
    stages = register_module("stages", nn::ModuleList());
    for (int64_t s = 0; s < bottom_cfg.downsample_stages; ++s) {
        stages->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(w, w, 4).stride(2).padding(1)));
    }
    head = register_module("head", nn::Conv2d(nn::Conv2dOptions(w, 1, 3).padding(1)));
}

torch::Tensor FusionDecoderImpl::forward(torch::Tensor top_quantized, torch::Tensor bottom_quantized) {
    TORCH_CHECK(top_quantized.dim() == 4 && bottom_quantized.dim() == 4, "latents must be (N,D,h,w)");
    const int64_t ratio = 1LL << (top_config.downsample_stages - bottom_config.downsample_stages);
    TORCH_CHECK(bottom_quantized.size(2) == top_quantized.size(2) * ratio &&
                    bottom_quantized.size(3) == top_quantized.size(3) * ratio,
                "bottom grid must be top grid x ", ratio);

    torch::Tensor up = top_quantized;
    for (size_t s = 0; s < top_upsample->size(); ++s) {
        up = (*top_upsample)[s]->as<nn::ConvTranspose2d>()->forward(up);
        if (s + 1 < top_upsample->size()) {
            up = torch::relu(up);
        }
    }

    torch::Tensor gamma = film_gamma->forward(up);
    torch::Tensor beta = film_beta->forward(up);
    torch::Tensor modulated = film_modulate(bottom_quantized, gamma, beta);

    torch::Tensor x = fuse->forward(torch::cat({modulated, up}, 1));
    for (auto& block : blocks) {
        x = block->forward(x);
    }
    for (const auto& stage : *stages) {
        x = torch::relu(stage->as<nn::ConvTranspose2d>()->forward(x));
    }
    return head->forward(x);
}

}  // namespace emvq

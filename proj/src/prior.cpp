#include "emvq/prior.hpp"

#include <cmath>
#include <limits>

namespace emvq {

namespace nn = torch::nn;

void validate_prior_config(const PriorConfig& cfg) {
    TORCH_CHECK(cfg.layers >= 1, "prior needs at least one layer");
    TORCH_CHECK(cfg.model_width % cfg.heads == 0, "model width must be divisible by heads");
    TORCH_CHECK(cfg.k_top >= 2 && cfg.k_bottom >= 2, "vocabularies need at least 2 codes");
    TORCH_CHECK(cfg.top_rows >= 1 && cfg.top_cols >= 1 && cfg.bottom_rows >= 1 && cfg.bottom_cols >= 1,
                "grid dims must be positive");
}

namespace {

struct CausalSelfAttentionImpl : nn::Module {
    CausalSelfAttentionImpl(int64_t width, int64_t heads) : heads_(heads) {
        qkv = register_module("qkv", nn::Linear(width, 3 * width));
        out = register_module("out", nn::Linear(width, width));
    }

    torch::Tensor split_heads(const torch::Tensor& t) const {
        // (N, L, width) -> (N, heads, L, head_dim)
        const int64_t n = t.size(0), l = t.size(1);
        return t.view({n, l, heads_, t.size(2) / heads_}).permute({0, 2, 1, 3});
    }

    torch::Tensor merge_heads(const torch::Tensor& t) const {
        const int64_t n = t.size(0), l = t.size(2);
        return t.permute({0, 2, 1, 3}).contiguous().view({n, l, -1});
    }

    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& mask) {
        auto chunks = qkv->forward(x).chunk(3, /*dim=*/2);
        torch::Tensor q = split_heads(chunks[0]);
        torch::Tensor k = split_heads(chunks[1]);
        torch::Tensor v = split_heads(chunks[2]);
        const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(3)));
        torch::Tensor scores = q.matmul(k.transpose(2, 3)) * scale + mask;
        torch::Tensor attn = torch::softmax(scores, 3);
        return out->forward(merge_heads(attn.matmul(v)));
    }

    // Single-position step against cached keys/values (query attends to all
    // cached positions, so no mask is needed).
    torch::Tensor step(const torch::Tensor& x, torch::Tensor& key_cache, torch::Tensor& value_cache) {
        auto chunks = qkv->forward(x).chunk(3, /*dim=*/2);
        torch::Tensor q = split_heads(chunks[0]);
        torch::Tensor k = split_heads(chunks[1]);
        torch::Tensor v = split_heads(chunks[2]);
        key_cache = key_cache.defined() ? torch::cat({key_cache, k}, 2) : k;
        value_cache = value_cache.defined() ? torch::cat({value_cache, v}, 2) : v;
        const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(3)));
        torch::Tensor scores = q.matmul(key_cache.transpose(2, 3)) * scale;
        torch::Tensor attn = torch::softmax(scores, 3);
        return out->forward(merge_heads(attn.matmul(value_cache)));
    }

    int64_t heads_;
    nn::Linear qkv{nullptr}, out{nullptr};
};
TORCH_MODULE(CausalSelfAttention);

struct MlpImpl : nn::Module {
    explicit MlpImpl(int64_t width) {
        up = register_module("up", nn::Linear(width, 4 * width));
        down = register_module("down", nn::Linear(4 * width, width));
    }
    torch::Tensor forward(const torch::Tensor& x) { return down->forward(torch::gelu(up->forward(x))); }
    nn::Linear up{nullptr}, down{nullptr};
};
TORCH_MODULE(Mlp);

}  // namespace

TransformerPriorImpl::TransformerPriorImpl(const PriorConfig& cfg) : config(cfg) {
    validate_prior_config(cfg);
    const int64_t w = cfg.model_width;
    token_embed = register_module("token_embed", nn::Embedding(cfg.vocab(), w));
    special_pos = register_module("special_pos", nn::Embedding(2, w));
    top_row_pos = register_module("top_row_pos", nn::Embedding(cfg.top_rows, w));
    top_col_pos = register_module("top_col_pos", nn::Embedding(cfg.top_cols, w));
    bottom_row_pos = register_module("bottom_row_pos", nn::Embedding(cfg.bottom_rows, w));
    bottom_col_pos = register_module("bottom_col_pos", nn::Embedding(cfg.bottom_cols, w));

    block_norm1 = register_module("block_norm1", nn::ModuleList());
    block_attn = register_module("block_attn", nn::ModuleList());
    block_norm2 = register_module("block_norm2", nn::ModuleList());
    block_mlp = register_module("block_mlp", nn::ModuleList());
    for (int64_t i = 0; i < cfg.layers; ++i) {
        block_norm1->push_back(nn::LayerNorm(nn::LayerNormOptions({w})));
        block_attn->push_back(CausalSelfAttention(w, cfg.heads));
        block_norm2->push_back(nn::LayerNorm(nn::LayerNormOptions({w})));
        block_mlp->push_back(Mlp(w));
    }
    final_norm = register_module("final_norm", nn::LayerNorm(nn::LayerNormOptions({w})));
    head = register_module("head", nn::Linear(w, cfg.k_bottom));
    {
        torch::NoGradGuard ng;
        head->weight.zero_();
        head->bias.zero_();
    }
}

torch::Tensor TransformerPriorImpl::position_embedding(int64_t position) {
    const int64_t t = config.top_len();
    auto idx = [&](nn::Embedding& e, int64_t i) { return e->forward(torch::tensor({i}, torch::kInt64)); };
    if (position == 0) {
        return idx(special_pos, 0);
    }
    if (position <= t) {
        const int64_t p = position - 1;
        return idx(top_row_pos, p / config.top_cols) + idx(top_col_pos, p % config.top_cols);
    }
    if (position == t + 1) {
        return idx(special_pos, 1);
    }
    const int64_t p = position - t - 2;
    TORCH_CHECK(p < config.bottom_len(), "position beyond context");
    return idx(bottom_row_pos, p / config.bottom_cols) + idx(bottom_col_pos, p % config.bottom_cols);
}

torch::Tensor TransformerPriorImpl::embed_sequence(const torch::Tensor& sequence) {
    TORCH_CHECK(sequence.dim() == 2, "sequence must be (N, L)");
    const int64_t l = sequence.size(1);
    TORCH_CHECK(l <= config.context(), "sequence longer than the context bound");

    std::vector<torch::Tensor> pos;
    pos.reserve(static_cast<size_t>(l));
    for (int64_t p = 0; p < l; ++p) {
        pos.push_back(position_embedding(p));
    }
    return token_embed->forward(sequence) + torch::cat(pos, 0).unsqueeze(0);
}

torch::Tensor TransformerPriorImpl::run_blocks(torch::Tensor x, const torch::Tensor& mask) {
    for (size_t i = 0; i < block_attn->size(); ++i) {
        auto ln1 = (*block_norm1)[i]->as<nn::LayerNorm>();
        auto ln2 = (*block_norm2)[i]->as<nn::LayerNorm>();
        auto attn = (*block_attn)[i]->as<CausalSelfAttentionImpl>();
        auto mlp = (*block_mlp)[i]->as<MlpImpl>();
        x = x + attn->forward(ln1->forward(x), mask);
        x = x + mlp->forward(ln2->forward(x));
    }
    return final_norm->forward(x);
}

torch::Tensor TransformerPriorImpl::bottom_logits(const torch::Tensor& sequence) {
    const int64_t l = sequence.size(1);
    TORCH_CHECK(l == config.context(), "expected full context of ", config.context(), ", got ", l);
    torch::Tensor x = embed_sequence(sequence);
    torch::Tensor mask =
        torch::full({l, l}, -std::numeric_limits<float>::infinity(), x.options()).triu(1);
    x = run_blocks(x, mask);
    // Positions SEP .. SEP+B-1 predict the B bottom tokens.
    const int64_t t = config.top_len();
    torch::Tensor h = x.slice(1, t + 1, t + 1 + config.bottom_len());
    return head->forward(h);
}

torch::Tensor TransformerPriorImpl::step(const torch::Tensor& token_id, int64_t position,
                                         AttentionCache& cache) {
    if (cache.keys.empty()) {
        cache.keys.resize(block_attn->size());
        cache.values.resize(block_attn->size());
    }
    torch::Tensor x = token_embed->forward(token_id.view({1, 1})) + position_embedding(position).unsqueeze(0);
    for (size_t i = 0; i < block_attn->size(); ++i) {
        auto ln1 = (*block_norm1)[i]->as<nn::LayerNorm>();
        auto ln2 = (*block_norm2)[i]->as<nn::LayerNorm>();
        auto attn = (*block_attn)[i]->as<CausalSelfAttentionImpl>();
        auto mlp = (*block_mlp)[i]->as<MlpImpl>();
        x = x + attn->step(ln1->forward(x), cache.keys[i], cache.values[i]);
        x = x + mlp->forward(ln2->forward(x));
    }
    return head->forward(final_norm->forward(x)).view({config.k_bottom});
}

torch::Tensor TransformerPriorImpl::nll(const torch::Tensor& sequence) {
    torch::Tensor logits = bottom_logits(sequence);  // (N, B, k_bottom)
    const int64_t t = config.top_len();
    torch::Tensor targets = sequence.slice(1, t + 2) - config.k_top;  // strip the vocab offset
    return torch::nn::functional::cross_entropy(logits.reshape({-1, config.k_bottom}),
                                                targets.reshape({-1}));
}

torch::Tensor build_sequence(const PriorConfig& cfg, const torch::Tensor& top_grid,
                             const torch::Tensor& bottom_grid) {
    TORCH_CHECK(top_grid.sizes() == torch::IntArrayRef({cfg.top_rows, cfg.top_cols}),
                "top grid dims do not match the prior configuration");
    TORCH_CHECK(bottom_grid.sizes() == torch::IntArrayRef({cfg.bottom_rows, cfg.bottom_cols}),
                "bottom grid dims do not match the prior configuration");
    torch::Tensor bos = torch::tensor({cfg.bos_id()}, torch::kInt64);
    torch::Tensor sep = torch::tensor({cfg.sep_id()}, torch::kInt64);
    return torch::cat({bos, top_grid.reshape({-1}).to(torch::kInt64), sep,
                       bottom_grid.reshape({-1}).to(torch::kInt64) + cfg.k_top})
        .unsqueeze(0);
}

std::vector<double> prior_train(TransformerPrior& prior,
                                const std::vector<std::pair<torch::Tensor, torch::Tensor>>& pairs,
                                const PriorTrainOptions& options) {
    TORCH_CHECK(!pairs.empty(), "no token pairs to train on");
    torch::manual_seed(options.seed);

    std::vector<torch::Tensor> sequences;
    sequences.reserve(pairs.size());
    for (const auto& [top, bottom] : pairs) {
        sequences.push_back(build_sequence(prior->config, top, bottom));
    }

    torch::optim::AdamW opt(prior->parameters(), torch::optim::AdamWOptions(options.learning_rate)
                                                     .weight_decay(options.weight_decay));
    prior->train();
    std::vector<double> losses;
    losses.reserve(static_cast<size_t>(options.steps));
    int64_t cursor = 0;
    for (int64_t s = 0; s < options.steps; ++s) {
        std::vector<torch::Tensor> batch;
        for (int64_t b = 0; b < options.batch_size; ++b) {
            batch.push_back(sequences[cursor % sequences.size()]);
            ++cursor;
        }
        opt.zero_grad();
        torch::Tensor loss = prior->nll(torch::cat(batch, 0));
        loss.backward();
        torch::nn::utils::clip_grad_norm_(prior->parameters(), 1.0);
        opt.step();
        losses.push_back(loss.item<double>());
    }
    prior->eval();
    return losses;
}

torch::Tensor prior_sample(TransformerPrior& prior, const torch::Tensor& top_grid,
                           const Sampling& sampling, uint64_t seed) {
    const PriorConfig& cfg = prior->config;
    TORCH_CHECK(top_grid.sizes() == torch::IntArrayRef({cfg.top_rows, cfg.top_cols}),
                "top grid dims do not match the prior configuration");
    torch::NoGradGuard ng;
    prior->eval();

    auto gen = at::detail::createCPUGenerator(seed);
    AttentionCache cache;

    // Prefix: BOS, top tokens, SEP.
    std::vector<int64_t> prefix;
    prefix.push_back(cfg.bos_id());
    {
        torch::Tensor flat = top_grid.reshape({-1}).to(torch::kInt64);
        auto acc = flat.accessor<int64_t, 1>();
        for (int64_t i = 0; i < flat.size(0); ++i) {
            TORCH_CHECK(acc[i] >= 0 && acc[i] < cfg.k_top, "top token outside vocabulary");
            prefix.push_back(acc[i]);
        }
    }
    prefix.push_back(cfg.sep_id());

    torch::Tensor logits;
    for (size_t p = 0; p < prefix.size(); ++p) {
        logits = prior->step(torch::tensor(prefix[p], torch::kInt64), static_cast<int64_t>(p), cache);
    }

    const int64_t b = cfg.bottom_len();
    torch::Tensor bottom = torch::empty({b}, torch::kInt64);
    auto out = bottom.accessor<int64_t, 1>();
    for (int64_t i = 0; i < b; ++i) {
        int64_t pick;
        if (sampling.mode == Sampling::Mode::kGreedy) {
            pick = logits.argmax().item<int64_t>();
        } else {
            torch::Tensor scaled = logits / std::max(sampling.temperature, 1e-6);
            if (sampling.top_k > 0 && sampling.top_k < cfg.k_bottom) {
                auto [vals, idx] = scaled.topk(sampling.top_k);
                torch::Tensor probs = torch::softmax(vals, 0);
                int64_t j = torch::multinomial(probs.unsqueeze(0), 1, false, gen).item<int64_t>();
                pick = idx[j].item<int64_t>();
            } else {
                torch::Tensor probs = torch::softmax(scaled, 0);
                pick = torch::multinomial(probs.unsqueeze(0), 1, false, gen).item<int64_t>();
            }
        }
        out[i] = pick;
        if (i + 1 < b) {
            const int64_t pos = cfg.top_len() + 2 + i;
            logits = prior->step(torch::tensor(pick + cfg.k_top, torch::kInt64), pos, cache);
        }
    }
    return bottom.reshape({cfg.bottom_rows, cfg.bottom_cols});
}

}  // namespace emvq

#include "emvq/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <stdexcept>

#include "emvq/errors.hpp"
#include "emvq/objective.hpp"
#include "emvq/quantizer.hpp"

namespace emvq {

namespace {

std::string format_metric(double v) {
    std::array<char, 64> buf;
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

torch::Tensor pad_to_multiple(const torch::Tensor& values, int64_t multiple) {
    int64_t h = values.size(0), w = values.size(1);
    int64_t ph = (multiple - h % multiple) % multiple;
    int64_t pw = (multiple - w % multiple) % multiple;
    if (ph == 0 && pw == 0) return values;
    return torch::replication_pad2d(values.unsqueeze(0).unsqueeze(0), {0, pw, 0, ph})
        .squeeze(0)
        .squeeze(0);
}

int64_t token_window(int64_t tile_size, int64_t scale, int64_t grid_rows, int64_t grid_cols) {
    int64_t tw = std::min({tile_size / scale, grid_rows, grid_cols});
    return std::max<int64_t>(1, tw);
}

torch::Tensor latent_grid(const torch::Tensor& tokens, const torch::Tensor& embeddings) {
    int64_t rows = tokens.size(0), cols = tokens.size(1);
    return embeddings.index_select(0, tokens.reshape(-1))
        .reshape({rows, cols, embeddings.size(1)})
        .permute({2, 0, 1})
        .contiguous();
}

double tokens_perplexity(const std::vector<int32_t>& tokens, int64_t codebook_size) {
    torch::Tensor histogram = torch::zeros({codebook_size}, torch::kFloat64);
    auto acc = histogram.accessor<double, 1>();
    for (int32_t v : tokens) acc[v] += 1.0;
    return perplexity(histogram);
}

Frame blend_windows(const std::vector<std::pair<std::pair<int64_t, int64_t>, torch::Tensor>>& tiles,
                    int64_t padded_rows, int64_t padded_cols, int64_t window_size,
                    int64_t frame_height, int64_t frame_width) {
    BlendWindow window = make_hann_window(window_size);
    Frame padded = overlap_add(tiles, padded_rows, padded_cols, window);
    torch::Tensor cropped =
        padded.values.slice(0, 0, frame_height).slice(1, 0, frame_width).contiguous();
    return make_frame(cropped);
}

}  // namespace

LevelCodec::LevelCodec(VqvaeModel model, size_t level) : model_(model), level_(level) {
    if (!model_) throw std::logic_error("LevelCodec needs a model");
    if (level_ >= model_->config.levels.size()) throw std::logic_error("no such quantizer level");
}

int64_t LevelCodec::downsample_stages() const {
    return model_->config.levels[level_].downsample_stages;
}

int64_t LevelCodec::codebook_size() const { return model_->config.levels[level_].codebook_size; }

const torch::Tensor& LevelCodec::embeddings() const { return model_->codebooks[level_].embeddings; }

torch::Tensor LevelCodec::encode_tokens(const torch::Tensor& tile) {
    torch::NoGradGuard guard;
    torch::Tensor z = model_->encoders[level_]->forward(tile);
    return quantize(z, model_->codebooks[level_]).indices.squeeze(0);
}

torch::Tensor LevelCodec::decode_latent(const torch::Tensor& latent) {
    torch::NoGradGuard guard;
    return model_->decode_direct(level_, latent);
}

torch::Tensor tokenize_grid(TileCodec& codec, const torch::Tensor& padded_values,
                            int64_t tile_size) {
    int64_t scale = int64_t{1} << codec.downsample_stages();
    int64_t h = padded_values.size(0), w = padded_values.size(1);
    if (h % scale != 0 || w % scale != 0)
        throw std::logic_error("tokenize_grid input must be a multiple of the downsampling factor");
    int64_t grid_rows = h / scale, grid_cols = w / scale;
    int64_t tw = token_window(tile_size, scale, grid_rows, grid_cols);

    torch::Tensor grid = torch::zeros({grid_rows, grid_cols}, torch::kInt64);
    TilePlan plan = plan_tiles(grid_rows, grid_cols, tw, tw);
    for (const auto& [tr, tc] : plan.origins) {
        torch::Tensor tile = padded_values.slice(0, tr * scale, (tr + tw) * scale)
                                 .slice(1, tc * scale, (tc + tw) * scale)
                                 .unsqueeze(0)
                                 .unsqueeze(0);
        grid.slice(0, tr, tr + tw).slice(1, tc, tc + tw).copy_(codec.encode_tokens(tile));
    }
    return grid;
}

Container encode_frame_with(TileCodec& codec, const Frame& frame, int64_t tile_size,
                            bool checkerboard, const std::array<uint8_t, 32>& digest,
                            uint8_t extra_flags) {
    int64_t scale = int64_t{1} << codec.downsample_stages();
    if (tile_size < scale || tile_size % scale != 0)
        throw FormatError("tile size must be a positive multiple of 2^downsample_stages");

    torch::Tensor padded = pad_to_multiple(frame.values, scale);
    torch::Tensor grid = tokenize_grid(codec, padded, tile_size);

    Container container;
    ContainerHeader& hd = container.header;
    hd.version = 1;
    hd.flags = static_cast<uint8_t>((checkerboard ? kFlagCheckerboard : 0) | extra_flags);
    hd.ds = static_cast<uint8_t>(codec.downsample_stages());
    hd.codebook_size = static_cast<uint16_t>(codec.codebook_size());
    hd.embed_dim = static_cast<uint16_t>(codec.embeddings().size(1));
    hd.frame_height = static_cast<uint32_t>(frame.height);
    hd.frame_width = static_cast<uint32_t>(frame.width);
    hd.grid_rows = static_cast<uint32_t>(grid.size(0));
    hd.grid_cols = static_cast<uint32_t>(grid.size(1));
    hd.model_digest = digest;
    container.tokens = retained_tokens(grid, checkerboard);
    hd.token_count = static_cast<uint32_t>(container.tokens.size());
    return container;
}

Frame decode_frame_with(TileCodec& codec, const Container& container, int64_t tile_size) {
    const ContainerHeader& hd = container.header;
    if (codec.downsample_stages() != hd.ds || codec.codebook_size() != hd.codebook_size)
        throw FormatError("container grid does not match this codec");
    int64_t scale = int64_t{1} << hd.ds;
    int64_t grid_rows = hd.grid_rows, grid_cols = hd.grid_cols;

    torch::Tensor latent;
    if (hd.checkerboard()) {
        latent = checkerboard_fill(container.tokens, grid_rows, grid_cols, codec.embeddings());
    } else {
        latent = latent_grid(dense_token_grid(container.tokens, grid_rows, grid_cols),
                             codec.embeddings());
    }

    int64_t tw = token_window(tile_size, scale, grid_rows, grid_cols);
    TilePlan plan = plan_tiles(grid_rows, grid_cols, tw, std::max<int64_t>(1, tw / 2));
    std::vector<std::pair<std::pair<int64_t, int64_t>, torch::Tensor>> tiles;
    for (const auto& [tr, tc] : plan.origins) {
        torch::Tensor window =
            latent.slice(1, tr, tr + tw).slice(2, tc, tc + tw).unsqueeze(0);
        torch::Tensor pixels = codec.decode_latent(window).squeeze(0).squeeze(0);
        tiles.emplace_back(std::make_pair(tr * scale, tc * scale), pixels);
    }
    return blend_windows(tiles, grid_rows * scale, grid_cols * scale, tw * scale,
                         hd.frame_height, hd.frame_width);
}

Container encode_frame(const Checkpoint& checkpoint, const Frame& frame,
                       const EncodeOptions& options) {
    const TrainConfig& cfg = checkpoint.config;
    if (options.level >= cfg.levels.size()) throw FormatError("no such quantizer level");
    LevelCodec codec(checkpoint.model, options.level);
    int64_t tile = options.tile_size > 0 ? options.tile_size : cfg.tile_size;
    uint8_t extra = cfg.levels.size() == 2 ? kFlagTwoLevelDecodeHint : uint8_t{0};
    return encode_frame_with(codec, frame, tile, options.checkerboard, checkpoint.digest, extra);
}

Frame decode_container(const Checkpoint& checkpoint, const Container& container, DecodeMode mode,
                       const Sampling& sampling, uint64_t seed, bool force_digest) {
    const ContainerHeader& hd = container.header;
    if (!force_digest && hd.model_digest != checkpoint.digest)
        throw FormatError("container digest does not match the checkpoint (use force to override)");

    const TrainConfig& cfg = checkpoint.config;
    size_t level = cfg.levels.size();
    for (size_t i = 0; i < cfg.levels.size(); ++i) {
        if (cfg.levels[i].downsample_stages == hd.ds &&
            cfg.levels[i].codebook_size == hd.codebook_size) {
            level = i;
            break;
        }
    }
    if (level == cfg.levels.size())
        throw FormatError("container grid does not match any checkpoint level");
    if (static_cast<int64_t>(hd.embed_dim) != cfg.embed_dim)
        throw FormatError("container embedding width does not match the checkpoint");

    torch::NoGradGuard guard;
    if (mode == DecodeMode::kTopOnly) {
        LevelCodec codec(checkpoint.model, level);
        return decode_frame_with(codec, container, cfg.tile_size);
    }

    if (!checkpoint.prior)
        throw FormatError("checkpoint has no prior section; cannot decode in prior mode");
    if (cfg.levels.size() != 2 || level != 0)
        throw FormatError("prior decode needs top-level tokens of a two-level checkpoint");
    if (hd.checkerboard())
        throw FormatError("prior decode requires a dense top grid (no checkerboard)");

    const PriorConfig& pc = checkpoint.prior->config;
    int64_t octaves = cfg.levels[0].downsample_stages - cfg.levels[1].downsample_stages;
    int64_t level_scale = int64_t{1} << octaves;
    if (pc.top_rows != pc.top_cols || pc.bottom_rows != pc.top_rows * level_scale ||
        pc.bottom_cols != pc.top_cols * level_scale)
        throw FormatError("prior window does not match the checkpoint's level spacing");

    int64_t grid_rows = hd.grid_rows, grid_cols = hd.grid_cols;
    if (grid_rows < pc.top_rows || grid_cols < pc.top_cols)
        throw FormatError("top grid is smaller than the prior's window");

    torch::Tensor top = dense_token_grid(container.tokens, grid_rows, grid_cols);
    torch::Tensor bottom =
        torch::zeros({grid_rows * level_scale, grid_cols * level_scale}, torch::kInt64);
    TransformerPrior prior_model = checkpoint.prior->model;
    TilePlan sample_plan = plan_tiles(grid_rows, grid_cols, pc.top_rows, pc.top_rows);
    uint64_t window_index = 0;
    for (const auto& [tr, tc] : sample_plan.origins) {
        torch::Tensor top_window = top.slice(0, tr, tr + pc.top_rows).slice(1, tc, tc + pc.top_cols);
        torch::Tensor bottom_window =
            prior_sample(prior_model, top_window, sampling, seed + window_index);
        bottom.slice(0, tr * level_scale, (tr + pc.top_rows) * level_scale)
            .slice(1, tc * level_scale, (tc + pc.top_cols) * level_scale)
            .copy_(bottom_window);
        ++window_index;
    }

    torch::Tensor top_latent = latent_grid(top, checkpoint.model->codebooks[0].embeddings);
    torch::Tensor bottom_latent = latent_grid(bottom, checkpoint.model->codebooks[1].embeddings);

    int64_t pixel_scale = int64_t{1} << cfg.levels[0].downsample_stages;
    int64_t tw = token_window(cfg.tile_size, pixel_scale, grid_rows, grid_cols);
    VqvaeModel model = checkpoint.model;
    TilePlan plan = plan_tiles(grid_rows, grid_cols, tw, std::max<int64_t>(1, tw / 2));
    std::vector<std::pair<std::pair<int64_t, int64_t>, torch::Tensor>> tiles;
    for (const auto& [tr, tc] : plan.origins) {
        torch::Tensor top_window = top_latent.slice(1, tr, tr + tw).slice(2, tc, tc + tw).unsqueeze(0);
        torch::Tensor bottom_window = bottom_latent.slice(1, tr * level_scale, (tr + tw) * level_scale)
                                          .slice(2, tc * level_scale, (tc + tw) * level_scale)
                                          .unsqueeze(0);
        torch::Tensor pixels = model->decode_fused(top_window, bottom_window).squeeze(0).squeeze(0);
        tiles.emplace_back(std::make_pair(tr * pixel_scale, tc * pixel_scale), pixels);
    }
    return blend_windows(tiles, grid_rows * pixel_scale, grid_cols * pixel_scale, tw * pixel_scale,
                         hd.frame_height, hd.frame_width);
}

RatioPlanEntry resolve_ratio(const TrainConfig& cfg, int64_t ratio) {
    for (size_t i = 0; i < cfg.levels.size(); ++i) {
        int64_t base = int64_t{1} << (2 * cfg.levels[i].downsample_stages);
        if (ratio == base) return RatioPlanEntry{ratio, i, false};
        if (ratio == 2 * base) return RatioPlanEntry{ratio, i, true};
    }
    throw FormatError("ratio " + std::to_string(ratio) +
                      "x is not reachable with this checkpoint's levels");
}

std::string evaluate_with(const std::vector<Frame>& frames,
                          const std::vector<std::string>& frame_ids,
                          const std::vector<int64_t>& ratios,
                          const std::function<Frame(const Frame&, int64_t)>& reconstruct,
                          const std::function<std::pair<double, double>(const Frame&)>& code_usage,
                          std::ostream* log) {
    if (frames.size() != frame_ids.size())
        throw std::logic_error("one frame id per frame required");
    std::string csv = "frame_id,ratio,psnr,ssim,ms_ssim,perplexity_top,perplexity_bottom\n";
    std::map<int64_t, std::array<double, 3>> sums;
    for (size_t fi = 0; fi < frames.size(); ++fi) {
        const Frame& frame = frames[fi];
        auto [perp_top, perp_bottom] = code_usage(frame);
        torch::Tensor x = frame.values.unsqueeze(0).unsqueeze(0);
        for (int64_t ratio : ratios) {
            Frame rec = reconstruct(frame, ratio);
            torch::Tensor y = rec.values.unsqueeze(0).unsqueeze(0);
            double p = psnr(x, y);
            double s = ssim(x, y).item<double>();
            double m = ms_ssim(x, y).item<double>();
            csv += frame_ids[fi] + "," + std::to_string(ratio) + "," + format_metric(p) + "," +
                   format_metric(s) + "," + format_metric(m) + "," + format_metric(perp_top) + "," +
                   format_metric(perp_bottom) + "\n";
            auto& acc = sums[ratio];
            acc[0] += p;
            acc[1] += s;
            acc[2] += m;
        }
    }
    if (log != nullptr && !frames.empty()) {
        double n = static_cast<double>(frames.size());
        for (int64_t ratio : ratios)
            *log << "ratio " << ratio << "x mean psnr " << sums[ratio][0] / n << " ssim "
                 << sums[ratio][1] / n << " ms_ssim " << sums[ratio][2] / n << "\n";
    }
    return csv;
}

std::string evaluate(const Checkpoint& checkpoint, const std::vector<Frame>& frames,
                     const std::vector<std::string>& frame_ids, const std::vector<int64_t>& ratios,
                     std::ostream* log) {
    const TrainConfig& cfg = checkpoint.config;
    std::map<int64_t, RatioPlanEntry> plan;
    for (int64_t ratio : ratios) plan.emplace(ratio, resolve_ratio(cfg, ratio));

    auto reconstruct = [&](const Frame& frame, int64_t ratio) {
        const RatioPlanEntry& entry = plan.at(ratio);
        EncodeOptions options;
        options.level = entry.level;
        options.checkerboard = entry.checkerboard;
        Container container = encode_frame(checkpoint, frame, options);
        return decode_container(checkpoint, container, DecodeMode::kTopOnly);
    };
    auto code_usage = [&](const Frame& frame) {
        double top = std::numeric_limits<double>::quiet_NaN();
        double bottom = std::numeric_limits<double>::quiet_NaN();
        for (size_t level = 0; level < cfg.levels.size(); ++level) {
            EncodeOptions options;
            options.level = level;
            Container container = encode_frame(checkpoint, frame, options);
            double perp = tokens_perplexity(container.tokens, cfg.levels[level].codebook_size);
            (level == 0 ? top : bottom) = perp;
        }
        return std::make_pair(top, bottom);
    };
    return evaluate_with(frames, frame_ids, ratios, reconstruct, code_usage, log);
}

std::vector<std::pair<torch::Tensor, torch::Tensor>> prior_training_pairs(
    const Checkpoint& checkpoint, const std::vector<Frame>& frames, int64_t top_window) {
    const TrainConfig& cfg = checkpoint.config;
    if (cfg.levels.size() != 2) throw FormatError("prior training needs a two-level checkpoint");
    if (top_window < 1) throw FormatError("prior window must be positive");

    torch::NoGradGuard guard;
    int64_t top_scale = int64_t{1} << cfg.levels[0].downsample_stages;
    int64_t level_scale =
        int64_t{1} << (cfg.levels[0].downsample_stages - cfg.levels[1].downsample_stages);
    LevelCodec top_codec(checkpoint.model, 0);
    LevelCodec bottom_codec(checkpoint.model, 1);

    std::vector<std::pair<torch::Tensor, torch::Tensor>> pairs;
    for (const Frame& frame : frames) {
        torch::Tensor padded = pad_to_multiple(frame.values, top_scale);
        torch::Tensor top = tokenize_grid(top_codec, padded, cfg.tile_size);
        torch::Tensor bottom = tokenize_grid(bottom_codec, padded, cfg.tile_size);
        if (top.size(0) < top_window || top.size(1) < top_window) continue;
        TilePlan plan = plan_tiles(top.size(0), top.size(1), top_window, top_window);
        for (const auto& [tr, tc] : plan.origins) {
            torch::Tensor top_win =
                top.slice(0, tr, tr + top_window).slice(1, tc, tc + top_window).clone();
            torch::Tensor bottom_win = bottom
                                           .slice(0, tr * level_scale, (tr + top_window) * level_scale)
                                           .slice(1, tc * level_scale, (tc + top_window) * level_scale)
                                           .clone();
            pairs.emplace_back(top_win, bottom_win);
        }
    }
    if (pairs.empty()) throw FormatError("no prior training windows; frames smaller than the window");
    return pairs;
}

PriorBundle train_checkpoint_prior(const Checkpoint& checkpoint, const std::vector<Frame>& frames,
                                   const PriorTrainSetup& setup, std::ostream* log) {
    const TrainConfig& cfg = checkpoint.config;
    auto pairs = prior_training_pairs(checkpoint, frames, setup.top_window);

    PriorConfig pc;
    pc.layers = setup.layers;
    pc.model_width = setup.model_width;
    pc.heads = setup.heads;
    pc.k_top = cfg.levels[0].codebook_size;
    pc.k_bottom = cfg.levels[1].codebook_size;
    pc.top_rows = pc.top_cols = setup.top_window;
    int64_t level_scale =
        int64_t{1} << (cfg.levels[0].downsample_stages - cfg.levels[1].downsample_stages);
    pc.bottom_rows = pc.bottom_cols = setup.top_window * level_scale;

    torch::manual_seed(setup.options.seed);
    TransformerPrior prior(pc);
    std::vector<double> curve = prior_train(prior, pairs, setup.options);
    if (log != nullptr && !curve.empty())
        *log << "prior cross-entropy " << curve.front() << " -> " << curve.back()
             << " nats/token over " << curve.size() << " steps (" << pairs.size() << " windows)\n";
    return PriorBundle{pc, prior};
}

}  // namespace emvq

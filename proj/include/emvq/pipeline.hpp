#ifndef EMVQ_PIPELINE_HPP
#define EMVQ_PIPELINE_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "emvq/pixeldata.hpp"
#include "emvq/prior.hpp"
#include "emvq/tokenstream.hpp"
#include "emvq/trainer.hpp"

namespace emvq {

// Tile-granular token codec for one quantizer level. Pixel tiles are
// 2^downsample_stages times the token grid in each axis.
struct TileCodec {
    virtual ~TileCodec() = default;
    virtual int64_t downsample_stages() const = 0;
    virtual int64_t codebook_size() const = 0;
    virtual const torch::Tensor& embeddings() const = 0;                  // (K, D)
    virtual torch::Tensor encode_tokens(const torch::Tensor& tile) = 0;   // (1,1,h,w) -> (h/s, w/s) i64
    virtual torch::Tensor decode_latent(const torch::Tensor& latent) = 0; // (1,D,r,c) -> (1,1,r*s,c*s)
};

// Codec over one level of a trained model.
class LevelCodec final : public TileCodec {
public:
    LevelCodec(VqvaeModel model, size_t level);
    int64_t downsample_stages() const override;
    int64_t codebook_size() const override;
    const torch::Tensor& embeddings() const override;
    torch::Tensor encode_tokens(const torch::Tensor& tile) override;
    torch::Tensor decode_latent(const torch::Tensor& latent) override;

private:
    VqvaeModel model_;
    size_t level_;
};

// Replicate-pads to a multiple of the downsampling factor and tokenizes with
// non-overlapping, edge-clamped token windows (later windows win on overlap).
torch::Tensor tokenize_grid(TileCodec& codec, const torch::Tensor& padded_values,
                            int64_t tile_size);

Container encode_frame_with(TileCodec& codec, const Frame& frame, int64_t tile_size,
                            bool checkerboard, const std::array<uint8_t, 32>& digest,
                            uint8_t extra_flags = 0);

// Token windows with 50% overlap, Hann-blended and cropped to the frame.
Frame decode_frame_with(TileCodec& codec, const Container& container, int64_t tile_size);

struct EncodeOptions {
    size_t level = 0;          // which quantizer level's tokens the container holds
    bool checkerboard = false;
    int64_t tile_size = 0;     // 0 = the checkpoint's training tile size
};

Container encode_frame(const Checkpoint& checkpoint, const Frame& frame,
                       const EncodeOptions& options = {});

enum class DecodeMode { kTopOnly, kPrior };

// kTopOnly decodes the stored grid through its direct decoder. kPrior
// requires a dense top grid plus a prior section: bottom tokens are sampled
// window by window, then both grids go through the fusion decoder.
Frame decode_container(const Checkpoint& checkpoint, const Container& container, DecodeMode mode,
                       const Sampling& sampling = {}, uint64_t seed = 0,
                       bool force_digest = false);

struct RatioPlanEntry {
    int64_t ratio = 0;
    size_t level = 0;
    bool checkerboard = false;
};

// 4^d_s per level, doubled by checkerboard; anything else is an error.
RatioPlanEntry resolve_ratio(const TrainConfig& cfg, int64_t ratio);

// CSV with one row per (frame, ratio); per-ratio dataset means go to `log`.
std::string evaluate(const Checkpoint& checkpoint, const std::vector<Frame>& frames,
                     const std::vector<std::string>& frame_ids, const std::vector<int64_t>& ratios,
                     std::ostream* log = nullptr);

// Same report from caller-provided reconstruction and code-usage callbacks.
std::string evaluate_with(const std::vector<Frame>& frames,
                          const std::vector<std::string>& frame_ids,
                          const std::vector<int64_t>& ratios,
                          const std::function<Frame(const Frame&, int64_t)>& reconstruct,
                          const std::function<std::pair<double, double>(const Frame&)>& code_usage,
                          std::ostream* log = nullptr);

struct PriorTrainSetup {
    int64_t top_window = 8;  // square window of top tokens per training sequence
    int64_t layers = 6;
    int64_t model_width = 256;
    int64_t heads = 8;
    PriorTrainOptions options;
};

// Window-aligned (top, bottom) token grid pairs from a frozen two-level model.
std::vector<std::pair<torch::Tensor, torch::Tensor>> prior_training_pairs(
    const Checkpoint& checkpoint, const std::vector<Frame>& frames, int64_t top_window);

PriorBundle train_checkpoint_prior(const Checkpoint& checkpoint, const std::vector<Frame>& frames,
                                   const PriorTrainSetup& setup, std::ostream* log = nullptr);

}  // namespace emvq

#endif

#ifndef EMVQ_TRAINER_HPP
#define EMVQ_TRAINER_HPP

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "emvq/autonets.hpp"
#include "emvq/objective.hpp"
#include "emvq/pixeldata.hpp"
#include "emvq/prior.hpp"
#include "emvq/quantizer.hpp"

namespace emvq {

// One quantizer level. Levels are listed coarsest first; the first level's
// grid sets the container's compression ratio.
struct LevelSpec {
    int64_t downsample_stages = 2;
    int64_t codebook_size = 256;
    double lambda_commit = 0.25;
};

struct TrainConfig {
    std::vector<LevelSpec> levels{LevelSpec{}};
    int64_t hidden_width = 128;
    int64_t embed_dim = 96;
    int64_t residual_blocks = 2;

    double learning_rate = 2e-4;
    double weight_decay = 1e-4;
    int64_t batch_size = 2;
    int64_t epochs = 100;
    int64_t max_steps = -1;  // optimizer-step cap across epochs, -1 = no cap
    int64_t tile_size = 128;
    double holdout_fraction = 0.1;
    double grad_clip = 1.0;
    // Weight of the per-level direct reconstructions trained alongside the
    // fused path, so a two-level checkpoint can also decode each level alone.
    double direct_weight = 1.0;

    LossWeights loss;
    double ema_decay = 0.99;
    double ema_smoothing = 1e-5;
    double dead_code_threshold = 1e-3;
    bool dead_code_restart = true;

    bool deterministic_mode = true;
    uint64_t seed = 0;
    int64_t fault_nan_step = -1;  // poisons the loss at this step (fault drill)
};

void validate_train_config(const TrainConfig& cfg);

// Canonical key=value text. Field order is fixed and doubles use shortest
// round-trip formatting, so serialize(parse(t)) == t for canonical t. This
// text is what the checkpoint digest covers.
std::string serialize_config(const TrainConfig& cfg);
TrainConfig parse_config(const std::string& text);

// key=value file; '#' starts a comment, blank lines ignored, unknown keys are
// an error. Values override the defaults.
TrainConfig load_config_file(const std::string& path);

struct VqvaeModelImpl : torch::nn::Module {
    explicit VqvaeModelImpl(const TrainConfig& cfg);

    // Per-level latents, coarsest first.
    std::vector<torch::Tensor> encode_latents(const torch::Tensor& frames);
    torch::Tensor decode_direct(size_t level, const torch::Tensor& quantized);
    torch::Tensor decode_fused(const torch::Tensor& top_quantized,
                               const torch::Tensor& bottom_quantized);

    EncoderConfig level_config(size_t level) const;

    TrainConfig config;
    std::vector<Encoder> encoders;
    std::vector<TopDecoder> decoders;
    FusionDecoder fusion{nullptr};
    std::vector<Codebook> codebooks;  // EMA state, not gradient parameters
};
TORCH_MODULE(VqvaeModel);

struct PriorBundle {
    PriorConfig config;
    TransformerPrior model{nullptr};
};

struct Checkpoint {
    TrainConfig config;
    VqvaeModel model{nullptr};
    std::array<uint8_t, 32> digest{};
    int64_t epoch = 0;
    int64_t steps = 0;
    std::string history_csv;
    std::optional<PriorBundle> prior;
};

// SHA-256 over the serialized config followed by the codebook payload. Binds
// containers to the checkpoint that must decode them.
std::array<uint8_t, 32> model_digest(const TrainConfig& cfg, const std::vector<Codebook>& codebooks);

// Single binary blob: magic "EMVC", version byte, then length-prefixed
// sections. A load followed by a save is byte-identical.
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Deterministic tiling and per-epoch order used by the trainer, exposed so a
// test can rebuild the exact first batch.
std::vector<torch::Tensor> tile_frames(const std::vector<Frame>& frames, int64_t tile_size);
std::vector<size_t> epoch_order(size_t count, uint64_t seed, int64_t epoch);

struct TrainResult {
    Checkpoint checkpoint;
    LossReport first_step;        // loss decomposition at step 0
    double first_step_objective = 0.0;  // includes auxiliary direct terms
    std::vector<double> epoch_train_loss;
};

// Tiles the frames, holds out the tail fraction, and runs AdamW over the
// straight-through objective with EMA codebook updates after each step. The
// checkpoint at `checkpoint_path` is rewritten at every epoch boundary; a
// non-finite loss aborts with NumericError and leaves the last good file.
TrainResult train(const TrainConfig& cfg, const std::vector<Frame>& frames,
                  const std::string& checkpoint_path, std::ostream* log = nullptr);

// Loads every .png/.tif/.tiff in the directory in filename order.
std::vector<Frame> load_frame_dir(const std::string& data_dir);

}  // namespace emvq

#endif

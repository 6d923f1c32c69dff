#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "emvq/errors.hpp"
#include "emvq/trainer.hpp"

#include "support/doctest_torch.hpp"

namespace fs = std::filesystem;
using namespace emvq;

namespace {

fs::path scratch_dir() {
    fs::path dir = fs::temp_directory_path() / "emvq_trainer_test";
    fs::create_directories(dir);
    return dir;
}

std::vector<uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
}

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.levels = {LevelSpec{2, 8, 0.25}};
    cfg.hidden_width = 8;
    cfg.embed_dim = 4;
    cfg.residual_blocks = 1;
    cfg.batch_size = 2;
    cfg.epochs = 1;
    cfg.max_steps = 1;
    cfg.tile_size = 16;
    cfg.holdout_fraction = 0.0;
    cfg.seed = 7;
    return cfg;
}

std::vector<Frame> tiny_frames(int count = 2, int64_t side = 32, uint32_t seed = 100) {
    std::vector<Frame> frames;
    for (int i = 0; i < count; ++i) {
        torch::manual_seed(seed + static_cast<uint32_t>(i));
        frames.push_back(make_frame(torch::rand({side, side}) - 0.5));
    }
    return frames;
}

}  // namespace

TEST_CASE("config text round trips through serialize and parse") {
    TrainConfig cfg;
    cfg.levels = {LevelSpec{3, 128, 0.5}, LevelSpec{1, 32, 0.125}};
    cfg.learning_rate = 2e-4;
    cfg.seed = 1234567890123ULL;
    cfg.deterministic_mode = false;
    cfg.max_steps = 250;

    std::string text = serialize_config(cfg);
    CHECK(text.find("level_count=2\n") != std::string::npos);
    CHECK(text.find("level0_downsample_stages=3\n") != std::string::npos);
    CHECK(text.find("level1_codebook_size=32\n") != std::string::npos);
    CHECK(text.find("learning_rate=2e-04\n") != std::string::npos);
    CHECK(text.find("seed=1234567890123\n") != std::string::npos);

    TrainConfig back = parse_config(text);
    CHECK(serialize_config(back) == text);
    CHECK(back.levels.size() == 2);
    CHECK(back.levels[1].lambda_commit == 0.125);
    CHECK(back.seed == cfg.seed);
    CHECK(back.deterministic_mode == false);
    CHECK(back.max_steps == 250);
}

TEST_CASE("config parser accepts comments and rejects junk") {
    TrainConfig cfg = parse_config("# header\n\n  tile_size = 64  # inline\nseed=9\n");
    CHECK(cfg.tile_size == 64);
    CHECK(cfg.seed == 9);
    CHECK(cfg.hidden_width == 128);  // untouched default

    CHECK_THROWS_AS(parse_config("no_such_key=1\n"), FormatError);
    CHECK_THROWS_AS(parse_config("tile_size=abc\n"), FormatError);
    CHECK_THROWS_AS(parse_config("tile_size\n"), FormatError);
    CHECK_THROWS_AS(parse_config("level2_unknown=1\n"), FormatError);
    CHECK_THROWS_AS(parse_config("deterministic_mode=maybe\n"), FormatError);
}

TEST_CASE("config files load with overrides applied") {
    auto path = scratch_dir() / "cfg.txt";
    std::ofstream(path) << "# tiny\nlevel_count=1\nlevel0_codebook_size=16\nhidden_width=8\n";
    TrainConfig cfg = load_config_file(path.string());
    CHECK(cfg.levels[0].codebook_size == 16);
    CHECK(cfg.hidden_width == 8);
    CHECK(cfg.embed_dim == 96);

    CHECK_THROWS_AS(load_config_file((scratch_dir() / "missing.txt").string()), FormatError);
}

TEST_CASE("config validation rejects inconsistent settings") {
    auto expect_bad = [](TrainConfig cfg) { CHECK_THROWS_AS(validate_train_config(cfg), FormatError); };

    TrainConfig cfg = tiny_config();
    validate_train_config(cfg);  // baseline passes

    cfg.levels.clear();
    expect_bad(cfg);

    cfg = tiny_config();
    cfg.levels = {LevelSpec{2, 8, 0.25}, LevelSpec{2, 8, 0.25}};  // not coarsest first
    expect_bad(cfg);

    cfg = tiny_config();
    cfg.levels = {LevelSpec{2, 8, 0.25}, LevelSpec{1, 8, 0.25}, LevelSpec{1, 8, 0.25}};
    expect_bad(cfg);

    cfg = tiny_config();
    cfg.levels[0].downsample_stages = 6;
    expect_bad(cfg);

    cfg = tiny_config();
    cfg.levels[0].codebook_size = 1;
    expect_bad(cfg);

    cfg = tiny_config();
    cfg.tile_size = 18;  // not divisible by 4
    expect_bad(cfg);

    cfg = tiny_config();
    cfg.holdout_fraction = 1.0;
    expect_bad(cfg);

    cfg = tiny_config();
    cfg.learning_rate = 0.0;
    expect_bad(cfg);

    cfg = tiny_config();
    cfg.ema_decay = 1.0;
    expect_bad(cfg);
}

TEST_CASE("epoch_order is a seeded permutation") {
    auto a = epoch_order(10, 5, 0);
    auto b = epoch_order(10, 5, 0);
    CHECK(a == b);

    auto c = epoch_order(10, 5, 1);
    CHECK(a != c);
    auto d = epoch_order(10, 6, 0);
    CHECK(a != d);

    std::vector<size_t> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 0; i < 10; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("tile_frames cuts frames into clamped tiles and pads small ones") {
    auto frames = tiny_frames(1, 64);
    auto tiles = tile_frames(frames, 32);
    CHECK(tiles.size() == 4);
    for (const auto& t : tiles) CHECK(t.sizes() == torch::IntArrayRef({1, 32, 32}));

    // 48 columns -> origins {0, 16}: clamped overlap, no padding
    std::vector<Frame> wide = {make_frame(torch::rand({64, 48}) - 0.5)};
    CHECK(tile_frames(wide, 32).size() == 4);

    // frame smaller than the tile is replicate-padded up
    std::vector<Frame> small = {make_frame(torch::rand({20, 20}) - 0.5)};
    auto padded = tile_frames(small, 32);
    REQUIRE(padded.size() == 1);
    CHECK(padded[0].sizes() == torch::IntArrayRef({1, 32, 32}));
    CHECK(torch::allclose(padded[0][0].slice(0, 0, 20).slice(1, 0, 20), small[0].values));
    // padding repeats the edge rows
    CHECK(torch::allclose(padded[0][0][25], padded[0][0][19]));
}

TEST_CASE("first training step reports the loss of the reconstructed forward pass") {
    TrainConfig cfg = tiny_config();
    auto frames = tiny_frames();
    auto path = (scratch_dir() / "wiring.emvc").string();

    TrainResult result = train(cfg, frames, path);

    // rebuild the exact model and first batch from the exposed pieces
    torch::manual_seed(cfg.seed);
    VqvaeModel replica(cfg);
    auto tiles = tile_frames(frames, cfg.tile_size);
    auto order = epoch_order(tiles.size(), cfg.seed, 0);
    torch::Tensor batch = torch::stack({tiles[order[0]], tiles[order[1]]});

    auto latents = replica->encode_latents(batch);
    auto q = quantize(latents[0], replica->codebooks[0]);
    torch::Tensor st = straight_through(latents[0], q.quantized);
    CommitmentTerms terms;
    terms.top = commitment_loss(latents[0], q.quantized);
    terms.lambda_top = cfg.levels[0].lambda_commit;
    auto [objective, report] = total_loss(batch, replica->decode_direct(0, st), cfg.loss, terms);

    CHECK(result.first_step.total == doctest::Approx(report.total).epsilon(1e-12));
    CHECK(result.first_step.rec_l1 == doctest::Approx(report.rec_l1).epsilon(1e-12));
    CHECK(result.first_step.ms_ssim_term == doctest::Approx(report.ms_ssim_term).epsilon(1e-12));
    CHECK(result.first_step.grad_l1 == doctest::Approx(report.grad_l1).epsilon(1e-12));
    CHECK(result.first_step.commitment_top == doctest::Approx(report.commitment_top).epsilon(1e-12));
    CHECK(result.first_step_objective == doctest::Approx(report.total).epsilon(1e-12));
}

TEST_CASE("two-level objective adds the weighted direct reconstructions") {
    TrainConfig cfg = tiny_config();
    cfg.levels = {LevelSpec{2, 8, 0.25}, LevelSpec{1, 8, 0.25}};
    cfg.direct_weight = 0.5;
    auto frames = tiny_frames();
    auto path = (scratch_dir() / "wiring2.emvc").string();

    TrainResult result = train(cfg, frames, path);

    torch::manual_seed(cfg.seed);
    VqvaeModel replica(cfg);
    auto tiles = tile_frames(frames, cfg.tile_size);
    auto order = epoch_order(tiles.size(), cfg.seed, 0);
    torch::Tensor batch = torch::stack({tiles[order[0]], tiles[order[1]]});

    auto latents = replica->encode_latents(batch);
    CommitmentTerms terms;
    std::vector<torch::Tensor> st;
    for (size_t l = 0; l < 2; ++l) {
        auto q = quantize(latents[l], replica->codebooks[l]);
        st.push_back(straight_through(latents[l], q.quantized));
        if (l == 0) {
            terms.top = commitment_loss(latents[l], q.quantized);
            terms.lambda_top = cfg.levels[0].lambda_commit;
        } else {
            terms.bottom = commitment_loss(latents[l], q.quantized);
            terms.lambda_bottom = cfg.levels[1].lambda_commit;
        }
    }
    auto [objective, report] = total_loss(batch, replica->decode_fused(st[0], st[1]), cfg.loss, terms);
    // composed in tensor arithmetic, matching the training objective exactly
    torch::Tensor aux = rec_loss(batch, replica->decode_direct(0, st[0]), cfg.loss) +
                        rec_loss(batch, replica->decode_direct(1, st[1]), cfg.loss);
    double expected = (objective + cfg.direct_weight * aux).item<double>();

    CHECK(result.first_step.total == doctest::Approx(report.total).epsilon(1e-12));
    CHECK(result.first_step_objective == doctest::Approx(expected).epsilon(1e-12));
    CHECK(result.first_step_objective > result.first_step.total);
}

TEST_CASE("training is reproducible end to end") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 2;
    cfg.max_steps = -1;
    auto frames = tiny_frames();

    auto p1 = scratch_dir() / "det1.emvc";
    auto p2 = scratch_dir() / "det2.emvc";
    TrainResult r1 = train(cfg, frames, p1.string());
    TrainResult r2 = train(cfg, frames, p2.string());

    REQUIRE(r1.epoch_train_loss.size() == 2);
    CHECK(r1.epoch_train_loss == r2.epoch_train_loss);
    CHECK(read_bytes(p1) == read_bytes(p2));
    CHECK(r1.checkpoint.history_csv == r2.checkpoint.history_csv);
}

TEST_CASE("checkpoints reload byte-identically") {
    TrainConfig cfg = tiny_config();
    auto frames = tiny_frames();
    auto p1 = scratch_dir() / "ck.emvc";
    TrainResult result = train(cfg, frames, p1.string());

    Checkpoint loaded = load_checkpoint(p1.string());
    CHECK(loaded.epoch == result.checkpoint.epoch);
    CHECK(loaded.steps == 1);
    CHECK(loaded.history_csv == result.checkpoint.history_csv);
    CHECK(serialize_config(loaded.config) == serialize_config(cfg));
    CHECK(loaded.digest == result.checkpoint.digest);
    CHECK_FALSE(loaded.prior.has_value());

    auto p2 = scratch_dir() / "ck_copy.emvc";
    save_checkpoint(loaded, p2.string());
    CHECK(read_bytes(p1) == read_bytes(p2));

    // the reloaded model computes the same function
    torch::NoGradGuard ng;
    torch::manual_seed(3);
    torch::Tensor tile = torch::rand({1, 1, 16, 16}) - 0.5;
    auto za = result.checkpoint.model->encode_latents(tile);
    auto zb = loaded.model->encode_latents(tile);
    CHECK(torch::equal(za[0], zb[0]));
    CHECK(torch::equal(result.checkpoint.model->decode_direct(0, za[0]),
                       loaded.model->decode_direct(0, zb[0])));
    CHECK(torch::equal(result.checkpoint.model->codebooks[0].embeddings,
                       loaded.model->codebooks[0].embeddings));
}

TEST_CASE("checkpoints carry an optional prior section") {
    TrainConfig cfg = tiny_config();
    cfg.levels = {LevelSpec{2, 8, 0.25}, LevelSpec{1, 8, 0.25}};
    auto frames = tiny_frames();
    auto p1 = scratch_dir() / "ckp.emvc";
    TrainResult result = train(cfg, frames, p1.string());

    PriorBundle bundle;
    bundle.config.layers = 1;
    bundle.config.model_width = 16;
    bundle.config.heads = 2;
    bundle.config.k_top = 8;
    bundle.config.k_bottom = 8;
    bundle.config.top_rows = 2;
    bundle.config.top_cols = 2;
    bundle.config.bottom_rows = 4;
    bundle.config.bottom_cols = 4;
    torch::manual_seed(11);
    bundle.model = TransformerPrior(bundle.config);

    Checkpoint ck = result.checkpoint;
    ck.prior = bundle;
    save_checkpoint(ck, p1.string());

    Checkpoint loaded = load_checkpoint(p1.string());
    REQUIRE(loaded.prior.has_value());
    CHECK(loaded.prior->config.model_width == 16);
    CHECK(loaded.prior->config.bottom_cols == 4);

    torch::NoGradGuard ng;
    torch::Tensor top = torch::zeros({2, 2}, torch::kInt64);
    Sampling greedy;
    CHECK(torch::equal(prior_sample(bundle.model, top, greedy),
                       prior_sample(loaded.prior->model, top, greedy)));

    auto p2 = scratch_dir() / "ckp_copy.emvc";
    save_checkpoint(loaded, p2.string());
    CHECK(read_bytes(p1) == read_bytes(p2));
}

TEST_CASE("digest binds the config and codebooks") {
    TrainConfig cfg = tiny_config();
    torch::manual_seed(1);
    VqvaeModel model(cfg);

    auto d1 = model_digest(cfg, model->codebooks);
    auto d2 = model_digest(cfg, model->codebooks);
    CHECK(d1 == d2);

    TrainConfig other = cfg;
    other.seed = 8;
    CHECK(model_digest(other, model->codebooks) != d1);

    model->codebooks[0].embeddings[0][0] += 1.0f;
    CHECK(model_digest(cfg, model->codebooks) != d1);
}

TEST_CASE("corrupted checkpoints are refused") {
    TrainConfig cfg = tiny_config();
    auto frames = tiny_frames();
    auto path = scratch_dir() / "corrupt.emvc";
    train(cfg, frames, path.string());

    auto bytes = read_bytes(path);
    // flip one byte inside the codebook section; the stored digest must catch it
    std::string blob(bytes.begin(), bytes.end());
    size_t code = blob.find("CODE");
    REQUIRE(code != std::string::npos);
    bytes[code + 20] ^= 0xff;
    auto bad = scratch_dir() / "corrupt_bad.emvc";
    std::ofstream(bad, std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(bad.string()), FormatError);

    // truncation
    auto trunc = scratch_dir() / "trunc.emvc";
    std::ofstream(trunc, std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), 40);
    CHECK_THROWS_AS(load_checkpoint(trunc.string()), FormatError);

    CHECK_THROWS_AS(load_checkpoint((scratch_dir() / "missing.emvc").string()), FormatError);
}

TEST_CASE("a poisoned loss aborts and keeps the last good checkpoint") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 2;
    cfg.max_steps = -1;
    cfg.fault_nan_step = 1;
    auto frames = tiny_frames();
    auto path = scratch_dir() / "fault.emvc";

    CHECK_THROWS_AS(train(cfg, frames, path.string()), NumericError);
    Checkpoint kept = load_checkpoint(path.string());
    CHECK(kept.epoch == 0);  // only the pre-training snapshot was written
    CHECK(kept.steps == 0);
}

TEST_CASE("max_steps caps the optimizer steps across epochs") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 5;
    cfg.max_steps = 3;
    auto frames = tiny_frames();
    auto path = scratch_dir() / "cap.emvc";
    TrainResult result = train(cfg, frames, path.string());
    CHECK(result.checkpoint.steps == 3);
}

TEST_CASE("history records one row per epoch with holdout metrics") {
    TrainConfig cfg = tiny_config();
    cfg.levels = {LevelSpec{2, 8, 0.25}, LevelSpec{1, 8, 0.25}};
    cfg.epochs = 2;
    cfg.max_steps = -1;
    cfg.holdout_fraction = 0.3;  // 8 tiles -> 2 held out
    auto frames = tiny_frames();
    auto path = scratch_dir() / "hist.emvc";
    TrainResult result = train(cfg, frames, path.string());

    std::istringstream csv(result.checkpoint.history_csv);
    std::string line;
    std::getline(csv, line);
    CHECK(line ==
          "epoch,steps,train_total,rec_l1,ms_ssim_term,grad_l1,commit_top,commit_bottom,"
          "perplexity_top,perplexity_bottom,val_total,val_ssim");
    int rows = 0;
    while (std::getline(csv, line)) {
        if (!line.empty()) ++rows;
        CHECK(line.find("nan") == std::string::npos);  // holdout columns populated
    }
    CHECK(rows == 2);
}

TEST_CASE("collapsing codebooks emit a perplexity warning") {
    TrainConfig cfg = tiny_config();
    cfg.levels = {LevelSpec{2, 32, 0.25}};
    cfg.epochs = 1;
    cfg.max_steps = -1;
    cfg.dead_code_restart = false;
    // constant frames force every latent onto one code
    std::vector<Frame> flat = {make_frame(torch::zeros({32, 32}))};
    std::ostringstream log;
    train(cfg, flat, (scratch_dir() / "warn.emvc").string(), &log);
    CHECK(log.str().find("warning") != std::string::npos);
    CHECK(log.str().find("perplexity") != std::string::npos);
}

TEST_CASE("frame directories load in name order with foreign files ignored") {
    fs::path dir = scratch_dir() / "frames";
    fs::create_directories(dir);
    for (const auto& entry : fs::directory_iterator(dir)) fs::remove(entry);

    torch::manual_seed(9);
    Frame a = make_frame(torch::rand({8, 8}) - 0.5);
    Frame b = make_frame(torch::rand({12, 8}) - 0.5);
    save_grayscale_png(b, (dir / "b_second.png").string());
    save_grayscale_png(a, (dir / "a_first.png").string());
    std::ofstream(dir / "notes.txt") << "not an image";

    auto frames = load_frame_dir(dir.string());
    REQUIRE(frames.size() == 2);
    CHECK(frames[0].height == 8);
    CHECK(frames[1].height == 12);

    CHECK_THROWS_AS(load_frame_dir((scratch_dir() / "no_dir").string()), FormatError);
    fs::path empty = scratch_dir() / "empty";
    fs::create_directories(empty);
    CHECK_THROWS_AS(load_frame_dir(empty.string()), FormatError);
}

TEST_CASE("training rejects an empty dataset") {
    CHECK_THROWS_AS(train(tiny_config(), {}, (scratch_dir() / "none.emvc").string()), FormatError);
}

// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit when any
// criterion fails. argv[1] is the CLI binary for the end-to-end smoke run;
// argv[2] optionally filters criteria by substring.
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "emvq/errors.hpp"
#include "emvq/objective.hpp"
#include "emvq/pipeline.hpp"
#include "emvq/pixeldata.hpp"
#include "emvq/prior.hpp"
#include "emvq/quantizer.hpp"
#include "emvq/synth.hpp"
#include "emvq/tokenstream.hpp"
#include "emvq/trainer.hpp"
#include "support/reference_metrics.hpp"

namespace fs = std::filesystem;
using namespace emvq;
using Clock = std::chrono::steady_clock;

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw std::runtime_error(what);
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path work_dir() {
    fs::path dir = fs::temp_directory_path() / "emvq_acceptance";
    fs::create_directories(dir);
    return dir;
}

torch::Tensor image4(const torch::Tensor& plane) { return plane.unsqueeze(0).unsqueeze(0); }

double token_histogram_perplexity(const std::vector<int32_t>& tokens, int64_t k) {
    torch::Tensor hist = torch::zeros({k}, torch::kFloat64);
    auto acc = hist.accessor<double, 1>();
    for (int32_t t : tokens) acc[t] += 1.0;
    return perplexity(hist);
}

// ---------- criterion 1: container format round trip ----------

void criterion_container_round_trip() {
    const Clock::time_point t0 = Clock::now();
    std::mt19937_64 rng(101);
    const int64_t codebook_sizes[] = {16, 64, 256};

    for (int i = 0; i < 1000; ++i) {
        ContainerHeader hd;
        hd.version = 1;
        bool checker = (rng() & 1) != 0;
        bool hint = (rng() & 1) != 0;
        hd.flags = static_cast<uint8_t>((checker ? kFlagCheckerboard : 0) |
                                        (hint ? kFlagTwoLevelDecodeHint : 0));
        hd.ds = static_cast<uint8_t>(2 + rng() % 4);
        hd.codebook_size = static_cast<uint16_t>(codebook_sizes[rng() % 3]);
        hd.embed_dim = static_cast<uint16_t>(1 + rng() % 256);
        int64_t rows = 1 + static_cast<int64_t>(rng() % 64);
        int64_t cols = 1 + static_cast<int64_t>(rng() % 64);
        hd.grid_rows = static_cast<uint32_t>(rows);
        hd.grid_cols = static_cast<uint32_t>(cols);
        hd.frame_height = static_cast<uint32_t>(rows << hd.ds);
        hd.frame_width = static_cast<uint32_t>(cols << hd.ds);
        for (auto& b : hd.model_digest) b = static_cast<uint8_t>(rng());
        int64_t cells = rows * cols;
        int64_t count = checker ? (cells + 1) / 2 : cells;
        hd.token_count = static_cast<uint32_t>(count);

        std::vector<int32_t> tokens(static_cast<size_t>(count));
        for (auto& t : tokens) t = static_cast<int32_t>(rng() % hd.codebook_size);

        std::vector<RoiRecord> rois(rng() % 3);
        for (auto& r : rois) {
            r.x = static_cast<uint32_t>(rng() % 4096);
            r.y = static_cast<uint32_t>(rng() % 4096);
            r.height = 1 + static_cast<uint32_t>(rng() % 64);
            r.width = 1 + static_cast<uint32_t>(rng() % 64);
            r.encoding = static_cast<RoiEncoding>(rng() % 3);
            r.payload.resize(rng() % 40);
            for (auto& b : r.payload) b = static_cast<uint8_t>(rng());
        }

        std::vector<uint8_t> bytes = pack_container(hd, tokens, rois);
        Container back = parse_container(bytes);

        uint8_t expect_flags = static_cast<uint8_t>(hd.flags | (rois.empty() ? 0 : kFlagHasRoi));
        require(back.header.flags == expect_flags, "flags changed in round trip");
        require(back.header.ds == hd.ds && back.header.codebook_size == hd.codebook_size &&
                    back.header.embed_dim == hd.embed_dim &&
                    back.header.frame_height == hd.frame_height &&
                    back.header.frame_width == hd.frame_width &&
                    back.header.grid_rows == hd.grid_rows &&
                    back.header.grid_cols == hd.grid_cols &&
                    back.header.token_count == hd.token_count &&
                    back.header.model_digest == hd.model_digest,
                "header changed in round trip");
        require(back.tokens == tokens, "tokens changed in round trip");
        require(back.rois.size() == rois.size(), "roi count changed in round trip");
        for (size_t r = 0; r < rois.size(); ++r) {
            require(back.rois[r].x == rois[r].x && back.rois[r].y == rois[r].y &&
                        back.rois[r].height == rois[r].height &&
                        back.rois[r].width == rois[r].width &&
                        back.rois[r].encoding == rois[r].encoding &&
                        back.rois[r].payload == rois[r].payload,
                    "roi record changed in round trip");
        }
        require(pack_container(back.header, back.tokens, back.rois) == bytes,
                "repack is not byte-identical");
    }
    double elapsed = seconds_since(t0);
    require(elapsed < 30.0, "1000 round trips took " + std::to_string(elapsed) + " s");
}

// ---------- criterion 2: nominal ratio table ----------

void criterion_ratio_table() {
    for (int ds = 2; ds <= 5; ++ds) {
        int64_t grid = 1024 >> ds;
        ContainerHeader hd;
        hd.ds = static_cast<uint8_t>(ds);
        hd.codebook_size = 256;
        hd.frame_height = hd.frame_width = 1024;
        hd.grid_rows = hd.grid_cols = static_cast<uint32_t>(grid);
        hd.token_count = static_cast<uint32_t>(grid * grid);

        double base = static_cast<double>((int64_t{1} << ds) * (int64_t{1} << ds));
        RatioReport rep = ratio_report(hd, 1024 * 1024, 1);
        require(rep.nominal_ratio == base,
                "d_s=" + std::to_string(ds) + " nominal is " + std::to_string(rep.nominal_ratio));

        hd.flags = kFlagCheckerboard;
        hd.token_count = static_cast<uint32_t>(grid * grid / 2);
        RatioReport half = ratio_report(hd, 1024 * 1024, 1);
        require(half.nominal_ratio == 2.0 * base, "checkerboard does not double the ratio");
    }
}

// ---------- criterion 3: quantizer oracle and EMA convergence ----------

std::vector<int64_t> exhaustive_assign(const torch::Tensor& flat, const torch::Tensor& emb) {
    auto z = flat.to(torch::kFloat64);
    auto e = emb.to(torch::kFloat64);
    std::vector<int64_t> out;
    for (int64_t n = 0; n < z.size(0); ++n) {
        double best = 0.0;
        int64_t arg = 0;
        for (int64_t j = 0; j < e.size(0); ++j) {
            double d = (z[n] - e[j]).pow(2).sum().item<double>();
            if (j == 0 || d < best) {
                best = d;
                arg = j;
            }
        }
        out.push_back(arg);
    }
    return out;
}

void criterion_quantizer_oracle() {
    std::mt19937_64 rng(303);
    for (int trial = 0; trial < 200; ++trial) {
        int64_t k = 2 + static_cast<int64_t>(rng() % 15);
        int64_t d = 1 + static_cast<int64_t>(rng() % 4);
        int64_t n = 1 + static_cast<int64_t>(rng() % 32);
        torch::manual_seed(9000 + static_cast<uint64_t>(trial));

        Codebook cb = make_codebook(k, d);
        torch::Tensor z = torch::randn({n, d});
        if (trial % 3 == 0 && k >= 2) {
            // duplicated codebook rows force distance ties on every input
            cb.embeddings[1] = cb.embeddings[0];
            z[0] = cb.embeddings[0];
        }

        torch::Tensor fmap = z.t().reshape({1, d, n, 1}).contiguous();
        QuantResult q = quantize(fmap, cb);
        torch::Tensor got = q.indices.reshape({-1});
        std::vector<int64_t> want = exhaustive_assign(z, cb.embeddings);
        for (int64_t i = 0; i < n; ++i)
            require(got[i].item<int64_t>() == want[static_cast<size_t>(i)],
                    "assignment mismatch at trial " + std::to_string(trial));
    }

    // two tight clusters; EMA embeddings must land on the cluster means
    torch::Tensor points = torch::tensor({{-1.05f, -0.95f, -1.0f},
                                          {-0.95f, -1.05f, -1.0f},
                                          {-1.0f, -1.0f, -0.9f},
                                          {-1.0f, -1.0f, -1.1f},
                                          {1.05f, 0.95f, 1.0f},
                                          {0.95f, 1.05f, 1.0f},
                                          {1.0f, 1.0f, 0.9f},
                                          {1.0f, 1.0f, 1.1f}});
    torch::manual_seed(310);
    Codebook cb = make_codebook(2, 3);
    cb.embeddings = torch::tensor({{-0.9f, -0.9f, -0.9f}, {0.9f, 0.9f, 0.9f}});
    cb.ema_sums = cb.embeddings.to(torch::kFloat64).clone();
    cb.ema_counts = torch::ones({2}, torch::kFloat64);

    torch::Tensor fmap = points.t().reshape({1, 3, 8, 1}).contiguous();
    for (int step = 0; step < 500; ++step) {
        QuantResult q = quantize(fmap, cb);
        ema_update(cb, fmap, q.indices);
    }
    torch::Tensor means = torch::stack({points.slice(0, 0, 4).mean(0), points.slice(0, 4, 8).mean(0)});
    double err = (cb.embeddings - means).abs().max().item<double>();
    require(err < 1e-2, "EMA embeddings off the cluster means by " + std::to_string(err));
}

// ---------- criterion 4: straight-through jacobian ----------

void criterion_straight_through() {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        torch::manual_seed(seed);
        Codebook cb = make_codebook(6, 3);
        torch::Tensor z = torch::randn({1, 3, 2, 2}).requires_grad_(true);
        torch::Tensor v = torch::randn({1, 3, 2, 2});

        QuantResult q = quantize(z.detach(), cb);
        torch::Tensor out = straight_through(z, q.quantized);
        (out * v).sum().backward();
        torch::Tensor grad = z.grad();
        require(torch::equal(grad, v), "straight-through gradient is not the identity");

        // finite differences on the surrogate z' -> z' + (q - z), in float64
        torch::Tensor residual = (q.quantized - z.detach()).to(torch::kFloat64).reshape({-1});
        torch::Tensor v64 = v.to(torch::kFloat64).reshape({-1});
        torch::Tensor flat = z.detach().to(torch::kFloat64).reshape({-1});
        const double eps = 1e-3;
        for (int64_t i = 0; i < flat.numel(); ++i) {
            torch::Tensor plus = flat.clone();
            torch::Tensor minus = flat.clone();
            plus[i] += eps;
            minus[i] -= eps;
            double fd = (((plus + residual) * v64).sum().item<double>() -
                         ((minus + residual) * v64).sum().item<double>()) /
                        (2 * eps);
            double an = grad.reshape({-1})[i].item<double>();
            double rel = std::abs(fd - an) / std::max(std::abs(an), 1e-8);
            require(rel < 1e-5, "finite difference off by rel " + std::to_string(rel));
        }
    }
}

// ---------- criterion 5: metric reference oracles ----------

void criterion_metric_oracles() {
    for (int i = 0; i < 10; ++i) {
        torch::manual_seed(500 + static_cast<uint64_t>(i));
        torch::Tensor x = torch::rand({64, 64}) - 0.5;
        torch::Tensor y = (i % 2 == 0)
                              ? torch::rand({64, 64}) - 0.5
                              : (x + 0.05 * torch::randn({64, 64})).clamp(-0.5, 0.5);
        double got = ssim(image4(x), image4(y)).item<double>();
        double want = refmetrics::ref_ssim(x, y);
        require(std::abs(got - want) < 1e-4,
                "ssim differs from the reference by " + std::to_string(std::abs(got - want)));

        torch::Tensor bx = torch::rand({192, 192}) - 0.5;
        torch::Tensor by = (i % 2 == 0)
                               ? torch::rand({192, 192}) - 0.5
                               : (bx + 0.05 * torch::randn({192, 192})).clamp(-0.5, 0.5);
        double mgot = ms_ssim(image4(bx), image4(by)).item<double>();
        double mwant = refmetrics::ref_ms_ssim(bx, by);
        require(std::abs(mgot - mwant) < 1e-4,
                "ms_ssim differs from the reference by " + std::to_string(std::abs(mgot - mwant)));
    }

    torch::manual_seed(510);
    torch::Tensor x = torch::rand({128, 128}) - 0.5;
    require(std::abs(ms_ssim(image4(x), image4(x)).item<double>() - 1.0) < 1e-12,
            "ms_ssim of identical frames is not 1");
    require(std::isinf(psnr(image4(x), image4(x))), "psnr of identical frames is not infinite");
    torch::Tensor zero = torch::zeros({16, 16}, torch::kFloat64);
    torch::Tensor shifted = torch::full({16, 16}, 0.1, torch::kFloat64);
    require(std::abs(psnr(image4(zero), image4(shifted)) - 20.0) < 1e-9,
            "psnr at mse 0.01 is not 20 dB");
}

// ---------- criterion 6: loss decomposition and gradients ----------

void criterion_loss_decomposition() {
    LossWeights w;
    w.alpha = 0.7;
    w.beta_ms = 0.4;
    w.gamma_grad = 0.2;

    for (int i = 0; i < 5; ++i) {
        torch::manual_seed(600 + static_cast<uint64_t>(i));
        torch::Tensor x = image4(torch::rand({32, 32}) - 0.5);
        torch::Tensor y = image4(torch::rand({32, 32}) - 0.5);

        CommitmentTerms terms;
        terms.top = torch::full({}, 0.03f);
        terms.lambda_top = 0.3;
        terms.bottom = torch::full({}, 0.01f);
        terms.lambda_bottom = 0.5;

        auto [t, report] = total_loss(x, y, w, terms);
        double recomputed = w.alpha * (x - y).abs().mean().item<double>() +
                            w.beta_ms * (1.0 - ms_ssim(x, y).item<double>()) +
                            w.gamma_grad * grad_l1(x, y).item<double>() + 0.3 * 0.03 + 0.5 * 0.01;
        require(std::abs(t.item<double>() - recomputed) < 1e-6,
                "total loss differs from the recomputed sum by " +
                    std::to_string(std::abs(t.item<double>() - recomputed)));
        require(report.total == t.item<double>(), "report total differs from the tensor");
    }

    // finite differences through the reconstruction loss at 16x16
    torch::manual_seed(610);
    torch::Tensor x = image4(torch::rand({16, 16}, torch::kFloat64) - 0.5);
    torch::Tensor y =
        image4((torch::rand({16, 16}, torch::kFloat64) - 0.5) * 0.8).requires_grad_(true);
    rec_loss(x, y, w).backward();
    torch::Tensor grad = y.grad().reshape({-1});

    torch::Tensor flat = y.detach().reshape({-1});
    const double eps = 1e-6;
    for (int64_t i = 0; i < flat.numel(); ++i) {
        torch::Tensor plus = flat.clone();
        torch::Tensor minus = flat.clone();
        plus[i] += eps;
        minus[i] -= eps;
        double lp = rec_loss(x, plus.reshape({1, 1, 16, 16}), w).item<double>();
        double lm = rec_loss(x, minus.reshape({1, 1, 16, 16}), w).item<double>();
        double fd = (lp - lm) / (2 * eps);
        double an = grad[i].item<double>();
        double rel = std::abs(fd - an) / std::max(std::abs(an), 1e-3);
        require(rel < 1e-4, "rec_loss gradient off by rel " + std::to_string(rel));
    }
}

// ---------- criterion 7: overlap-add exactness ----------

void criterion_overlap_add() {
    torch::manual_seed(700);
    torch::Tensor full = torch::rand({75, 90}) - 0.5;
    TilePlan plan = plan_tiles(75, 90, 16, 8);
    std::vector<std::pair<std::pair<int64_t, int64_t>, torch::Tensor>> tiles;
    for (const auto& [r, c] : plan.origins)
        tiles.emplace_back(std::make_pair(r, c),
                           full.slice(0, r, r + 16).slice(1, c, c + 16).clone());

    BlendWindow window = make_hann_window(16);
    Frame rec = overlap_add(tiles, 75, 90, window);
    double err = (rec.values - full).abs().max().item<double>();
    require(err < 1e-6, "agreeing tiles reconstruct with error " + std::to_string(err));

    std::mt19937_64 rng(701);
    std::shuffle(tiles.begin(), tiles.end(), rng);
    Frame rec2 = overlap_add(tiles, 75, 90, window);
    require((rec2.values - full).abs().max().item<double>() < 1e-6,
            "shuffled tiles reconstruct differently");
    require((rec2.values - rec.values).abs().max().item<double>() < 1e-6,
            "tile order changes the reconstruction");
}

// ---------- criterion 8: desk-scale overfit ----------

void criterion_overfit() {
    const Clock::time_point t0 = Clock::now();
    TrainConfig cfg;
    cfg.levels = {LevelSpec{2, 256, 0.25}};
    cfg.hidden_width = 64;
    cfg.batch_size = 2;
    cfg.epochs = 1000;
    cfg.max_steps = 2000;
    cfg.tile_size = 128;
    cfg.holdout_fraction = 0.0;
    cfg.seed = 1;

    std::vector<Frame> frames = {synth_frame(256, 1)};
    TrainResult result = train(cfg, frames, (work_dir() / "overfit.emvc").string());

    Container container = encode_frame(result.checkpoint, frames[0], {});
    Frame rec = decode_container(result.checkpoint, container, DecodeMode::kTopOnly);
    double s = ssim(image4(frames[0].values), image4(rec.values)).item<double>();
    double perp = token_histogram_perplexity(container.tokens, 256);
    double elapsed = seconds_since(t0);

    require(s >= 0.90, "overfit reconstruction ssim " + std::to_string(s) + " < 0.90");
    require(perp >= 4.0, "codebook perplexity " + std::to_string(perp) + " < 4");
    require(elapsed <= 3600.0, "overfit run took " + std::to_string(elapsed) + " s");
}

// ---------- criterion 9: prior memorization and causal masking ----------

void criterion_prior_memorization() {
    PriorConfig pc;
    pc.layers = 2;
    pc.model_width = 64;
    pc.heads = 4;
    pc.k_top = 8;
    pc.k_bottom = 8;
    pc.top_rows = pc.top_cols = 4;
    pc.bottom_rows = pc.bottom_cols = 8;

    torch::manual_seed(900);
    torch::Tensor top = torch::randint(0, 8, {4, 4}, torch::kInt64);
    torch::Tensor bottom = torch::randint(0, 8, {8, 8}, torch::kInt64);

    TransformerPrior prior(pc);
    PriorTrainOptions opt;
    opt.steps = 300;
    opt.batch_size = 1;
    opt.learning_rate = 1e-3;
    opt.seed = 900;
    std::vector<double> curve = prior_train(prior, {{top, bottom}}, opt);
    require(curve.back() < 0.1,
            "cross-entropy " + std::to_string(curve.back()) + " nats/token after 300 steps");

    torch::NoGradGuard guard;
    prior->eval();
    Sampling greedy;
    torch::Tensor sampled = prior_sample(prior, top, greedy);
    require(torch::equal(sampled, bottom), "greedy sampling does not reproduce the grid");

    // bit-exact causality: perturbing a later bottom token must leave every
    // earlier prediction untouched
    torch::Tensor seq = build_sequence(pc, top, bottom);
    torch::Tensor logits = prior->bottom_logits(seq);
    const int64_t j = 40;
    torch::Tensor perturbed = seq.clone();
    int64_t pos = 1 + pc.top_len() + 1 + j;
    int64_t old_id = perturbed[0][pos].item<int64_t>();
    perturbed[0][pos] = (old_id - pc.k_top + 1) % pc.k_bottom + pc.k_top;
    torch::Tensor logits2 = prior->bottom_logits(perturbed);
    require(torch::equal(logits.slice(1, 0, j + 1), logits2.slice(1, 0, j + 1)),
            "future tokens leak into earlier predictions");
    require(!torch::allclose(logits.slice(1, j + 1), logits2.slice(1, j + 1)),
            "perturbation did not reach later predictions");
}

// ---------- criterion 10: token budget invariance ----------

void criterion_token_budget() {
    TrainConfig cfg;
    cfg.levels = {LevelSpec{2, 8, 0.25}, LevelSpec{1, 8, 0.25}};
    cfg.hidden_width = 8;
    cfg.embed_dim = 4;
    cfg.residual_blocks = 1;
    cfg.batch_size = 2;
    cfg.epochs = 1;
    cfg.max_steps = 2;
    cfg.tile_size = 16;
    cfg.holdout_fraction = 0.0;
    cfg.seed = 10;

    std::vector<Frame> frames = {synth_frame(64, 2)};
    TrainResult result = train(cfg, frames, (work_dir() / "budget.emvc").string());
    Checkpoint ck = result.checkpoint;

    Frame frame = synth_frame(64, 3);
    Container before = encode_frame(ck, frame, {});
    std::vector<uint8_t> bytes_before = pack_container(before.header, before.tokens);

    PriorTrainSetup setup;
    setup.top_window = 4;
    setup.layers = 1;
    setup.model_width = 16;
    setup.heads = 2;
    setup.options.steps = 2;
    setup.options.batch_size = 2;
    ck.prior = train_checkpoint_prior(ck, frames, setup);

    Container after = encode_frame(ck, frame, {});
    std::vector<uint8_t> bytes_after = pack_container(after.header, after.tokens);
    require(bytes_before == bytes_after,
            "attaching a prior changed the encoded container bytes");

    // the same container feeds both decode modes
    Frame top_only = decode_container(ck, after, DecodeMode::kTopOnly);
    Frame with_prior = decode_container(ck, after, DecodeMode::kPrior);
    require(top_only.height == frame.height && with_prior.height == frame.height &&
                top_only.width == frame.width && with_prior.width == frame.width,
            "decode modes disagree on the frame size");
}

// ---------- criterion 11: CLI smoke and exit codes ----------

struct CliRunner {
    std::string binary;
    std::string log;

    int run(const std::string& args) const {
        std::string cmd = binary + " " + args + " >> " + log + " 2>&1";
        int status = std::system(cmd.c_str());
        require(WIFEXITED(status), "CLI did not exit normally: " + args);
        return WEXITSTATUS(status);
    }
};

void criterion_cli_smoke(const std::string& cli) {
    require(!cli.empty(), "no CLI binary path on the command line");
    fs::path ws = work_dir() / "cli";
    fs::create_directories(ws);
    CliRunner sh{cli, (ws / "cli.log").string()};

    std::string data = (ws / "data").string();
    require(sh.run("synth " + data + " --frames 1 --size 256 --seed 3") == 0, "synth failed");
    std::string frame = data + "/frame_0000.png";

    std::string config = (ws / "train.cfg").string();
    std::ofstream(config) << "level_count=2\n"
                             "level0_downsample_stages=2\nlevel0_codebook_size=64\n"
                             "level1_downsample_stages=1\nlevel1_codebook_size=64\n"
                             "hidden_width=48\ntile_size=64\nholdout_fraction=0\n"
                             "epochs=1000\nmax_steps=1200\nseed=3\n";
    std::string ck = (ws / "model.emvc").string();
    require(sh.run("train " + data + " " + ck + " --config " + config) == 0, "train failed");

    std::string ck_prior = (ws / "model_prior.emvc").string();
    require(sh.run("prior-train " + ck + " " + data + " " + ck_prior +
                   " --steps 120 --batch 4 --top-window 8 --layers 2 --width 128 --heads 4") == 0,
            "prior-train failed");

    std::string container = (ws / "frame.emvq").string();
    require(sh.run("encode " + frame + " " + ck_prior + " " + container) == 0, "encode failed");
    require(sh.run("decode " + container + " " + ck_prior + " " + (ws / "rec_top.png").string()) == 0,
            "top-only decode failed");
    require(sh.run("decode " + container + " " + ck_prior + " " + (ws / "rec_prior.png").string() +
                   " --mode prior") == 0,
            "prior decode failed");
    require(sh.run("info " + container) == 0, "info failed");

    std::string csv_path = (ws / "eval.csv").string();
    require(sh.run("eval " + ck_prior + " " + data + " " + csv_path + " --ratios 16") == 0,
            "eval failed");
    std::ifstream csv(csv_path);
    std::string line;
    std::getline(csv, line);  // header
    require(std::getline(csv, line).good(), "eval CSV has no data row");
    std::istringstream fields(line);
    std::vector<std::string> cols;
    std::string field;
    while (std::getline(fields, field, ',')) cols.push_back(field);
    require(cols.size() == 7, "eval CSV row has " + std::to_string(cols.size()) + " columns");
    double s = std::stod(cols[3]);
    require(s >= 0.85, "eval ssim " + std::to_string(s) + " < 0.85 on the training frame");

    // exit-code contract: 1 usage, 2 data, 3 numerical
    require(sh.run("no-such-command") == 1, "unknown subcommand should exit 1");
    require(sh.run("train " + (ws / "missing").string() + " " + (ws / "x.emvc").string()) == 1,
            "missing data dir should exit 1");

    std::string truncated = (ws / "short.emvq").string();
    std::ofstream(truncated, std::ios::binary) << "EMVQ\x01short";
    require(sh.run("decode " + truncated + " " + ck_prior + " " + (ws / "x.png").string()) == 2,
            "truncated container should exit 2");

    std::ifstream in(container, std::ios::binary);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes[30] ^= 0xff;  // inside the header digest field
    std::string mismatched = (ws / "tampered.emvq").string();
    std::ofstream(mismatched, std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(sh.run("decode " + mismatched + " " + ck_prior + " " + (ws / "x.png").string()) == 2,
            "digest mismatch should exit 2");
    require(sh.run("decode " + mismatched + " " + ck_prior + " " + (ws / "x.png").string() +
                   " --force-digest") == 0,
            "forced decode should exit 0");

    std::string faulted = (ws / "faulted.emvc").string();
    require(sh.run("train " + data + " " + faulted + " --config " + config +
                   " --max-steps 5 --fault-nan-step 0") == 3,
            "poisoned loss should exit 3");
    require(fs::exists(faulted), "faulted run left no checkpoint behind");
    Checkpoint kept = load_checkpoint(faulted);
    require(kept.steps == 0, "kept checkpoint is not the pre-training snapshot");
}

}  // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "";
    const std::string filter = argc > 2 ? argv[2] : "";
    at::set_num_threads(1);

    struct Criterion {
        const char* name;
        std::function<void()> body;
    };
    const std::vector<Criterion> criteria = {
        {"container format round trip", criterion_container_round_trip},
        {"nominal ratio table", criterion_ratio_table},
        {"quantizer oracle and EMA convergence", criterion_quantizer_oracle},
        {"straight-through jacobian", criterion_straight_through},
        {"metric reference oracles", criterion_metric_oracles},
        {"loss decomposition and gradients", criterion_loss_decomposition},
        {"overlap-add exactness", criterion_overlap_add},
        {"desk-scale overfit", criterion_overfit},
        {"prior memorization and causal masking", criterion_prior_memorization},
        {"token budget invariance", criterion_token_budget},
        {"cli smoke and exit codes", [&] { criterion_cli_smoke(cli); }},
    };

    int failed = 0;
    for (const Criterion& criterion : criteria) {
        if (!filter.empty() && std::string(criterion.name).find(filter) == std::string::npos)
            continue;
        try {
            criterion.body();
            std::printf("PASS - %s\n", criterion.name);
        } catch (const std::exception& e) {
            std::printf("FAIL - %s: %s\n", criterion.name, e.what());
            ++failed;
        }
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}

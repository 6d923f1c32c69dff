#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "emvq/errors.hpp"
#include "emvq/pipeline.hpp"
#include "emvq/synth.hpp"
#include "emvq/tokenstream.hpp"
#include "emvq/trainer.hpp"

namespace fs = std::filesystem;
using namespace emvq;

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + path);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path);
    out << text;
}

int usage_error(const std::string& message) {
    std::cerr << "usage error: " << message << "\n";
    return 1;
}

std::string hex_digest(const std::array<uint8_t, 32>& digest) {
    std::ostringstream out;
    out << std::hex << std::setfill('0');
    for (uint8_t b : digest) out << std::setw(2) << static_cast<int>(b);
    return out.str();
}

std::vector<std::string> frame_paths(const std::string& dir) {
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (ext == ".png" || ext == ".tif" || ext == ".tiff") paths.push_back(entry.path().string());
    }
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw FormatError("no frames found in " + dir);
    return paths;
}

std::vector<RoiBox> parse_boxes_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path);
    std::vector<RoiBox> boxes;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream row(line);
        RoiBox box;
        if (!(row >> box.x)) continue;  // blank or comment-only line
        if (!(row >> box.y >> box.height >> box.width))
            throw FormatError("boxes file line " + std::to_string(line_no) +
                              ": expected 'x y h w'");
        uint32_t extra;
        if (row >> extra)
            throw FormatError("boxes file line " + std::to_string(line_no) +
                              ": expected exactly four values");
        boxes.push_back(box);
    }
    if (boxes.empty()) throw FormatError("boxes file has no boxes: " + path);
    return boxes;
}

size_t find_level(const TrainConfig& cfg, int64_t ds) {
    for (size_t i = 0; i < cfg.levels.size(); ++i)
        if (cfg.levels[i].downsample_stages == ds) return i;
    throw FormatError("checkpoint has no level with d_s=" + std::to_string(ds));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pay-as-you-decode token compression for grayscale microscopy frames"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "write synthetic test frames");
    std::string synth_dir;
    int64_t synth_count = 1, synth_size = 256;
    uint64_t synth_seed = 0;
    synth->add_option("out_dir", synth_dir, "output directory")->required();
    synth->add_option("--frames", synth_count, "number of frames");
    synth->add_option("--size", synth_size, "frame side in pixels");
    synth->add_option("--seed", synth_seed, "random seed");

    auto* train_cmd = app.add_subcommand("train", "train the autoencoder");
    std::string train_data, train_out, train_config;
    uint64_t train_seed = 0;
    int64_t train_epochs = 0, train_max_steps = 0, train_fault = -1;
    train_cmd->add_option("data_dir", train_data, "directory of training frames")->required();
    train_cmd->add_option("out_checkpoint", train_out, "checkpoint to write")->required();
    train_cmd->add_option("--config", train_config, "key=value config file");
    train_cmd->add_option("--seed", train_seed, "overrides the config seed");
    train_cmd->add_option("--epochs", train_epochs, "overrides the config epoch count");
    train_cmd->add_option("--max-steps", train_max_steps, "overrides the config step cap");
    train_cmd->add_option("--fault-nan-step", train_fault, "poison the loss at this step (fault drill)");

    auto* prior_cmd = app.add_subcommand("prior-train", "train the bottom-token prior");
    std::string prior_in, prior_data, prior_out;
    PriorTrainSetup prior_setup;
    prior_cmd->add_option("checkpoint", prior_in, "trained two-level checkpoint")->required();
    prior_cmd->add_option("data_dir", prior_data, "directory of training frames")->required();
    prior_cmd->add_option("out_checkpoint", prior_out, "checkpoint to write")->required();
    prior_cmd->add_option("--steps", prior_setup.options.steps, "optimizer steps");
    prior_cmd->add_option("--batch", prior_setup.options.batch_size, "sequences per step");
    prior_cmd->add_option("--lr", prior_setup.options.learning_rate, "learning rate");
    prior_cmd->add_option("--seed", prior_setup.options.seed, "random seed");
    prior_cmd->add_option("--top-window", prior_setup.top_window, "top tokens per window side");
    prior_cmd->add_option("--layers", prior_setup.layers, "transformer blocks");
    prior_cmd->add_option("--width", prior_setup.model_width, "model width");
    prior_cmd->add_option("--heads", prior_setup.heads, "attention heads");

    auto* encode = app.add_subcommand("encode", "compress a frame to a token container");
    std::string enc_frame, enc_ck, enc_out;
    int64_t enc_ds = -1, enc_tile = 0;
    bool enc_checker = false;
    encode->add_option("frame", enc_frame, "input frame (PNG/TIFF)")->required();
    encode->add_option("checkpoint", enc_ck, "trained checkpoint")->required();
    encode->add_option("out_container", enc_out, "container to write")->required();
    encode->add_option("--d-s", enc_ds, "level to encode, by downsample stages (default: coarsest)");
    encode->add_flag("--checkerboard", enc_checker, "keep only even-parity grid positions");
    encode->add_option("--tile", enc_tile, "pixel tile size (default: training tile)");

    auto* decode = app.add_subcommand("decode", "reconstruct a frame from a container");
    std::string dec_in, dec_ck, dec_out, dec_mode = "top-only";
    uint64_t dec_seed = 0;
    double dec_temperature = 0.0;
    int64_t dec_top_k = 0;
    bool dec_force = false;
    decode->add_option("container", dec_in, "input container")->required();
    decode->add_option("checkpoint", dec_ck, "trained checkpoint")->required();
    decode->add_option("out_png", dec_out, "reconstruction to write")->required();
    decode->add_option("--mode", dec_mode, "top-only | prior")
        ->check(CLI::IsMember({"top-only", "prior"}));
    decode->add_option("--seed", dec_seed, "sampling seed (prior mode)");
    decode->add_option("--temperature", dec_temperature, "softmax temperature; 0 = greedy");
    decode->add_option("--top-k", dec_top_k, "sample from the k most likely tokens; 0 = all");
    decode->add_flag("--force-digest", dec_force, "decode even if the digest does not match");

    auto* eval = app.add_subcommand("eval", "metric sweep over a frame directory");
    std::string eval_ck, eval_data, eval_out;
    std::vector<int64_t> eval_ratios;
    eval->add_option("checkpoint", eval_ck, "trained checkpoint")->required();
    eval->add_option("data_dir", eval_data, "directory of frames")->required();
    eval->add_option("out_csv", eval_out, "metric table to write")->required();
    eval->add_option("--ratios", eval_ratios, "compression ratios, comma separated")
        ->delimiter(',');

    auto* roi = app.add_subcommand("roi-pack", "attach high-resolution crops to a container");
    std::string roi_in, roi_frame, roi_boxes, roi_out, roi_encoding = "png";
    roi->add_option("container", roi_in, "container to extend")->required();
    roi->add_option("frame", roi_frame, "original uncompressed frame")->required();
    roi->add_option("boxes", roi_boxes, "text file, one 'x y h w' per line")->required();
    roi->add_option("--encoding", roi_encoding, "raw8 | png | avif")
        ->check(CLI::IsMember({"raw8", "png", "avif"}));
    roi->add_option("--out", roi_out, "write here instead of in place");

    auto* info = app.add_subcommand("info", "print container header and ratios");
    std::string info_in;
    info->add_option("container", info_in, "container to inspect")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*synth) {
            fs::create_directories(synth_dir);
            for (int64_t i = 0; i < synth_count; ++i) {
                Frame frame = synth_frame(synth_size, synth_seed + static_cast<uint64_t>(i));
                std::ostringstream name;
                name << "frame_" << std::setw(4) << std::setfill('0') << i << ".png";
                save_grayscale_png(frame, (fs::path(synth_dir) / name.str()).string());
            }
            std::cout << "wrote " << synth_count << " frame(s) to " << synth_dir << "\n";
            return 0;
        }

        if (*train_cmd) {
            if (!fs::is_directory(train_data))
                return usage_error("data directory not found: " + train_data);
            TrainConfig cfg = train_config.empty() ? TrainConfig{} : load_config_file(train_config);
            if (train_cmd->count("--seed")) cfg.seed = train_seed;
            if (train_cmd->count("--epochs")) cfg.epochs = train_epochs;
            if (train_cmd->count("--max-steps")) cfg.max_steps = train_max_steps;
            if (train_cmd->count("--fault-nan-step")) cfg.fault_nan_step = train_fault;
            std::vector<Frame> frames = load_frame_dir(train_data);
            TrainResult result = train(cfg, frames, train_out, &std::cerr);
            write_text(train_out + ".history.csv", result.checkpoint.history_csv);
            std::cout << "checkpoint written to " << train_out << "\n";
            return 0;
        }

        if (*prior_cmd) {
            if (!fs::is_directory(prior_data))
                return usage_error("data directory not found: " + prior_data);
            Checkpoint ck = load_checkpoint(prior_in);
            std::vector<Frame> frames = load_frame_dir(prior_data);
            ck.prior = train_checkpoint_prior(ck, frames, prior_setup, &std::cerr);
            save_checkpoint(ck, prior_out);
            std::cout << "checkpoint with prior written to " << prior_out << "\n";
            return 0;
        }

        if (*encode) {
            Checkpoint ck = load_checkpoint(enc_ck);
            Frame frame = load_grayscale(enc_frame);
            EncodeOptions options;
            options.level = encode->count("--d-s") ? find_level(ck.config, enc_ds) : 0;
            options.checkerboard = enc_checker;
            options.tile_size = enc_tile;
            Container container = encode_frame(ck, frame, options);
            std::vector<uint8_t> bytes = pack_container(container.header, container.tokens);
            write_file(enc_out, bytes);
            RatioReport report = ratio_report(
                container.header,
                static_cast<size_t>(frame.height) * static_cast<size_t>(frame.width) *
                    static_cast<size_t>(frame.source_bit_depth / 8),
                bytes.size());
            std::cout << "wrote " << enc_out << ": " << container.header.token_count << " tokens, nominal "
                      << report.nominal_ratio << "x, actual " << report.actual_ratio << "x\n";
            return 0;
        }

        if (*decode) {
            Container container = parse_container(read_file(dec_in));
            Checkpoint ck = load_checkpoint(dec_ck);
            Sampling sampling;
            if (dec_temperature > 0) {
                sampling.mode = Sampling::Mode::kStochastic;
                sampling.temperature = dec_temperature;
                sampling.top_k = dec_top_k;
            }
            DecodeMode mode = dec_mode == "prior" ? DecodeMode::kPrior : DecodeMode::kTopOnly;
            Frame out = decode_container(ck, container, mode, sampling, dec_seed, dec_force);
            save_grayscale_png(out, dec_out);
            std::cout << "wrote " << dec_out << "\n";
            return 0;
        }

        if (*eval) {
            if (!fs::is_directory(eval_data))
                return usage_error("data directory not found: " + eval_data);
            Checkpoint ck = load_checkpoint(eval_ck);
            std::vector<std::string> paths = frame_paths(eval_data);
            std::vector<Frame> frames;
            std::vector<std::string> ids;
            for (const std::string& path : paths) {
                frames.push_back(load_grayscale(path));
                ids.push_back(fs::path(path).filename().string());
            }
            if (eval_ratios.empty())
                for (const LevelSpec& level : ck.config.levels)
                    eval_ratios.push_back(int64_t{1} << (2 * level.downsample_stages));
            std::string csv = evaluate(ck, frames, ids, eval_ratios, &std::cerr);
            write_text(eval_out, csv);
            std::cout << "wrote " << eval_out << "\n";
            return 0;
        }

        if (*roi) {
            std::vector<uint8_t> bytes = read_file(roi_in);
            Container container = parse_container(bytes);
            Frame frame = load_grayscale(roi_frame);
            if (static_cast<uint32_t>(frame.height) != container.header.frame_height ||
                static_cast<uint32_t>(frame.width) != container.header.frame_width)
                throw FormatError("frame dimensions do not match the container header");
            RoiEncoding encoding = roi_encoding == "raw8"  ? RoiEncoding::kRaw8
                                   : roi_encoding == "avif" ? RoiEncoding::kAvif
                                                            : RoiEncoding::kPng;
            std::vector<RoiRecord> records = roi_pack(frame, parse_boxes_file(roi_boxes), encoding);
            container.rois.insert(container.rois.end(), records.begin(), records.end());
            std::string out_path = roi_out.empty() ? roi_in : roi_out;
            write_file(out_path, pack_container(container.header, container.tokens, container.rois));
            std::cout << "wrote " << out_path << " with " << container.rois.size() << " ROI record(s)\n";
            return 0;
        }

        if (*info) {
            std::vector<uint8_t> bytes = read_file(info_in);
            Container container = parse_container(bytes);
            const ContainerHeader& hd = container.header;
            std::cout << "version " << static_cast<int>(hd.version) << "\n"
                      << "flags" << (hd.checkerboard() ? " checkerboard" : "")
                      << (hd.has_roi() ? " roi" : "") << (hd.two_level_hint() ? " two-level" : "")
                      << (hd.flags == 0 ? " none" : "") << "\n"
                      << "d_s " << static_cast<int>(hd.ds) << "\n"
                      << "codebook " << hd.codebook_size << " x " << hd.embed_dim << "\n"
                      << "frame " << hd.frame_height << " x " << hd.frame_width << "\n"
                      << "grid " << hd.grid_rows << " x " << hd.grid_cols << "\n"
                      << "tokens " << hd.token_count << "\n"
                      << "digest " << hex_digest(hd.model_digest) << "\n";
            for (const RoiRecord& r : container.rois)
                std::cout << "roi x " << r.x << " y " << r.y << " h " << r.height << " w " << r.width
                          << " encoding " << static_cast<int>(r.encoding) << " payload "
                          << r.payload.size() << " bytes\n";
            RatioReport report = ratio_report(
                hd, static_cast<size_t>(hd.frame_height) * static_cast<size_t>(hd.frame_width),
                bytes.size());
            std::cout << "nominal " << report.nominal_ratio << "x (actual " << report.actual_ratio
                      << "x at " << report.token_bits_per_token << " bits/token)\n";
            return 0;
        }
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

#include "emvq/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

#include <openssl/evp.h>

#include "emvq/errors.hpp"

namespace emvq {

namespace {

// ---- number formatting (shortest round-trip) ----

std::string format_f64(double v) {
    std::array<char, 64> buf;
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

double parse_f64(const std::string& s, const std::string& key) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw FormatError("config: bad number for " + key + ": '" + s + "'");
    return v;
}

int64_t parse_i64(const std::string& s, const std::string& key) {
    int64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw FormatError("config: bad integer for " + key + ": '" + s + "'");
    return v;
}

uint64_t parse_u64(const std::string& s, const std::string& key) {
    uint64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw FormatError("config: bad unsigned integer for " + key + ": '" + s + "'");
    return v;
}

bool parse_flag(const std::string& s, const std::string& key) {
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    throw FormatError("config: bad flag for " + key + ": '" + s + "'");
}

void apply_entry(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "level_count") {
        int64_t n = parse_i64(value, key);
        if (n < 1 || n > 8) throw FormatError("config: level_count out of range: " + value);
        cfg.levels.resize(static_cast<size_t>(n));
        return;
    }
    if (key.rfind("level", 0) == 0 && key.size() > 5 && std::isdigit(static_cast<unsigned char>(key[5]))) {
        size_t pos = 5;
        size_t idx = 0;
        while (pos < key.size() && std::isdigit(static_cast<unsigned char>(key[pos]))) {
            idx = idx * 10 + static_cast<size_t>(key[pos] - '0');
            ++pos;
        }
        if (pos >= key.size() || key[pos] != '_' || idx > 7)
            throw FormatError("config: unknown key: " + key);
        std::string field = key.substr(pos + 1);
        if (idx >= cfg.levels.size()) cfg.levels.resize(idx + 1);
        if (field == "downsample_stages") cfg.levels[idx].downsample_stages = parse_i64(value, key);
        else if (field == "codebook_size") cfg.levels[idx].codebook_size = parse_i64(value, key);
        else if (field == "lambda_commit") cfg.levels[idx].lambda_commit = parse_f64(value, key);
        else throw FormatError("config: unknown key: " + key);
        return;
    }
    if (key == "hidden_width") cfg.hidden_width = parse_i64(value, key);
    else if (key == "embed_dim") cfg.embed_dim = parse_i64(value, key);
    else if (key == "residual_blocks") cfg.residual_blocks = parse_i64(value, key);
    else if (key == "learning_rate") cfg.learning_rate = parse_f64(value, key);
    else if (key == "weight_decay") cfg.weight_decay = parse_f64(value, key);
    else if (key == "batch_size") cfg.batch_size = parse_i64(value, key);
    else if (key == "epochs") cfg.epochs = parse_i64(value, key);
    else if (key == "max_steps") cfg.max_steps = parse_i64(value, key);
    else if (key == "tile_size") cfg.tile_size = parse_i64(value, key);
    else if (key == "holdout_fraction") cfg.holdout_fraction = parse_f64(value, key);
    else if (key == "grad_clip") cfg.grad_clip = parse_f64(value, key);
    else if (key == "direct_weight") cfg.direct_weight = parse_f64(value, key);
    else if (key == "alpha") cfg.loss.alpha = parse_f64(value, key);
    else if (key == "beta_ms_ssim") cfg.loss.beta_ms = parse_f64(value, key);
    else if (key == "gamma_grad") cfg.loss.gamma_grad = parse_f64(value, key);
    else if (key == "ema_decay") cfg.ema_decay = parse_f64(value, key);
    else if (key == "ema_smoothing") cfg.ema_smoothing = parse_f64(value, key);
    else if (key == "dead_code_threshold") cfg.dead_code_threshold = parse_f64(value, key);
    else if (key == "dead_code_restart") cfg.dead_code_restart = parse_flag(value, key);
    else if (key == "deterministic_mode") cfg.deterministic_mode = parse_flag(value, key);
    else if (key == "seed") cfg.seed = parse_u64(value, key);
    else if (key == "fault_nan_step") cfg.fault_nan_step = parse_i64(value, key);
    else throw FormatError("config: unknown key: " + key);
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

TrainConfig parse_config_text(const std::string& text) {
    TrainConfig cfg;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("config: expected key=value, got '" + line + "'");
        apply_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

// ---- little-endian byte buffers ----

void put_u8(std::vector<uint8_t>& out, uint8_t v) { out.push_back(v); }

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_tensor_f32(std::vector<uint8_t>& out, const torch::Tensor& t) {
    torch::Tensor c = t.to(torch::kFloat32).contiguous();
    const auto* p = reinterpret_cast<const uint8_t*>(c.data_ptr<float>());
    out.insert(out.end(), p, p + c.numel() * sizeof(float));
}

void put_tensor_f64(std::vector<uint8_t>& out, const torch::Tensor& t) {
    torch::Tensor c = t.to(torch::kFloat64).contiguous();
    const auto* p = reinterpret_cast<const uint8_t*>(c.data_ptr<double>());
    out.insert(out.end(), p, p + c.numel() * sizeof(double));
}

struct ByteReader {
    const std::vector<uint8_t>& data;
    size_t off = 0;

    void need(size_t n) const {
        if (off + n > data.size()) throw FormatError("checkpoint: truncated");
    }
    uint8_t u8() { need(1); return data[off++]; }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(data[off] | (data[off + 1] << 8));
        off += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data[off + i]) << (8 * i);
        off += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data[off + i]) << (8 * i);
        off += 8;
        return v;
    }
    const uint8_t* bytes(size_t n) {
        need(n);
        const uint8_t* p = data.data() + off;
        off += n;
        return p;
    }
    bool done() const { return off == data.size(); }
};

torch::Tensor read_tensor_f32(ByteReader& rd, std::initializer_list<int64_t> shape) {
    int64_t numel = 1;
    for (int64_t s : shape) numel *= s;
    const uint8_t* p = rd.bytes(static_cast<size_t>(numel) * sizeof(float));
    torch::Tensor t = torch::empty(shape, torch::kFloat32);
    std::memcpy(t.data_ptr<float>(), p, static_cast<size_t>(numel) * sizeof(float));
    return t;
}

torch::Tensor read_tensor_f64(ByteReader& rd, std::initializer_list<int64_t> shape) {
    int64_t numel = 1;
    for (int64_t s : shape) numel *= s;
    const uint8_t* p = rd.bytes(static_cast<size_t>(numel) * sizeof(double));
    torch::Tensor t = torch::empty(shape, torch::kFloat64);
    std::memcpy(t.data_ptr<double>(), p, static_cast<size_t>(numel) * sizeof(double));
    return t;
}

// ---- section payloads ----

std::vector<uint8_t> codebook_payload(const std::vector<Codebook>& codebooks) {
    std::vector<uint8_t> out;
    for (const Codebook& cb : codebooks) {
        put_u16(out, static_cast<uint16_t>(cb.size()));
        put_u16(out, static_cast<uint16_t>(cb.dim()));
        put_tensor_f32(out, cb.embeddings);
        put_tensor_f64(out, cb.ema_counts);
        put_tensor_f64(out, cb.ema_sums);
    }
    return out;
}

std::vector<Codebook> parse_codebooks(const std::vector<uint8_t>& payload, const TrainConfig& cfg) {
    ByteReader rd{payload};
    std::vector<Codebook> out;
    for (const LevelSpec& level : cfg.levels) {
        Codebook cb;
        int64_t k = rd.u16();
        int64_t d = rd.u16();
        if (k != level.codebook_size || d != cfg.embed_dim)
            throw FormatError("checkpoint: codebook shape disagrees with config");
        cb.embeddings = read_tensor_f32(rd, {k, d});
        cb.ema_counts = read_tensor_f64(rd, {k});
        cb.ema_sums = read_tensor_f64(rd, {k, d});
        cb.decay = cfg.ema_decay;
        cb.smoothing = cfg.ema_smoothing;
        out.push_back(std::move(cb));
    }
    if (!rd.done()) throw FormatError("checkpoint: trailing bytes in codebook section");
    return out;
}

std::vector<uint8_t> parameter_payload(const std::vector<torch::Tensor>& params) {
    std::vector<uint8_t> out;
    put_u32(out, static_cast<uint32_t>(params.size()));
    for (const torch::Tensor& p : params) {
        put_u64(out, static_cast<uint64_t>(p.numel()));
        put_tensor_f32(out, p.detach());
    }
    return out;
}

void load_parameters(const std::vector<uint8_t>& payload, std::vector<torch::Tensor> params) {
    ByteReader rd{payload};
    uint32_t count = rd.u32();
    if (count != params.size()) throw FormatError("checkpoint: parameter count mismatch");
    torch::NoGradGuard guard;
    for (torch::Tensor& p : params) {
        uint64_t numel = rd.u64();
        if (numel != static_cast<uint64_t>(p.numel()))
            throw FormatError("checkpoint: parameter size mismatch");
        torch::Tensor flat = read_tensor_f32(rd, {static_cast<int64_t>(numel)});
        p.copy_(flat.reshape(p.sizes()));
    }
    if (!rd.done()) throw FormatError("checkpoint: trailing bytes in parameter section");
}

std::vector<uint8_t> prior_payload(const PriorBundle& bundle) {
    std::vector<uint8_t> out;
    const PriorConfig& pc = bundle.config;
    for (int64_t v : {pc.layers, pc.model_width, pc.heads, pc.k_top, pc.k_bottom,
                      pc.top_rows, pc.top_cols, pc.bottom_rows, pc.bottom_cols})
        put_u32(out, static_cast<uint32_t>(v));
    std::vector<uint8_t> params = parameter_payload(bundle.model->parameters());
    out.insert(out.end(), params.begin(), params.end());
    return out;
}

PriorBundle parse_prior(const std::vector<uint8_t>& payload) {
    ByteReader rd{payload};
    PriorConfig pc;
    pc.layers = rd.u32();
    pc.model_width = rd.u32();
    pc.heads = rd.u32();
    pc.k_top = rd.u32();
    pc.k_bottom = rd.u32();
    pc.top_rows = rd.u32();
    pc.top_cols = rd.u32();
    pc.bottom_rows = rd.u32();
    pc.bottom_cols = rd.u32();
    PriorBundle bundle{pc, TransformerPrior(pc)};
    std::vector<uint8_t> rest(payload.begin() + static_cast<long>(rd.off), payload.end());
    load_parameters(rest, bundle.model->parameters());
    return bundle;
}

void append_section(std::vector<uint8_t>& out, const char tag[5], const std::vector<uint8_t>& payload) {
    out.insert(out.end(), tag, tag + 4);
    put_u64(out, payload.size());
    out.insert(out.end(), payload.begin(), payload.end());
}

// ---- forward pass shared by training and holdout evaluation ----

struct ForwardPass {
    std::vector<torch::Tensor> latents;
    std::vector<QuantResult> quants;
    torch::Tensor reconstruction;
    torch::Tensor objective;
    LossReport report;
};

ForwardPass forward_pass(VqvaeModel& model, const torch::Tensor& batch) {
    const TrainConfig& cfg = model->config;
    ForwardPass fp;
    fp.latents = model->encode_latents(batch);
    std::vector<torch::Tensor> straight;
    CommitmentTerms terms;
    for (size_t l = 0; l < fp.latents.size(); ++l) {
        fp.quants.push_back(quantize(fp.latents[l], model->codebooks[l]));
        straight.push_back(straight_through(fp.latents[l], fp.quants[l].quantized));
        torch::Tensor commit = commitment_loss(fp.latents[l], fp.quants[l].quantized);
        if (l == 0) {
            terms.top = commit;
            terms.lambda_top = cfg.levels[0].lambda_commit;
        } else {
            terms.bottom = commit;
            terms.lambda_bottom = cfg.levels[1].lambda_commit;
        }
    }
    if (fp.latents.size() == 1) {
        fp.reconstruction = model->decode_direct(0, straight[0]);
        auto [objective, report] = total_loss(batch, fp.reconstruction, cfg.loss, terms);
        fp.objective = objective;
        fp.report = report;
    } else {
        fp.reconstruction = model->decode_fused(straight[0], straight[1]);
        auto [objective, report] = total_loss(batch, fp.reconstruction, cfg.loss, terms);
        torch::Tensor aux = rec_loss(batch, model->decode_direct(0, straight[0]), cfg.loss) +
                            rec_loss(batch, model->decode_direct(1, straight[1]), cfg.loss);
        fp.objective = objective + cfg.direct_weight * aux;
        fp.report = report;
    }
    return fp;
}

std::string csv_value(double v) { return format_f64(v); }

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
    if (cfg.levels.empty()) throw FormatError("config: levels must be nonempty");
    if (cfg.levels.size() > 2) throw FormatError("config: at most two quantizer levels");
    for (const LevelSpec& level : cfg.levels) {
        if (level.downsample_stages < 1 || level.downsample_stages > 5)
            throw FormatError("config: downsample_stages must be in [1, 5]");
        if (level.codebook_size < 2 || level.codebook_size > 65535)
            throw FormatError("config: codebook_size must be in [2, 65535]");
        if (level.lambda_commit < 0) throw FormatError("config: lambda_commit must be >= 0");
    }
    if (cfg.levels.size() == 2 && cfg.levels[0].downsample_stages <= cfg.levels[1].downsample_stages)
        throw FormatError("config: levels must be ordered coarsest first");
    if (cfg.hidden_width < 1 || cfg.embed_dim < 1 || cfg.embed_dim > 65535 || cfg.residual_blocks < 0)
        throw FormatError("config: bad network dimensions");
    if (cfg.learning_rate <= 0 || cfg.weight_decay < 0) throw FormatError("config: bad optimizer settings");
    if (cfg.batch_size < 1 || cfg.epochs < 1) throw FormatError("config: batch_size and epochs must be positive");
    if (cfg.tile_size < 1) throw FormatError("config: tile_size must be positive");
    int64_t factor = int64_t{1} << cfg.levels[0].downsample_stages;
    if (cfg.tile_size % factor != 0)
        throw FormatError("config: tile_size must be divisible by 2^downsample_stages");
    if (cfg.holdout_fraction < 0 || cfg.holdout_fraction >= 1)
        throw FormatError("config: holdout_fraction must be in [0, 1)");
    if (cfg.grad_clip <= 0 || cfg.direct_weight < 0) throw FormatError("config: bad loss settings");
    if (cfg.ema_decay <= 0 || cfg.ema_decay >= 1 || cfg.ema_smoothing <= 0)
        throw FormatError("config: bad EMA settings");
}

std::string serialize_config(const TrainConfig& cfg) {
    std::string out;
    auto line = [&out](const std::string& key, const std::string& value) {
        out += key;
        out += '=';
        out += value;
        out += '\n';
    };
    line("level_count", std::to_string(cfg.levels.size()));
    for (size_t i = 0; i < cfg.levels.size(); ++i) {
        std::string p = "level" + std::to_string(i) + "_";
        line(p + "downsample_stages", std::to_string(cfg.levels[i].downsample_stages));
        line(p + "codebook_size", std::to_string(cfg.levels[i].codebook_size));
        line(p + "lambda_commit", format_f64(cfg.levels[i].lambda_commit));
    }
    line("hidden_width", std::to_string(cfg.hidden_width));
    line("embed_dim", std::to_string(cfg.embed_dim));
    line("residual_blocks", std::to_string(cfg.residual_blocks));
    line("learning_rate", format_f64(cfg.learning_rate));
    line("weight_decay", format_f64(cfg.weight_decay));
    line("batch_size", std::to_string(cfg.batch_size));
    line("epochs", std::to_string(cfg.epochs));
    line("max_steps", std::to_string(cfg.max_steps));
    line("tile_size", std::to_string(cfg.tile_size));
    line("holdout_fraction", format_f64(cfg.holdout_fraction));
    line("grad_clip", format_f64(cfg.grad_clip));
    line("direct_weight", format_f64(cfg.direct_weight));
    line("alpha", format_f64(cfg.loss.alpha));
    line("beta_ms_ssim", format_f64(cfg.loss.beta_ms));
    line("gamma_grad", format_f64(cfg.loss.gamma_grad));
    line("ema_decay", format_f64(cfg.ema_decay));
    line("ema_smoothing", format_f64(cfg.ema_smoothing));
    line("dead_code_threshold", format_f64(cfg.dead_code_threshold));
    line("dead_code_restart", cfg.dead_code_restart ? "1" : "0");
    line("deterministic_mode", cfg.deterministic_mode ? "1" : "0");
    line("seed", std::to_string(cfg.seed));
    line("fault_nan_step", std::to_string(cfg.fault_nan_step));
    return out;
}

TrainConfig parse_config(const std::string& text) { return parse_config_text(text); }

TrainConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

VqvaeModelImpl::VqvaeModelImpl(const TrainConfig& cfg) : config(cfg) {
    validate_train_config(cfg);
    for (size_t i = 0; i < cfg.levels.size(); ++i) {
        std::string tag = std::to_string(i);
        encoders.push_back(register_module("encoder" + tag, Encoder(level_config(i))));
        decoders.push_back(register_module("decoder" + tag, TopDecoder(level_config(i))));
    }
    if (cfg.levels.size() == 2)
        fusion = register_module("fusion", FusionDecoder(level_config(0), level_config(1)));
    for (const LevelSpec& level : cfg.levels)
        codebooks.push_back(make_codebook(level.codebook_size, cfg.embed_dim, cfg.ema_decay,
                                          cfg.ema_smoothing));
}

EncoderConfig VqvaeModelImpl::level_config(size_t level) const {
    return EncoderConfig{config.levels.at(level).downsample_stages, config.hidden_width,
                         config.embed_dim, config.residual_blocks};
}

std::vector<torch::Tensor> VqvaeModelImpl::encode_latents(const torch::Tensor& frames) {
    std::vector<torch::Tensor> out;
    for (Encoder& encoder : encoders) out.push_back(encoder->forward(frames));
    return out;
}

torch::Tensor VqvaeModelImpl::decode_direct(size_t level, const torch::Tensor& quantized) {
    return decoders.at(level)->forward(quantized);
}

torch::Tensor VqvaeModelImpl::decode_fused(const torch::Tensor& top_quantized,
                                           const torch::Tensor& bottom_quantized) {
    if (!fusion) throw std::logic_error("fused decode requires a two-level model");
    return fusion->forward(top_quantized, bottom_quantized);
}

std::array<uint8_t, 32> model_digest(const TrainConfig& cfg, const std::vector<Codebook>& codebooks) {
    std::string conf = serialize_config(cfg);
    std::vector<uint8_t> code = codebook_payload(codebooks);
    std::array<uint8_t, 32> out{};
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (ctx == nullptr) throw std::runtime_error("EVP_MD_CTX_new failed");
    unsigned int len = 0;
    if (EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, conf.data(), conf.size()) != 1 ||
        EVP_DigestUpdate(ctx, code.data(), code.size()) != 1 ||
        EVP_DigestFinal_ex(ctx, out.data(), &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("SHA-256 digest failed");
    }
    EVP_MD_CTX_free(ctx);
    return out;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
    if (!checkpoint.model) throw std::logic_error("checkpoint has no model");
    std::vector<uint8_t> out;
    out.insert(out.end(), {'E', 'M', 'V', 'C'});
    put_u8(out, 1);

    std::string conf_text = serialize_config(checkpoint.config);
    append_section(out, "CONF", std::vector<uint8_t>(conf_text.begin(), conf_text.end()));

    std::array<uint8_t, 32> digest = model_digest(checkpoint.config, checkpoint.model->codebooks);
    append_section(out, "DGST", std::vector<uint8_t>(digest.begin(), digest.end()));
    append_section(out, "CODE", codebook_payload(checkpoint.model->codebooks));
    append_section(out, "PARM", parameter_payload(checkpoint.model->parameters()));

    std::vector<uint8_t> epoc;
    put_u64(epoc, static_cast<uint64_t>(checkpoint.epoch));
    put_u64(epoc, static_cast<uint64_t>(checkpoint.steps));
    append_section(out, "EPOC", epoc);

    append_section(out, "HIST",
                   std::vector<uint8_t>(checkpoint.history_csv.begin(), checkpoint.history_csv.end()));
    if (checkpoint.prior) append_section(out, "PRIO", prior_payload(*checkpoint.prior));

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw FormatError("checkpoint: cannot write " + path);
    file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!file) throw FormatError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw FormatError("checkpoint: cannot open " + path);
    std::vector<uint8_t> data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());

    ByteReader rd{data};
    const uint8_t* magic = rd.bytes(4);
    if (std::memcmp(magic, "EMVC", 4) != 0) throw FormatError("checkpoint: bad magic");
    if (rd.u8() != 1) throw FormatError("checkpoint: unsupported version");

    std::map<std::string, std::vector<uint8_t>> sections;
    std::vector<std::string> order;
    while (!rd.done()) {
        const uint8_t* tag = rd.bytes(4);
        std::string name(reinterpret_cast<const char*>(tag), 4);
        uint64_t length = rd.u64();
        const uint8_t* payload = rd.bytes(length);
        if (sections.count(name)) throw FormatError("checkpoint: duplicate section " + name);
        sections.emplace(name, std::vector<uint8_t>(payload, payload + length));
        order.push_back(name);
    }
    const std::vector<std::string> required = {"CONF", "DGST", "CODE", "PARM", "EPOC", "HIST"};
    for (size_t i = 0; i < required.size(); ++i) {
        if (i >= order.size() || order[i] != required[i])
            throw FormatError("checkpoint: missing or misordered section " + required[i]);
    }
    if (order.size() > required.size() + 1 ||
        (order.size() == required.size() + 1 && order.back() != "PRIO"))
        throw FormatError("checkpoint: unknown trailing section");

    Checkpoint ck;
    ck.config = parse_config_text(std::string(sections["CONF"].begin(), sections["CONF"].end()));
    ck.model = VqvaeModel(ck.config);
    ck.model->codebooks = parse_codebooks(sections["CODE"], ck.config);
    load_parameters(sections["PARM"], ck.model->parameters());

    if (sections["DGST"].size() != 32) throw FormatError("checkpoint: bad digest length");
    std::copy(sections["DGST"].begin(), sections["DGST"].end(), ck.digest.begin());
    if (model_digest(ck.config, ck.model->codebooks) != ck.digest)
        throw FormatError("checkpoint: digest mismatch (corrupt file)");

    ByteReader epoc{sections["EPOC"]};
    ck.epoch = static_cast<int64_t>(epoc.u64());
    ck.steps = static_cast<int64_t>(epoc.u64());
    ck.history_csv = std::string(sections["HIST"].begin(), sections["HIST"].end());
    if (sections.count("PRIO")) ck.prior = parse_prior(sections["PRIO"]);
    return ck;
}

std::vector<torch::Tensor> tile_frames(const std::vector<Frame>& frames, int64_t tile_size) {
    std::vector<torch::Tensor> tiles;
    for (const Frame& frame : frames) {
        torch::Tensor v = frame.values;
        int64_t h = v.size(0), w = v.size(1);
        if (h < tile_size || w < tile_size) {
            v = torch::replication_pad2d(v.unsqueeze(0).unsqueeze(0),
                                         {0, std::max<int64_t>(0, tile_size - w),
                                          0, std::max<int64_t>(0, tile_size - h)})
                    .squeeze(0)
                    .squeeze(0);
            h = v.size(0);
            w = v.size(1);
        }
        TilePlan plan = plan_tiles(h, w, tile_size, tile_size);
        for (const auto& [row, col] : plan.origins)
            tiles.push_back(
                v.slice(0, row, row + tile_size).slice(1, col, col + tile_size).unsqueeze(0).clone());
    }
    return tiles;
}

std::vector<size_t> epoch_order(size_t count, uint64_t seed, int64_t epoch) {
    std::vector<size_t> order(count);
    std::iota(order.begin(), order.end(), size_t{0});
    std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(epoch + 1)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

TrainResult train(const TrainConfig& cfg, const std::vector<Frame>& frames,
                  const std::string& checkpoint_path, std::ostream* log) {
    validate_train_config(cfg);
    if (frames.empty()) throw FormatError("training dataset is empty");

    if (cfg.deterministic_mode) at::set_num_threads(1);
    torch::manual_seed(cfg.seed);
    VqvaeModel model(cfg);

    std::vector<torch::Tensor> tiles = tile_frames(frames, cfg.tile_size);
    size_t holdout = static_cast<size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(tiles.size())));
    if (holdout >= tiles.size()) holdout = tiles.size() - 1;
    size_t train_count = tiles.size() - holdout;

    torch::optim::AdamW optimizer(model->parameters(),
                                  torch::optim::AdamWOptions(cfg.learning_rate)
                                      .betas(std::make_tuple(0.9, 0.999))
                                      .weight_decay(cfg.weight_decay));

    Checkpoint ck;
    ck.config = cfg;
    ck.model = model;
    ck.history_csv =
        "epoch,steps,train_total,rec_l1,ms_ssim_term,grad_l1,commit_top,commit_bottom,"
        "perplexity_top,perplexity_bottom,val_total,val_ssim\n";
    ck.digest = model_digest(cfg, model->codebooks);
    save_checkpoint(ck, checkpoint_path);

    TrainResult result;
    const size_t level_count = cfg.levels.size();
    int64_t step = 0;
    bool stop = false;
    for (int64_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
        std::vector<size_t> order = epoch_order(train_count, cfg.seed, epoch);
        LossReport sums;
        std::vector<double> perp_sums(level_count, 0.0);
        int64_t epoch_steps = 0;

        for (size_t start = 0; start < train_count && !stop; start += static_cast<size_t>(cfg.batch_size)) {
            size_t end = std::min(train_count, start + static_cast<size_t>(cfg.batch_size));
            std::vector<torch::Tensor> members;
            for (size_t i = start; i < end; ++i) members.push_back(tiles[order[i]]);
            torch::Tensor batch = torch::stack(members);

            ForwardPass fp = forward_pass(model, batch);
            torch::Tensor objective = fp.objective;
            if (cfg.fault_nan_step == step)
                objective = objective * std::numeric_limits<double>::quiet_NaN();
            double value = objective.item<double>();
            if (!std::isfinite(value))
                throw NumericError("training loss is not finite at step " + std::to_string(step) +
                                   " (last good checkpoint kept at " + checkpoint_path + ")");

            optimizer.zero_grad();
            objective.backward();
            torch::nn::utils::clip_grad_norm_(model->parameters(), cfg.grad_clip);
            optimizer.step();

            {
                torch::NoGradGuard guard;
                for (size_t l = 0; l < level_count; ++l) {
                    ema_update(model->codebooks[l], fp.latents[l].detach(), fp.quants[l].indices);
                    if (cfg.dead_code_restart)
                        restart_dead_codes(model->codebooks[l], fp.latents[l].detach(),
                                           cfg.dead_code_threshold);
                }
            }

            if (step == 0) {
                result.first_step = fp.report;
                result.first_step_objective = value;
            }
            sums.rec_l1 += fp.report.rec_l1;
            sums.ms_ssim_term += fp.report.ms_ssim_term;
            sums.grad_l1 += fp.report.grad_l1;
            sums.commitment_top += fp.report.commitment_top;
            sums.commitment_bottom += fp.report.commitment_bottom;
            sums.total += value;
            for (size_t l = 0; l < level_count; ++l) perp_sums[l] += fp.quants[l].perplexity;
            ++epoch_steps;
            ++step;
            if (cfg.max_steps > 0 && step >= cfg.max_steps) stop = true;
        }

        double n = static_cast<double>(std::max<int64_t>(1, epoch_steps));
        double val_total = std::numeric_limits<double>::quiet_NaN();
        double val_ssim = std::numeric_limits<double>::quiet_NaN();
        if (holdout > 0) {
            torch::NoGradGuard guard;
            double total_sum = 0.0, ssim_sum = 0.0;
            int64_t seen = 0;
            for (size_t start = train_count; start < tiles.size();
                 start += static_cast<size_t>(cfg.batch_size)) {
                size_t end = std::min(tiles.size(), start + static_cast<size_t>(cfg.batch_size));
                std::vector<torch::Tensor> members(tiles.begin() + static_cast<long>(start),
                                                   tiles.begin() + static_cast<long>(end));
                torch::Tensor batch = torch::stack(members);
                ForwardPass fp = forward_pass(model, batch);
                int64_t count = static_cast<int64_t>(end - start);
                total_sum += fp.objective.item<double>() * static_cast<double>(count);
                ssim_sum += ssim(batch, fp.reconstruction).item<double>() * static_cast<double>(count);
                seen += count;
            }
            val_total = total_sum / static_cast<double>(seen);
            val_ssim = ssim_sum / static_cast<double>(seen);
        }

        for (size_t l = 0; l < level_count; ++l) {
            double mean_perp = perp_sums[l] / n;
            double k = static_cast<double>(cfg.levels[l].codebook_size);
            if (log != nullptr && mean_perp < k / 16.0)
                *log << "warning: level " << l << " codebook perplexity " << mean_perp
                     << " is below K/16, codebook may be collapsing\n";
        }

        std::string row = std::to_string(epoch + 1) + "," + std::to_string(step) + "," +
                          csv_value(sums.total / n) + "," + csv_value(sums.rec_l1 / n) + "," +
                          csv_value(sums.ms_ssim_term / n) + "," + csv_value(sums.grad_l1 / n) + "," +
                          csv_value(sums.commitment_top / n) + "," +
                          csv_value(sums.commitment_bottom / n) + "," + csv_value(perp_sums[0] / n) +
                          "," +
                          csv_value(level_count > 1 ? perp_sums[1] / n
                                                    : std::numeric_limits<double>::quiet_NaN()) +
                          "," + csv_value(val_total) + "," + csv_value(val_ssim) + "\n";
        ck.history_csv += row;
        ck.epoch = epoch + 1;
        ck.steps = step;
        ck.digest = model_digest(cfg, model->codebooks);
        save_checkpoint(ck, checkpoint_path);
        result.epoch_train_loss.push_back(sums.total / n);
        if (log != nullptr)
            *log << "epoch " << (epoch + 1) << " steps " << step << " train " << sums.total / n
                 << (holdout > 0 ? " val " + format_f64(val_total) : std::string()) << "\n";
    }

    result.checkpoint = ck;
    return result;
}

std::vector<Frame> load_frame_dir(const std::string& data_dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(data_dir)) throw FormatError("not a directory: " + data_dir);
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(data_dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        if (ext == ".png" || ext == ".tif" || ext == ".tiff") paths.push_back(entry.path().string());
    }
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw FormatError("no frames found in " + data_dir);
    std::vector<Frame> frames;
    for (const std::string& path : paths) frames.push_back(load_grayscale(path));
    return frames;
}

}  // namespace emvq

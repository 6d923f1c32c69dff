#include "emvq/tokenstream.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include <opencv2/imgcodecs.hpp>

#include "emvq/errors.hpp"

namespace emvq {

namespace {

constexpr std::array<uint8_t, 4> kMagic = {'E', 'M', 'V', 'Q'};

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
    }
}

struct Reader {
    const std::vector<uint8_t>& bytes;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > bytes.size()) {
            throw FormatError("truncated container");
        }
    }
    uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(bytes[pos]) | (static_cast<uint16_t>(bytes[pos + 1]) << 8);
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(bytes[pos + i]) << (8 * i);
        }
        pos += 4;
        return v;
    }
};

class BitWriter {
public:
    explicit BitWriter(std::vector<uint8_t>& out) : out_(out) {}

    void write(uint32_t value, int bits) {
        for (int b = bits - 1; b >= 0; --b) {
            acc_ = static_cast<uint8_t>((acc_ << 1) | ((value >> b) & 1u));
            if (++filled_ == 8) {
                out_.push_back(acc_);
                acc_ = 0;
                filled_ = 0;
            }
        }
    }
    void flush() {
        if (filled_ > 0) {
            out_.push_back(static_cast<uint8_t>(acc_ << (8 - filled_)));
            acc_ = 0;
            filled_ = 0;
        }
    }

private:
    std::vector<uint8_t>& out_;
    uint8_t acc_ = 0;
    int filled_ = 0;
};

class BitReader {
public:
    BitReader(const uint8_t* data, size_t size) : data_(data), size_(size) {}

    uint32_t read(int bits) {
        uint32_t v = 0;
        for (int b = 0; b < bits; ++b) {
            const size_t byte = bit_pos_ >> 3;
            if (byte >= size_) {
                throw FormatError("truncated token payload");
            }
            v = (v << 1) | ((data_[byte] >> (7 - (bit_pos_ & 7))) & 1u);
            ++bit_pos_;
        }
        return v;
    }

private:
    const uint8_t* data_;
    size_t size_;
    size_t bit_pos_ = 0;
};

void validate_header(const ContainerHeader& h) {
    if (h.version != 1) {
        throw FormatError("unsupported container version " + std::to_string(h.version));
    }
    if (h.codebook_size < 2) {
        throw FormatError("codebook size must be >= 2");
    }
    if (h.grid_rows == 0 || h.grid_cols == 0) {
        throw FormatError("empty token grid");
    }
    const uint64_t cells = static_cast<uint64_t>(h.grid_rows) * h.grid_cols;
    const uint64_t expected = h.checkerboard() ? (cells + 1) / 2 : cells;
    if (h.token_count != expected) {
        throw FormatError("token count " + std::to_string(h.token_count) + " does not match grid");
    }
    if (h.flags & ~(kFlagCheckerboard | kFlagHasRoi | kFlagTwoLevelDecodeHint)) {
        throw FormatError("unknown container flags");
    }
}

}  // namespace

int bits_per_token(uint16_t codebook_size) {
    if (codebook_size < 2) {
        throw FormatError("codebook size must be >= 2");
    }
    int bits = 1;
    while ((1u << bits) < codebook_size) {
        ++bits;
    }
    return bits;
}

std::vector<std::pair<int64_t, int64_t>> checkerboard_mask(int64_t rows, int64_t cols) {
    TORCH_CHECK(rows >= 1 && cols >= 1, "grid dims must be positive");
    std::vector<std::pair<int64_t, int64_t>> kept;
    kept.reserve(static_cast<size_t>((rows * cols + 1) / 2));
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) {
            if ((i + j) % 2 == 0) {
                kept.emplace_back(i, j);
            }
        }
    }
    return kept;
}

torch::Tensor checkerboard_fill(const std::vector<int32_t>& tokens, int64_t rows, int64_t cols,
                                const torch::Tensor& embeddings) {
    auto mask = checkerboard_mask(rows, cols);
    TORCH_CHECK(tokens.size() == mask.size(), "retained token count does not match the parity mask");
    const int64_t d = embeddings.size(1);

    torch::Tensor grid = torch::zeros({rows, cols, d}, torch::kFloat32);
    for (size_t t = 0; t < mask.size(); ++t) {
        TORCH_CHECK(tokens[t] >= 0 && tokens[t] < embeddings.size(0), "token out of codebook range");
        grid[mask[t].first][mask[t].second] = embeddings[tokens[t]];
    }
    // Dropped positions: arithmetic mean of in-grid 4-neighbors (all retained).
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) {
            if ((i + j) % 2 == 0) {
                continue;
            }
            torch::Tensor acc = torch::zeros({d}, torch::kFloat32);
            int n = 0;
            if (i > 0) { acc += grid[i - 1][j]; ++n; }
            if (i + 1 < rows) { acc += grid[i + 1][j]; ++n; }
            if (j > 0) { acc += grid[i][j - 1]; ++n; }
            if (j + 1 < cols) { acc += grid[i][j + 1]; ++n; }
            TORCH_CHECK(n > 0, "dropped cell with no neighbors");
            grid[i][j] = acc / n;
        }
    }
    return grid.permute({2, 0, 1}).contiguous();
}

std::vector<uint8_t> pack_container(const ContainerHeader& header, const std::vector<int32_t>& tokens,
                                    const std::vector<RoiRecord>& rois) {
    ContainerHeader h = header;
    h.flags = rois.empty() ? (h.flags & ~kFlagHasRoi) : (h.flags | kFlagHasRoi);
    validate_header(h);
    if (tokens.size() != h.token_count) {
        throw FormatError("token list length does not match header token_count");
    }
    if (rois.size() > 0xffff) {
        throw FormatError("too many ROI records");
    }

    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic.begin(), kMagic.end());
    out.push_back(h.version);
    out.push_back(h.flags);
    out.push_back(h.ds);
    put_u16(out, h.codebook_size);
    put_u16(out, h.embed_dim);
    put_u32(out, h.frame_height);
    put_u32(out, h.frame_width);
    put_u32(out, h.grid_rows);
    put_u32(out, h.grid_cols);
    out.insert(out.end(), h.model_digest.begin(), h.model_digest.end());
    put_u32(out, h.token_count);

    const int bits = bits_per_token(h.codebook_size);
    BitWriter writer(out);
    for (int32_t t : tokens) {
        if (t < 0 || t >= static_cast<int32_t>(h.codebook_size)) {
            throw FormatError("token " + std::to_string(t) + " outside codebook of size " +
                              std::to_string(h.codebook_size));
        }
        writer.write(static_cast<uint32_t>(t), bits);
    }
    writer.flush();

    put_u16(out, static_cast<uint16_t>(rois.size()));
    for (const auto& r : rois) {
        put_u32(out, r.x);
        put_u32(out, r.y);
        put_u32(out, r.height);
        put_u32(out, r.width);
        out.push_back(static_cast<uint8_t>(r.encoding));
        put_u32(out, static_cast<uint32_t>(r.payload.size()));
        out.insert(out.end(), r.payload.begin(), r.payload.end());
    }
    return out;
}

Container parse_container(const std::vector<uint8_t>& bytes) {
    Reader rd{bytes};
    rd.need(kMagic.size());
    for (uint8_t m : kMagic) {
        if (rd.u8() != m) {
            throw FormatError("bad container magic");
        }
    }

    Container c;
    ContainerHeader& h = c.header;
    h.version = rd.u8();
    h.flags = rd.u8();
    h.ds = rd.u8();
    h.codebook_size = rd.u16();
    h.embed_dim = rd.u16();
    h.frame_height = rd.u32();
    h.frame_width = rd.u32();
    h.grid_rows = rd.u32();
    h.grid_cols = rd.u32();
    rd.need(h.model_digest.size());
    std::copy_n(bytes.begin() + rd.pos, h.model_digest.size(), h.model_digest.begin());
    rd.pos += h.model_digest.size();
    h.token_count = rd.u32();
    validate_header(h);

    const int bits = bits_per_token(h.codebook_size);
    const size_t payload_bytes = (static_cast<size_t>(h.token_count) * bits + 7) / 8;
    rd.need(payload_bytes);
    BitReader br(bytes.data() + rd.pos, payload_bytes);
    c.tokens.reserve(h.token_count);
    for (uint32_t i = 0; i < h.token_count; ++i) {
        uint32_t t = br.read(bits);
        if (t >= h.codebook_size) {
            throw FormatError("token " + std::to_string(t) + " outside codebook of size " +
                              std::to_string(h.codebook_size));
        }
        c.tokens.push_back(static_cast<int32_t>(t));
    }
    rd.pos += payload_bytes;

    const uint16_t roi_count = rd.u16();
    if (h.has_roi() != (roi_count > 0)) {
        throw FormatError("ROI flag inconsistent with ROI count");
    }
    for (uint16_t i = 0; i < roi_count; ++i) {
        RoiRecord r;
        r.x = rd.u32();
        r.y = rd.u32();
        r.height = rd.u32();
        r.width = rd.u32();
        uint8_t enc = rd.u8();
        if (enc > 2) {
            throw FormatError("unknown ROI encoding " + std::to_string(enc));
        }
        r.encoding = static_cast<RoiEncoding>(enc);
        uint32_t len = rd.u32();
        rd.need(len);
        r.payload.assign(bytes.begin() + rd.pos, bytes.begin() + rd.pos + len);
        rd.pos += len;
        c.rois.push_back(std::move(r));
    }
    if (rd.pos != bytes.size()) {
        throw FormatError("trailing bytes after container");
    }
    return c;
}

RatioReport ratio_report(const ContainerHeader& header, size_t raw_frame_bytes,
                         size_t container_bytes) {
    RatioReport r;
    const double pixels = static_cast<double>(header.frame_height) * header.frame_width;
    r.nominal_ratio = pixels / static_cast<double>(header.token_count);
    r.actual_ratio = container_bytes > 0
                         ? static_cast<double>(raw_frame_bytes) / static_cast<double>(container_bytes)
                         : 0.0;
    r.token_bits_per_token = bits_per_token(header.codebook_size);
    return r;
}

namespace {

std::vector<uint8_t> encode_crop_avif(const cv::Mat& crop) {
    namespace fs = std::filesystem;
    if (std::system("command -v avifenc > /dev/null 2>&1") != 0) {
        throw FormatError("external AVIF encoder (avifenc) not available");
    }
    fs::path tmp = fs::temp_directory_path();
    fs::path png = tmp / ("emvq_roi_" + std::to_string(::getpid()) + ".png");
    fs::path avif = tmp / ("emvq_roi_" + std::to_string(::getpid()) + ".avif");
    cv::imwrite(png.string(), crop);
    std::string cmd = "avifenc -s 10 -q 85 " + png.string() + " " + avif.string() + " > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    std::ifstream in(avif, std::ios::binary);
    std::vector<uint8_t> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    fs::remove(png);
    fs::remove(avif);
    if (rc != 0 || payload.empty()) {
        throw FormatError("avifenc failed");
    }
    return payload;
}

cv::Mat decode_payload_avif(const std::vector<uint8_t>& payload) {
    namespace fs = std::filesystem;
    if (std::system("command -v avifdec > /dev/null 2>&1") != 0) {
        throw FormatError("external AVIF decoder (avifdec) not available");
    }
    fs::path tmp = fs::temp_directory_path();
    fs::path avif = tmp / ("emvq_roi_" + std::to_string(::getpid()) + "_d.avif");
    fs::path png = tmp / ("emvq_roi_" + std::to_string(::getpid()) + "_d.png");
    std::ofstream out(avif, std::ios::binary);
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    out.close();
    std::string cmd = "avifdec " + avif.string() + " " + png.string() + " > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    cv::Mat img = cv::imread(png.string(), cv::IMREAD_GRAYSCALE);
    fs::remove(avif);
    fs::remove(png);
    if (rc != 0 || img.empty()) {
        throw FormatError("avifdec failed");
    }
    return img;
}

}  // namespace

std::vector<RoiRecord> roi_pack(const Frame& frame, const std::vector<RoiBox>& boxes,
                                RoiEncoding encoding) {
    std::vector<RoiRecord> records;
    records.reserve(boxes.size());
    torch::Tensor pixels = to_pixel_values(frame.values, 8).to(torch::kUInt8).contiguous();

    for (const auto& box : boxes) {
        if (box.height == 0 || box.width == 0 ||
            static_cast<int64_t>(box.y) + box.height > frame.height ||
            static_cast<int64_t>(box.x) + box.width > frame.width) {
            throw FormatError("ROI box outside frame bounds");
        }
        torch::Tensor crop = pixels.slice(0, box.y, box.y + box.height)
                                 .slice(1, box.x, box.x + box.width)
                                 .contiguous();
        cv::Mat mat(static_cast<int>(box.height), static_cast<int>(box.width), CV_8UC1,
                    crop.data_ptr<uint8_t>());

        RoiRecord r;
        r.x = box.x;
        r.y = box.y;
        r.height = box.height;
        r.width = box.width;
        r.encoding = encoding;
        switch (encoding) {
            case RoiEncoding::kRaw8: {
                r.payload.assign(crop.data_ptr<uint8_t>(),
                                 crop.data_ptr<uint8_t>() + crop.numel());
                break;
            }
            case RoiEncoding::kPng: {
                std::vector<uchar> buf;
                if (!cv::imencode(".png", mat, buf)) {
                    throw FormatError("PNG encoding failed for ROI");
                }
                r.payload.assign(buf.begin(), buf.end());
                break;
            }
            case RoiEncoding::kAvif:
                r.payload = encode_crop_avif(mat);
                break;
        }
        records.push_back(std::move(r));
    }
    return records;
}

Frame roi_extract(const Container& container, size_t index) {
    if (index >= container.rois.size()) {
        throw FormatError("ROI index out of range");
    }
    const RoiRecord& r = container.rois[index];

    cv::Mat img;
    switch (r.encoding) {
        case RoiEncoding::kRaw8: {
            if (r.payload.size() != static_cast<size_t>(r.height) * r.width) {
                throw FormatError("raw8 ROI payload size mismatch");
            }
            img = cv::Mat(static_cast<int>(r.height), static_cast<int>(r.width), CV_8UC1,
                          const_cast<uint8_t*>(r.payload.data()))
                      .clone();
            break;
        }
        case RoiEncoding::kPng: {
            img = cv::imdecode(cv::Mat(1, static_cast<int>(r.payload.size()), CV_8UC1,
                                       const_cast<uint8_t*>(r.payload.data())),
                               cv::IMREAD_GRAYSCALE);
            if (img.empty()) {
                throw FormatError("cannot decode PNG ROI payload");
            }
            break;
        }
        case RoiEncoding::kAvif:
            img = decode_payload_avif(r.payload);
            break;
    }
    if (img.rows != static_cast<int>(r.height) || img.cols != static_cast<int>(r.width)) {
        throw FormatError("ROI payload dimensions do not match record");
    }

    torch::Tensor values = torch::empty({img.rows, img.cols}, torch::kFloat32);
    auto acc = values.accessor<float, 2>();
    for (int rr = 0; rr < img.rows; ++rr) {
        for (int cc = 0; cc < img.cols; ++cc) {
            acc[rr][cc] = static_cast<float>(img.at<uint8_t>(rr, cc) / 255.0 - 0.5);
        }
    }
    return make_frame(values, 8);
}

std::vector<int32_t> retained_tokens(const torch::Tensor& grid, bool checkerboard) {
    TORCH_CHECK(grid.dim() == 2, "token grid must be 2-D");
    torch::Tensor g = grid.to(torch::kInt64).contiguous();
    auto acc = g.accessor<int64_t, 2>();
    std::vector<int32_t> out;
    if (checkerboard) {
        for (const auto& [i, j] : checkerboard_mask(g.size(0), g.size(1))) {
            out.push_back(static_cast<int32_t>(acc[i][j]));
        }
    } else {
        out.reserve(static_cast<size_t>(g.numel()));
        for (int64_t i = 0; i < g.size(0); ++i) {
            for (int64_t j = 0; j < g.size(1); ++j) {
                out.push_back(static_cast<int32_t>(acc[i][j]));
            }
        }
    }
    return out;
}

torch::Tensor dense_token_grid(const std::vector<int32_t>& tokens, int64_t rows, int64_t cols) {
    TORCH_CHECK(static_cast<int64_t>(tokens.size()) == rows * cols, "token count does not match grid");
    torch::Tensor grid = torch::empty({rows, cols}, torch::kInt64);
    auto acc = grid.accessor<int64_t, 2>();
    size_t t = 0;
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) {
            acc[i][j] = tokens[t++];
        }
    }
    return grid;
}

}  // namespace emvq

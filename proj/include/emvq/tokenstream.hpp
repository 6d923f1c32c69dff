#ifndef EMVQ_TOKENSTREAM_HPP
#define EMVQ_TOKENSTREAM_HPP

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "emvq/pixeldata.hpp"

namespace emvq {

// Container flag bits.
constexpr uint8_t kFlagCheckerboard = 0x01;
constexpr uint8_t kFlagHasRoi = 0x02;
constexpr uint8_t kFlagTwoLevelDecodeHint = 0x04;

constexpr size_t kContainerHeaderBytes = 63;
constexpr size_t kRoiRecordFixedBytes = 17;  // x, y, height, width, encoding

struct ContainerHeader {
    uint8_t version = 1;
    uint8_t flags = 0;
    uint8_t ds = 0;
    uint16_t codebook_size = 0;
    uint16_t embed_dim = 0;
    uint32_t frame_height = 0;
    uint32_t frame_width = 0;
    uint32_t grid_rows = 0;
    uint32_t grid_cols = 0;
    std::array<uint8_t, 32> model_digest{};
    uint32_t token_count = 0;

    bool checkerboard() const { return flags & kFlagCheckerboard; }
    bool has_roi() const { return flags & kFlagHasRoi; }
    bool two_level_hint() const { return flags & kFlagTwoLevelDecodeHint; }
};

enum class RoiEncoding : uint8_t { kRaw8 = 0, kPng = 1, kAvif = 2 };

struct RoiRecord {
    uint32_t x = 0;  // column offset
    uint32_t y = 0;  // row offset
    uint32_t height = 0;
    uint32_t width = 0;
    RoiEncoding encoding = RoiEncoding::kPng;
    std::vector<uint8_t> payload;
};

struct RoiBox {
    uint32_t x = 0, y = 0, height = 0, width = 0;
};

struct Container {
    ContainerHeader header;
    std::vector<int32_t> tokens;  // retained order (row-major; parity order under checkerboard)
    std::vector<RoiRecord> rois;
};

struct RatioReport {
    double nominal_ratio = 0.0;  // frame pixels / token count
    double actual_ratio = 0.0;   // raw frame bytes / container bytes
    int token_bits_per_token = 0;
};

int bits_per_token(uint16_t codebook_size);

// Row-major positions with (i+j) mod 2 == 0; ceil(rows*cols/2) of them.
std::vector<std::pair<int64_t, int64_t>> checkerboard_mask(int64_t rows, int64_t cols);

// Dense (D, rows, cols) embedding grid: retained positions carry their code
// embedding, dropped positions the mean of their in-grid 4-neighbors.
torch::Tensor checkerboard_fill(const std::vector<int32_t>& retained_tokens, int64_t rows,
                                int64_t cols, const torch::Tensor& embeddings);

// Tokens are packed at ceil(log2 K) bits each, most significant bit first
// within each byte, zero-padded to a byte boundary. A u16 ROI count and the
// ROI records follow the payload.
std::vector<uint8_t> pack_container(const ContainerHeader& header, const std::vector<int32_t>& tokens,
                                    const std::vector<RoiRecord>& rois = {});

// Exact inverse of pack_container; rejects bad magic, version or flag
// mismatches, out-of-range tokens, truncation, and trailing bytes.
Container parse_container(const std::vector<uint8_t>& bytes);

RatioReport ratio_report(const ContainerHeader& header, size_t raw_frame_bytes,
                         size_t container_bytes);

// Crops are taken from the uncompressed frame and encoded independently of
// the token payload. AVIF requires the external avifenc binary.
std::vector<RoiRecord> roi_pack(const Frame& frame, const std::vector<RoiBox>& boxes,
                                RoiEncoding encoding);

// Pixel-exact for raw8 and PNG payloads; AVIF requires avifdec.
Frame roi_extract(const Container& container, size_t index);

// Convenience: dense row-major grid <-> retained token list.
std::vector<int32_t> retained_tokens(const torch::Tensor& grid, bool checkerboard);
torch::Tensor dense_token_grid(const std::vector<int32_t>& tokens, int64_t rows, int64_t cols);

}  // namespace emvq

#endif

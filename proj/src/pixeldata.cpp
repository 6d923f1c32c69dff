#include "emvq/pixeldata.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>

#include "emvq/errors.hpp"

namespace emvq {

Frame make_frame(torch::Tensor values, int source_bit_depth) {
    TORCH_CHECK(values.dim() == 2, "frame values must be 2-D, got ", values.dim(), " dims");
    TORCH_CHECK(values.size(0) >= 1 && values.size(1) >= 1, "frame must be at least 1x1");
    Frame f;
    f.values = values.to(torch::kFloat32).contiguous();
    f.height = values.size(0);
    f.width = values.size(1);
    f.source_bit_depth = source_bit_depth;
    return f;
}

Frame load_grayscale(const std::string& path, bool allow_channel_collapse) {
    cv::Mat img = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (img.empty()) {
        throw FormatError("cannot read image: " + path);
    }
    if (img.channels() != 1) {
        if (!allow_channel_collapse) {
            throw FormatError("multi-channel input without --gray flag: " + path);
        }
        std::vector<cv::Mat> ch;
        cv::split(img, ch);
        for (size_t i = 1; i < ch.size(); ++i) {
            if (cv::countNonZero(ch[i] != ch[0]) != 0) {
                throw FormatError("channels differ, refusing silent conversion: " + path);
            }
        }
        img = ch[0];
    }

    int depth_bits;
    double denom;
    if (img.depth() == CV_8U) {
        depth_bits = 8;
        denom = 255.0;
    } else if (img.depth() == CV_16U) {
        depth_bits = 16;
        denom = 65535.0;
    } else {
        throw FormatError("unsupported pixel depth (want 8- or 16-bit): " + path);
    }

    torch::Tensor values = torch::empty({img.rows, img.cols}, torch::kFloat32);
    auto acc = values.accessor<float, 2>();
    for (int r = 0; r < img.rows; ++r) {
        for (int c = 0; c < img.cols; ++c) {
            double p = (depth_bits == 8) ? static_cast<double>(img.at<uint8_t>(r, c))
                                         : static_cast<double>(img.at<uint16_t>(r, c));
            acc[r][c] = static_cast<float>(p / denom - 0.5);
        }
    }
    return make_frame(values, depth_bits);
}

torch::Tensor to_pixel_values(const torch::Tensor& values, int bit_depth) {
    double peak = static_cast<double>((1u << bit_depth) - 1);
    auto p = (values.to(torch::kFloat64) + 0.5) * peak;
    return p.round().clamp(0.0, peak);
}

void save_grayscale_png(const Frame& frame, const std::string& path) {
    auto pix = to_pixel_values(frame.values, 8).to(torch::kUInt8).contiguous();
    cv::Mat img(static_cast<int>(frame.height), static_cast<int>(frame.width), CV_8UC1,
                pix.data_ptr<uint8_t>());
    if (!cv::imwrite(path, img)) {
        throw FormatError("cannot write PNG: " + path);
    }
}

namespace {

std::vector<int64_t> axis_origins(int64_t length, int64_t tile, int64_t stride) {
    std::vector<int64_t> origins;
    if (tile >= length) {
        origins.push_back(0);
        return origins;
    }
    for (int64_t o = 0; o + tile <= length; o += stride) {
        origins.push_back(o);
    }
    if (origins.back() + tile < length) {
        origins.push_back(length - tile);  // clamp so the tile ends at the edge
    }
    return origins;
}

}  // namespace

TilePlan plan_tiles(int64_t height, int64_t width, int64_t tile_size, int64_t stride) {
    TORCH_CHECK(height >= 1 && width >= 1, "frame dimensions must be positive");
    TORCH_CHECK(tile_size >= 1, "tile_size must be positive");
    TORCH_CHECK(stride >= 1 && stride <= tile_size, "stride must be in [1, tile_size]");

    TilePlan plan;
    plan.tile_size = tile_size;
    plan.stride = stride;
    auto rows = axis_origins(height, tile_size, stride);
    auto cols = axis_origins(width, tile_size, stride);
    plan.origins.reserve(rows.size() * cols.size());
    for (int64_t r : rows) {
        for (int64_t c : cols) {
            plan.origins.emplace_back(r, c);
        }
    }
    return plan;
}

BlendWindow make_hann_window(int64_t size, double floor_eps) {
    TORCH_CHECK(size >= 2, "window size must be >= 2");
    TORCH_CHECK(floor_eps > 0.0, "window floor must be positive");

    torch::Tensor axis = torch::empty({size}, torch::kFloat64);
    auto acc = axis.accessor<double, 1>();
    for (int64_t n = 0; n < size; ++n) {
        acc[n] = floor_eps + 0.5 * (1.0 - std::cos(2.0 * M_PI * static_cast<double>(n) /
                                                   static_cast<double>(size - 1)));
    }
    BlendWindow w;
    w.size = size;
    w.floor = floor_eps;
    w.axis_weights = axis;
    w.weights = torch::outer(axis, axis);
    return w;
}

Frame overlap_add(const std::vector<std::pair<std::pair<int64_t, int64_t>, torch::Tensor>>& tile_predictions,
                  int64_t height, int64_t width, const BlendWindow& window) {
    TORCH_CHECK(!tile_predictions.empty(), "no tile predictions");
    const int64_t t = window.size;

    torch::Tensor num = torch::zeros({height, width}, torch::kFloat64);
    torch::Tensor den = torch::zeros({height, width}, torch::kFloat64);

    for (const auto& [origin, pred] : tile_predictions) {
        auto [r0, c0] = origin;
        TORCH_CHECK(pred.dim() == 2 && pred.size(0) == t && pred.size(1) == t,
                    "tile prediction must be ", t, "x", t);
        TORCH_CHECK(r0 >= 0 && c0 >= 0 && r0 + t <= height && c0 + t <= width,
                    "tile (", r0, ",", c0, ") out of frame bounds");
        auto w = window.weights;
        num.slice(0, r0, r0 + t).slice(1, c0, c0 + t) += pred.to(torch::kFloat64) * w;
        den.slice(0, r0, r0 + t).slice(1, c0, c0 + t) += w;
    }

    TORCH_CHECK(den.min().item<double>() > 0.0, "uncovered pixel in overlap-add");
    torch::Tensor out = (num / den).clamp(-0.5, 0.5).to(torch::kFloat32);
    return make_frame(out, 8);
}

}  // namespace emvq

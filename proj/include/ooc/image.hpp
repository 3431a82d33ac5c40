#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "ooc/common.hpp"

namespace ooc {

// 8-bit interleaved image, 1 (gray) or 3 (RGB) channels.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

    bool empty() const noexcept { return pixels.empty(); }
    std::size_t index(int x, int y, int c = 0) const noexcept {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    std::uint8_t& at(int x, int y, int c = 0) noexcept { return pixels[index(x, y, c)]; }
    std::uint8_t at(int x, int y, int c = 0) const noexcept { return pixels[index(x, y, c)]; }

    friend bool operator==(const Image&, const Image&) = default;
};

inline std::uint8_t luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) noexcept {
    return static_cast<std::uint8_t>((299u * r + 587u * g + 114u * b + 500u) / 1000u);
}

inline Image to_gray(const Image& img) {
    if (img.channels == 1) return img;
    Image out(img.width, img.height, 1);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out.at(x, y) = luma(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2));
    return out;
}

inline cv::Mat to_mat(const Image& img) {
    cv::Mat m(img.height, img.width, CV_8UC(img.channels));
    std::memcpy(m.data, img.pixels.data(), img.pixels.size());
    return m;
}

inline Image from_mat(const cv::Mat& m) {
    cv::Mat src = m.isContinuous() ? m : m.clone();
    Image img(src.cols, src.rows, src.channels());
    std::memcpy(img.pixels.data(), src.data, img.pixels.size());
    return img;
}

inline Image decode_image(std::span<const std::uint8_t> bytes) {
    cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat bgr = bytes.empty() ? cv::Mat() : cv::imdecode(buf, cv::IMREAD_COLOR);
    if (bgr.empty()) throw DataError("undecodable image");
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return from_mat(rgb);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StorageError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Image read_image(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    try {
        return decode_image(bytes);
    } catch (const DataError&) {
        throw DataError("undecodable image: " + path.string());
    }
}

// PNG at a fixed compression level with default filtering. Output bytes are a
// function of the pixels only.
inline std::vector<std::uint8_t> encode_png(const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw DataError("PNG encoder supports 1 or 3 channels");
    cv::Mat m = to_mat(img);
    if (img.channels == 3) cv::cvtColor(m, m, cv::COLOR_RGB2BGR);
    std::vector<std::uint8_t> out;
    if (!cv::imencode(".png", m, out, {cv::IMWRITE_PNG_COMPRESSION, 6})) throw StorageError("PNG encoding failed");
    return out;
}

// Writes via a temporary file and rename so readers never see a partial image.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw StorageError("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Image crop(const Image& img, int x, int y, int w, int h) {
    if (x < 0 || y < 0 || w < 1 || h < 1 || x + w > img.width || y + h > img.height)
        throw DataError("crop region outside image");
    Image out(w, h, img.channels);
    const std::size_t row = static_cast<std::size_t>(w) * img.channels;
    for (int r = 0; r < h; ++r)
        std::memcpy(&out.pixels[static_cast<std::size_t>(r) * row], &img.pixels[img.index(x, y + r)], row);
    return out;
}

// Bilinear resize of the longer side to `side`, then centered zero padding to a square.
inline Image letterbox(const Image& img, int side, std::uint8_t pad = 0) {
    const double scale = static_cast<double>(side) / std::max(img.width, img.height);
    const int nw = std::max(1, static_cast<int>(std::lround(img.width * scale)));
    const int nh = std::max(1, static_cast<int>(std::lround(img.height * scale)));
    cv::Mat resized;
    cv::resize(to_mat(img), resized, cv::Size(nw, nh), 0, 0, cv::INTER_LINEAR);
    cv::Mat canvas(side, side, CV_8UC(img.channels), cv::Scalar::all(pad));
    resized.copyTo(canvas(cv::Rect((side - nw) / 2, (side - nh) / 2, nw, nh)));
    return from_mat(canvas);
}

}  // namespace ooc

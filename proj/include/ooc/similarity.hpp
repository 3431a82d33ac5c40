#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "ooc/common.hpp"
#include "ooc/embedding.hpp"
#include "ooc/image.hpp"

namespace ooc::similarity {

enum class Kind { cosine, ssim, mse_sim };

struct SimilarityScore {
    double value = 0;
    Kind kind = Kind::cosine;
};

/// dot(a,b) / (|a||b|) accumulated in double and clamped to [-1, 1].
inline SimilarityScore cosine(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size())
        throw DataError("cosine: dim mismatch (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i], y = b[i];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0 || nb == 0) throw DataError("cosine: zero vector");
    // sqrt(na)*sqrt(nb) rather than sqrt(na*nb) keeps the result symmetric bit-for-bit.
    const double c = dot / (std::sqrt(na) * std::sqrt(nb));
    return {std::clamp(c, -1.0, 1.0), Kind::cosine};
}

inline SimilarityScore cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
    return cosine(std::span<const float>(a.values), std::span<const float>(b.values));
}

inline void require_same_shape(const Image& x, const Image& y, const char* who) {
    if (x.width != y.width || x.height != y.height || x.channels != y.channels)
        throw DataError(std::string(who) + ": image dimensions differ");
}

/// 1 - mse / 255^2 over every 8-bit channel value.
inline SimilarityScore mse_sim(const Image& x, const Image& y) {
    require_same_shape(x, y, "mse_sim");
    if (x.pixels.empty()) throw DataError("mse_sim: empty image");
    double acc = 0;
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
        const double d = static_cast<double>(x.pixels[i]) - y.pixels[i];
        acc += d * d;
    }
    const double mse = acc / static_cast<double>(x.pixels.size());
    return {1.0 - mse / (255.0 * 255.0), Kind::mse_sim};
}

struct SsimParams {
    static constexpr int window = 11;
    static constexpr double sigma = 1.5;
    static constexpr double k1 = 0.01;
    static constexpr double k2 = 0.03;
    static constexpr double dynamic_range = 255.0;
};

inline std::array<double, SsimParams::window> gaussian_window() {
    std::array<double, SsimParams::window> w{};
    constexpr int r = SsimParams::window / 2;
    double sum = 0;
    for (int i = -r; i <= r; ++i) {
        w[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2 * SsimParams::sigma * SsimParams::sigma));
        sum += w[static_cast<std::size_t>(i + r)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

/// Mean SSIM over all fully-contained 11x11 Gaussian windows of the 8-bit
/// grayscale images (no border padding).
inline SimilarityScore ssim(const Image& x_in, const Image& y_in) {
    if (x_in.width != y_in.width || x_in.height != y_in.height) throw DataError("ssim: image dimensions differ");
    constexpr int win = SsimParams::window;
    if (x_in.width < win || x_in.height < win) throw DataError("ssim: image smaller than the 11x11 window");
    const Image x = to_gray(x_in), y = to_gray(y_in);
    const int w = x.width, h = x.height, ow = w - win + 1, oh = h - win + 1;
    const auto g = gaussian_window();

    // Horizontal pass over the five moment images, then vertical.
    enum { MX, MY, XX, YY, XY, N };
    std::vector<std::array<double, N>> horiz(static_cast<std::size_t>(ow) * h);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < ow; ++c) {
            std::array<double, N> acc{};
            for (int k = 0; k < win; ++k) {
                const double a = x.at(c + k, r), b = y.at(c + k, r), wk = g[static_cast<std::size_t>(k)];
                acc[MX] += wk * a;
                acc[MY] += wk * b;
                acc[XX] += wk * (a * a);
                acc[YY] += wk * (b * b);
                acc[XY] += wk * (a * b);
            }
            horiz[static_cast<std::size_t>(r) * ow + c] = acc;
        }

    const double c1 = std::pow(SsimParams::k1 * SsimParams::dynamic_range, 2);
    const double c2 = std::pow(SsimParams::k2 * SsimParams::dynamic_range, 2);
    double total = 0;
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            std::array<double, N> m{};
            for (int k = 0; k < win; ++k) {
                const auto& hv = horiz[static_cast<std::size_t>(r + k) * ow + c];
                for (int i = 0; i < N; ++i) m[i] += g[static_cast<std::size_t>(k)] * hv[i];
            }
            const double vx = m[XX] - m[MX] * m[MX];
            const double vy = m[YY] - m[MY] * m[MY];
            const double cxy = m[XY] - m[MX] * m[MY];
            total += ((2 * m[MX] * m[MY] + c1) * (2 * cxy + c2)) /
                     ((m[MX] * m[MX] + m[MY] * m[MY] + c1) * (vx + vy + c2));
        }
    return {total / (static_cast<double>(ow) * oh), Kind::ssim};
}

}  // namespace ooc::similarity

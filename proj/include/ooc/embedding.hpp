#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ooc/common.hpp"

namespace ooc {

/// Fixed-dimension image representation tagged with the featurizer config that produced it.
struct EmbeddingVector {
    std::vector<float> values;
    std::string config_digest;

    std::size_t dim() const noexcept { return values.size(); }
    friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;
};

inline double l2_norm(std::span<const float> v) {
    double s = 0;
    for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

inline void require_finite(std::span<const float> v) {
    for (float x : v)
        if (!std::isfinite(x)) throw DataError("non-finite value in embedding");
}

/// In-place L2 normalization; a zero vector is an error.
inline void l2_normalize(std::vector<float>& v) {
    const double n = l2_norm(v);
    if (n == 0) throw DataError("cannot normalize a zero vector");
    for (auto& x : v) x = static_cast<float>(x / n);
}

}  // namespace ooc

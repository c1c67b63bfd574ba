#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace damp {

// Small dense image, channel-last layout: data[(y*w + x)*c + ch].
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h_, int w_, int c_, double fill = 0.0)
        : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, fill) {}

    double& at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
    double at(int y, int x, int ch) const { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }

    bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }

    std::string shape_str() const {
        return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
    }
};

inline double l2_distance(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("l2_distance: " + a.shape_str() + " vs " + b.shape_str());
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

}  // namespace damp

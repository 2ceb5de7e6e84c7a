#pragma once

// Test-side reference implementations. These are deliberately written as
// plain nested loops over flat arrays, independent of the tensor engine, so
// they can serve as oracles for it.

#include <cmath>
#include <random>
#include <vector>

#include <msgr/tensor.hpp>

namespace oracle {

inline std::vector<double> rand_vec(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

inline msgr::TensorPtr rand_tensor(std::mt19937_64& rng, std::vector<int> shape, bool requires_grad = false,
                                   double lo = -1.0, double hi = 1.0) {
    auto n = msgr::Tensor::count(shape);
    return msgr::Tensor::from_data(std::move(shape), rand_vec(rng, n, lo, hi), requires_grad);
}

// Zero-padded cross-correlation, six nested loops.
inline std::vector<double> naive_conv2d(const std::vector<double>& x, int C, int H, int W,
                                        const std::vector<double>& w, int O, int K,
                                        const std::vector<double>& b, int stride, int dilation, int pad_h,
                                        int pad_w, int& HO, int& WO) {
    HO = (H + 2 * pad_h - dilation * (K - 1) - 1) / stride + 1;
    WO = (W + 2 * pad_w - dilation * (K - 1) - 1) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(O) * HO * WO, 0.0);
    for (int o = 0; o < O; ++o)
        for (int oy = 0; oy < HO; ++oy)
            for (int ox = 0; ox < WO; ++ox) {
                double acc = b.empty() ? 0.0 : b[static_cast<std::size_t>(o)];
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < K; ++ky)
                        for (int kx = 0; kx < K; ++kx) {
                            int iy = oy * stride - pad_h + ky * dilation;
                            int ix = ox * stride - pad_w + kx * dilation;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            acc += w[((static_cast<std::size_t>(o) * C + c) * K + ky) * K + kx] *
                                   x[(static_cast<std::size_t>(c) * H + iy) * W + ix];
                        }
                out[(static_cast<std::size_t>(o) * HO + oy) * WO + ox] = acc;
            }
    return out;
}

inline std::vector<double> naive_softmax_rows(const std::vector<double>& x, int rows, int cols) {
    std::vector<double> out(x.size());
    for (int r = 0; r < rows; ++r) {
        double m = x[static_cast<std::size_t>(r) * cols];
        for (int c = 1; c < cols; ++c) m = std::max(m, x[static_cast<std::size_t>(r) * cols + c]);
        double denom = 0.0;
        for (int c = 0; c < cols; ++c) denom += std::exp(x[static_cast<std::size_t>(r) * cols + c] - m);
        for (int c = 0; c < cols; ++c)
            out[static_cast<std::size_t>(r) * cols + c] = std::exp(x[static_cast<std::size_t>(r) * cols + c] - m) / denom;
    }
    return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return a.size() == b.size() ? m : 1e30;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

} // namespace oracle

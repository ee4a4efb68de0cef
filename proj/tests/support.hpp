#ifndef DCV_TESTS_SUPPORT_HPP
#define DCV_TESTS_SUPPORT_HPP

// Shared helpers for the unit and acceptance suites: seeded clips, a
// central-difference gradient checker and brute-force metric oracles.

#include "dcv/autograd.hpp"
#include "dcv/params.hpp"
#include "dcv/rng.hpp"
#include "dcv/video_core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace dcv::testing {

inline VideoClip random_clip(Rng& rng, Index T, Index H, Index W) {
    return VideoClip(rng.uniform_tensor<float>({T, H, W, 3}, -1.0, 1.0), 8);
}

inline VideoClip random_clip(std::uint64_t seed, Index T, Index H, Index W) {
    Rng rng(seed);
    return random_clip(rng, T, H, W);
}

struct GradCheck {
    double worst_rel = 0.0;
    std::string worst_name;
    int checked = 0;
};

/// Compares backward() against central differences on up to `per_param` entries of
/// every parameter accepted by `keep`. The relative error uses |fd| + |g| floored at `floor`.
template <typename S>
GradCheck check_gradients(ParamStore<S>& params, const std::function<Var<S>()>& loss, int per_param = 3,
                          double h = 1e-6, double floor = 1e-6,
                          const std::function<bool(const std::string&)>& keep = {}) {
    params.zero_grad();
    backward(loss());
    GradCheck out;
    for (auto& [name, v] : params) {
        if (!v.requires_grad() || (keep && !keep(name))) continue;
        const Buffer<S> analytic = v.grad();
        const Index stride = std::max<Index>(1, v.numel() / per_param);
        for (Index i = 0; i < v.numel(); i += stride) {
            S& w = v.mutable_value().data[i];
            const S original = w;
            double up, down;
            {
                NoGradGuard guard;
                w = original + S(h);
                up = double(loss().value().data[0]);
                w = original - S(h);
                down = double(loss().value().data[0]);
            }
            w = original;
            const double fd = (up - down) / (2 * h);
            const double g = double(analytic[i]);
            const double rel = std::abs(fd - g) / std::max(floor, std::abs(fd) + std::abs(g));
            if (rel > out.worst_rel) {
                out.worst_rel = rel;
                out.worst_name = name + "[" + std::to_string(i) + "]";
            }
            ++out.checked;
        }
    }
    return out;
}

// ---- metric oracles (plain loops, double precision) -----------------------------------------

inline double oracle_psnr(const VideoClip& x, const VideoClip& y) {
    double se = 0;
    for (Index i = 0; i < x.frames.numel(); ++i) {
        const double d = double(x.frames.data[i]) - double(y.frames.data[i]);
        se += d * d;
    }
    const double mse = se / double(x.frames.numel());
    if (mse == 0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(4.0 / mse));
}

inline std::vector<double> oracle_luma(const VideoClip& c, Index t) {
    std::vector<double> out;
    for (Index y = 0; y < c.height(); ++y)
        for (Index x = 0; x < c.width(); ++x) {
            const float* p = c.frame_ptr(t) + (y * c.width() + x) * 3;
            out.push_back(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
        }
    return out;
}

/// Direct 2-D windowed SSIM: for every valid window position, Gaussian-weighted moments.
inline double oracle_ssim_plane(const std::vector<double>& a, const std::vector<double>& b, Index H, Index W,
                                int window = 7, double sigma = 1.5) {
    std::vector<double> g(static_cast<std::size_t>(window));
    double gs = 0;
    for (int i = 0; i < window; ++i) {
        const double d = i - (window - 1) / 2.0;
        g[std::size_t(i)] = std::exp(-d * d / (2 * sigma * sigma));
        gs += g[std::size_t(i)];
    }
    for (double& v : g) v /= gs;
    const double c1 = std::pow(0.01 * 2.0, 2), c2 = std::pow(0.03 * 2.0, 2);
    double total = 0;
    int n = 0;
    for (Index y0 = 0; y0 + window <= H; ++y0)
        for (Index x0 = 0; x0 + window <= W; ++x0) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int dy = 0; dy < window; ++dy)
                for (int dx = 0; dx < window; ++dx) {
                    const double w = g[std::size_t(dy)] * g[std::size_t(dx)];
                    const std::size_t k = std::size_t((y0 + dy) * W + x0 + dx);
                    ma += w * a[k];
                    mb += w * b[k];
                    saa += w * a[k] * a[k];
                    sbb += w * b[k] * b[k];
                    sab += w * a[k] * b[k];
                }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++n;
        }
    return total / n;
}

inline double oracle_ssim(const VideoClip& x, const VideoClip& y) {
    double s = 0;
    for (Index t = 0; t < x.frames_count(); ++t)
        s += oracle_ssim_plane(oracle_luma(x, t), oracle_luma(y, t), x.height(), x.width());
    return s / double(x.frames_count());
}

/// Mean over non-overlapping windows by explicit index arithmetic on a [T, H, W, D] grid.
template <typename S>
std::vector<double> oracle_avg_pool(const Tensor<S>& grid, Index To, Index Ho, Index Wo) {
    const Index T = grid.dim(0), H = grid.dim(1), W = grid.dim(2), D = grid.dim(3);
    const Index kt = T / To, kh = H / Ho, kw = W / Wo;
    std::vector<double> out;
    for (Index t = 0; t < To; ++t)
        for (Index i = 0; i < Ho; ++i)
            for (Index j = 0; j < Wo; ++j)
                for (Index d = 0; d < D; ++d) {
                    double s = 0;
                    for (Index a = 0; a < kt; ++a)
                        for (Index b = 0; b < kh; ++b)
                            for (Index c = 0; c < kw; ++c)
                                s += double(grid.data[(((t * kt + a) * H + i * kh + b) * W + j * kw + c) * D + d]);
                    out.push_back(s / double(kt * kh * kw));
                }
    return out;
}

}  // namespace dcv::testing

#endif  // DCV_TESTS_SUPPORT_HPP

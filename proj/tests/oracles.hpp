// Test-only reference implementations. Everything here is written as plainly
// as possible (direct nested loops, scalar formulas) and stays independent of
// the library's execution strategy so it can serve as an oracle for it.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "dynhead/tape.hpp"
#include "dynhead/tensor.hpp"

namespace oracles {

using dynhead::Shape;
using dynhead::Tensor;

/// Direct 6-nested-loop 3x3 cross-correlation, zero padding, stride 1.
inline Tensor conv2d_reference(const Tensor& input, const Tensor& weight, const Tensor& bias,
                               int groups) {
    const Shape is = input.shape();
    const Shape ws = weight.shape();
    const int cpg = is.c / groups;
    const int ocpg = ws.n / groups;
    Tensor out = Tensor::zeros({is.n, ws.n, is.h, is.w});
    for (int b = 0; b < is.n; ++b)
        for (int oc = 0; oc < ws.n; ++oc) {
            const int g = oc / ocpg;
            for (int y = 0; y < is.h; ++y)
                for (int x = 0; x < is.w; ++x) {
                    double acc = bias ? bias.at(0, oc, 0, 0) : 0.0;
                    for (int icg = 0; icg < cpg; ++icg)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int iy = y + ky - 1, ix = x + kx - 1;
                                if (iy < 0 || iy >= is.h || ix < 0 || ix >= is.w) continue;
                                acc += weight.at(oc, icg, ky, kx) *
                                       input.at(b, g * cpg + icg, iy, ix);
                            }
                    out.at(b, oc, y, x) = acc;
                }
        }
    return out;
}

/// Naive per-location sparse convolution with an instrumented MAC counter.
/// Every enabled location performs c_out * (c_in/groups) * 9 multiply-
/// accumulates (zero-padding taps included, matching the cost model).
inline Tensor sparse_conv2d_instrumented(const Tensor& input, const Tensor& weight,
                                         const Tensor& bias, int groups, const Tensor& mask,
                                         std::int64_t* mac_counter) {
    const Shape is = input.shape();
    const Shape ws = weight.shape();
    const int cpg = is.c / groups;
    const int ocpg = ws.n / groups;
    Tensor out = Tensor::zeros({is.n, ws.n, is.h, is.w});
    for (int b = 0; b < is.n; ++b)
        for (int y = 0; y < is.h; ++y)
            for (int x = 0; x < is.w; ++x) {
                if (mask.at(b, 0, y, x) == 0.0) continue;
                for (int oc = 0; oc < ws.n; ++oc) {
                    const int g = oc / ocpg;
                    double acc = bias ? bias.at(0, oc, 0, 0) : 0.0;
                    for (int icg = 0; icg < cpg; ++icg)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int iy = y + ky - 1, ix = x + kx - 1;
                                const double in_v =
                                    (iy < 0 || iy >= is.h || ix < 0 || ix >= is.w)
                                        ? 0.0
                                        : input.at(b, g * cpg + icg, iy, ix);
                                acc += weight.at(oc, icg, ky, kx) * in_v;
                                if (mac_counter) ++*mac_counter;
                            }
                    out.at(b, oc, y, x) = acc;
                }
            }
    return out;
}

/// Per (sample, group) mean and variance (biased), computed directly.
inline void group_stats_reference(const Tensor& x, int num_groups, int b, int g, double* mean,
                                  double* var) {
    const Shape s = x.shape();
    const int cpg = s.c / num_groups;
    double sum = 0.0, count = 0.0;
    for (int cc = 0; cc < cpg; ++cc)
        for (int y = 0; y < s.h; ++y)
            for (int x_ = 0; x_ < s.w; ++x_) {
                sum += x.at(b, g * cpg + cc, y, x_);
                count += 1.0;
            }
    *mean = sum / count;
    double acc = 0.0;
    for (int cc = 0; cc < cpg; ++cc)
        for (int y = 0; y < s.h; ++y)
            for (int x_ = 0; x_ < s.w; ++x_) {
                const double d = x.at(b, g * cpg + cc, y, x_) - *mean;
                acc += d * d;
            }
    *var = acc / count;
}

inline Tensor group_norm_reference(const Tensor& x, int num_groups, const Tensor& gamma,
                                   const Tensor& beta, double eps) {
    const Shape s = x.shape();
    const int cpg = s.c / num_groups;
    Tensor out = Tensor::zeros(s);
    for (int b = 0; b < s.n; ++b)
        for (int g = 0; g < num_groups; ++g) {
            double mean = 0.0, var = 0.0;
            group_stats_reference(x, num_groups, b, g, &mean, &var);
            for (int cc = 0; cc < cpg; ++cc) {
                const int c = g * cpg + cc;
                for (int y = 0; y < s.h; ++y)
                    for (int x_ = 0; x_ < s.w; ++x_)
                        out.at(b, c, y, x_) = gamma.at(0, c, 0, 0) *
                                                  (x.at(b, c, y, x_) - mean) /
                                                  std::sqrt(var + eps) +
                                              beta.at(0, c, 0, 0);
            }
        }
    return out;
}

/// Scalar align-corners-false interpolation of a 1-D sequence at factor 2.
inline std::vector<double> interp_axis_x2_reference(const std::vector<double>& in) {
    const int n = static_cast<int>(in.size());
    std::vector<double> out(2 * n);
    for (int d = 0; d < 2 * n; ++d) {
        double src = (d + 0.5) / 2.0 - 0.5;
        src = std::max(0.0, std::min(src, static_cast<double>(n - 1)));
        const int i0 = static_cast<int>(std::floor(src));
        const int i1 = std::min(i0 + 1, n - 1);
        const double t = src - i0;
        out[d] = (1.0 - t) * in[i0] + t * in[i1];
    }
    return out;
}

/// Separable 2x bilinear upsample built on the scalar axis routine.
inline Tensor upsample_x2_reference(const Tensor& x) {
    const Shape s = x.shape();
    Tensor out = Tensor::zeros({s.n, s.c, 2 * s.h, 2 * s.w});
    for (int b = 0; b < s.n; ++b)
        for (int c = 0; c < s.c; ++c) {
            // rows first
            std::vector<std::vector<double>> rows(s.h);
            for (int y = 0; y < s.h; ++y) {
                std::vector<double> row(s.w);
                for (int xx = 0; xx < s.w; ++xx) row[xx] = x.at(b, c, y, xx);
                rows[y] = interp_axis_x2_reference(row);
            }
            for (int xx = 0; xx < 2 * s.w; ++xx) {
                std::vector<double> col(s.h);
                for (int y = 0; y < s.h; ++y) col[y] = rows[y][xx];
                const std::vector<double> icol = interp_axis_x2_reference(col);
                for (int y = 0; y < 2 * s.h; ++y) out.at(b, c, y, xx) = icol[y];
            }
        }
    return out;
}

inline Tensor downsample_x2_reference(const Tensor& x) {
    const Shape s = x.shape();
    Tensor out = Tensor::zeros({s.n, s.c, s.h / 2, s.w / 2});
    for (int b = 0; b < s.n; ++b)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h / 2; ++y)
                for (int xx = 0; xx < s.w / 2; ++xx)
                    out.at(b, c, y, xx) = (x.at(b, c, 2 * y, 2 * xx) + x.at(b, c, 2 * y, 2 * xx + 1) +
                                           x.at(b, c, 2 * y + 1, 2 * xx) +
                                           x.at(b, c, 2 * y + 1, 2 * xx + 1)) /
                                          4.0;
    return out;
}

/// Brute-force (2*radius+1)^2 window max, clipped at the borders.
inline Tensor window_max_reference(const Tensor& x, int radius) {
    const Shape s = x.shape();
    Tensor out = Tensor::zeros(s);
    for (int b = 0; b < s.n; ++b)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y)
                for (int xx = 0; xx < s.w; ++xx) {
                    double best = -1e300;
                    for (int dy = -radius; dy <= radius; ++dy)
                        for (int dx = -radius; dx <= radius; ++dx) {
                            const int iy = y + dy, ix = xx + dx;
                            if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
                            best = std::max(best, x.at(b, c, iy, ix));
                        }
                    out.at(b, c, y, xx) = best;
                }
    return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

/// Central finite difference of a scalar-valued forward pass with respect to
/// one coordinate of a leaf tensor.
inline double finite_diff(const std::function<double()>& forward, Tensor leaf, std::int64_t index,
                          double step = 1e-5) {
    double* v = leaf.data() + index;
    const double saved = *v;
    *v = saved + step;
    const double up = forward();
    *v = saved - step;
    const double down = forward();
    *v = saved;
    return (up - down) / (2.0 * step);
}

inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0u);
        std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

} // namespace oracles

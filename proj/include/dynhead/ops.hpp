#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynhead/tape.hpp"
#include "dynhead/tensor.hpp"

namespace dynhead {

enum class ResampleDir { Up, Down };

namespace ops_detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape().str() +
                                    " vs " + b.shape().str());
}

} // namespace ops_detail

inline Tensor relu(Tape& tape, Tensor x) {
    Tensor out = Tensor::zeros(x.shape());
    const double* xd = x.data();
    double* od = out.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    tape.record({x}, out, [x, out]() mutable {
        const double* xd = x.data();
        const double* g = out.grad().data();
        double* dx = x.grad().data();
        const std::int64_t n = x.numel();
        for (std::int64_t i = 0; i < n; ++i)
            if (xd[i] > 0.0) dx[i] += g[i];
    });
    return out;
}

inline Tensor add(Tape& tape, Tensor a, Tensor b) {
    ops_detail::check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const double* ad = a.data();
    const double* bd = b.data();
    double* od = out.data();
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i];
    tape.record({a, b}, out, [a, b, out]() mutable {
        const double* g = out.grad().data();
        double* da = a.grad().data();
        double* db = b.grad().data();
        const std::int64_t n = a.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            da[i] += g[i];
            db[i] += g[i];
        }
    });
    return out;
}

/// out = k * x for a compile-time constant k (no gradient w.r.t. k).
inline Tensor scale(Tape& tape, Tensor x, double k) {
    Tensor out = Tensor::zeros(x.shape());
    const double* xd = x.data();
    double* od = out.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) od[i] = k * xd[i];
    tape.record({x}, out, [x, out, k]() mutable {
        const double* g = out.grad().data();
        double* dx = x.grad().data();
        const std::int64_t n = x.numel();
        for (std::int64_t i = 0; i < n; ++i) dx[i] += k * g[i];
    });
    return out;
}

/// Broadcasts a single-channel map over all channels of x:
/// out[b,c,y,x] = x[b,c,y,x] * map[b,0,y,x].
inline Tensor mul_map(Tape& tape, Tensor x, Tensor map) {
    const Shape xs = x.shape(), ms = map.shape();
    if (ms.c != 1)
        throw std::invalid_argument("mul_map: map must have one channel, got " +
                                    std::to_string(ms.c));
    if (ms.n != xs.n || ms.h != xs.h || ms.w != xs.w)
        throw std::invalid_argument("mul_map: map shape " + ms.str() +
                                    " does not match features " + xs.str());
    Tensor out = Tensor::zeros(xs);
    const double* xd = x.data();
    const double* md = map.data();
    double* od = out.data();
    const std::int64_t hw = xs.spatial();
    for (int b = 0; b < xs.n; ++b) {
        const double* mrow = md + b * hw;
        for (int c = 0; c < xs.c; ++c) {
            const std::int64_t off = xs.index(b, c, 0, 0);
            for (std::int64_t i = 0; i < hw; ++i) od[off + i] = xd[off + i] * mrow[i];
        }
    }
    tape.record({x, map}, out, [x, map, out]() mutable {
        const Shape xs = x.shape();
        const double* xd = x.data();
        const double* md = map.data();
        const double* g = out.grad().data();
        double* dx = x.grad().data();
        double* dm = map.grad().data();
        const std::int64_t hw = xs.spatial();
        for (int b = 0; b < xs.n; ++b) {
            const double* mrow = md + b * hw;
            double* dmrow = dm + b * hw;
            for (int c = 0; c < xs.c; ++c) {
                const std::int64_t off = xs.index(b, c, 0, 0);
                for (std::int64_t i = 0; i < hw; ++i) {
                    dx[off + i] += g[off + i] * mrow[i];
                    dmrow[i] += g[off + i] * xd[off + i];
                }
            }
        }
    });
    return out;
}

/// Factor-2 bilinear resampling. Up doubles H and W (align-corners-false);
/// down halves them via 2x2 averaging (bilinear at factor 1/2).
inline Tensor bilinear_resample(Tape& tape, Tensor x, ResampleDir dir) {
    const Shape xs = x.shape();
    if (dir == ResampleDir::Down) {
        if (xs.h % 2 != 0 || xs.w % 2 != 0)
            throw std::invalid_argument("bilinear_resample: down requires even spatial dims, got " +
                                        std::to_string(xs.h) + "x" + std::to_string(xs.w));
        Tensor out = Tensor::zeros({xs.n, xs.c, xs.h / 2, xs.w / 2});
        const double* xd = x.data();
        double* od = out.data();
        const Shape os = out.shape();
        for (int b = 0; b < xs.n; ++b)
            for (int c = 0; c < xs.c; ++c)
                for (int y = 0; y < os.h; ++y)
                    for (int xx = 0; xx < os.w; ++xx)
                        od[os.index(b, c, y, xx)] =
                            0.25 * (xd[xs.index(b, c, 2 * y, 2 * xx)] +
                                    xd[xs.index(b, c, 2 * y, 2 * xx + 1)] +
                                    xd[xs.index(b, c, 2 * y + 1, 2 * xx)] +
                                    xd[xs.index(b, c, 2 * y + 1, 2 * xx + 1)]);
        tape.record({x}, out, [x, out]() mutable {
            const Shape xs = x.shape();
            const Shape os = out.shape();
            const double* g = out.grad().data();
            double* dx = x.grad().data();
            for (int b = 0; b < xs.n; ++b)
                for (int c = 0; c < xs.c; ++c)
                    for (int y = 0; y < os.h; ++y)
                        for (int xx = 0; xx < os.w; ++xx) {
                            const double gv = 0.25 * g[os.index(b, c, y, xx)];
                            dx[xs.index(b, c, 2 * y, 2 * xx)] += gv;
                            dx[xs.index(b, c, 2 * y, 2 * xx + 1)] += gv;
                            dx[xs.index(b, c, 2 * y + 1, 2 * xx)] += gv;
                            dx[xs.index(b, c, 2 * y + 1, 2 * xx + 1)] += gv;
                        }
        });
        return out;
    }

    // Up: per output index d, source coordinate (d + 0.5)/2 - 0.5 clamped at 0,
    // interpolated between floor and floor+1 (border-replicated).
    const int H = xs.h, W = xs.w;
    const int OH = 2 * H, OW = 2 * W;
    struct Lerp {
        int i0, i1;
        double t;
    };
    auto make_axis = [](int in_size, int out_size) {
        std::vector<Lerp> axis(out_size);
        for (int d = 0; d < out_size; ++d) {
            double src = (d + 0.5) * 0.5 - 0.5;
            if (src < 0.0) src = 0.0;
            const int i0 = static_cast<int>(src);
            axis[d] = {i0, std::min(i0 + 1, in_size - 1), src - i0};
        }
        return axis;
    };
    auto ay = std::make_shared<std::vector<Lerp>>(make_axis(H, OH));
    auto ax = std::make_shared<std::vector<Lerp>>(make_axis(W, OW));

    Tensor out = Tensor::zeros({xs.n, xs.c, OH, OW});
    const double* xd = x.data();
    double* od = out.data();
    const Shape os = out.shape();
    for (int b = 0; b < xs.n; ++b)
        for (int c = 0; c < xs.c; ++c)
            for (int y = 0; y < OH; ++y) {
                const auto [y0, y1, ty] = (*ay)[y];
                for (int xx = 0; xx < OW; ++xx) {
                    const auto [x0, x1, tx] = (*ax)[xx];
                    od[os.index(b, c, y, xx)] =
                        (1 - ty) * ((1 - tx) * xd[xs.index(b, c, y0, x0)] +
                                    tx * xd[xs.index(b, c, y0, x1)]) +
                        ty * ((1 - tx) * xd[xs.index(b, c, y1, x0)] +
                              tx * xd[xs.index(b, c, y1, x1)]);
                }
            }
    tape.record({x}, out, [x, out, ay, ax]() mutable {
        const Shape xs = x.shape();
        const Shape os = out.shape();
        const double* g = out.grad().data();
        double* dx = x.grad().data();
        for (int b = 0; b < xs.n; ++b)
            for (int c = 0; c < xs.c; ++c)
                for (int y = 0; y < os.h; ++y) {
                    const auto [y0, y1, ty] = (*ay)[y];
                    for (int xx = 0; xx < os.w; ++xx) {
                        const auto [x0, x1, tx] = (*ax)[xx];
                        const double gv = g[os.index(b, c, y, xx)];
                        dx[xs.index(b, c, y0, x0)] += (1 - ty) * (1 - tx) * gv;
                        dx[xs.index(b, c, y0, x1)] += (1 - ty) * tx * gv;
                        dx[xs.index(b, c, y1, x0)] += ty * (1 - tx) * gv;
                        dx[xs.index(b, c, y1, x1)] += ty * tx * gv;
                    }
                }
    });
    return out;
}

namespace ops_detail {

/// One 3x3 stride-1 max pool; border maxima over the valid window only.
/// Gradient routes to the first maximal element in input scan order.
inline Tensor max_pool3_once(Tape& tape, Tensor x) {
    const Shape xs = x.shape();
    Tensor out = Tensor::zeros(xs);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(x.numel());
    const double* xd = x.data();
    double* od = out.data();
    for (int b = 0; b < xs.n; ++b)
        for (int c = 0; c < xs.c; ++c)
            for (int y = 0; y < xs.h; ++y)
                for (int xx = 0; xx < xs.w; ++xx) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = -1;
                    for (int dy = -1; dy <= 1; ++dy) {
                        const int iy = y + dy;
                        if (iy < 0 || iy >= xs.h) continue;
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int ix = xx + dx;
                            if (ix < 0 || ix >= xs.w) continue;
                            const std::int64_t idx = xs.index(b, c, iy, ix);
                            if (xd[idx] > best) {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    const std::int64_t oi = xs.index(b, c, y, xx);
                    od[oi] = best;
                    (*argmax)[oi] = best_idx;
                }
    tape.record({x}, out, [x, out, argmax]() mutable {
        const double* g = out.grad().data();
        double* dx = x.grad().data();
        const std::int64_t n = out.numel();
        for (std::int64_t i = 0; i < n; ++i) dx[(*argmax)[i]] += g[i];
    });
    return out;
}

} // namespace ops_detail

/// `repeats` applications of 3x3 stride-1 max pooling; equivalent to a
/// (2*repeats+1)^2 window max clipped at the borders.
inline Tensor max_pool_3x3_stride1(Tape& tape, Tensor x, int repeats) {
    if (repeats < 1)
        throw std::invalid_argument("max_pool_3x3_stride1: repeats must be >= 1, got " +
                                    std::to_string(repeats));
    Tensor cur = x;
    for (int r = 0; r < repeats; ++r) cur = ops_detail::max_pool3_once(tape, cur);
    return cur;
}

/// Group normalization over (channels/groups, H, W) slices per sample, with
/// per-channel affine parameters gamma and beta of shape (1, C, 1, 1).
inline Tensor group_norm(Tape& tape, Tensor x, int num_groups, Tensor gamma,
                         Tensor beta, double eps) {
    const Shape xs = x.shape();
    if (num_groups < 1 || xs.c % num_groups != 0)
        throw std::invalid_argument("group_norm: channels " + std::to_string(xs.c) +
                                    " not divisible by num_groups " + std::to_string(num_groups));
    if (eps <= 0.0) throw std::invalid_argument("group_norm: eps must be > 0");
    if (gamma.shape().c != xs.c || beta.shape().c != xs.c)
        throw std::invalid_argument("group_norm: affine parameter channels must equal " +
                                    std::to_string(xs.c));

    const int cpg = xs.c / num_groups;
    const std::int64_t gsize = static_cast<std::int64_t>(cpg) * xs.spatial();
    Tensor out = Tensor::zeros(xs);
    auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(xs.n) * num_groups);
    auto inv_std =
        std::make_shared<std::vector<double>>(static_cast<std::size_t>(xs.n) * num_groups);

    const double* xd = x.data();
    const double* gm = gamma.data();
    const double* bt = beta.data();
    double* od = out.data();
    for (int b = 0; b < xs.n; ++b) {
        for (int g = 0; g < num_groups; ++g) {
            const std::int64_t base = xs.index(b, g * cpg, 0, 0);
            double mu = 0.0;
            for (std::int64_t i = 0; i < gsize; ++i) mu += xd[base + i];
            mu /= static_cast<double>(gsize);
            double var = 0.0;
            for (std::int64_t i = 0; i < gsize; ++i) {
                const double d = xd[base + i] - mu;
                var += d * d;
            }
            var /= static_cast<double>(gsize);
            const double inv = 1.0 / std::sqrt(var + eps);
            (*mean)[static_cast<std::size_t>(b) * num_groups + g] = mu;
            (*inv_std)[static_cast<std::size_t>(b) * num_groups + g] = inv;
            for (int cc = 0; cc < cpg; ++cc) {
                const int c = g * cpg + cc;
                const std::int64_t coff = xs.index(b, c, 0, 0);
                const double a = gm[c] * inv;
                const double sh = bt[c] - a * mu;
                for (std::int64_t i = 0; i < xs.spatial(); ++i) od[coff + i] = a * xd[coff + i] + sh;
            }
        }
    }

    tape.record({x, gamma, beta}, out,
                [x, gamma, beta, out, num_groups, cpg, gsize, mean, inv_std]() mutable {
        const Shape xs = x.shape();
        const double* xd = x.data();
        const double* gm = gamma.data();
        const double* g = out.grad().data();
        double* dx = x.grad().data();
        double* dgamma = gamma.grad().data();
        double* dbeta = beta.grad().data();
        const double inv_m = 1.0 / static_cast<double>(gsize);
        for (int b = 0; b < xs.n; ++b) {
            for (int grp = 0; grp < num_groups; ++grp) {
                const double mu = (*mean)[static_cast<std::size_t>(b) * num_groups + grp];
                const double inv = (*inv_std)[static_cast<std::size_t>(b) * num_groups + grp];
                // dxhat = dy * gamma; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                double s1 = 0.0, s2 = 0.0;
                for (int cc = 0; cc < cpg; ++cc) {
                    const int c = grp * cpg + cc;
                    const std::int64_t coff = xs.index(b, c, 0, 0);
                    for (std::int64_t i = 0; i < xs.spatial(); ++i) {
                        const double xhat = (xd[coff + i] - mu) * inv;
                        const double dy = g[coff + i];
                        dgamma[c] += dy * xhat;
                        dbeta[c] += dy;
                        const double dxhat = dy * gm[c];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                    }
                }
                for (int cc = 0; cc < cpg; ++cc) {
                    const int c = grp * cpg + cc;
                    const std::int64_t coff = xs.index(b, c, 0, 0);
                    for (std::int64_t i = 0; i < xs.spatial(); ++i) {
                        const double xhat = (xd[coff + i] - mu) * inv;
                        const double dxhat = g[coff + i] * gm[c];
                        dx[coff + i] += inv * (dxhat - inv_m * s1 - xhat * inv_m * s2);
                    }
                }
            }
        }
    });
    return out;
}

/// Mean over the spatial extent; output is (B, C, 1, 1).
inline Tensor global_avg_pool(Tape& tape, Tensor x) {
    const Shape xs = x.shape();
    Tensor out = Tensor::zeros({xs.n, xs.c, 1, 1});
    const double inv = 1.0 / static_cast<double>(xs.spatial());
    const double* xd = x.data();
    double* od = out.data();
    for (int b = 0; b < xs.n; ++b)
        for (int c = 0; c < xs.c; ++c) {
            const std::int64_t off = xs.index(b, c, 0, 0);
            double acc = 0.0;
            for (std::int64_t i = 0; i < xs.spatial(); ++i) acc += xd[off + i];
            od[out.shape().index(b, c, 0, 0)] = acc * inv;
        }
    tape.record({x}, out, [x, out, inv]() mutable {
        const Shape xs = x.shape();
        const double* g = out.grad().data();
        double* dx = x.grad().data();
        for (int b = 0; b < xs.n; ++b)
            for (int c = 0; c < xs.c; ++c) {
                const double gv = g[out.shape().index(b, c, 0, 0)] * inv;
                const std::int64_t off = xs.index(b, c, 0, 0);
                for (std::int64_t i = 0; i < xs.spatial(); ++i) dx[off + i] += gv;
            }
    });
    return out;
}

/// Replicates a (B, C, 1, 1) tensor across a spatial extent.
inline Tensor broadcast_spatial(Tape& tape, Tensor x, int h, int w) {
    const Shape xs = x.shape();
    if (xs.h != 1 || xs.w != 1)
        throw std::invalid_argument("broadcast_spatial: input spatial dims must be 1x1, got " +
                                    xs.str());
    Tensor out = Tensor::zeros({xs.n, xs.c, h, w});
    const double* xd = x.data();
    double* od = out.data();
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    for (int b = 0; b < xs.n; ++b)
        for (int c = 0; c < xs.c; ++c) {
            const double v = xd[xs.index(b, c, 0, 0)];
            const std::int64_t off = out.shape().index(b, c, 0, 0);
            for (std::int64_t i = 0; i < hw; ++i) od[off + i] = v;
        }
    tape.record({x}, out, [x, out, hw]() mutable {
        const Shape xs = x.shape();
        const double* g = out.grad().data();
        double* dx = x.grad().data();
        for (int b = 0; b < xs.n; ++b)
            for (int c = 0; c < xs.c; ++c) {
                const std::int64_t off = out.shape().index(b, c, 0, 0);
                double acc = 0.0;
                for (std::int64_t i = 0; i < hw; ++i) acc += g[off + i];
                dx[xs.index(b, c, 0, 0)] += acc;
            }
    });
    return out;
}

/// Sum of all entries as a 1x1x1x1 scalar.
inline Tensor sum_all(Tape& tape, Tensor x) {
    Tensor out = Tensor::zeros({1, 1, 1, 1});
    const double* xd = x.data();
    double acc = 0.0;
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) acc += xd[i];
    out.data()[0] = acc;
    tape.record({x}, out, [x, out]() mutable {
        const double g = out.grad()[0];
        double* dx = x.grad().data();
        const std::int64_t n = x.numel();
        for (std::int64_t i = 0; i < n; ++i) dx[i] += g;
    });
    return out;
}

/// Weighted per-location softmax cross-entropy. targets holds class indices
/// as doubles, weights the per-location loss weights (both (B,1,H,W), no
/// gradient). The loss is normalized by the total weight.
inline Tensor softmax_cross_entropy(Tape& tape, Tensor logits, Tensor targets,
                                    Tensor weights) {
    const Shape ls = logits.shape();
    if (targets.shape().c != 1 || weights.shape().c != 1 || targets.shape().n != ls.n ||
        targets.shape().h != ls.h || targets.shape().w != ls.w ||
        weights.shape() != targets.shape())
        throw std::invalid_argument("softmax_cross_entropy: target/weight shape mismatch");

    const int K = ls.c;
    const std::int64_t hw = ls.spatial();
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    const double* ld = logits.data();
    const double* td = targets.data();
    const double* wd = weights.data();

    double wsum = 0.0;
    for (std::int64_t i = 0; i < targets.numel(); ++i) wsum += wd[i];
    const double norm = wsum > 0.0 ? 1.0 / wsum : 0.0;

    double loss = 0.0;
    for (int b = 0; b < ls.n; ++b) {
        for (std::int64_t i = 0; i < hw; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) mx = std::max(mx, ld[ls.index(b, k, 0, 0) + i]);
            double z = 0.0;
            for (int k = 0; k < K; ++k) {
                const double e = std::exp(ld[ls.index(b, k, 0, 0) + i] - mx);
                (*probs)[ls.index(b, k, 0, 0) + i] = e;
                z += e;
            }
            const double inv_z = 1.0 / z;
            for (int k = 0; k < K; ++k) (*probs)[ls.index(b, k, 0, 0) + i] *= inv_z;
            const int t = static_cast<int>(td[b * hw + i]);
            if (t < 0 || t >= K)
                throw std::invalid_argument("softmax_cross_entropy: class index " +
                                            std::to_string(t) + " out of range [0," +
                                            std::to_string(K) + ")");
            loss -= wd[b * hw + i] * std::log((*probs)[ls.index(b, t, 0, 0) + i]);
        }
    }
    Tensor out = Tensor::zeros({1, 1, 1, 1});
    out.data()[0] = loss * norm;

    tape.record({logits, targets, weights}, out, [logits, targets, weights, out, probs,
                                                  norm]() mutable {
        const Shape ls = logits.shape();
        const int K = ls.c;
        const std::int64_t hw = ls.spatial();
        const double g = out.grad()[0] * norm;
        const double* td = targets.data();
        const double* wd = weights.data();
        double* dl = logits.grad().data();
        for (int b = 0; b < ls.n; ++b)
            for (std::int64_t i = 0; i < hw; ++i) {
                const double wg = g * wd[b * hw + i];
                const int t = static_cast<int>(td[b * hw + i]);
                for (int k = 0; k < K; ++k) {
                    const double p = (*probs)[ls.index(b, k, 0, 0) + i];
                    dl[ls.index(b, k, 0, 0) + i] += wg * (p - (k == t ? 1.0 : 0.0));
                }
            }
    });
    return out;
}

/// Weighted smooth-L1 (Huber, delta=1) regression loss. weights is (B,1,H,W)
/// and broadcasts over channels; normalization is by total weight times the
/// channel count. Zero total weight yields a constant zero loss.
inline Tensor smooth_l1(Tape& tape, Tensor pred, Tensor target,
                        Tensor weights) {
    ops_detail::check_same_shape(pred, target, "smooth_l1");
    const Shape ps = pred.shape();
    if (weights.shape().c != 1 || weights.shape().n != ps.n || weights.shape().h != ps.h ||
        weights.shape().w != ps.w)
        throw std::invalid_argument("smooth_l1: weights shape " + weights.shape().str() +
                                    " does not match prediction " + ps.str());

    const double* pd = pred.data();
    const double* td = target.data();
    const double* wd = weights.data();
    const std::int64_t hw = ps.spatial();
    double wsum = 0.0;
    for (std::int64_t i = 0; i < weights.numel(); ++i) wsum += wd[i];
    const double norm = wsum > 0.0 ? 1.0 / (wsum * ps.c) : 0.0;

    double loss = 0.0;
    for (int b = 0; b < ps.n; ++b)
        for (int c = 0; c < ps.c; ++c) {
            const std::int64_t off = ps.index(b, c, 0, 0);
            for (std::int64_t i = 0; i < hw; ++i) {
                const double d = pd[off + i] - td[off + i];
                const double a = std::abs(d);
                loss += wd[b * hw + i] * (a < 1.0 ? 0.5 * d * d : a - 0.5);
            }
        }
    Tensor out = Tensor::zeros({1, 1, 1, 1});
    out.data()[0] = loss * norm;

    tape.record({pred, target, weights}, out, [pred, target, weights, out, norm]() mutable {
        const Shape ps = pred.shape();
        const double g = out.grad()[0] * norm;
        const double* pd = pred.data();
        const double* td = target.data();
        const double* wd = weights.data();
        double* dp = pred.grad().data();
        const std::int64_t hw = ps.spatial();
        for (int b = 0; b < ps.n; ++b)
            for (int c = 0; c < ps.c; ++c) {
                const std::int64_t off = ps.index(b, c, 0, 0);
                for (std::int64_t i = 0; i < hw; ++i) {
                    const double d = pd[off + i] - td[off + i];
                    dp[off + i] += g * wd[b * hw + i] * std::clamp(d, -1.0, 1.0);
                }
            }
    });
    return out;
}

/// Per-location softmax across a set of single-channel maps (the soft-routing
/// ablation). Returns one map per input; entries at each location sum to 1.
inline std::vector<Tensor> softmax_over_maps(Tape& tape, const std::vector<Tensor>& pre) {
    if (pre.empty()) throw std::invalid_argument("softmax_over_maps: empty input set");
    const Shape s = pre[0].shape();
    for (const Tensor& t : pre) ops_detail::check_same_shape(t, pre[0], "softmax_over_maps");
    const int K = static_cast<int>(pre.size());
    const std::int64_t n = s.numel();

    std::vector<Tensor> out;
    out.reserve(pre.size());
    for (int k = 0; k < K; ++k) out.push_back(Tensor::zeros(s));
    for (std::int64_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < K; ++k) mx = std::max(mx, pre[k].data()[i]);
        double z = 0.0;
        for (int k = 0; k < K; ++k) {
            const double e = std::exp(pre[k].data()[i] - mx);
            out[k].data()[i] = e;
            z += e;
        }
        for (int k = 0; k < K; ++k) out[k].data()[i] /= z;
    }
    // One record per output map; the softmax Jacobian contribution of map j is
    // d(v_i) += d(m_j) * m_j * (delta_ij - m_i).
    for (int j = 0; j < K; ++j) {
        std::vector<Tensor> inputs = pre;
        Tensor oj = out[j];
        std::vector<Tensor> all_out = out;
        tape.record(inputs, oj, [inputs, oj, all_out, j, n]() mutable {
            const double* g = oj.grad().data();
            for (int i = 0; i < static_cast<int>(inputs.size()); ++i) {
                double* dv = inputs[i].grad().data();
                const double* mi = all_out[i].data();
                const double* mj = all_out[j].data();
                for (std::int64_t p = 0; p < n; ++p)
                    dv[p] += g[p] * mj[p] * ((i == j ? 1.0 : 0.0) - mi[p]);
            }
        });
    }
    return out;
}

} // namespace dynhead

#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynhead/tape.hpp"
#include "dynhead/tensor.hpp"

namespace dynhead {

namespace conv_detail {

/// Enabled column ranges per output row, indexed [b * H + y]. A dense
/// convolution uses one full-width span per row; a sparse one uses the runs of
/// enabled mask cells. Keeping both kernels on the same span walk makes the
/// per-element accumulation order identical, so sparse output bits match the
/// dense output at enabled locations.
using SpanList = std::vector<std::vector<std::pair<int, int>>>;

inline SpanList full_spans(int batch, int h, int w) {
    SpanList spans(static_cast<std::size_t>(batch) * h);
    for (auto& row : spans) row.push_back({0, w});
    return spans;
}

/// Builds spans from a (B,1,H,W) mask whose entries are 0 or 1.
inline SpanList mask_spans(const Tensor& mask) {
    const Shape& s = mask.shape();
    SpanList spans(static_cast<std::size_t>(s.n) * s.h);
    const double* md = mask.data();
    for (int b = 0; b < s.n; ++b) {
        for (int y = 0; y < s.h; ++y) {
            const double* row = md + (static_cast<std::int64_t>(b) * s.h + y) * s.w;
            auto& out = spans[static_cast<std::size_t>(b) * s.h + y];
            int x = 0;
            while (x < s.w) {
                while (x < s.w && row[x] == 0.0) ++x;
                if (x == s.w) break;
                int x0 = x;
                while (x < s.w && row[x] != 0.0) ++x;
                out.push_back({x0, x});
            }
        }
    }
    return spans;
}

inline std::int64_t span_cell_count(const SpanList& spans) {
    std::int64_t n = 0;
    for (const auto& row : spans)
        for (const auto& [x0, x1] : row) n += x1 - x0;
    return n;
}

/// 3x3 cross-correlation, padding 1, stride 1, restricted to the given spans.
/// Accumulation order per output element is (in-channel, ky, kx) with the bias
/// applied first; disabled locations are left exactly 0.
inline void conv3x3_forward(const Tensor& input, const Tensor& weight, const Tensor& bias,
                            int groups, const SpanList& spans, Tensor& out) {
    const Shape is = input.shape();
    const Shape ws = weight.shape();
    const int cpg = is.c / groups;
    const int ocpg = ws.n / groups;
    const int H = is.h, W = is.w;
    const double* in = input.data();
    const double* w = weight.data();
    const double* bv = bias ? bias.data() : nullptr;
    double* o = out.data();

    for (int b = 0; b < is.n; ++b) {
        const auto* row_spans = &spans[static_cast<std::size_t>(b) * H];
        for (int g = 0; g < groups; ++g) {
            for (int ocg = 0; ocg < ocpg; ++ocg) {
                const int oc = g * ocpg + ocg;
                double* oplane = o + out.shape().index(b, oc, 0, 0);
                if (bv) {
                    const double bval = bv[oc];
                    for (int y = 0; y < H; ++y)
                        for (const auto& [x0, x1] : row_spans[y])
                            for (int x = x0; x < x1; ++x) oplane[y * W + x] = bval;
                }
                for (int icg = 0; icg < cpg; ++icg) {
                    const int ic = g * cpg + icg;
                    const double* iplane = in + is.index(b, ic, 0, 0);
                    for (int ky = 0; ky < 3; ++ky) {
                        for (int kx = 0; kx < 3; ++kx) {
                            const double wv = w[ws.index(oc, icg, ky, kx)];
                            const int dx = kx - 1;
                            for (int y = 0; y < H; ++y) {
                                const int iy = y + ky - 1;
                                if (iy < 0 || iy >= H) continue;
                                const double* irow = iplane + static_cast<std::int64_t>(iy) * W;
                                double* orow = oplane + static_cast<std::int64_t>(y) * W;
                                for (const auto& [s0, s1] : row_spans[y]) {
                                    const int xs = std::max(s0, kx == 0 ? 1 : 0);
                                    const int xe = std::min(s1, kx == 2 ? W - 1 : W);
                                    for (int x = xs; x < xe; ++x) orow[x] += wv * irow[x + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv3x3_forward. Accumulates into the grad buffers of input,
/// weight and bias using d(out) restricted to the spans.
inline void conv3x3_backward(Tensor& input, Tensor& weight, Tensor bias, int groups,
                             const SpanList& spans, Tensor& out) {
    const Shape is = input.shape();
    const Shape ws = weight.shape();
    const int cpg = is.c / groups;
    const int ocpg = ws.n / groups;
    const int H = is.h, W = is.w;
    const double* in = input.data();
    const double* w = weight.data();
    const double* dout = out.grad().data();
    double* din = input.grad().data();
    double* dw = weight.grad().data();
    double* db = bias ? bias.grad().data() : nullptr;

    for (int b = 0; b < is.n; ++b) {
        const auto* row_spans = &spans[static_cast<std::size_t>(b) * H];
        for (int g = 0; g < groups; ++g) {
            for (int ocg = 0; ocg < ocpg; ++ocg) {
                const int oc = g * ocpg + ocg;
                const double* doplane = dout + out.shape().index(b, oc, 0, 0);
                if (db) {
                    double acc = 0.0;
                    for (int y = 0; y < H; ++y)
                        for (const auto& [x0, x1] : row_spans[y])
                            for (int x = x0; x < x1; ++x) acc += doplane[y * W + x];
                    db[oc] += acc;
                }
                for (int icg = 0; icg < cpg; ++icg) {
                    const int ic = g * cpg + icg;
                    const double* iplane = in + is.index(b, ic, 0, 0);
                    double* diplane = din + is.index(b, ic, 0, 0);
                    for (int ky = 0; ky < 3; ++ky) {
                        for (int kx = 0; kx < 3; ++kx) {
                            const double wv = w[ws.index(oc, icg, ky, kx)];
                            const int dx = kx - 1;
                            double wacc = 0.0;
                            for (int y = 0; y < H; ++y) {
                                const int iy = y + ky - 1;
                                if (iy < 0 || iy >= H) continue;
                                const double* irow = iplane + static_cast<std::int64_t>(iy) * W;
                                double* dirow = diplane + static_cast<std::int64_t>(iy) * W;
                                const double* dorow = doplane + static_cast<std::int64_t>(y) * W;
                                for (const auto& [s0, s1] : row_spans[y]) {
                                    const int xs = std::max(s0, kx == 0 ? 1 : 0);
                                    const int xe = std::min(s1, kx == 2 ? W - 1 : W);
                                    for (int x = xs; x < xe; ++x) {
                                        const double go = dorow[x];
                                        dirow[x + dx] += wv * go;
                                        wacc += irow[x + dx] * go;
                                    }
                                }
                            }
                            dw[ws.index(oc, icg, ky, kx)] += wacc;
                        }
                    }
                }
            }
        }
    }
}

inline void check_conv_args(const Tensor& input, const Tensor& weight, const Tensor& bias,
                            int groups, const char* op) {
    const Shape is = input.shape();
    const Shape ws = weight.shape();
    const std::string name(op);
    if (groups < 1)
        throw std::invalid_argument(name + ": groups must be >= 1, got " + std::to_string(groups));
    if (is.c % groups != 0)
        throw std::invalid_argument(name + ": input channels " + std::to_string(is.c) +
                                    " not divisible by groups " + std::to_string(groups));
    if (ws.h != 3 || ws.w != 3)
        throw std::invalid_argument(name + ": kernel must be 3x3, got " + std::to_string(ws.h) +
                                    "x" + std::to_string(ws.w));
    if (ws.c != is.c / groups)
        throw std::invalid_argument(name + ": weight in-channel dim " + std::to_string(ws.c) +
                                    " does not match input channels/groups " +
                                    std::to_string(is.c / groups));
    if (ws.n % groups != 0)
        throw std::invalid_argument(name + ": output channels " + std::to_string(ws.n) +
                                    " not divisible by groups " + std::to_string(groups));
    if (bias && (bias.shape().c != ws.n || bias.shape().n != 1 || bias.shape().h != 1 ||
                 bias.shape().w != 1))
        throw std::invalid_argument(name + ": bias shape " + bias.shape().str() +
                                    " must be (1," + std::to_string(ws.n) + ",1,1)");
}

} // namespace conv_detail

/// Per-location multiply-accumulate count of one dense 3x3 convolution layer.
inline std::int64_t conv3x3_macs_per_location(int c_out, int c_in, int groups) {
    return static_cast<std::int64_t>(c_out) * (c_in / groups) * 9;
}

/// Dense 3x3 convolution (cross-correlation), padding 1, stride 1.
/// weight: (c_out, c_in/groups, 3, 3); bias: (1, c_out, 1, 1) or empty.
inline Tensor conv2d(Tape& tape, Tensor input, Tensor weight, Tensor bias,
                     int groups) {
    conv_detail::check_conv_args(input, weight, bias, groups, "conv2d");
    const Shape is = input.shape();
    Tensor out = Tensor::zeros({is.n, weight.shape().n, is.h, is.w});
    auto spans = std::make_shared<conv_detail::SpanList>(
        conv_detail::full_spans(is.n, is.h, is.w));
    conv_detail::conv3x3_forward(input, weight, bias, groups, *spans, out);

    std::vector<Tensor> inputs{input, weight};
    if (bias) inputs.push_back(bias);
    tape.record(inputs, out, [input, weight, bias, groups, spans, out]() mutable {
        conv_detail::conv3x3_backward(input, weight, bias, groups, *spans, out);
    });
    return out;
}

} // namespace dynhead

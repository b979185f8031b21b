#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>

#include "dynhead/conv.hpp"
#include "dynhead/gates.hpp"
#include "dynhead/ops.hpp"
#include "dynhead/tape.hpp"
#include "dynhead/tensor.hpp"

namespace dynhead {

/// Binarized, receptive-field-dilated gate support. Drives the spatially
/// sparse convolutions and the realized-cost accounting. Entries are exactly
/// 0 or 1; the enabled set is a superset of the gating map's positive support.
struct SpatialMask {
    Tensor values; // (B, 1, H, W), detached from the tape
    int scale = -1;
    int depth = -1;
    int path = -1;

    std::int64_t enabled() const {
        std::int64_t n = 0;
        for (double v : values.values()) n += v != 0.0 ? 1 : 0;
        return n;
    }

    std::int64_t enabled_in_sample(int b) const {
        const Shape s = values.shape();
        std::int64_t n = 0;
        const double* d = values.data() + s.index(b, 0, 0, 0);
        for (std::int64_t i = 0; i < s.spatial(); ++i) n += d[i] != 0.0 ? 1 : 0;
        return n;
    }

    double density() const {
        return static_cast<double>(enabled()) / static_cast<double>(values.numel());
    }
};

/// Expands a gating map over the receptive field of a path with `conv_depth`
/// stacked 3x3 convolutions: conv_depth applications of stride-1 3x3 max
/// pooling. The result stays on the tape, so the budget term differentiates
/// through the max.
inline Tensor dilate_mask(Tape& tape, const GatingMap& m, int conv_depth) {
    if (conv_depth < 1)
        throw std::invalid_argument("dilate_mask: conv_depth must be >= 1, got " +
                                    std::to_string(conv_depth));
    return max_pool_3x3_stride1(tape, m.values, conv_depth);
}

/// Binarizes a dilated map: strictly positive entries become 1. Inference
/// control only; the result carries no gradient.
inline SpatialMask quantize_mask(const Tensor& dilated, int scale = -1, int depth = -1,
                                 int path = -1) {
    Tensor out = Tensor::zeros(dilated.shape());
    const double* in = dilated.data();
    double* od = out.data();
    const std::int64_t n = dilated.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        if (in[i] < 0.0)
            throw std::invalid_argument("quantize_mask: negative entry in dilated map");
        od[i] = in[i] > 0.0 ? 1.0 : 0.0;
    }
    return SpatialMask{out, scale, depth, path};
}

/// Spatially sparse 3x3 convolution: computes the dense result at enabled
/// mask locations and leaves disabled locations exactly 0. MAC work is
/// proportional to the mask density.
inline Tensor sparse_conv2d(Tape& tape, Tensor input, Tensor weight,
                            Tensor bias, int groups, const SpatialMask& mask) {
    conv_detail::check_conv_args(input, weight, bias, groups, "sparse_conv2d");
    const Shape is = input.shape();
    const Shape ms = mask.values.shape();
    if (ms.n != is.n || ms.h != is.h || ms.w != is.w || ms.c != 1)
        throw std::invalid_argument("sparse_conv2d: mask shape " + ms.str() +
                                    " does not match input resolution " + is.str());
    Tensor out = Tensor::zeros({is.n, weight.shape().n, is.h, is.w});
    auto spans = std::make_shared<conv_detail::SpanList>(conv_detail::mask_spans(mask.values));
    conv_detail::conv3x3_forward(input, weight, bias, groups, *spans, out);

    std::vector<Tensor> inputs{input, weight};
    if (bias) inputs.push_back(bias);
    tape.record(inputs, out, [input, weight, bias, groups, spans, out]() mutable {
        conv_detail::conv3x3_backward(input, weight, bias, groups, *spans, out);
    });
    return out;
}

/// Exact multiply-accumulate count of one sparse 3x3 convolution layer:
/// enabled locations x c_out x (c_in / groups) x 9. The weight's second
/// dimension is already c_in / groups.
inline std::int64_t count_sparse_macs(const Shape& weight_shape, int groups,
                                      const SpatialMask& mask) {
    if (groups < 1)
        throw std::invalid_argument("count_sparse_macs: groups must be >= 1, got " +
                                    std::to_string(groups));
    return mask.enabled() * weight_shape.n * weight_shape.c * 9;
}

} // namespace dynhead

#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "instcal/graph.hpp"

namespace instcal {

// Element-wise arithmetic on equal shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Real factor);
Var square(Var a);
Var relu(Var x);
/// max(x, floor); the gradient passes where x >= floor.
Var clamp_min(Var x, Real floor);

/// Sum or mean of all elements, returning a scalar.
Var sum(Var x);
Var mean(Var x);

/// Cross-correlation of NCHW input with OutC x InC x kH x kW weights and
/// per-output-channel bias, zero padding.
Var conv2d(Var input, Var weight, Var bias, std::size_t stride, std::size_t padding);

/// Nearest-neighbour upsampling of the two trailing spatial axes by an
/// integer factor.
Var upsample_nearest(Var x, std::size_t factor);

struct Moments {
  Var mean;
  Var var;
};

/// Mean and biased variance over the given axes. The result keeps the
/// remaining axes in order (NCHW over {0,2,3} gives [C]; over {2,3} gives
/// [N,C]).
Moments reduce_stats(Var x, std::vector<std::size_t> axes);

/// (x - mean) / sqrt(var + eps) * gamma + beta on NCHW-like input. mean and
/// var are [C] (shared across the batch) or [N,C] (per sample); gamma and beta
/// are [C].
Var normalize_affine(Var x, Var mean, Var var, Var gamma, Var beta, Real eps);

/// (1 - m) * a + m * b. Each operand has the output's element count, its
/// channel count (broadcast over leading axes) or a single element.
Var mix(Var a, Var b, Var m);

/// x [N,In] times transposed w [Out,In] plus b [Out].
Var linear(Var x, Var w, Var b);
/// a [N,K] times b [K,M].
Var matmul(Var a, Var b);
/// Repeats a [C] into n rows.
Var broadcast_rows(Var a, std::size_t n);
/// Concatenates [N,A] and [N,B] along the last axis.
Var concat_last(Var a, Var b);

/// Max-shifted softmax / log-softmax along one axis.
Var softmax(Var x, std::size_t axis);
Var log_softmax(Var x, std::size_t axis);

/// Mean negative log-softmax of the labelled class over pixels whose label is
/// not ignore_index. logits are N x Cl x H x W, labels N x H x W.
Var cross_entropy_seg(Var logits, std::span<const int> labels, int ignore_index);

/// Mean over pixels of the entropy of the class softmax (axis 1).
Var mean_entropy(Var logits);

}  // namespace instcal

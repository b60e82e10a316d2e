#ifndef SETVEC_OPS_HPP_
#define SETVEC_OPS_HPP_

#include <algorithm>
#include <cmath>
#include <vector>

#include "setvec/tensor.hpp"

namespace setvec {

// ---------------------------------------------------------------------------
// affine: y[n,out] = x[n,in] * W^T + b, with W [out,in], b [out]
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> affine(const TensorT<S>& x, const TensorT<S>& W, const TensorT<S>& b) {
    if (x.rank() != 2 || W.rank() != 2 || b.rank() != 1)
        throw dim_error("affine: want x[n,in], W[out,in], b[out]; got x" + shape_str(x.shape()) +
                        " W" + shape_str(W.shape()) + " b" + shape_str(b.shape()));
    const std::size_t n = x.extent(0), in = x.extent(1);
    const std::size_t out = W.extent(0);
    if (W.extent(1) != in || b.extent(0) != out)
        throw dim_error("affine: inner dimensions disagree: x" + shape_str(x.shape()) + " W" +
                        shape_str(W.shape()) + " b" + shape_str(b.shape()));
    TensorT<S> y({n, out});
    for (std::size_t r = 0; r < n; ++r) {
        const S* xr = x.data() + r * in;
        S* yr = y.data() + r * out;
        for (std::size_t o = 0; o < out; ++o) {
            const S* wo = W.data() + o * in;
            S acc = b[o];
            for (std::size_t i = 0; i < in; ++i) acc += wo[i] * xr[i];
            yr[o] = acc;
        }
    }
    return y;
}

template <typename S>
struct AffineGrads {
    TensorT<S> dx, dW, db;
};

template <typename S>
AffineGrads<S> affine_backward(const TensorT<S>& dy, const TensorT<S>& x, const TensorT<S>& W) {
    const std::size_t n = x.extent(0), in = x.extent(1), out = W.extent(0);
    require_shape(dy, {n, out}, "affine_backward upstream");
    AffineGrads<S> g{TensorT<S>({n, in}), TensorT<S>({out, in}), TensorT<S>({out})};
    for (std::size_t r = 0; r < n; ++r) {
        const S* xr = x.data() + r * in;
        const S* dyr = dy.data() + r * out;
        S* dxr = g.dx.data() + r * in;
        for (std::size_t o = 0; o < out; ++o) {
            const S d = dyr[o];
            const S* wo = W.data() + o * in;
            S* dwo = g.dW.data() + o * in;
            g.db[o] += d;
            for (std::size_t i = 0; i < in; ++i) {
                dxr[i] += d * wo[i];
                dwo[i] += d * xr[i];
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// elementwise activations
// ---------------------------------------------------------------------------

// ELU with alpha = 1; derivative at exactly 0 taken as 1.
template <typename S>
TensorT<S> elu(const TensorT<S>& x) {
    TensorT<S> y = x;
    for (S& v : y.values()) v = v > S{0} ? v : std::expm1(v);
    return y;
}

template <typename S>
TensorT<S> elu_backward(const TensorT<S>& dy, const TensorT<S>& x) {
    if (!dy.same_shape(x))
        throw dim_error("elu_backward: shape mismatch " + shape_str(dy.shape()) + " vs " +
                        shape_str(x.shape()));
    TensorT<S> dx = dy;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] < S{0}) dx[i] *= std::exp(x[i]);
    return dx;
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
    TensorT<S> y = x;
    for (S& v : y.values()) {
        if (v >= S{0}) {
            v = S{1} / (S{1} + std::exp(-v));
        } else {
            const S e = std::exp(v);
            v = e / (S{1} + e);
        }
    }
    return y;
}

// takes the forward output, not the input
template <typename S>
TensorT<S> sigmoid_backward(const TensorT<S>& dy, const TensorT<S>& y) {
    if (!dy.same_shape(y))
        throw dim_error("sigmoid_backward: shape mismatch " + shape_str(dy.shape()) + " vs " +
                        shape_str(y.shape()));
    TensorT<S> dx = dy;
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] *= y[i] * (S{1} - y[i]);
    return dx;
}

// ---------------------------------------------------------------------------
// softmax over a rank-1 tensor
// ---------------------------------------------------------------------------

// Max-stabilized. The denominator is summed over ascending sorted values so
// the result is bit-identical under any permutation of the input.
template <typename S>
TensorT<S> softmax(const TensorT<S>& v) {
    if (v.rank() != 1) throw dim_error("softmax: want rank-1 input, got " + shape_str(v.shape()));
    if (v.size() == 0) throw domain_error("softmax: empty input");
    const std::size_t n = v.size();
    S m = v[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, v[i]);
    TensorT<S> y({n});
    for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(v[i] - m);
    std::vector<S> sorted(y.values());
    std::sort(sorted.begin(), sorted.end());
    S z{0};
    for (S e : sorted) z += e;
    for (std::size_t i = 0; i < n; ++i) y[i] /= z;
    return y;
}

// takes the forward output
template <typename S>
TensorT<S> softmax_backward(const TensorT<S>& dy, const TensorT<S>& y) {
    if (!dy.same_shape(y))
        throw dim_error("softmax_backward: shape mismatch " + shape_str(dy.shape()) + " vs " +
                        shape_str(y.shape()));
    S inner{0};
    for (std::size_t i = 0; i < y.size(); ++i) inner += dy[i] * y[i];
    TensorT<S> dx = dy;
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (dy[i] - inner);
    return dx;
}

}  // namespace setvec

#endif  // SETVEC_OPS_HPP_

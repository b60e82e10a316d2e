#ifndef SETVEC_BATCHNORM_HPP_
#define SETVEC_BATCHNORM_HPP_

#include <cmath>
#include <cstddef>

#include "setvec/tensor.hpp"

namespace setvec {

enum class BnMode { train, eval };

template <typename S>
struct BatchNormState {
    TensorT<S> running_mean;  // [c], starts at 0
    TensorT<S> running_var;   // [c], starts at 1

    explicit BatchNormState(std::size_t channels = 0)
        : running_mean({channels}, S{0}), running_var({channels}, S{1}) {}
};

// Forward cache for the train-mode backward pass.
template <typename S>
struct BatchNormCache {
    TensorT<S> mean, inv_std;  // [c], batch statistics actually used
    TensorT<S> batch_var_unbiased;  // [c], what the running average absorbs
    BnMode mode = BnMode::train;
};

namespace detail {

template <typename S>
void bn_dims(const TensorT<S>& x, std::size_t& n, std::size_t& c, std::size_t& m) {
    if (x.rank() < 2)
        throw dim_error("batchnorm: want x[n,c,...], got " + shape_str(x.shape()));
    n = x.extent(0);
    c = x.extent(1);
    m = 1;
    for (std::size_t a = 2; a < x.rank(); ++a) m *= x.extent(a);
}

}  // namespace detail

// x [n,c,spatial...]; per-channel normalization. Train mode uses batch
// statistics (biased variance) and returns the unbiased variance in the cache
// so the caller can fold it into the running average; eval mode uses the
// running statistics. eps_bn = 1e-5, momentum handled by the caller/state
// update below.
template <typename S>
TensorT<S> batchnorm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                     BnMode mode, const BatchNormState<S>& state, BatchNormCache<S>* cache = nullptr,
                     S eps = S(1e-5)) {
    std::size_t n, c, m;
    detail::bn_dims(x, n, c, m);
    if (n == 0) throw domain_error("batchnorm: empty batch");
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
        throw dim_error("batchnorm: gamma/beta must be [c]=" + std::to_string(c) + ", got gamma" +
                        shape_str(gamma.shape()) + " beta" + shape_str(beta.shape()));

    TensorT<S> mean({c}), inv_std({c}), var_unb({c});
    if (mode == BnMode::train) {
        const S count = static_cast<S>(n * m);
        for (std::size_t ch = 0; ch < c; ++ch) {
            S mu{0};
            for (std::size_t r = 0; r < n; ++r) {
                const S* p = x.data() + (r * c + ch) * m;
                for (std::size_t i = 0; i < m; ++i) mu += p[i];
            }
            mu /= count;
            S var{0};
            for (std::size_t r = 0; r < n; ++r) {
                const S* p = x.data() + (r * c + ch) * m;
                for (std::size_t i = 0; i < m; ++i) {
                    const S d = p[i] - mu;
                    var += d * d;
                }
            }
            mean[ch] = mu;
            inv_std[ch] = S{1} / std::sqrt(var / count + eps);
            var_unb[ch] = count > S{1} ? var / (count - S{1}) : S{0};
        }
    } else {
        require_shape(state.running_mean, {c}, "batchnorm running mean");
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = state.running_mean[ch];
            inv_std[ch] = S{1} / std::sqrt(state.running_var[ch] + eps);
        }
    }

    TensorT<S> y(x.shape());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const S* p = x.data() + (r * c + ch) * m;
            S* q = y.data() + (r * c + ch) * m;
            const S mu = mean[ch], is = inv_std[ch], g = gamma[ch], bb = beta[ch];
            for (std::size_t i = 0; i < m; ++i) q[i] = (p[i] - mu) * is * g + bb;
        }

    if (cache) {
        cache->mean = mean;
        cache->inv_std = inv_std;
        cache->batch_var_unbiased = var_unb;
        cache->mode = mode;
    }
    return y;
}

// Exponential moving average update, applied once per training batch.
template <typename S>
void batchnorm_update_running(BatchNormState<S>& state, const BatchNormCache<S>& cache,
                              S momentum = S(0.1)) {
    for (std::size_t ch = 0; ch < state.running_mean.size(); ++ch) {
        state.running_mean[ch] =
            (S{1} - momentum) * state.running_mean[ch] + momentum * cache.mean[ch];
        state.running_var[ch] =
            (S{1} - momentum) * state.running_var[ch] + momentum * cache.batch_var_unbiased[ch];
    }
}

template <typename S>
struct BatchNormGrads {
    TensorT<S> dx, dgamma, dbeta;
};

template <typename S>
BatchNormGrads<S> batchnorm_backward(const TensorT<S>& dy, const TensorT<S>& x,
                                     const TensorT<S>& gamma, const BatchNormCache<S>& cache) {
    std::size_t n, c, m;
    detail::bn_dims(x, n, c, m);
    require_shape(dy, x.shape(), "batchnorm_backward upstream");

    BatchNormGrads<S> g{TensorT<S>(x.shape()), TensorT<S>({c}), TensorT<S>({c})};
    const S count = static_cast<S>(n * m);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const S mu = cache.mean[ch], is = cache.inv_std[ch];
        S sum_dy{0}, sum_dy_xhat{0};
        for (std::size_t r = 0; r < n; ++r) {
            const S* px = x.data() + (r * c + ch) * m;
            const S* pd = dy.data() + (r * c + ch) * m;
            for (std::size_t i = 0; i < m; ++i) {
                sum_dy += pd[i];
                sum_dy_xhat += pd[i] * (px[i] - mu) * is;
            }
        }
        g.dbeta[ch] = sum_dy;
        g.dgamma[ch] = sum_dy_xhat;
        const S gch = gamma[ch];
        for (std::size_t r = 0; r < n; ++r) {
            const S* px = x.data() + (r * c + ch) * m;
            const S* pd = dy.data() + (r * c + ch) * m;
            S* pg = g.dx.data() + (r * c + ch) * m;
            for (std::size_t i = 0; i < m; ++i) {
                if (cache.mode == BnMode::train) {
                    const S xhat = (px[i] - mu) * is;
                    pg[i] = gch * is * (pd[i] - sum_dy / count - xhat * sum_dy_xhat / count);
                } else {
                    pg[i] = gch * is * pd[i];
                }
            }
        }
    }
    return g;
}

}  // namespace setvec

#endif  // SETVEC_BATCHNORM_HPP_

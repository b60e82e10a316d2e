#ifndef SETVEC_MODEL_HPP_
#define SETVEC_MODEL_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "setvec/batchnorm.hpp"
#include "setvec/conv.hpp"
#include "setvec/data.hpp"
#include "setvec/ops.hpp"
#include "setvec/rng.hpp"
#include "setvec/tensor.hpp"

namespace setvec {

enum class PoolMode { mean, max, weighted };
enum class ReconLoss { mse, l2norm };
enum class InputKind { image2d, volume3d };

inline const char* to_string(PoolMode m) {
    switch (m) {
        case PoolMode::mean: return "mean";
        case PoolMode::max: return "max";
        default: return "weighted";
    }
}
inline const char* to_string(ReconLoss r) { return r == ReconLoss::mse ? "mse" : "l2norm"; }
inline const char* to_string(InputKind k) { return k == InputKind::image2d ? "2d" : "3d"; }

inline PoolMode pool_mode_from(const std::string& s) {
    if (s == "mean") return PoolMode::mean;
    if (s == "max") return PoolMode::max;
    if (s == "weighted") return PoolMode::weighted;
    throw usage_error("unknown pool mode: " + s);
}
inline ReconLoss recon_loss_from(const std::string& s) {
    if (s == "mse") return ReconLoss::mse;
    if (s == "l2norm") return ReconLoss::l2norm;
    throw usage_error("unknown recon loss: " + s);
}
inline InputKind input_kind_from(const std::string& s) {
    if (s == "2d") return InputKind::image2d;
    if (s == "3d") return InputKind::volume3d;
    throw usage_error("unknown input kind: " + s);
}

// ---------------------------------------------------------------------------
// architecture description
// ---------------------------------------------------------------------------
// Encoder: conv(1->c1, 3, s2) -> [BN] -> ELU -> conv(c1->c2, 3, s2) -> [BN]
// -> ELU -> flatten -> affine -> d. Decoder mirrors it through transposed
// convolutions; the final kernel is 4 wide so the upsampling path lands
// exactly back on the input extent (28 or 32), and the output layer is
// linear.
struct ModelConfig {
    InputKind input = InputKind::image2d;
    std::size_t d = 16;  // latent width
    std::size_t L = 8;   // equivariant-layer hidden width
    bool batchnorm = false;
    std::size_t c1 = 8, c2 = 16;

    std::size_t spatial_rank() const { return input == InputKind::image2d ? 2 : 3; }
    std::size_t extent() const { return input == InputKind::image2d ? 28 : 32; }
    std::size_t s1() const { return (extent() - 3) / 2 + 1; }  // 13 / 15
    std::size_t s2() const { return (s1() - 3) / 2 + 1; }      // 6 / 7
    std::size_t flat() const {
        std::size_t f = c2;
        for (std::size_t a = 0; a < spatial_rank(); ++a) f *= s2();
        return f;
    }
    Shape patch_shape() const {
        Shape s{1};
        for (std::size_t a = 0; a < spatial_rank(); ++a) s.push_back(extent());
        return s;
    }
    std::string descriptor() const {
        return std::string(to_string(input)) + "/d" + std::to_string(d) + "/L" +
               std::to_string(L) + "/c" + std::to_string(c1) + "-" + std::to_string(c2) +
               (batchnorm ? "/bn" : "");
    }
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename S = double>
struct ModelParamsT {
    ModelConfig cfg;
    // encoder
    TensorT<S> enc_k1, enc_b1, enc_k2, enc_b2, enc_fc_w, enc_fc_b;
    TensorT<S> bn1_gamma, bn1_beta, bn2_gamma, bn2_beta;
    BatchNormState<S> bn1_state, bn2_state;
    // decoder
    TensorT<S> dec_fc_w, dec_fc_b, dec_k1, dec_b1, dec_k2, dec_b2;
    // attention (two equivariant layers)
    TensorT<S> att_w1, att_b1, att_w2, att_b2;
    // linear predictor
    TensorT<S> pred_w, pred_b;
    // target calibration [shift, scale]; identity unless the trainer
    // standardized targets
    TensorT<S> target_affine;
};

using ModelParams = ModelParamsT<double>;

template <typename P, typename Fn>
void for_each_trainable(P& p, Fn&& fn) {
    fn("enc.k1", p.enc_k1);
    fn("enc.b1", p.enc_b1);
    if (p.cfg.batchnorm) {
        fn("enc.bn1.gamma", p.bn1_gamma);
        fn("enc.bn1.beta", p.bn1_beta);
    }
    fn("enc.k2", p.enc_k2);
    fn("enc.b2", p.enc_b2);
    if (p.cfg.batchnorm) {
        fn("enc.bn2.gamma", p.bn2_gamma);
        fn("enc.bn2.beta", p.bn2_beta);
    }
    fn("enc.fc.w", p.enc_fc_w);
    fn("enc.fc.b", p.enc_fc_b);
    fn("dec.fc.w", p.dec_fc_w);
    fn("dec.fc.b", p.dec_fc_b);
    fn("dec.k1", p.dec_k1);
    fn("dec.b1", p.dec_b1);
    fn("dec.k2", p.dec_k2);
    fn("dec.b2", p.dec_b2);
    fn("att.w1", p.att_w1);
    fn("att.b1", p.att_b1);
    fn("att.w2", p.att_w2);
    fn("att.b2", p.att_b2);
    fn("pred.w", p.pred_w);
    fn("pred.b", p.pred_b);
}

template <typename P, typename Fn>
void for_each_persistent(P& p, Fn&& fn) {
    for_each_trainable(p, fn);
    if (p.cfg.batchnorm) {
        fn("enc.bn1.running_mean", p.bn1_state.running_mean);
        fn("enc.bn1.running_var", p.bn1_state.running_var);
        fn("enc.bn2.running_mean", p.bn2_state.running_mean);
        fn("enc.bn2.running_var", p.bn2_state.running_var);
    }
    fn("calib.target", p.target_affine);
}

template <typename S = double>
ModelParamsT<S> make_model_params(const ModelConfig& cfg, std::uint64_t seed) {
    const std::size_t sr = cfg.spatial_rank();
    auto kshape = [&](std::size_t co, std::size_t ci) {
        Shape s{co, ci};
        for (std::size_t a = 0; a < sr; ++a) s.push_back(3);
        return s;
    };
    auto kshape4 = [&](std::size_t co, std::size_t ci) {
        Shape s{co, ci};
        for (std::size_t a = 0; a < sr; ++a) s.push_back(4);
        return s;
    };

    ModelParamsT<S> p;
    p.cfg = cfg;
    p.enc_k1 = TensorT<S>(kshape(cfg.c1, 1));
    p.enc_b1 = TensorT<S>({cfg.c1});
    p.enc_k2 = TensorT<S>(kshape(cfg.c2, cfg.c1));
    p.enc_b2 = TensorT<S>({cfg.c2});
    p.enc_fc_w = TensorT<S>({cfg.d, cfg.flat()});
    p.enc_fc_b = TensorT<S>({cfg.d});
    p.bn1_gamma = TensorT<S>({cfg.c1}, S{1});
    p.bn1_beta = TensorT<S>({cfg.c1});
    p.bn2_gamma = TensorT<S>({cfg.c2}, S{1});
    p.bn2_beta = TensorT<S>({cfg.c2});
    p.bn1_state = BatchNormState<S>(cfg.c1);
    p.bn2_state = BatchNormState<S>(cfg.c2);
    p.dec_fc_w = TensorT<S>({cfg.flat(), cfg.d});
    p.dec_fc_b = TensorT<S>({cfg.flat()});
    p.dec_k1 = TensorT<S>(kshape(cfg.c2, cfg.c1));
    p.dec_b1 = TensorT<S>({cfg.c1});
    p.dec_k2 = TensorT<S>(kshape4(cfg.c1, 1));
    p.dec_b2 = TensorT<S>({1});
    p.att_w1 = TensorT<S>({cfg.L, cfg.d});
    p.att_b1 = TensorT<S>({cfg.L});
    p.att_w2 = TensorT<S>({1, cfg.L});
    p.att_b2 = TensorT<S>({1});
    p.pred_w = TensorT<S>({cfg.d});
    p.pred_b = TensorT<S>({1});
    p.target_affine = TensorT<S>::from({2}, {S{0}, S{1}});

    // fan-in-scaled uniform weights, zero biases, seeded fill in declaration order
    Rng rng(Rng::derive(seed, "init"));
    auto fill = [&](TensorT<S>& t, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(double(fan_in));
        for (std::size_t i = 0; i < t.size(); ++i)
            t[i] = static_cast<S>(rng.uniform(-bound, bound));
    };
    const std::size_t kvol = shape_volume(Shape(sr, 3));
    fill(p.enc_k1, 1 * kvol);
    fill(p.enc_k2, cfg.c1 * kvol);
    fill(p.enc_fc_w, cfg.flat());
    fill(p.dec_fc_w, cfg.d);
    fill(p.dec_k1, cfg.c2 * kvol);
    fill(p.dec_k2, cfg.c1 * shape_volume(Shape(sr, 4)));
    fill(p.att_w1, cfg.d);
    fill(p.att_w2, cfg.L);
    fill(p.pred_w, cfg.d);
    return p;
}

template <typename S>
ModelParamsT<S> zeros_like(const ModelParamsT<S>& p) {
    ModelParamsT<S> z = p;
    for_each_persistent(z, [](const char*, TensorT<S>& t) { t.fill(S{0}); });
    z.bn1_state = BatchNormState<S>(p.cfg.c1);
    z.bn2_state = BatchNormState<S>(p.cfg.c2);
    z.target_affine = TensorT<S>::from({2}, {S{0}, S{1}});  // identity calibration
    return z;
}

// ---------------------------------------------------------------------------
// spec-level set operations
// ---------------------------------------------------------------------------

// Equivariant layer: row k of the output is W * (H_k - columnwise max over
// rows) + b.
template <typename S>
TensorT<S> equivariant_layer(const TensorT<S>& H, const TensorT<S>& W, const TensorT<S>& b,
                             std::vector<std::size_t>* argmax_out = nullptr) {
    if (H.rank() != 2) throw dim_error("equivariant_layer: want H[N,d], got " + shape_str(H.shape()));
    const std::size_t n = H.extent(0), d = H.extent(1);
    if (n < 1) throw domain_error("equivariant_layer: empty set");
    if (W.rank() != 2 || W.extent(1) != d)
        throw dim_error("equivariant_layer: W" + shape_str(W.shape()) + " does not match H" +
                        shape_str(H.shape()));
    TensorT<S> centered({n, d});
    std::vector<std::size_t> argmax(d, 0);
    for (std::size_t c = 0; c < d; ++c) {
        S m = H(std::size_t{0}, c);
        for (std::size_t r = 1; r < n; ++r)
            if (H(r, c) > m) {
                m = H(r, c);
                argmax[c] = r;  // first max wins on ties
            }
        for (std::size_t r = 0; r < n; ++r) centered(r, c) = H(r, c) - m;
    }
    if (argmax_out) *argmax_out = std::move(argmax);
    return affine(centered, W, b);
}

// Permutation-invariant pooling. weighted mode needs alpha on the simplex.
template <typename S>
TensorT<S> pool(const TensorT<S>& H, PoolMode mode, const TensorT<S>* alpha = nullptr,
                std::vector<std::size_t>* argmax_out = nullptr) {
    if (H.rank() != 2) throw dim_error("pool: want H[N,d], got " + shape_str(H.shape()));
    const std::size_t n = H.extent(0), d = H.extent(1);
    if (n < 1) throw domain_error("pool: empty set");
    TensorT<S> v({d});
    switch (mode) {
        case PoolMode::mean:
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < d; ++c) v[c] += H(r, c);
            for (std::size_t c = 0; c < d; ++c) v[c] /= static_cast<S>(n);
            break;
        case PoolMode::max: {
            std::vector<std::size_t> argmax(d, 0);
            for (std::size_t c = 0; c < d; ++c) {
                S m = H(std::size_t{0}, c);
                for (std::size_t r = 1; r < n; ++r)
                    if (H(r, c) > m) {
                        m = H(r, c);
                        argmax[c] = r;
                    }
                v[c] = m;
            }
            if (argmax_out) *argmax_out = std::move(argmax);
            break;
        }
        case PoolMode::weighted: {
            if (!alpha) throw usage_error("pool: weighted mode needs attention weights");
            if (alpha->rank() != 1 || alpha->size() != n)
                throw dim_error("pool: alpha" + shape_str(alpha->shape()) + " does not match H" +
                                shape_str(H.shape()));
            S sum{0};
            for (std::size_t r = 0; r < n; ++r) sum += (*alpha)[r];
            if (std::abs(double(sum) - 1.0) > 1e-6)
                throw usage_error("pool: weighted-mode alpha must sum to 1, got " +
                                  std::to_string(double(sum)));
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < d; ++c) v[c] += (*alpha)[r] * H(r, c);
            break;
        }
    }
    return v;
}

template <typename S>
S predict(const TensorT<S>& v, const TensorT<S>& w, S bias) {
    if (v.size() != w.size())
        throw dim_error("predict: v" + shape_str(v.shape()) + " vs w" + shape_str(w.shape()));
    return dot(v, w) + bias;
}

// Log-sparsity attention regularizer: sum_j log(alpha_j + eps). Lower for
// concentrated alpha, so minimizing the objective drives sparsity.
template <typename S>
S attention_regularizer(const TensorT<S>& alpha, S eps) {
    if (eps <= S{0}) throw domain_error("attention_regularizer: eps must be positive");
    S r{0};
    for (std::size_t j = 0; j < alpha.size(); ++j) {
        if (alpha[j] < S{0})
            throw domain_error("attention_regularizer: negative weight at index " +
                               std::to_string(j));
        r += std::log(alpha[j] + eps);
    }
    return r;
}

template <typename S = double>
struct LossBreakdownT {
    S total{0}, discriminative{0}, generative{0}, attention_reg{0};
};

using LossBreakdown = LossBreakdownT<double>;

template <typename S = double>
struct AttentionMapT {
    TensorT<S> weights;  // [N], non-negative, sums to 1
    std::vector<std::size_t> patch_ids;
    std::vector<std::array<std::int64_t, 3>> coordinates;  // empty when the bag has none
};

using AttentionMap = AttentionMapT<double>;

template <typename S = double>
struct LossWeights {
    S lambda1{0}, lambda2{0};
    S epsilon{static_cast<S>(1e-8)};
    ReconLoss recon = ReconLoss::mse;
};

// ---------------------------------------------------------------------------
// batched single-sample conv helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
TensorT<S> slice_sample(const TensorT<S>& batch, std::size_t r) {
    Shape s(batch.shape().begin() + 1, batch.shape().end());
    const std::size_t vol = shape_volume(s);
    TensorT<S> out(s);
    std::memcpy(out.data(), batch.data() + r * vol, vol * sizeof(S));
    return out;
}

template <typename S>
void set_sample(TensorT<S>& batch, std::size_t r, const TensorT<S>& v) {
    std::memcpy(batch.data() + r * v.size(), v.data(), v.size() * sizeof(S));
}

template <typename S>
TensorT<S> conv_batch(const TensorT<S>& x, const TensorT<S>& K, const TensorT<S>& b,
                      std::size_t stride, bool transpose) {
    const std::size_t n = x.extent(0);
    const bool three_d = x.rank() == 5;
    TensorT<S> out;
    for (std::size_t r = 0; r < n; ++r) {
        const TensorT<S> xr = slice_sample(x, r);
        TensorT<S> yr = transpose ? (three_d ? conv_transpose3d(xr, K, b, stride)
                                             : conv_transpose2d(xr, K, b, stride))
                                  : (three_d ? conv3d(xr, K, b, stride)
                                             : conv2d(xr, K, b, stride));
        if (r == 0) {
            Shape s = yr.shape();
            s.insert(s.begin(), n);
            out = TensorT<S>(s);
        }
        set_sample(out, r, yr);
    }
    return out;
}

template <typename S>
TensorT<S> conv_batch_backward(const TensorT<S>& dy, const TensorT<S>& x, const TensorT<S>& K,
                               std::size_t stride, bool transpose, TensorT<S>& dK, TensorT<S>& db) {
    const std::size_t n = x.extent(0);
    const bool three_d = x.rank() == 5;
    TensorT<S> dx(x.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const TensorT<S> xr = slice_sample(x, r);
        const TensorT<S> dyr = slice_sample(dy, r);
        ConvGrads<S> g = transpose ? (three_d ? conv_transpose3d_backward(dyr, xr, K, stride)
                                              : conv_transpose2d_backward(dyr, xr, K, stride))
                                   : (three_d ? conv3d_backward(dyr, xr, K, stride)
                                              : conv2d_backward(dyr, xr, K, stride));
        set_sample(dx, r, g.dx);
        dK += g.dK;
        db += g.db;
    }
    return dx;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// the joint model
// ---------------------------------------------------------------------------

template <typename S = double>
struct BagCacheT {
    // encoder
    TensorT<S> x;                    // [N,1,sp...] stacked patches
    TensorT<S> a1, n1, h1, a2, n2, h2;  // a = conv out, n = post-BN (or = a), h = post-ELU
    BatchNormCache<S> bn1c, bn2c;
    TensorT<S> Hflat;                // [N,flat]
    TensorT<S> H;                    // [N,d]
    // attention
    TensorT<S> Z1, S1, Z2, scores, alpha;
    std::vector<std::size_t> el1_argmax, el2_argmax;
    // pooling / prediction
    PoolMode pool_mode = PoolMode::weighted;
    std::vector<std::size_t> pool_argmax;
    TensorT<S> v;
    S yhat{0};
    // decoder
    TensorT<S> dec_flat, t1, e1, xhat;
    BnMode bn_mode = BnMode::eval;
    LossBreakdownT<S> loss;
};

template <typename S = double>
struct ForwardResultT {
    S yhat{0};
    AttentionMapT<S> attention;
    LossBreakdownT<S> loss;
};

template <typename S = double>
class ModelT {
public:
    ModelT(const ModelConfig& cfg, std::uint64_t seed) : p_(make_model_params<S>(cfg, seed)) {}
    explicit ModelT(ModelParamsT<S> params) : p_(std::move(params)) {}

    ModelParamsT<S>& params() { return p_; }
    const ModelParamsT<S>& params() const { return p_; }
    const ModelConfig& config() const { return p_.cfg; }

    // --- encoder ---

    TensorT<S> encode_bag(const std::vector<TensorT<S>>& patches, BnMode mode,
                          BagCacheT<S>* cache = nullptr) const {
        if (patches.empty()) throw domain_error("encode_bag: empty bag");
        const Shape want = p_.cfg.patch_shape();
        for (const auto& patch : patches)
            if (patch.shape() != want)
                throw dim_error("encode_bag: patch shape " + shape_str(patch.shape()) +
                                " does not match configured " + shape_str(want));
        const std::size_t n = patches.size();
        Shape xs = want;
        xs.insert(xs.begin(), n);
        TensorT<S> x(xs);
        for (std::size_t r = 0; r < n; ++r) detail::set_sample(x, r, patches[r]);

        BagCacheT<S> local;
        BagCacheT<S>& c = cache ? *cache : local;
        c.bn_mode = mode;
        c.x = std::move(x);
        c.a1 = detail::conv_batch(c.x, p_.enc_k1, p_.enc_b1, 2, false);
        c.n1 = p_.cfg.batchnorm
                   ? batchnorm(c.a1, p_.bn1_gamma, p_.bn1_beta, mode, p_.bn1_state, &c.bn1c)
                   : c.a1;
        c.h1 = elu(c.n1);
        c.a2 = detail::conv_batch(c.h1, p_.enc_k2, p_.enc_b2, 2, false);
        c.n2 = p_.cfg.batchnorm
                   ? batchnorm(c.a2, p_.bn2_gamma, p_.bn2_beta, mode, p_.bn2_state, &c.bn2c)
                   : c.a2;
        c.h2 = elu(c.n2);
        c.Hflat = c.h2.reshaped({n, p_.cfg.flat()});
        c.H = affine(c.Hflat, p_.enc_fc_w, p_.enc_fc_b);
        return c.H;
    }

    TensorT<S> encode_patch(const TensorT<S>& patch, BnMode mode = BnMode::eval) const {
        const TensorT<S> H = encode_bag(std::vector<TensorT<S>>{patch}, mode);
        TensorT<S> out({p_.cfg.d});
        std::memcpy(out.data(), H.data(), p_.cfg.d * sizeof(S));
        return out;
    }

    // --- attention: EL -> sigmoid -> EL -> sigmoid -> softmax ---

    TensorT<S> attention(const TensorT<S>& H, BagCacheT<S>* cache = nullptr) const {
        BagCacheT<S> local;
        BagCacheT<S>& c = cache ? *cache : local;
        const std::size_t n = H.extent(0);
        TensorT<S> A1;
        {
            std::vector<std::size_t> am;
            A1 = equivariant_layer(H, p_.att_w1, p_.att_b1, &am);
            c.el1_argmax = std::move(am);
            // recover the centered input for the backward pass
            c.Z1 = TensorT<S>({n, p_.cfg.d});
            for (std::size_t col = 0; col < p_.cfg.d; ++col) {
                const S m = H(c.el1_argmax[col], col);
                for (std::size_t r = 0; r < n; ++r) c.Z1(r, col) = H(r, col) - m;
            }
        }
        c.S1 = sigmoid(A1);
        TensorT<S> A2;
        {
            std::vector<std::size_t> am;
            A2 = equivariant_layer(c.S1, p_.att_w2, p_.att_b2, &am);
            c.el2_argmax = std::move(am);
            c.Z2 = TensorT<S>({n, p_.cfg.L});
            for (std::size_t col = 0; col < p_.cfg.L; ++col) {
                const S m = c.S1(c.el2_argmax[col], col);
                for (std::size_t r = 0; r < n; ++r) c.Z2(r, col) = c.S1(r, col) - m;
            }
        }
        c.scores = sigmoid(A2).reshaped({n});
        c.alpha = softmax(c.scores);
        return c.alpha;
    }

    // --- decoder ---

    TensorT<S> decode_bag(const TensorT<S>& H, BagCacheT<S>* cache = nullptr) const {
        BagCacheT<S> local;
        BagCacheT<S>& c = cache ? *cache : local;
        const std::size_t n = H.extent(0);
        c.dec_flat = affine(H, p_.dec_fc_w, p_.dec_fc_b);
        Shape up{n, p_.cfg.c2};
        for (std::size_t a = 0; a < p_.cfg.spatial_rank(); ++a) up.push_back(p_.cfg.s2());
        c.t1 = detail::conv_batch(c.dec_flat.reshaped(up), p_.dec_k1, p_.dec_b1, 2, true);
        c.e1 = elu(c.t1);
        c.xhat = detail::conv_batch(c.e1, p_.dec_k2, p_.dec_b2, 2, true);
        return c.xhat;
    }

    TensorT<S> decode_latent(const TensorT<S>& z) const {
        require_shape(z, {p_.cfg.d}, "decode_latent input");
        const TensorT<S> xhat = decode_bag(z.reshaped({1, p_.cfg.d}));
        return detail::slice_sample(xhat, 0);
    }

    // --- joint objective ---

    ForwardResultT<S> forward_bag(const std::vector<TensorT<S>>& patches, S y,
                                  const LossWeights<S>& lw,
                                  PoolMode pool_mode = PoolMode::weighted,
                                  BnMode bn_mode = BnMode::eval,
                                  BagCacheT<S>* cache = nullptr) const {
        if (patches.empty()) throw domain_error("forward_bag: empty bag");
        if (lw.lambda1 < S{0} || lw.lambda2 < S{0})
            throw usage_error("forward_bag: lambda1 and lambda2 must be non-negative");
        if (lw.epsilon <= S{0}) throw usage_error("forward_bag: epsilon must be positive");

        BagCacheT<S> local;
        BagCacheT<S>& c = cache ? *cache : local;
        c.pool_mode = pool_mode;
        encode_bag(patches, bn_mode, &c);
        attention(c.H, &c);
        c.v = pool(c.H, pool_mode, &c.alpha, &c.pool_argmax);
        c.yhat = predict(c.v, p_.pred_w, p_.pred_b[0]);

        const S resid = y - c.yhat;
        c.loss.discriminative = resid * resid;

        // reconstruction is always evaluated so L_g can be logged even when
        // it carries no weight
        decode_bag(c.H, &c);
        c.loss.generative = recon_loss(c.x, c.xhat, lw.recon);
        c.loss.attention_reg = attention_regularizer(c.alpha, lw.epsilon);
        c.loss.total = c.loss.discriminative + lw.lambda1 * c.loss.generative +
                       lw.lambda2 * c.loss.attention_reg;

        if (!std::isfinite(c.loss.discriminative))
            throw numeric_error("forward_bag: non-finite discriminative loss");
        if (!std::isfinite(c.loss.generative))
            throw numeric_error("forward_bag: non-finite generative loss");
        if (!std::isfinite(c.loss.attention_reg))
            throw numeric_error("forward_bag: non-finite attention regularizer");

        ForwardResultT<S> out;
        out.yhat = c.yhat;
        out.loss = c.loss;
        out.attention.weights = c.alpha;
        out.attention.patch_ids.resize(patches.size());
        for (std::size_t j = 0; j < patches.size(); ++j) out.attention.patch_ids[j] = j;
        return out;
    }

    ForwardResultT<S> forward_bag(const BagT<S>& bag, const LossWeights<S>& lw,
                                  PoolMode pool_mode = PoolMode::weighted,
                                  BnMode bn_mode = BnMode::eval,
                                  BagCacheT<S>* cache = nullptr) const {
        ForwardResultT<S> out = forward_bag(bag.patches, bag.y, lw, pool_mode, bn_mode, cache);
        out.attention.coordinates = bag.coordinates;
        return out;
    }

    // Accumulates d(total)/d(params) into grads. The cache must come from a
    // forward_bag call with the same inputs and parameters.
    void backward_bag(S y, const BagCacheT<S>& c, const LossWeights<S>& lw,
                      ModelParamsT<S>& grads) const {
        const std::size_t n = c.H.extent(0), d = p_.cfg.d;

        const S dyhat = S{2} * (c.yhat - y);
        for (std::size_t i = 0; i < d; ++i) grads.pred_w[i] += dyhat * c.v[i];
        grads.pred_b[0] += dyhat;

        TensorT<S> dH({n, d});
        TensorT<S> dalpha({n});
        // pooling backward
        switch (c.pool_mode) {
            case PoolMode::mean:
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t i = 0; i < d; ++i)
                        dH(r, i) += dyhat * p_.pred_w[i] / static_cast<S>(n);
                break;
            case PoolMode::max:
                for (std::size_t i = 0; i < d; ++i)
                    dH(c.pool_argmax[i], i) += dyhat * p_.pred_w[i];
                break;
            case PoolMode::weighted:
                for (std::size_t r = 0; r < n; ++r) {
                    S acc{0};
                    for (std::size_t i = 0; i < d; ++i) {
                        dH(r, i) += dyhat * p_.pred_w[i] * c.alpha[r];
                        acc += dyhat * p_.pred_w[i] * c.H(r, i);
                    }
                    dalpha[r] += acc;
                }
                break;
        }
        // attention regularizer
        if (lw.lambda2 != S{0})
            for (std::size_t r = 0; r < n; ++r)
                dalpha[r] += lw.lambda2 / (c.alpha[r] + lw.epsilon);

        attention_backward(c, dalpha, dH, grads);

        // generative path
        if (lw.lambda1 != S{0}) {
            TensorT<S> dxhat(c.xhat.shape());
            recon_backward(c.x, c.xhat, lw.recon, lw.lambda1, dxhat);
            decoder_backward(c, dxhat, dH, grads);
        }

        encoder_backward(c, dH, grads);
    }

    void backward_bag(const BagT<S>& bag, const BagCacheT<S>& c, const LossWeights<S>& lw,
                      ModelParamsT<S>& grads) const {
        backward_bag(bag.y, c, lw, grads);
    }

    // Calibrated subject-level prediction (eval-mode batch statistics).
    S predict_subject(const BagT<S>& bag, PoolMode pool_mode = PoolMode::weighted) const {
        BagCacheT<S> c;
        encode_bag(bag.patches, BnMode::eval, &c);
        attention(c.H, &c);
        const TensorT<S> v = pool(c.H, pool_mode, &c.alpha);
        const S raw = predict(v, p_.pred_w, p_.pred_b[0]);
        return p_.target_affine[0] + p_.target_affine[1] * raw;
    }

    static S recon_loss(const TensorT<S>& x, const TensorT<S>& xhat, ReconLoss kind) {
        const std::size_t n = x.extent(0);
        const std::size_t per = x.size() / n;
        S total{0};
        for (std::size_t r = 0; r < n; ++r) {
            const S* px = x.data() + r * per;
            const S* ph = xhat.data() + r * per;
            S ss{0};
            for (std::size_t i = 0; i < per; ++i) {
                const S diff = px[i] - ph[i];
                ss += diff * diff;
            }
            total += kind == ReconLoss::mse ? ss / static_cast<S>(per) : std::sqrt(ss);
        }
        return total / static_cast<S>(n);
    }

private:
    static void recon_backward(const TensorT<S>& x, const TensorT<S>& xhat, ReconLoss kind,
                               S lambda1, TensorT<S>& dxhat) {
        const std::size_t n = x.extent(0);
        const std::size_t per = x.size() / n;
        for (std::size_t r = 0; r < n; ++r) {
            const S* px = x.data() + r * per;
            const S* ph = xhat.data() + r * per;
            S* pd = dxhat.data() + r * per;
            if (kind == ReconLoss::mse) {
                const S scale = lambda1 * S{2} / (static_cast<S>(per) * static_cast<S>(n));
                for (std::size_t i = 0; i < per; ++i) pd[i] = scale * (ph[i] - px[i]);
            } else {
                S ss{0};
                for (std::size_t i = 0; i < per; ++i) {
                    const S diff = ph[i] - px[i];
                    ss += diff * diff;
                }
                const S norm = std::sqrt(ss);
                const S scale = norm > S(1e-12) ? lambda1 / (norm * static_cast<S>(n)) : S{0};
                for (std::size_t i = 0; i < per; ++i) pd[i] = scale * (ph[i] - px[i]);
            }
        }
    }

    void attention_backward(const BagCacheT<S>& c, const TensorT<S>& dalpha, TensorT<S>& dH,
                            ModelParamsT<S>& grads) const {
        const std::size_t n = dalpha.size();
        const TensorT<S> dscores = softmax_backward(dalpha, c.alpha);
        const TensorT<S> dA2 =
            sigmoid_backward(dscores.reshaped({n, 1}), c.scores.reshaped({n, 1}));
        AffineGrads<S> g2 = affine_backward(dA2, c.Z2, p_.att_w2);
        grads.att_w2 += g2.dW;
        grads.att_b2 += g2.db;
        TensorT<S>& dS1 = g2.dx;  // [n,L]; subtract column sums at the argmax rows
        for (std::size_t col = 0; col < p_.cfg.L; ++col) {
            S colsum{0};
            for (std::size_t r = 0; r < n; ++r) colsum += dS1(r, col);
            dS1(c.el2_argmax[col], col) -= colsum;
        }
        const TensorT<S> dA1 = sigmoid_backward(dS1, c.S1);
        AffineGrads<S> g1 = affine_backward(dA1, c.Z1, p_.att_w1);
        grads.att_w1 += g1.dW;
        grads.att_b1 += g1.db;
        TensorT<S>& dZ1 = g1.dx;  // [n,d]
        for (std::size_t col = 0; col < p_.cfg.d; ++col) {
            S colsum{0};
            for (std::size_t r = 0; r < n; ++r) colsum += dZ1(r, col);
            dZ1(c.el1_argmax[col], col) -= colsum;
        }
        dH += dZ1;
    }

    void decoder_backward(const BagCacheT<S>& c, const TensorT<S>& dxhat, TensorT<S>& dH,
                          ModelParamsT<S>& grads) const {
        const std::size_t n = dxhat.extent(0);
        TensorT<S> de1 =
            detail::conv_batch_backward(dxhat, c.e1, p_.dec_k2, 2, true, grads.dec_k2, grads.dec_b2);
        const TensorT<S> dt1 = elu_backward(de1, c.t1);
        Shape up{n, p_.cfg.c2};
        for (std::size_t a = 0; a < p_.cfg.spatial_rank(); ++a) up.push_back(p_.cfg.s2());
        TensorT<S> dflat_sp = detail::conv_batch_backward(dt1, c.dec_flat.reshaped(up), p_.dec_k1, 2,
                                                          true, grads.dec_k1, grads.dec_b1);
        AffineGrads<S> g =
            affine_backward(dflat_sp.reshaped({n, p_.cfg.flat()}), c.H, p_.dec_fc_w);
        grads.dec_fc_w += g.dW;
        grads.dec_fc_b += g.db;
        dH += g.dx;
    }

    void encoder_backward(const BagCacheT<S>& c, const TensorT<S>& dH,
                          ModelParamsT<S>& grads) const {
        const std::size_t n = dH.extent(0);
        AffineGrads<S> gfc = affine_backward(dH, c.Hflat, p_.enc_fc_w);
        grads.enc_fc_w += gfc.dW;
        grads.enc_fc_b += gfc.db;
        const TensorT<S> dh2 = gfc.dx.reshaped(c.h2.shape());
        TensorT<S> dn2 = elu_backward(dh2, c.n2);
        TensorT<S> da2;
        if (p_.cfg.batchnorm) {
            BatchNormGrads<S> bg = batchnorm_backward(dn2, c.a2, p_.bn2_gamma, c.bn2c);
            grads.bn2_gamma += bg.dgamma;
            grads.bn2_beta += bg.dbeta;
            da2 = std::move(bg.dx);
        } else {
            da2 = std::move(dn2);
        }
        TensorT<S> dh1 =
            detail::conv_batch_backward(da2, c.h1, p_.enc_k2, 2, false, grads.enc_k2, grads.enc_b2);
        TensorT<S> dn1 = elu_backward(dh1, c.n1);
        TensorT<S> da1;
        if (p_.cfg.batchnorm) {
            BatchNormGrads<S> bg = batchnorm_backward(dn1, c.a1, p_.bn1_gamma, c.bn1c);
            grads.bn1_gamma += bg.dgamma;
            grads.bn1_beta += bg.dbeta;
            da1 = std::move(bg.dx);
        } else {
            da1 = std::move(dn1);
        }
        detail::conv_batch_backward(da1, c.x, p_.enc_k1, 2, false, grads.enc_k1, grads.enc_b1);
        (void)n;
    }

    ModelParamsT<S> p_;
};

using Model = ModelT<double>;

}  // namespace setvec

#endif  // SETVEC_MODEL_HPP_

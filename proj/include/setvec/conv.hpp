#ifndef SETVEC_CONV_HPP_
#define SETVEC_CONV_HPP_

#include <cstddef>

#include "setvec/tensor.hpp"

namespace setvec {

// Valid (no-padding) cross-correlation, single sample, fixed loop order so
// results are bit-identical run to run. conv_transpose* is the exact adjoint
// of the matching conv (plus an output-channel bias).

namespace detail {

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, const char* what) {
    if (k > in)
        throw dim_error(std::string(what) + ": kernel extent " + std::to_string(k) +
                        " exceeds input extent " + std::to_string(in));
    return (in - k) / stride + 1;
}

inline void check_stride(std::size_t stride, const char* what) {
    if (stride < 1) throw domain_error(std::string(what) + ": stride must be >= 1");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 2-D
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& K, const TensorT<S>& b,
                  std::size_t stride) {
    detail::check_stride(stride, "conv2d");
    if (x.rank() != 3 || K.rank() != 4 || b.rank() != 1)
        throw dim_error("conv2d: want x[ci,h,w], K[co,ci,kh,kw], b[co]; got x" +
                        shape_str(x.shape()) + " K" + shape_str(K.shape()) + " b" +
                        shape_str(b.shape()));
    const std::size_t ci = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t co = K.extent(0), kh = K.extent(2), kw = K.extent(3);
    if (K.extent(1) != ci || b.extent(0) != co)
        throw dim_error("conv2d: channel mismatch: x" + shape_str(x.shape()) + " K" +
                        shape_str(K.shape()) + " b" + shape_str(b.shape()));
    const std::size_t oh = detail::conv_out(h, kh, stride, "conv2d");
    const std::size_t ow = detail::conv_out(w, kw, stride, "conv2d");

    TensorT<S> y({co, oh, ow});
    for (std::size_t o = 0; o < co; ++o) {
        S* yo = y.data() + o * oh * ow;
        for (std::size_t i = 0; i < oh * ow; ++i) yo[i] = b[o];
        for (std::size_t c = 0; c < ci; ++c) {
            const S* xc = x.data() + c * h * w;
            const S* kk = K.data() + (o * ci + c) * kh * kw;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const S kv = kk[ky * kw + kx];
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        const S* xrow = xc + (oy * stride + ky) * w + kx;
                        S* yrow = yo + oy * ow;
                        for (std::size_t ox = 0; ox < ow; ++ox)
                            yrow[ox] += kv * xrow[ox * stride];
                    }
                }
            }
        }
    }
    return y;
}

template <typename S>
struct ConvGrads {
    TensorT<S> dx, dK, db;
};

template <typename S>
ConvGrads<S> conv2d_backward(const TensorT<S>& dy, const TensorT<S>& x, const TensorT<S>& K,
                             std::size_t stride) {
    const std::size_t ci = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t co = K.extent(0), kh = K.extent(2), kw = K.extent(3);
    const std::size_t oh = detail::conv_out(h, kh, stride, "conv2d_backward");
    const std::size_t ow = detail::conv_out(w, kw, stride, "conv2d_backward");
    require_shape(dy, {co, oh, ow}, "conv2d_backward upstream");

    ConvGrads<S> g{TensorT<S>(x.shape()), TensorT<S>(K.shape()), TensorT<S>({co})};
    for (std::size_t o = 0; o < co; ++o) {
        const S* dyo = dy.data() + o * oh * ow;
        for (std::size_t i = 0; i < oh * ow; ++i) g.db[o] += dyo[i];
        for (std::size_t c = 0; c < ci; ++c) {
            const S* xc = x.data() + c * h * w;
            S* dxc = g.dx.data() + c * h * w;
            const S* kk = K.data() + (o * ci + c) * kh * kw;
            S* dkk = g.dK.data() + (o * ci + c) * kh * kw;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const S kv = kk[ky * kw + kx];
                    S acc{0};
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        const S* xrow = xc + (oy * stride + ky) * w + kx;
                        S* dxrow = dxc + (oy * stride + ky) * w + kx;
                        const S* dyrow = dyo + oy * ow;
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            acc += dyrow[ox] * xrow[ox * stride];
                            dxrow[ox * stride] += dyrow[ox] * kv;
                        }
                    }
                    dkk[ky * kw + kx] += acc;
                }
            }
        }
    }
    return g;
}

// z [co,zh,zw] -> out [ci, (zh-1)*stride+kh, (zw-1)*stride+kw]; adjoint of
// conv2d in its first argument, with bias added per output channel ci.
template <typename S>
TensorT<S> conv_transpose2d(const TensorT<S>& z, const TensorT<S>& K, const TensorT<S>& b,
                            std::size_t stride) {
    detail::check_stride(stride, "conv_transpose2d");
    if (z.rank() != 3 || K.rank() != 4 || b.rank() != 1)
        throw dim_error("conv_transpose2d: want z[co,h,w], K[co,ci,kh,kw], b[ci]; got z" +
                        shape_str(z.shape()) + " K" + shape_str(K.shape()) + " b" +
                        shape_str(b.shape()));
    const std::size_t co = z.extent(0), zh = z.extent(1), zw = z.extent(2);
    const std::size_t ci = K.extent(1), kh = K.extent(2), kw = K.extent(3);
    if (K.extent(0) != co || b.extent(0) != ci)
        throw dim_error("conv_transpose2d: channel mismatch: z" + shape_str(z.shape()) + " K" +
                        shape_str(K.shape()) + " b" + shape_str(b.shape()));
    const std::size_t oh = (zh - 1) * stride + kh;
    const std::size_t ow = (zw - 1) * stride + kw;

    TensorT<S> out({ci, oh, ow});
    for (std::size_t c = 0; c < ci; ++c) {
        S* oc = out.data() + c * oh * ow;
        for (std::size_t i = 0; i < oh * ow; ++i) oc[i] = b[c];
    }
    for (std::size_t o = 0; o < co; ++o) {
        const S* zo = z.data() + o * zh * zw;
        for (std::size_t c = 0; c < ci; ++c) {
            S* oc = out.data() + c * oh * ow;
            const S* kk = K.data() + (o * ci + c) * kh * kw;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const S kv = kk[ky * kw + kx];
                    for (std::size_t zy = 0; zy < zh; ++zy) {
                        const S* zrow = zo + zy * zw;
                        S* orow = oc + (zy * stride + ky) * ow + kx;
                        for (std::size_t zx = 0; zx < zw; ++zx)
                            orow[zx * stride] += kv * zrow[zx];
                    }
                }
            }
        }
    }
    return out;
}

template <typename S>
ConvGrads<S> conv_transpose2d_backward(const TensorT<S>& dout, const TensorT<S>& z,
                                       const TensorT<S>& K, std::size_t stride) {
    const std::size_t co = z.extent(0), zh = z.extent(1), zw = z.extent(2);
    const std::size_t ci = K.extent(1), kh = K.extent(2), kw = K.extent(3);
    const std::size_t oh = (zh - 1) * stride + kh;
    const std::size_t ow = (zw - 1) * stride + kw;
    require_shape(dout, {ci, oh, ow}, "conv_transpose2d_backward upstream");

    ConvGrads<S> g{TensorT<S>(z.shape()), TensorT<S>(K.shape()), TensorT<S>({ci})};
    for (std::size_t c = 0; c < ci; ++c) {
        const S* doc = dout.data() + c * oh * ow;
        for (std::size_t i = 0; i < oh * ow; ++i) g.db[c] += doc[i];
    }
    for (std::size_t o = 0; o < co; ++o) {
        const S* zo = z.data() + o * zh * zw;
        S* dzo = g.dx.data() + o * zh * zw;
        for (std::size_t c = 0; c < ci; ++c) {
            const S* doc = dout.data() + c * oh * ow;
            const S* kk = K.data() + (o * ci + c) * kh * kw;
            S* dkk = g.dK.data() + (o * ci + c) * kh * kw;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const S kv = kk[ky * kw + kx];
                    S acc{0};
                    for (std::size_t zy = 0; zy < zh; ++zy) {
                        const S* dorow = doc + (zy * stride + ky) * ow + kx;
                        const S* zrow = zo + zy * zw;
                        S* dzrow = dzo + zy * zw;
                        for (std::size_t zx = 0; zx < zw; ++zx) {
                            dzrow[zx] += dorow[zx * stride] * kv;
                            acc += dorow[zx * stride] * zrow[zx];
                        }
                    }
                    dkk[ky * kw + kx] += acc;
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// 3-D
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> conv3d(const TensorT<S>& x, const TensorT<S>& K, const TensorT<S>& b,
                  std::size_t stride) {
    detail::check_stride(stride, "conv3d");
    if (x.rank() != 4 || K.rank() != 5 || b.rank() != 1)
        throw dim_error("conv3d: want x[ci,d,h,w], K[co,ci,kd,kh,kw], b[co]; got x" +
                        shape_str(x.shape()) + " K" + shape_str(K.shape()) + " b" +
                        shape_str(b.shape()));
    const std::size_t ci = x.extent(0), d = x.extent(1), h = x.extent(2), w = x.extent(3);
    const std::size_t co = K.extent(0), kd = K.extent(2), kh = K.extent(3), kw = K.extent(4);
    if (K.extent(1) != ci || b.extent(0) != co)
        throw dim_error("conv3d: channel mismatch: x" + shape_str(x.shape()) + " K" +
                        shape_str(K.shape()) + " b" + shape_str(b.shape()));
    const std::size_t od = detail::conv_out(d, kd, stride, "conv3d");
    const std::size_t oh = detail::conv_out(h, kh, stride, "conv3d");
    const std::size_t ow = detail::conv_out(w, kw, stride, "conv3d");

    TensorT<S> y({co, od, oh, ow});
    const std::size_t xplane = h * w, xvol = d * xplane;
    const std::size_t yplane = oh * ow, yvol = od * yplane;
    for (std::size_t o = 0; o < co; ++o) {
        S* yo = y.data() + o * yvol;
        for (std::size_t i = 0; i < yvol; ++i) yo[i] = b[o];
        for (std::size_t c = 0; c < ci; ++c) {
            const S* xc = x.data() + c * xvol;
            const S* kk = K.data() + (o * ci + c) * kd * kh * kw;
            for (std::size_t kz = 0; kz < kd; ++kz)
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const S kv = kk[(kz * kh + ky) * kw + kx];
                        for (std::size_t oz = 0; oz < od; ++oz)
                            for (std::size_t oy = 0; oy < oh; ++oy) {
                                const S* xrow =
                                    xc + (oz * stride + kz) * xplane + (oy * stride + ky) * w + kx;
                                S* yrow = yo + oz * yplane + oy * ow;
                                for (std::size_t ox = 0; ox < ow; ++ox)
                                    yrow[ox] += kv * xrow[ox * stride];
                            }
                    }
        }
    }
    return y;
}

template <typename S>
ConvGrads<S> conv3d_backward(const TensorT<S>& dy, const TensorT<S>& x, const TensorT<S>& K,
                             std::size_t stride) {
    const std::size_t ci = x.extent(0), d = x.extent(1), h = x.extent(2), w = x.extent(3);
    const std::size_t co = K.extent(0), kd = K.extent(2), kh = K.extent(3), kw = K.extent(4);
    const std::size_t od = detail::conv_out(d, kd, stride, "conv3d_backward");
    const std::size_t oh = detail::conv_out(h, kh, stride, "conv3d_backward");
    const std::size_t ow = detail::conv_out(w, kw, stride, "conv3d_backward");
    require_shape(dy, {co, od, oh, ow}, "conv3d_backward upstream");

    ConvGrads<S> g{TensorT<S>(x.shape()), TensorT<S>(K.shape()), TensorT<S>({co})};
    const std::size_t xplane = h * w, xvol = d * xplane;
    const std::size_t yplane = oh * ow, yvol = od * yplane;
    for (std::size_t o = 0; o < co; ++o) {
        const S* dyo = dy.data() + o * yvol;
        for (std::size_t i = 0; i < yvol; ++i) g.db[o] += dyo[i];
        for (std::size_t c = 0; c < ci; ++c) {
            const S* xc = x.data() + c * xvol;
            S* dxc = g.dx.data() + c * xvol;
            const S* kk = K.data() + (o * ci + c) * kd * kh * kw;
            S* dkk = g.dK.data() + (o * ci + c) * kd * kh * kw;
            for (std::size_t kz = 0; kz < kd; ++kz)
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const S kv = kk[(kz * kh + ky) * kw + kx];
                        S acc{0};
                        for (std::size_t oz = 0; oz < od; ++oz)
                            for (std::size_t oy = 0; oy < oh; ++oy) {
                                const std::size_t base =
                                    (oz * stride + kz) * xplane + (oy * stride + ky) * w + kx;
                                const S* xrow = xc + base;
                                S* dxrow = dxc + base;
                                const S* dyrow = dyo + oz * yplane + oy * ow;
                                for (std::size_t ox = 0; ox < ow; ++ox) {
                                    acc += dyrow[ox] * xrow[ox * stride];
                                    dxrow[ox * stride] += dyrow[ox] * kv;
                                }
                            }
                        dkk[(kz * kh + ky) * kw + kx] += acc;
                    }
        }
    }
    return g;
}

template <typename S>
TensorT<S> conv_transpose3d(const TensorT<S>& z, const TensorT<S>& K, const TensorT<S>& b,
                            std::size_t stride) {
    detail::check_stride(stride, "conv_transpose3d");
    if (z.rank() != 4 || K.rank() != 5 || b.rank() != 1)
        throw dim_error("conv_transpose3d: want z[co,d,h,w], K[co,ci,kd,kh,kw], b[ci]; got z" +
                        shape_str(z.shape()) + " K" + shape_str(K.shape()) + " b" +
                        shape_str(b.shape()));
    const std::size_t co = z.extent(0), zd = z.extent(1), zh = z.extent(2), zw = z.extent(3);
    const std::size_t ci = K.extent(1), kd = K.extent(2), kh = K.extent(3), kw = K.extent(4);
    if (K.extent(0) != co || b.extent(0) != ci)
        throw dim_error("conv_transpose3d: channel mismatch: z" + shape_str(z.shape()) + " K" +
                        shape_str(K.shape()) + " b" + shape_str(b.shape()));
    const std::size_t od = (zd - 1) * stride + kd;
    const std::size_t oh = (zh - 1) * stride + kh;
    const std::size_t ow = (zw - 1) * stride + kw;

    TensorT<S> out({ci, od, oh, ow});
    const std::size_t oplane = oh * ow, ovol = od * oplane;
    const std::size_t zplane = zh * zw, zvol = zd * zplane;
    for (std::size_t c = 0; c < ci; ++c) {
        S* oc = out.data() + c * ovol;
        for (std::size_t i = 0; i < ovol; ++i) oc[i] = b[c];
    }
    for (std::size_t o = 0; o < co; ++o) {
        const S* zo = z.data() + o * zvol;
        for (std::size_t c = 0; c < ci; ++c) {
            S* oc = out.data() + c * ovol;
            const S* kk = K.data() + (o * ci + c) * kd * kh * kw;
            for (std::size_t kz = 0; kz < kd; ++kz)
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const S kv = kk[(kz * kh + ky) * kw + kx];
                        for (std::size_t zz = 0; zz < zd; ++zz)
                            for (std::size_t zy = 0; zy < zh; ++zy) {
                                const S* zrow = zo + zz * zplane + zy * zw;
                                S* orow = oc + (zz * stride + kz) * oplane +
                                          (zy * stride + ky) * ow + kx;
                                for (std::size_t zx = 0; zx < zw; ++zx)
                                    orow[zx * stride] += kv * zrow[zx];
                            }
                    }
        }
    }
    return out;
}

template <typename S>
ConvGrads<S> conv_transpose3d_backward(const TensorT<S>& dout, const TensorT<S>& z,
                                       const TensorT<S>& K, std::size_t stride) {
    const std::size_t co = z.extent(0), zd = z.extent(1), zh = z.extent(2), zw = z.extent(3);
    const std::size_t ci = K.extent(1), kd = K.extent(2), kh = K.extent(3), kw = K.extent(4);
    const std::size_t od = (zd - 1) * stride + kd;
    const std::size_t oh = (zh - 1) * stride + kh;
    const std::size_t ow = (zw - 1) * stride + kw;
    require_shape(dout, {ci, od, oh, ow}, "conv_transpose3d_backward upstream");

    ConvGrads<S> g{TensorT<S>(z.shape()), TensorT<S>(K.shape()), TensorT<S>({ci})};
    const std::size_t oplane = oh * ow, ovol = od * oplane;
    const std::size_t zplane = zh * zw, zvol = zd * zplane;
    for (std::size_t c = 0; c < ci; ++c) {
        const S* doc = dout.data() + c * ovol;
        for (std::size_t i = 0; i < ovol; ++i) g.db[c] += doc[i];
    }
    for (std::size_t o = 0; o < co; ++o) {
        const S* zo = z.data() + o * zvol;
        S* dzo = g.dx.data() + o * zvol;
        for (std::size_t c = 0; c < ci; ++c) {
            const S* doc = dout.data() + c * ovol;
            const S* kk = K.data() + (o * ci + c) * kd * kh * kw;
            S* dkk = g.dK.data() + (o * ci + c) * kd * kh * kw;
            for (std::size_t kz = 0; kz < kd; ++kz)
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const S kv = kk[(kz * kh + ky) * kw + kx];
                        S acc{0};
                        for (std::size_t zz = 0; zz < zd; ++zz)
                            for (std::size_t zy = 0; zy < zh; ++zy) {
                                const S* dorow = doc + (zz * stride + kz) * oplane +
                                                 (zy * stride + ky) * ow + kx;
                                const S* zrow = zo + zz * zplane + zy * zw;
                                S* dzrow = dzo + zz * zplane + zy * zw;
                                for (std::size_t zx = 0; zx < zw; ++zx) {
                                    dzrow[zx] += dorow[zx * stride] * kv;
                                    acc += dorow[zx * stride] * zrow[zx];
                                }
                            }
                        dkk[(kz * kh + ky) * kw + kx] += acc;
                    }
        }
    }
    return g;
}

}  // namespace setvec

#endif  // SETVEC_CONV_HPP_

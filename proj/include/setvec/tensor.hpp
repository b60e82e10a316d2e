#ifndef SETVEC_TENSOR_HPP_
#define SETVEC_TENSOR_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace setvec {

// Error taxonomy. The CLI maps these onto exit codes: usage_error -> 2,
// format_error -> 3, numeric_error -> 4.
class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class dim_error : public error {
public:
    using error::error;
};

class domain_error : public error {
public:
    using error::error;
};

class usage_error : public error {
public:
    using error::error;
};

class format_error : public error {
public:
    using error::error;
};

class numeric_error : public error {
public:
    using error::error;
};

class incompat_error : public error {
public:
    using error::error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_volume(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

/**
 * Dense row-major tensor over a floating-point scalar. Double by default;
 * instantiate with float where speed matters more than gradient-check
 * precision.
 */
template <typename S = double>
class TensorT {
    static_assert(std::is_floating_point_v<S>, "tensor scalar must be floating point");

public:
    using scalar_type = S;

    TensorT() = default;

    explicit TensorT(Shape shape, S fill = S{0})
        : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}

    static TensorT from(Shape shape, std::vector<S> values) {
        if (shape_volume(shape) != values.size())
            throw dim_error("tensor data length " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape));
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(values);
        return t;
    }

    static TensorT scalar(S v) { return from({1}, {v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    std::vector<S>& values() { return data_; }
    const std::vector<S>& values() const { return data_; }

    S& operator[](std::size_t i) { return data_[i]; }
    S operator[](std::size_t i) const { return data_[i]; }

    template <typename... Ix>
    S& operator()(Ix... ix) {
        return data_[offset(ix...)];
    }
    template <typename... Ix>
    S operator()(Ix... ix) const {
        return data_[offset(ix...)];
    }

    template <typename... Ix>
    std::size_t offset(Ix... ix) const {
        const std::size_t idx[] = {static_cast<std::size_t>(ix)...};
        std::size_t off = 0;
        for (std::size_t a = 0; a < sizeof...(Ix); ++a) off = off * shape_[a] + idx[a];
        return off;
    }

    TensorT reshaped(Shape s) const {
        if (shape_volume(s) != data_.size())
            throw dim_error("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        TensorT t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    TensorT& operator+=(const TensorT& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    TensorT& operator-=(const TensorT& o) {
        require_same_shape(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    TensorT& operator*=(S a) {
        for (S& v : data_) v *= a;
        return *this;
    }

    friend bool operator==(const TensorT& a, const TensorT& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void require_same_shape(const TensorT& o, const char* what) const {
        if (shape_ != o.shape_)
            throw dim_error(std::string("shape mismatch in tensor ") + what + ": " +
                            shape_str(shape_) + " vs " + shape_str(o.shape_));
    }

    Shape shape_;
    std::vector<S> data_;
};

using Tensor = TensorT<double>;

template <typename S>
void require_shape(const TensorT<S>& t, const Shape& want, const char* what) {
    if (t.shape() != want)
        throw dim_error(std::string(what) + ": expected shape " + shape_str(want) + ", got " +
                        shape_str(t.shape()));
}

template <typename S>
S dot(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.size() != b.size())
        throw dim_error("dot: size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    S acc{0};
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

}  // namespace setvec

#endif  // SETVEC_TENSOR_HPP_

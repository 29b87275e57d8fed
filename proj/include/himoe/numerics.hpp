#pragma once
// Dense vectors/matrices and the handful of primitives the routing block needs.
// Every operation is templated on the scalar so the same code runs on plain
// doubles (evaluation) and on ad::Real (taped training / gradient checks).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "himoe/autodiff.hpp"
#include "himoe/errors.hpp"

namespace himoe {

template <class T>
class BasicVector {
public:
    using value_type = T;

    BasicVector() = default;
    explicit BasicVector(std::size_t n, T fill = T{}) : data_(n, fill) {}
    BasicVector(std::initializer_list<T> init) : data_(init) {}
    explicit BasicVector(std::vector<T> v) : data_(std::move(v)) {}

    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    operator std::span<const T>() const { return data_; }  // NOLINT

    const std::vector<T>& std() const { return data_; }

    bool operator==(const BasicVector&) const = default;

private:
    std::vector<T> data_;
};

/// Row-major dense matrix.
template <class T>
class BasicMatrix {
public:
    using value_type = T;

    BasicMatrix() = default;
    BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows * cols)
            throw DimensionError("BasicMatrix: " + std::to_string(data_.size()) +
                                 " entries for shape " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
    }
    BasicMatrix(std::initializer_list<std::initializer_list<T>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols_) throw DimensionError("BasicMatrix: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static BasicMatrix identity(std::size_t n) {
        BasicMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1.0);
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<T> flat() { return data_; }
    std::span<const T> flat() const { return data_; }

    bool operator==(const BasicMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Vector = BasicVector<double>;
using Matrix = BasicMatrix<double>;

inline std::string shape_str(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
}

/// Converts constant data into the working scalar type.
template <class T>
BasicVector<T> lift(std::span<const double> v) {
    BasicVector<T> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = T(v[i]);
    return out;
}

template <class T>
Vector values(std::span<const T> v) {
    Vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = value_of(v[i]);
    return out;
}

template <class T>
Vector values(const BasicVector<T>& v) {
    return values<T>(v.span());
}

/// W x + b.
template <class T>
BasicVector<T> linear(const BasicMatrix<T>& W, std::type_identity_t<std::span<const T>> x,
                      std::type_identity_t<std::span<const T>> b) {
    if (W.cols() != x.size() || W.rows() != b.size())
        throw DimensionError("linear: W is " + shape_str(W.rows(), W.cols()) + ", x has " +
                             std::to_string(x.size()) + ", b has " + std::to_string(b.size()));
    BasicVector<T> y(W.rows());
    if constexpr (std::is_same_v<T, ad::Real>) {
        auto tape_in = [](std::span<const ad::Real> v) -> ad::Tape* {
            for (const auto& r : v)
                if (r.tape()) return r.tape();
            return nullptr;
        };
        ad::Tape* tape = tape_in(W.flat());
        if (!tape) tape = tape_in(x);
        if (!tape) tape = tape_in(b);
        if (tape) {
            for (std::size_t r = 0; r < W.rows(); ++r) y[r] = tape->affine(W.row(r), x, b[r]);
            return y;
        }
    }
    for (std::size_t r = 0; r < W.rows(); ++r) {
        T acc = b[r];
        const auto w = W.row(r);
        for (std::size_t c = 0; c < x.size(); ++c) acc += w[c] * x[c];
        y[r] = acc;
    }
    return y;
}

/// [a ; b]
template <class T>
BasicVector<T> concat(std::span<const T> a, std::type_identity_t<std::span<const T>> b) {
    BasicVector<T> out(a.size() + b.size());
    std::copy(a.begin(), a.end(), out.begin());
    std::copy(b.begin(), b.end(), out.begin() + static_cast<std::ptrdiff_t>(a.size()));
    return out;
}

/// softmax(logits / tau), stabilized by subtracting the max before exponentiating.
template <class T>
BasicVector<T> softmax_temp(std::span<const T> logits, double tau) {
    using std::exp;
    if (!(tau > 0.0) || !std::isfinite(tau))
        throw ParameterError("softmax_temp: tau must be finite and > 0, got " + std::to_string(tau));
    if (logits.empty()) throw InputError("softmax_temp: empty logits");
    double peak = -std::numeric_limits<double>::infinity();
    for (const T& l : logits) {
        const double v = value_of(l);
        if (!std::isfinite(v)) throw InputError("softmax_temp: non-finite logit");
        peak = std::max(peak, v / tau);
    }
    BasicVector<T> out(logits.size());
    T total(0.0);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = exp(logits[i] / tau - peak);
        total += out[i];
    }
    for (auto& o : out) o /= total;
    return out;
}

template <class T>
BasicVector<T> softmax_temp(const BasicVector<T>& logits, double tau) {
    return softmax_temp<T>(logits.span(), tau);
}

/// Indices of the k largest entries, in descending order of value. Ties go to
/// the lowest index.
template <class T>
std::vector<std::size_t> topk(std::span<const T> values, std::size_t k) {
    if (k < 1 || k > values.size())
        throw ParameterError("topk: k=" + std::to_string(k) + " outside [1, " +
                             std::to_string(values.size()) + "]");
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          const double va = value_of(values[a]);
                          const double vb = value_of(values[b]);
                          return va > vb || (va == vb && a < b);
                      });
    idx.resize(k);
    return idx;
}

template <class T>
std::vector<std::size_t> topk(const BasicVector<T>& values, std::size_t k) {
    return topk<T>(values.span(), k);
}

/// Hidden-layer nonlinearity of every expert FFN.
template <class T>
T activation(const T& x) {
    using std::tanh;
    return tanh(x);
}

/// true when entries are non-negative and sum to 1 within `tol`.
inline bool is_simplex(std::span<const double> v, double tol = 1e-9) {
    double s = 0.0;
    for (double x : v) {
        if (!(x >= 0.0)) return false;
        s += x;
    }
    return std::abs(s - 1.0) <= tol;
}

inline double mean(std::span<const double> v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace himoe

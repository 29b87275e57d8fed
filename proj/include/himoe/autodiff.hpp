#pragma once
// Minimal scalar reverse-mode tape.
//
// Every arithmetic operation on taped `Real` values appends one node holding
// at most two parent indices and the local partial derivatives. Backward is a
// single reverse sweep over the node array, so the accumulation order is fixed
// and two identical forward passes give bitwise-identical adjoints.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "himoe/errors.hpp"

namespace himoe::ad {

class Tape;

/// A double that may be tracked on a tape. Default / double-constructed values
/// are constants and never create nodes.
class Real {
public:
    static constexpr std::uint32_t kConstant = std::numeric_limits<std::uint32_t>::max();

    Real() = default;
    Real(double v) : value_(v) {}  // NOLINT(google-explicit-constructor)

    double value() const { return value_; }
    bool is_constant() const { return tape_ == nullptr; }
    std::uint32_t index() const { return index_; }
    Tape* tape() const { return tape_; }

    Real& operator+=(const Real& o);
    Real& operator-=(const Real& o);
    Real& operator*=(const Real& o);
    Real& operator/=(const Real& o);

private:
    friend class Tape;
    Real(double v, Tape* t, std::uint32_t i) : value_(v), tape_(t), index_(i) {}

    double value_ = 0.0;
    Tape* tape_ = nullptr;
    std::uint32_t index_ = kConstant;
};

inline double value_of(const Real& r) { return r.value(); }

class Tape {
public:
    Tape() {
        offsets_.reserve(1 << 16);
        edges_.reserve(1 << 17);
    }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// New independent variable (a leaf).
    Real variable(double v) { return push(v); }

    std::size_t size() const { return offsets_.size() - 1; }

    Real unary(double v, const Real& a, double da) {
        if (a.is_constant()) return Real(v);
        check_owner(a);
        edges_.push_back({a.index_, da});
        return push(v);
    }

    Real binary(double v, const Real& a, double da, const Real& b, double db) {
        if (a.is_constant()) return unary(v, b, db);
        if (b.is_constant()) return unary(v, a, da);
        check_owner(a);
        check_owner(b);
        edges_.push_back({a.index_, da});
        edges_.push_back({b.index_, db});
        return push(v);
    }

    /// bias + sum_j w[j] * x[j] as a single node.
    Real affine(std::span<const Real> w, std::span<const Real> x, const Real& bias) {
        double v = bias.value_;
        for (std::size_t j = 0; j < w.size(); ++j) v += w[j].value_ * x[j].value_;
        const std::size_t before = edges_.size();
        auto link = [&](const Real& r, double partial) {
            if (r.is_constant()) return;
            check_owner(r);
            edges_.push_back({r.index_, partial});
        };
        link(bias, 1.0);
        for (std::size_t j = 0; j < w.size(); ++j) {
            link(w[j], x[j].value_);
            link(x[j], w[j].value_);
        }
        if (edges_.size() == before) return Real(v);
        return push(v);
    }

    /// Adjoints d(output)/d(node) for every node on the tape.
    std::vector<double> backward(const Real& output) const {
        std::vector<double> adj(size(), 0.0);
        if (output.is_constant()) return adj;
        check_owner(output);
        adj[output.index_] = 1.0;
        for (std::size_t i = output.index_ + 1; i-- > 0;) {
            const double a = adj[i];
            if (a == 0.0) continue;
            for (std::uint32_t e = offsets_[i]; e < offsets_[i + 1]; ++e) adj[edges_[e].parent] += a * edges_[e].partial;
        }
        return adj;
    }

private:
    struct Edge {
        std::uint32_t parent;
        double partial;
    };

    /// Closes a node over the edges pushed since the previous node.
    Real push(double v) {
        offsets_.push_back(static_cast<std::uint32_t>(edges_.size()));
        return Real(v, this, static_cast<std::uint32_t>(offsets_.size() - 2));
    }

    void check_owner(const Real& r) const {
        if (r.tape_ != this) throw Error("ad::Real belongs to a different tape");
    }

    std::vector<std::uint32_t> offsets_{0};  // node i owns edges [offsets_[i], offsets_[i+1])
    std::vector<Edge> edges_;
};

inline Tape* tape_of(const Real& a, const Real& b) { return a.tape() ? a.tape() : b.tape(); }

inline Real operator+(const Real& a, const Real& b) {
    Tape* t = tape_of(a, b);
    const double v = a.value() + b.value();
    return t ? t->binary(v, a, 1.0, b, 1.0) : Real(v);
}
inline Real operator-(const Real& a, const Real& b) {
    Tape* t = tape_of(a, b);
    const double v = a.value() - b.value();
    return t ? t->binary(v, a, 1.0, b, -1.0) : Real(v);
}
inline Real operator*(const Real& a, const Real& b) {
    Tape* t = tape_of(a, b);
    const double v = a.value() * b.value();
    return t ? t->binary(v, a, b.value(), b, a.value()) : Real(v);
}
inline Real operator/(const Real& a, const Real& b) {
    Tape* t = tape_of(a, b);
    const double v = a.value() / b.value();
    return t ? t->binary(v, a, 1.0 / b.value(), b, -v / b.value()) : Real(v);
}
inline Real operator-(const Real& a) {
    return a.tape() ? a.tape()->unary(-a.value(), a, -1.0) : Real(-a.value());
}

inline Real& Real::operator+=(const Real& o) { return *this = *this + o; }
inline Real& Real::operator-=(const Real& o) { return *this = *this - o; }
inline Real& Real::operator*=(const Real& o) { return *this = *this * o; }
inline Real& Real::operator/=(const Real& o) { return *this = *this / o; }

inline Real exp(const Real& a) {
    const double v = std::exp(a.value());
    return a.tape() ? a.tape()->unary(v, a, v) : Real(v);
}
inline Real log(const Real& a) {
    const double v = std::log(a.value());
    return a.tape() ? a.tape()->unary(v, a, 1.0 / a.value()) : Real(v);
}
inline Real tanh(const Real& a) {
    const double v = std::tanh(a.value());
    return a.tape() ? a.tape()->unary(v, a, 1.0 - v * v) : Real(v);
}
inline Real sqrt(const Real& a) {
    const double v = std::sqrt(a.value());
    return a.tape() ? a.tape()->unary(v, a, 0.5 / v) : Real(v);
}

}  // namespace himoe::ad

namespace himoe {

inline double value_of(double x) { return x; }
using ad::value_of;

/// Central-difference gradient estimate of `f` at `params`.
///
/// Coordinates are perturbed one at a time on a private copy, so `f` sees
/// exactly theta +/- eps * e_j. Throws OracleError if any evaluation is not
/// finite.
inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                            std::span<const double> params, double eps) {
    if (!(eps > 0.0)) throw ParameterError("finite_diff_grad: eps must be > 0");
    std::vector<double> theta(params.begin(), params.end());
    std::vector<double> grad(theta.size());
    for (std::size_t j = 0; j < theta.size(); ++j) {
        const double saved = theta[j];
        theta[j] = saved + eps;
        const double up = f(theta);
        theta[j] = saved - eps;
        const double down = f(theta);
        theta[j] = saved;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw OracleError("finite_diff_grad: non-finite function value at coordinate " +
                              std::to_string(j));
        grad[j] = (up - down) / (2.0 * eps);
    }
    return grad;
}

}  // namespace himoe

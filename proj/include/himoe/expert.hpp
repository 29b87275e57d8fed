#pragma once

#include <span>

#include "himoe/numerics.hpp"
#include "himoe/params.hpp"

namespace himoe {

/// One expert FFN: W2 act(W1 q + b1) + b2. Biases are n x 1 matrices.
struct ExpertParams {
    Matrix w1;  // h x d
    Matrix b1;  // h x 1
    Matrix w2;  // d x h
    Matrix b2;  // d x 1
};

template <class T>
BasicVector<T> expert_forward(const BasicMatrix<T>& w1, const BasicMatrix<T>& b1, const BasicMatrix<T>& w2,
                              const BasicMatrix<T>& b2, std::type_identity_t<std::span<const T>> q) {
    BasicVector<T> hidden = linear<T>(w1, q, b1.flat());
    for (auto& x : hidden) x = activation(x);
    return linear<T>(w2, hidden.span(), b2.flat());
}

inline Vector expert_forward(const ExpertParams& e, const Vector& q) {
    return expert_forward<double>(e.w1, e.b1, e.w2, e.b2, q.span());
}

inline ExpertParams expert_params(const ParamSet& p, std::size_t k) {
    return {p.at(names::expert(k, "w1")), p.at(names::expert(k, "b1")), p.at(names::expert(k, "w2")),
            p.at(names::expert(k, "b2"))};
}

/// Expert `k` looked up through a binder (plain or taped).
template <class T>
BasicVector<T> expert_forward(ParamBinder<T>& params, std::size_t k, std::type_identity_t<std::span<const T>> q) {
    const auto& w1 = params(names::expert(k, "w1"));
    const auto& b1 = params(names::expert(k, "b1"));
    const auto& w2 = params(names::expert(k, "w2"));
    const auto& b2 = params(names::expert(k, "b2"));
    return expert_forward<T>(w1, b1, w2, b2, q);
}

/// The single FFN of the dense baseline.
template <class T>
BasicVector<T> dense_forward(ParamBinder<T>& params, std::type_identity_t<std::span<const T>> q) {
    const auto& w1 = params(names::dense("w1"));
    const auto& b1 = params(names::dense("b1"));
    const auto& w2 = params(names::dense("w2"));
    const auto& b2 = params(names::dense("b2"));
    return expert_forward<T>(w1, b1, w2, b2, q);
}

}  // namespace himoe

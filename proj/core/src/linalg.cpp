// SPDX-License-Identifier: Apache-2.0
#include "tina/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace tina {

double dot(const double* a, const double* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy(double alpha, const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double squared_norm(const double* v, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += v[i] * v[i];
    return s;
}

void linear_forward(const double* x, size_t m, size_t in_dim,
                    const double* w, const double* b, size_t out_dim,
                    double* y) {
#pragma omp parallel for schedule(static)
    for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
        auto i = static_cast<size_t>(ii);
        const double* xi = x + i * in_dim;
        double* yi = y + i * out_dim;
        for (size_t o = 0; o < out_dim; ++o) {
            yi[o] = dot(xi, w + o * in_dim, in_dim) + (b ? b[o] : 0.0);
        }
    }
}

void linear_backward_input(const double* dy, size_t m, size_t out_dim,
                           const double* w, size_t in_dim, double* dx) {
#pragma omp parallel for schedule(static)
    for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
        auto i = static_cast<size_t>(ii);
        const double* dyi = dy + i * out_dim;
        double* dxi = dx + i * in_dim;
        for (size_t o = 0; o < out_dim; ++o) {
            axpy(dyi[o], w + o * in_dim, dxi, in_dim);
        }
    }
}

void linear_backward_params(const double* dy, const double* x,
                            size_t m, size_t in_dim, size_t out_dim,
                            double* dw, double* db) {
#pragma omp parallel for schedule(static)
    for (long long oo = 0; oo < static_cast<long long>(out_dim); ++oo) {
        auto o = static_cast<size_t>(oo);
        double* dwo = dw + o * in_dim;
        double dbo = 0.0;
        for (size_t i = 0; i < m; ++i) {
            double g = dy[i * out_dim + o];
            dbo += g;
            axpy(g, x + i * in_dim, dwo, in_dim);
        }
        if (db) db[o] += dbo;
    }
}

void softmax_inplace(double* v, size_t n) {
    double mx = v[0];
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        v[i] = std::exp(v[i] - mx);
        sum += v[i];
    }
    double inv = 1.0 / sum;
    for (size_t i = 0; i < n; ++i) v[i] *= inv;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
} // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        fn(static_cast<size_t>(i));
    }
}

} // namespace tina

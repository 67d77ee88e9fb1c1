// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace tina {

// Dense kernels for the trainer. All parallel loops split over independent
// output elements, and every element's reduction runs sequentially, so results
// are bit-identical regardless of thread count.

// Y[m,out] = X[m,in] * W[out,in]^T + b (b may be null)
void linear_forward(const double* x, size_t m, size_t in_dim,
                    const double* w, const double* b, size_t out_dim,
                    double* y);

// dX[m,in] += dY[m,out] * W[out,in]
void linear_backward_input(const double* dy, size_t m, size_t out_dim,
                           const double* w, size_t in_dim, double* dx);

// dW[out,in] += dY[m,out]^T * X[m,in];  db[out] += column sums of dY
void linear_backward_params(const double* dy, const double* x,
                            size_t m, size_t in_dim, size_t out_dim,
                            double* dw, double* db);

void softmax_inplace(double* v, size_t n);

double gelu(double x);
double gelu_grad(double x);

double dot(const double* a, const double* b, size_t n);
void axpy(double alpha, const double* x, double* y, size_t n); // y += alpha*x

double squared_norm(const double* v, size_t n);

// index-based parallel loop with deterministic work assignment
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

} // namespace tina

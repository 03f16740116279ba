#pragma once

#include <cstddef>

namespace ehs::kernels {

// Dense numeric inner loops. Each kernel exists twice: a plain serial
// reference under serial:: and an OpenMP version under omp::. The unprefixed
// entry points dispatch by problem size. Both variants compute every output
// element with the same serial reduction order, so serial and omp results
// are bitwise identical; tests rely on that.

struct ConvShape {
    int c_in, h, w;        // input planes
    int c_out, kh, kw;     // kernels
    int stride_h, stride_w;
    int out_h() const { return (h - kh) / stride_h + 1; }
    int out_w() const { return (w - kw) / stride_w + 1; }
};

namespace serial {

// c[m x n] = a[m x k] * b[k x n]; accumulate adds instead of overwriting.
void matmul(const double* a, const double* b, double* c, int m, int k, int n,
            bool accumulate = false);
// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n,
               bool accumulate = false);
// c[m x n] = a[k x m]^T * b[k x n]
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n,
               bool accumulate = false);

void conv2d_forward(const ConvShape& s, const double* x, const double* k, double* out,
                    bool accumulate = false);
void conv2d_backward_input(const ConvShape& s, const double* grad_out, const double* k,
                           double* grad_x, bool accumulate = true);
void conv2d_backward_kernels(const ConvShape& s, const double* grad_out, const double* x,
                             double* grad_k, bool accumulate = true);

} // namespace serial

namespace omp {

void matmul(const double* a, const double* b, double* c, int m, int k, int n,
            bool accumulate = false);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n,
               bool accumulate = false);
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n,
               bool accumulate = false);

void conv2d_forward(const ConvShape& s, const double* x, const double* k, double* out,
                    bool accumulate = false);
void conv2d_backward_input(const ConvShape& s, const double* grad_out, const double* k,
                           double* grad_x, bool accumulate = true);
void conv2d_backward_kernels(const ConvShape& s, const double* grad_out, const double* x,
                             double* grad_k, bool accumulate = true);

} // namespace omp

// Size-dispatched entry points used by the tensor engine.
void matmul(const double* a, const double* b, double* c, int m, int k, int n,
            bool accumulate = false);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n,
               bool accumulate = false);
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n,
               bool accumulate = false);
void conv2d_forward(const ConvShape& s, const double* x, const double* k, double* out,
                    bool accumulate = false);
void conv2d_backward_input(const ConvShape& s, const double* grad_out, const double* k,
                           double* grad_x, bool accumulate = true);
void conv2d_backward_kernels(const ConvShape& s, const double* grad_out, const double* x,
                             double* grad_k, bool accumulate = true);

} // namespace ehs::kernels

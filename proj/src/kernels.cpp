#include "ehs/kernels.hpp"

#include <cstring>

#include "ehs/parallel.hpp"

namespace ehs::kernels {

// ---------------------------------------------------------------------------
// Serial reference: naive loops, one scalar accumulator per output element.
// ---------------------------------------------------------------------------

namespace serial {

void matmul(const double* a, const double* b, double* c, int m, int k, int n,
            bool accumulate) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double sum = accumulate ? c[i * n + j] : 0.0;
            for (int p = 0; p < k; ++p) sum += a[i * k + p] * b[p * n + j];
            c[i * n + j] = sum;
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n,
               bool accumulate) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double sum = accumulate ? c[i * n + j] : 0.0;
            for (int p = 0; p < k; ++p) sum += a[i * k + p] * b[j * k + p];
            c[i * n + j] = sum;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n,
               bool accumulate) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double sum = accumulate ? c[i * n + j] : 0.0;
            for (int p = 0; p < k; ++p) sum += a[p * m + i] * b[p * n + j];
            c[i * n + j] = sum;
        }
    }
}

void conv2d_forward(const ConvShape& s, const double* x, const double* k, double* out,
                    bool accumulate) {
    const int oh = s.out_h(), ow = s.out_w();
    for (int co = 0; co < s.c_out; ++co) {
        for (int y = 0; y < oh; ++y) {
            for (int z = 0; z < ow; ++z) {
                double sum = accumulate ? out[(co * oh + y) * ow + z] : 0.0;
                for (int ci = 0; ci < s.c_in; ++ci) {
                    for (int i = 0; i < s.kh; ++i) {
                        for (int j = 0; j < s.kw; ++j) {
                            sum += x[(ci * s.h + y * s.stride_h + i) * s.w + z * s.stride_w + j] *
                                   k[((co * s.c_in + ci) * s.kh + i) * s.kw + j];
                        }
                    }
                }
                out[(co * oh + y) * ow + z] = sum;
            }
        }
    }
}

void conv2d_backward_input(const ConvShape& s, const double* grad_out, const double* k,
                           double* grad_x, bool accumulate) {
    const int oh = s.out_h(), ow = s.out_w();
    for (int ci = 0; ci < s.c_in; ++ci) {
        for (int h = 0; h < s.h; ++h) {
            for (int w = 0; w < s.w; ++w) {
                double sum = accumulate ? grad_x[(ci * s.h + h) * s.w + w] : 0.0;
                for (int co = 0; co < s.c_out; ++co) {
                    for (int i = 0; i < s.kh; ++i) {
                        int hy = h - i;
                        if (hy < 0 || hy % s.stride_h != 0) continue;
                        int y = hy / s.stride_h;
                        if (y >= oh) continue;
                        for (int j = 0; j < s.kw; ++j) {
                            int wz = w - j;
                            if (wz < 0 || wz % s.stride_w != 0) continue;
                            int z = wz / s.stride_w;
                            if (z >= ow) continue;
                            sum += grad_out[(co * oh + y) * ow + z] *
                                   k[((co * s.c_in + ci) * s.kh + i) * s.kw + j];
                        }
                    }
                }
                grad_x[(ci * s.h + h) * s.w + w] = sum;
            }
        }
    }
}

void conv2d_backward_kernels(const ConvShape& s, const double* grad_out, const double* x,
                             double* grad_k, bool accumulate) {
    const int oh = s.out_h(), ow = s.out_w();
    for (int co = 0; co < s.c_out; ++co) {
        for (int ci = 0; ci < s.c_in; ++ci) {
            for (int i = 0; i < s.kh; ++i) {
                for (int j = 0; j < s.kw; ++j) {
                    const size_t idx = ((static_cast<size_t>(co) * s.c_in + ci) * s.kh + i) * s.kw + j;
                    double sum = accumulate ? grad_k[idx] : 0.0;
                    for (int y = 0; y < oh; ++y) {
                        for (int z = 0; z < ow; ++z) {
                            sum += grad_out[(co * oh + y) * ow + z] *
                                   x[(ci * s.h + y * s.stride_h + i) * s.w + z * s.stride_w + j];
                        }
                    }
                    grad_k[idx] = sum;
                }
            }
        }
    }
}

} // namespace serial

// ---------------------------------------------------------------------------
// OpenMP variants: threads own whole output elements; per-element reduction
// order matches the serial reference exactly.
// ---------------------------------------------------------------------------

namespace omp {

void matmul(const double* a, const double* b, double* c, int m, int k, int n,
            bool accumulate) {
#pragma omp parallel for schedule(static) num_threads(ehs::threads())
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<size_t>(i) * n;
        if (!accumulate) std::memset(crow, 0, sizeof(double) * n);
        const double* arow = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n,
               bool accumulate) {
#pragma omp parallel for schedule(static) num_threads(ehs::threads())
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<size_t>(j) * k;
            double sum = accumulate ? crow[j] : 0.0;
            for (int p = 0; p < k; ++p) sum += arow[p] * brow[p];
            crow[j] = sum;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n,
               bool accumulate) {
#pragma omp parallel for schedule(static) num_threads(ehs::threads())
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<size_t>(i) * n;
        if (!accumulate) std::memset(crow, 0, sizeof(double) * n);
        for (int p = 0; p < k; ++p) {
            const double av = a[static_cast<size_t>(p) * m + i];
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void conv2d_forward(const ConvShape& s, const double* x, const double* k, double* out,
                    bool accumulate) {
    const int oh = s.out_h(), ow = s.out_w();
#pragma omp parallel for collapse(2) schedule(static) num_threads(ehs::threads())
    for (int co = 0; co < s.c_out; ++co) {
        for (int y = 0; y < oh; ++y) {
            for (int z = 0; z < ow; ++z) {
                double sum = accumulate ? out[(co * oh + y) * ow + z] : 0.0;
                for (int ci = 0; ci < s.c_in; ++ci) {
                    const double* xpl = x + static_cast<size_t>(ci) * s.h * s.w;
                    const double* kpl = k + (static_cast<size_t>(co) * s.c_in + ci) * s.kh * s.kw;
                    for (int i = 0; i < s.kh; ++i) {
                        const double* xrow = xpl + static_cast<size_t>(y * s.stride_h + i) * s.w +
                                             z * s.stride_w;
                        const double* krow = kpl + static_cast<size_t>(i) * s.kw;
                        for (int j = 0; j < s.kw; ++j) sum += xrow[j] * krow[j];
                    }
                }
                out[(co * oh + y) * ow + z] = sum;
            }
        }
    }
}

void conv2d_backward_input(const ConvShape& s, const double* grad_out, const double* k,
                           double* grad_x, bool accumulate) {
    const int oh = s.out_h(), ow = s.out_w();
#pragma omp parallel for collapse(2) schedule(static) num_threads(ehs::threads())
    for (int ci = 0; ci < s.c_in; ++ci) {
        for (int h = 0; h < s.h; ++h) {
            for (int w = 0; w < s.w; ++w) {
                double sum = accumulate ? grad_x[(ci * s.h + h) * s.w + w] : 0.0;
                for (int co = 0; co < s.c_out; ++co) {
                    for (int i = 0; i < s.kh; ++i) {
                        int hy = h - i;
                        if (hy < 0 || hy % s.stride_h != 0) continue;
                        int y = hy / s.stride_h;
                        if (y >= oh) continue;
                        for (int j = 0; j < s.kw; ++j) {
                            int wz = w - j;
                            if (wz < 0 || wz % s.stride_w != 0) continue;
                            int z = wz / s.stride_w;
                            if (z >= ow) continue;
                            sum += grad_out[(co * oh + y) * ow + z] *
                                   k[((co * s.c_in + ci) * s.kh + i) * s.kw + j];
                        }
                    }
                }
                grad_x[(ci * s.h + h) * s.w + w] = sum;
            }
        }
    }
}

void conv2d_backward_kernels(const ConvShape& s, const double* grad_out, const double* x,
                             double* grad_k, bool accumulate) {
    const int oh = s.out_h(), ow = s.out_w();
    const int nk = s.c_out * s.c_in * s.kh * s.kw;
#pragma omp parallel for schedule(static) num_threads(ehs::threads())
    for (int idx = 0; idx < nk; ++idx) {
        const int j = idx % s.kw;
        const int i = (idx / s.kw) % s.kh;
        const int ci = (idx / (s.kw * s.kh)) % s.c_in;
        const int co = idx / (s.kw * s.kh * s.c_in);
        double sum = accumulate ? grad_k[idx] : 0.0;
        for (int y = 0; y < oh; ++y) {
            for (int z = 0; z < ow; ++z) {
                sum += grad_out[(co * oh + y) * ow + z] *
                       x[(ci * s.h + y * s.stride_h + i) * s.w + z * s.stride_w + j];
            }
        }
        grad_k[idx] = sum;
    }
}

} // namespace omp

// ---------------------------------------------------------------------------
// Dispatch. Below the cutoff the omp version's region setup costs more than
// the loop body; above it, take the parallel path.
// ---------------------------------------------------------------------------

namespace {
constexpr long kFlopCutoff = 64 * 1024;
}

void matmul(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    if (static_cast<long>(m) * k * n < kFlopCutoff) {
        serial::matmul(a, b, c, m, k, n, accumulate);
    } else {
        omp::matmul(a, b, c, m, k, n, accumulate);
    }
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    if (static_cast<long>(m) * k * n < kFlopCutoff) {
        serial::matmul_nt(a, b, c, m, k, n, accumulate);
    } else {
        omp::matmul_nt(a, b, c, m, k, n, accumulate);
    }
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    if (static_cast<long>(m) * k * n < kFlopCutoff) {
        serial::matmul_tn(a, b, c, m, k, n, accumulate);
    } else {
        omp::matmul_tn(a, b, c, m, k, n, accumulate);
    }
}

void conv2d_forward(const ConvShape& s, const double* x, const double* k, double* out,
                    bool accumulate) {
    long work = static_cast<long>(s.c_out) * s.out_h() * s.out_w() * s.c_in * s.kh * s.kw;
    if (work < kFlopCutoff) {
        serial::conv2d_forward(s, x, k, out, accumulate);
    } else {
        omp::conv2d_forward(s, x, k, out, accumulate);
    }
}

void conv2d_backward_input(const ConvShape& s, const double* grad_out, const double* k,
                           double* grad_x, bool accumulate) {
    long work = static_cast<long>(s.c_in) * s.h * s.w * s.c_out * s.kh * s.kw;
    if (work < kFlopCutoff) {
        serial::conv2d_backward_input(s, grad_out, k, grad_x, accumulate);
    } else {
        omp::conv2d_backward_input(s, grad_out, k, grad_x, accumulate);
    }
}

void conv2d_backward_kernels(const ConvShape& s, const double* grad_out, const double* x,
                             double* grad_k, bool accumulate) {
    long work = static_cast<long>(s.c_out) * s.c_in * s.kh * s.kw * s.out_h() * s.out_w();
    if (work < kFlopCutoff) {
        serial::conv2d_backward_kernels(s, grad_out, x, grad_k, accumulate);
    } else {
        omp::conv2d_backward_kernels(s, grad_out, x, grad_k, accumulate);
    }
}

} // namespace ehs::kernels

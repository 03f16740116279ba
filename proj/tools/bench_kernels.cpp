// Times the OpenMP kernels against the serial reference and verifies that
// both variants still produce bitwise-identical output on random inputs.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ehs/kernels.hpp"
#include "ehs/parallel.hpp"
#include "ehs/rng.hpp"

using namespace ehs;
using kernels::ConvShape;

namespace {

std::vector<double> random_block(size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

double time_best_ms(int iters, const std::function<void()>& fn) {
    double best = 1e300;
    for (int i = 0; i < iters; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        fn();
        auto t1 = std::chrono::steady_clock::now();
        best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
}

struct BenchRow {
    std::string name;
    double serial_ms;
    double omp_ms;
    bool identical;
};

BenchRow bench_pair(const std::string& name, int iters, size_t out_len,
                    const std::function<void(double*)>& serial_fn,
                    const std::function<void(double*)>& omp_fn) {
    std::vector<double> out_serial(out_len), out_omp(out_len);
    BenchRow row;
    row.name = name;
    row.serial_ms = time_best_ms(iters, [&] { serial_fn(out_serial.data()); });
    row.omp_ms = time_best_ms(iters, [&] { omp_fn(out_omp.data()); });
    row.identical =
        std::memcmp(out_serial.data(), out_omp.data(), out_len * sizeof(double)) == 0;
    return row;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"kernel benchmark: serial reference vs OpenMP"};
    int iters = 5;
    int size = 256;
    int threads_opt = 0;
    app.add_option("--iters", iters, "timed repetitions per kernel (best-of)")
        ->check(CLI::PositiveNumber);
    app.add_option("--size", size, "square matmul dimension; conv shapes scale with it")
        ->check(CLI::PositiveNumber);
    app.add_option("--threads", threads_opt, "worker threads (default: EH_NUM_THREADS or all)");
    CLI11_PARSE(app, argc, argv);

    if (threads_opt > 0) set_threads(threads_opt);
    std::printf("threads=%d iters=%d size=%d\n\n", threads(), iters, size);

    Rng rng = Rng::derive(42, "bench/data");
    const int m = size, k = size, n = size;
    auto a = random_block(static_cast<size_t>(m) * k, rng);
    auto b = random_block(static_cast<size_t>(k) * n, rng);

    ConvShape cs;
    cs.c_in = 8;
    cs.h = size / 2;
    cs.w = 40;
    cs.c_out = 16;
    cs.kh = 3;
    cs.kw = 3;
    cs.stride_h = 2;
    cs.stride_w = 1;
    size_t x_len = static_cast<size_t>(cs.c_in) * cs.h * cs.w;
    size_t k_len = static_cast<size_t>(cs.c_out) * cs.c_in * cs.kh * cs.kw;
    size_t y_len = static_cast<size_t>(cs.c_out) * cs.out_h() * cs.out_w();
    auto conv_x = random_block(x_len, rng);
    auto conv_k = random_block(k_len, rng);
    auto conv_gy = random_block(y_len, rng);

    std::vector<BenchRow> rows;
    rows.push_back(bench_pair(
        "matmul", iters, static_cast<size_t>(m) * n,
        [&](double* c) { kernels::serial::matmul(a.data(), b.data(), c, m, k, n); },
        [&](double* c) { kernels::omp::matmul(a.data(), b.data(), c, m, k, n); }));
    rows.push_back(bench_pair(
        "matmul_nt", iters, static_cast<size_t>(m) * n,
        [&](double* c) { kernels::serial::matmul_nt(a.data(), b.data(), c, m, k, n); },
        [&](double* c) { kernels::omp::matmul_nt(a.data(), b.data(), c, m, k, n); }));
    rows.push_back(bench_pair(
        "matmul_tn", iters, static_cast<size_t>(m) * n,
        [&](double* c) { kernels::serial::matmul_tn(a.data(), b.data(), c, m, k, n); },
        [&](double* c) { kernels::omp::matmul_tn(a.data(), b.data(), c, m, k, n); }));
    rows.push_back(bench_pair(
        "conv2d_forward", iters, y_len,
        [&](double* y) { kernels::serial::conv2d_forward(cs, conv_x.data(), conv_k.data(), y); },
        [&](double* y) { kernels::omp::conv2d_forward(cs, conv_x.data(), conv_k.data(), y); }));
    rows.push_back(bench_pair(
        "conv2d_backward_input", iters, x_len,
        [&](double* gx) {
            std::memset(gx, 0, x_len * sizeof(double));
            kernels::serial::conv2d_backward_input(cs, conv_gy.data(), conv_k.data(), gx);
        },
        [&](double* gx) {
            std::memset(gx, 0, x_len * sizeof(double));
            kernels::omp::conv2d_backward_input(cs, conv_gy.data(), conv_k.data(), gx);
        }));
    rows.push_back(bench_pair(
        "conv2d_backward_kernels", iters, k_len,
        [&](double* gk) {
            std::memset(gk, 0, k_len * sizeof(double));
            kernels::serial::conv2d_backward_kernels(cs, conv_gy.data(), conv_x.data(), gk);
        },
        [&](double* gk) {
            std::memset(gk, 0, k_len * sizeof(double));
            kernels::omp::conv2d_backward_kernels(cs, conv_gy.data(), conv_x.data(), gk);
        }));

    std::printf("%-26s %12s %12s %9s %7s\n", "kernel", "serial(ms)", "omp(ms)", "speedup",
                "match");
    bool all_match = true;
    for (const auto& r : rows) {
        all_match = all_match && r.identical;
        std::printf("%-26s %12.3f %12.3f %8.2fx %7s\n", r.name.c_str(), r.serial_ms, r.omp_ms,
                    r.serial_ms / r.omp_ms, r.identical ? "yes" : "NO");
    }
    if (!all_match) {
        std::fprintf(stderr, "error: omp output diverged from the serial reference\n");
        return 1;
    }
    return 0;
}

#include "ehs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "ehs/kernels.hpp"

namespace ehs {

namespace {

bool g_finite_checks = true;

std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

void check_finite(const double* p, int64_t n, const char* what) {
    if (!g_finite_checks) return;
    for (int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) {
            throw NumericError(std::string("non-finite value in ") + what);
        }
    }
}

void quantize_f32(std::vector<double>& v) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

// Applied after a backward closure has written into t.grad directly.
void post_grad_update(Tensor& t) {
    if (t.dtype == DType::f32) quantize_f32(t.grad);
    check_finite(t.grad.data(), static_cast<int64_t>(t.grad.size()), t.op);
}

void require_same_dtype(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->dtype != b->dtype) {
        throw ShapeError(std::string(op) + ": dtype mismatch (" + dtype_name(a->dtype) + " vs " +
                         dtype_name(b->dtype) + ")");
    }
}

void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape != b->shape) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
    require_same_dtype(a, b, op);
}

void require_2d(const TensorPtr& x, const char* op) {
    if (x->ndim() != 2) {
        throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + shape_str(x->shape));
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

// --- Tensor methods ---------------------------------------------------------

int Tensor::rows() const {
    if (ndim() != 2) throw ShapeError("rows(): tensor is not 2-D");
    return shape[0];
}

int Tensor::cols() const {
    if (ndim() != 2) throw ShapeError("cols(): tensor is not 2-D");
    return shape[1];
}

double Tensor::value() const {
    if (!is_scalar()) throw ShapeError("value(): tensor is not scalar");
    return data[0];
}

void Tensor::ensure_grad() {
    if (grad.empty()) grad.assign(static_cast<size_t>(numel()), 0.0);
}

// --- construction -----------------------------------------------------------

TensorPtr tensor(std::vector<int> shape, DType dt, bool requires_grad) {
    if (shape.empty()) throw ShapeError("tensor: empty shape (use {1} for scalars)");
    int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("tensor: non-positive extent in " + shape_str(shape));
        n *= e;
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->dtype = dt;
    t->data.assign(static_cast<size_t>(n), 0.0);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr tensor(std::vector<int> shape, std::vector<double> data, DType dt, bool requires_grad) {
    auto t = tensor(std::move(shape), dt, requires_grad);
    if (static_cast<int64_t>(data.size()) != t->numel()) {
        throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(t->shape));
    }
    t->data = std::move(data);
    if (dt == DType::f32) quantize_f32(t->data);
    check_finite(t->data.data(), t->numel(), "tensor init");
    return t;
}

TensorPtr scalar_tensor(double v, DType dt) { return tensor({1}, {v}, dt); }

TensorPtr full(std::vector<int> shape, double v, DType dt) {
    auto t = tensor(std::move(shape), dt);
    std::fill(t->data.begin(), t->data.end(), dt == DType::f32 ? static_cast<double>(static_cast<float>(v)) : v);
    return t;
}

TensorPtr xavier(std::vector<int> shape, int fan_in, int fan_out, Rng& rng, DType dt) {
    if (fan_in <= 0 || fan_out <= 0) throw ConfigError("xavier: fans must be positive");
    double limit = std::sqrt(6.0 / (fan_in + fan_out));
    auto t = tensor(std::move(shape), dt, true);
    for (double& v : t->data) v = rng.uniform(-limit, limit);
    if (dt == DType::f32) quantize_f32(t->data);
    return t;
}

// --- runtime switches -------------------------------------------------------

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

// --- graph plumbing ---------------------------------------------------------

TensorPtr make_op(std::vector<int> shape, DType dt, std::vector<TensorPtr> parents,
                  const char* name) {
    auto t = tensor(std::move(shape), dt);
    t->op = name;
    bool needs = false;
    for (const auto& p : parents) needs |= p->requires_grad;
    if (needs) {
        t->requires_grad = true;
        t->parents = std::move(parents);
    }
    return t;
}

void finalize_op(Tensor& t) {
    if (t.dtype == DType::f32) quantize_f32(t.data);
    check_finite(t.data.data(), t.numel(), t.op);
}

void accumulate_grad(Tensor& t, const double* g, int64_t n) {
    if (n != t.numel()) throw ShapeError("accumulate_grad: size mismatch");
    t.ensure_grad();
    for (int64_t i = 0; i < n; ++i) t.grad[i] += g[i];
    post_grad_update(t);
}

// --- elementwise ops --------------------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "add");
    auto out = make_op(a->shape, a->dtype, {a, b}, "add");
    for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [a, b](Tensor& self) {
            if (a->requires_grad) accumulate_grad(*a, self.grad.data(), self.numel());
            if (b->requires_grad) accumulate_grad(*b, self.grad.data(), self.numel());
        };
    }
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "sub");
    auto out = make_op(a->shape, a->dtype, {a, b}, "sub");
    for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [a, b](Tensor& self) {
            if (a->requires_grad) accumulate_grad(*a, self.grad.data(), self.numel());
            if (b->requires_grad) {
                std::vector<double> g(self.grad.size());
                for (size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
                accumulate_grad(*b, g.data(), self.numel());
            }
        };
    }
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "mul");
    auto out = make_op(a->shape, a->dtype, {a, b}, "mul");
    for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [a, b](Tensor& self) {
            std::vector<double> g(self.grad.size());
            if (a->requires_grad) {
                for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * b->data[i];
                accumulate_grad(*a, g.data(), self.numel());
            }
            if (b->requires_grad) {
                for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * a->data[i];
                accumulate_grad(*b, g.data(), self.numel());
            }
        };
    }
    return out;
}

TensorPtr scale(const TensorPtr& a, double c) {
    auto out = make_op(a->shape, a->dtype, {a}, "scale");
    for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * c;
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [a, c](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * c;
            accumulate_grad(*a, g.data(), self.numel());
        };
    }
    return out;
}

TensorPtr add_bias(const TensorPtr& x, const TensorPtr& b) {
    require_2d(x, "add_bias");
    if (b->ndim() != 1 || b->shape[0] != x->cols()) {
        throw ShapeError("add_bias: bias shape " + shape_str(b->shape) + " does not match " +
                         shape_str(x->shape));
    }
    require_same_dtype(x, b, "add_bias");
    const int m = x->rows(), n = x->cols();
    auto out = make_op(x->shape, x->dtype, {x, b}, "add_bias");
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out->data[i * n + j] = x->data[i * n + j] + b->data[j];
    }
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x, b, m, n](Tensor& self) {
            if (x->requires_grad) accumulate_grad(*x, self.grad.data(), self.numel());
            if (b->requires_grad) {
                std::vector<double> g(static_cast<size_t>(n), 0.0);
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                }
                accumulate_grad(*b, g.data(), n);
            }
        };
    }
    return out;
}

TensorPtr add_channel_bias(const TensorPtr& x, const TensorPtr& b) {
    if (x->ndim() != 3)
        throw ShapeError("add_channel_bias: input must be [C,H,W], got " + shape_str(x->shape));
    if (b->ndim() != 1 || b->shape[0] != x->shape[0]) {
        throw ShapeError("add_channel_bias: bias shape " + shape_str(b->shape) +
                         " does not match channels of " + shape_str(x->shape));
    }
    require_same_dtype(x, b, "add_channel_bias");
    const int c = x->shape[0];
    const int64_t plane = static_cast<int64_t>(x->shape[1]) * x->shape[2];
    auto out = make_op(x->shape, x->dtype, {x, b}, "add_channel_bias");
    for (int ch = 0; ch < c; ++ch) {
        for (int64_t i = 0; i < plane; ++i)
            out->data[ch * plane + i] = x->data[ch * plane + i] + b->data[ch];
    }
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x, b, c, plane](Tensor& self) {
            if (x->requires_grad) accumulate_grad(*x, self.grad.data(), self.numel());
            if (b->requires_grad) {
                std::vector<double> g(static_cast<size_t>(c), 0.0);
                for (int ch = 0; ch < c; ++ch) {
                    for (int64_t i = 0; i < plane; ++i) g[ch] += self.grad[ch * plane + i];
                }
                accumulate_grad(*b, g.data(), c);
            }
        };
    }
    return out;
}

// --- matmul / conv ----------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    require_same_dtype(a, b, "matmul");
    if (a->cols() != b->rows()) {
        throw ShapeError("matmul: inner extents disagree, " + shape_str(a->shape) + " x " +
                         shape_str(b->shape));
    }
    const int m = a->rows(), k = a->cols(), n = b->cols();
    auto out = make_op({m, n}, a->dtype, {a, b}, "matmul");
    kernels::matmul(a->data.data(), b->data.data(), out->data.data(), m, k, n);
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [a, b, m, k, n](Tensor& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                kernels::matmul_nt(self.grad.data(), b->data.data(), a->grad.data(), m, n, k, true);
                post_grad_update(*a);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                kernels::matmul_tn(a->data.data(), self.grad.data(), b->grad.data(), k, m, n, true);
                post_grad_update(*b);
            }
        };
    }
    return out;
}

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& k, int stride_h, int stride_w) {
    if (x->ndim() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + shape_str(x->shape));
    if (k->ndim() != 4) {
        throw ShapeError("conv2d: kernels must be [Co,Ci,kh,kw], got " + shape_str(k->shape));
    }
    require_same_dtype(x, k, "conv2d");
    if (stride_h < 1 || stride_w < 1) throw ConfigError("conv2d: strides must be >= 1");
    kernels::ConvShape s{x->shape[0], x->shape[1], x->shape[2],
                         k->shape[0], k->shape[2], k->shape[3], stride_h, stride_w};
    if (k->shape[1] != s.c_in) {
        throw ShapeError("conv2d: kernel expects " + std::to_string(k->shape[1]) +
                         " input channels, input has " + std::to_string(s.c_in));
    }
    if (s.kh > s.h || s.kw > s.w) {
        throw ShapeError("conv2d: kernel " + std::to_string(s.kh) + "x" + std::to_string(s.kw) +
                         " larger than input " + std::to_string(s.h) + "x" + std::to_string(s.w));
    }
    auto out = make_op({s.c_out, s.out_h(), s.out_w()}, x->dtype, {x, k}, "conv2d");
    kernels::conv2d_forward(s, x->data.data(), k->data.data(), out->data.data());
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x, k, s](Tensor& self) {
            if (x->requires_grad) {
                x->ensure_grad();
                kernels::conv2d_backward_input(s, self.grad.data(), k->data.data(), x->grad.data(),
                                               true);
                post_grad_update(*x);
            }
            if (k->requires_grad) {
                k->ensure_grad();
                kernels::conv2d_backward_kernels(s, self.grad.data(), x->data.data(),
                                                 k->grad.data(), true);
                post_grad_update(*k);
            }
        };
    }
    return out;
}

// --- activations -------------------------------------------------------------

TensorPtr relu(const TensorPtr& x) {
    auto out = make_op(x->shape, x->dtype, {x}, "relu");
    for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (size_t i = 0; i < g.size(); ++i) g[i] = x->data[i] > 0.0 ? self.grad[i] : 0.0;
            accumulate_grad(*x, g.data(), self.numel());
        };
    }
    return out;
}

TensorPtr sigmoid(const TensorPtr& x) {
    auto out = make_op(x->shape, x->dtype, {x}, "sigmoid");
    for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = stable_sigmoid(x->data[i]);
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (size_t i = 0; i < g.size(); ++i) {
                double s = self.data[i];
                g[i] = self.grad[i] * s * (1.0 - s);
            }
            accumulate_grad(*x, g.data(), self.numel());
        };
    }
    return out;
}

TensorPtr tanh_t(const TensorPtr& x) {
    auto out = make_op(x->shape, x->dtype, {x}, "tanh");
    for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = std::tanh(x->data[i]);
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (size_t i = 0; i < g.size(); ++i) {
                double y = self.data[i];
                g[i] = self.grad[i] * (1.0 - y * y);
            }
            accumulate_grad(*x, g.data(), self.numel());
        };
    }
    return out;
}

TensorPtr square(const TensorPtr& x) {
    auto out = make_op(x->shape, x->dtype, {x}, "square");
    for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = x->data[i] * x->data[i];
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * 2.0 * x->data[i];
            accumulate_grad(*x, g.data(), self.numel());
        };
    }
    return out;
}

// --- reductions ---------------------------------------------------------------

TensorPtr reduce_max_axis(const TensorPtr& x, int axis) {
    require_2d(x, "reduce_max_axis");
    if (axis != 0 && axis != 1) throw ShapeError("reduce_max_axis: axis must be 0 or 1");
    const int m = x->rows(), n = x->cols();
    std::vector<int> out_shape = axis == 0 ? std::vector<int>{1, n} : std::vector<int>{m, 1};
    auto out = make_op(out_shape, x->dtype, {x}, "reduce_max_axis");
    // first occurrence wins on ties
    std::vector<int> arg(axis == 0 ? n : m, 0);
    if (axis == 0) {
        for (int j = 0; j < n; ++j) {
            double best = x->data[j];
            int bi = 0;
            for (int i = 1; i < m; ++i) {
                if (x->data[i * n + j] > best) {
                    best = x->data[i * n + j];
                    bi = i;
                }
            }
            out->data[j] = best;
            arg[j] = bi;
        }
    } else {
        for (int i = 0; i < m; ++i) {
            const double* row = &x->data[static_cast<size_t>(i) * n];
            double best = row[0];
            int bj = 0;
            for (int j = 1; j < n; ++j) {
                if (row[j] > best) {
                    best = row[j];
                    bj = j;
                }
            }
            out->data[i] = best;
            arg[i] = bj;
        }
    }
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x, axis, m, n, arg = std::move(arg)](Tensor& self) {
            x->ensure_grad();
            if (axis == 0) {
                for (int j = 0; j < n; ++j) x->grad[arg[j] * n + j] += self.grad[j];
            } else {
                for (int i = 0; i < m; ++i) x->grad[i * n + arg[i]] += self.grad[i];
            }
            post_grad_update(*x);
        };
    }
    return out;
}

TensorPtr sum_all(const TensorPtr& x) {
    auto out = make_op({1}, x->dtype, {x}, "sum_all");
    double s = 0.0;
    for (int64_t i = 0; i < x->numel(); ++i) s += x->data[i];
    out->data[0] = s;
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x](Tensor& self) {
            std::vector<double> g(static_cast<size_t>(x->numel()), self.grad[0]);
            accumulate_grad(*x, g.data(), x->numel());
        };
    }
    return out;
}

TensorPtr mean_all(const TensorPtr& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x->numel())); }

// --- layout ops ----------------------------------------------------------------

TensorPtr concat_cols(const std::vector<TensorPtr>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: no inputs");
    const int m = xs[0]->rows();
    int total = 0;
    for (const auto& x : xs) {
        require_2d(x, "concat_cols");
        require_same_dtype(xs[0], x, "concat_cols");
        if (x->rows() != m) throw ShapeError("concat_cols: row counts differ");
        total += x->cols();
    }
    std::vector<TensorPtr> parents(xs.begin(), xs.end());
    auto out = make_op({m, total}, xs[0]->dtype, parents, "concat_cols");
    int off = 0;
    for (const auto& x : xs) {
        const int n = x->cols();
        for (int i = 0; i < m; ++i) {
            std::memcpy(&out->data[static_cast<size_t>(i) * total + off],
                        &x->data[static_cast<size_t>(i) * n], sizeof(double) * n);
        }
        off += n;
    }
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [xs, m, total](Tensor& self) {
            int off = 0;
            for (const auto& x : xs) {
                const int n = x->cols();
                if (x->requires_grad) {
                    std::vector<double> g(static_cast<size_t>(m) * n);
                    for (int i = 0; i < m; ++i) {
                        std::memcpy(&g[static_cast<size_t>(i) * n],
                                    &self.grad[static_cast<size_t>(i) * total + off],
                                    sizeof(double) * n);
                    }
                    accumulate_grad(*x, g.data(), static_cast<int64_t>(m) * n);
                }
                off += n;
            }
        };
    }
    return out;
}

TensorPtr concat_rows(const std::vector<TensorPtr>& xs) {
    if (xs.empty()) throw ShapeError("concat_rows: no inputs");
    const int n = xs[0]->cols();
    int total = 0;
    for (const auto& x : xs) {
        require_2d(x, "concat_rows");
        require_same_dtype(xs[0], x, "concat_rows");
        if (x->cols() != n) throw ShapeError("concat_rows: column counts differ");
        total += x->rows();
    }
    std::vector<TensorPtr> parents(xs.begin(), xs.end());
    auto out = make_op({total, n}, xs[0]->dtype, parents, "concat_rows");
    size_t off = 0;
    for (const auto& x : xs) {
        std::memcpy(&out->data[off], x->data.data(), sizeof(double) * x->data.size());
        off += x->data.size();
    }
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [xs](Tensor& self) {
            size_t off = 0;
            for (const auto& x : xs) {
                if (x->requires_grad) {
                    accumulate_grad(*x, self.grad.data() + off, x->numel());
                }
                off += x->data.size();
            }
        };
    }
    return out;
}

TensorPtr slice_rows(const TensorPtr& x, int r0, int r1) {
    require_2d(x, "slice_rows");
    if (r0 < 0 || r1 > x->rows() || r0 >= r1) throw ShapeError("slice_rows: bad range");
    const int n = x->cols(), m = r1 - r0;
    auto out = make_op({m, n}, x->dtype, {x}, "slice_rows");
    std::memcpy(out->data.data(), &x->data[static_cast<size_t>(r0) * n],
                sizeof(double) * static_cast<size_t>(m) * n);
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x, r0, m, n](Tensor& self) {
            x->ensure_grad();
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) {
                    x->grad[static_cast<size_t>(r0 + i) * n + j] += self.grad[static_cast<size_t>(i) * n + j];
                }
            }
            post_grad_update(*x);
        };
    }
    return out;
}

TensorPtr slice_cols(const TensorPtr& x, int c0, int c1) {
    require_2d(x, "slice_cols");
    if (c0 < 0 || c1 > x->cols() || c0 >= c1) throw ShapeError("slice_cols: bad range");
    const int m = x->rows(), nfull = x->cols(), n = c1 - c0;
    auto out = make_op({m, n}, x->dtype, {x}, "slice_cols");
    for (int i = 0; i < m; ++i) {
        std::memcpy(&out->data[static_cast<size_t>(i) * n],
                    &x->data[static_cast<size_t>(i) * nfull + c0], sizeof(double) * n);
    }
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x, c0, m, nfull, n](Tensor& self) {
            x->ensure_grad();
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) {
                    x->grad[static_cast<size_t>(i) * nfull + c0 + j] +=
                        self.grad[static_cast<size_t>(i) * n + j];
                }
            }
            post_grad_update(*x);
        };
    }
    return out;
}

TensorPtr reshape(const TensorPtr& x, std::vector<int> shape) {
    int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("reshape: non-positive extent");
        n *= e;
    }
    if (n != x->numel()) throw ShapeError("reshape: element count changes");
    auto out = make_op(std::move(shape), x->dtype, {x}, "reshape");
    out->data = x->data;
    if (out->requires_grad) {
        out->backprop = [x](Tensor& self) { accumulate_grad(*x, self.grad.data(), self.numel()); };
    }
    return out;
}

TensorPtr reverse_rows(const TensorPtr& x) {
    require_2d(x, "reverse_rows");
    const int m = x->rows(), n = x->cols();
    auto out = make_op(x->shape, x->dtype, {x}, "reverse_rows");
    for (int i = 0; i < m; ++i) {
        std::memcpy(&out->data[static_cast<size_t>(i) * n],
                    &x->data[static_cast<size_t>(m - 1 - i) * n], sizeof(double) * n);
    }
    if (out->requires_grad) {
        out->backprop = [x, m, n](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (int i = 0; i < m; ++i) {
                std::memcpy(&g[static_cast<size_t>(m - 1 - i) * n],
                            &self.grad[static_cast<size_t>(i) * n], sizeof(double) * n);
            }
            accumulate_grad(*x, g.data(), self.numel());
        };
    }
    return out;
}

TensorPtr time_major(const TensorPtr& x) {
    if (x->ndim() != 3) throw ShapeError("time_major: expected [C,T,F], got " + shape_str(x->shape));
    const int c = x->shape[0], t = x->shape[1], f = x->shape[2];
    auto out = make_op({t, c * f}, x->dtype, {x}, "time_major");
    for (int ci = 0; ci < c; ++ci) {
        for (int ti = 0; ti < t; ++ti) {
            std::memcpy(&out->data[(static_cast<size_t>(ti) * c + ci) * f],
                        &x->data[(static_cast<size_t>(ci) * t + ti) * f], sizeof(double) * f);
        }
    }
    if (out->requires_grad) {
        out->backprop = [x, c, t, f](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (int ci = 0; ci < c; ++ci) {
                for (int ti = 0; ti < t; ++ti) {
                    std::memcpy(&g[(static_cast<size_t>(ci) * t + ti) * f],
                                &self.grad[(static_cast<size_t>(ti) * c + ci) * f],
                                sizeof(double) * f);
                }
            }
            accumulate_grad(*x, g.data(), self.numel());
        };
    }
    return out;
}

// --- softmax family ------------------------------------------------------------

namespace {

// Per-row log-sum-exp with max shift; writes lse[i].
void row_lse(const double* x, int m, int n, double* lse) {
    for (int i = 0; i < m; ++i) {
        const double* row = x + static_cast<size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += std::exp(row[j] - mx);
        lse[i] = mx + std::log(s);
    }
}

} // namespace

TensorPtr softmax_rows(const TensorPtr& x) {
    require_2d(x, "softmax_rows");
    const int m = x->rows(), n = x->cols();
    auto out = make_op(x->shape, x->dtype, {x}, "softmax_rows");
    std::vector<double> lse(m);
    row_lse(x->data.data(), m, n, lse.data());
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out->data[static_cast<size_t>(i) * n + j] =
                std::exp(x->data[static_cast<size_t>(i) * n + j] - lse[i]);
        }
    }
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x, m, n](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (int i = 0; i < m; ++i) {
                const double* srow = &self.data[static_cast<size_t>(i) * n];
                const double* grow = &self.grad[static_cast<size_t>(i) * n];
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += srow[j] * grow[j];
                for (int j = 0; j < n; ++j) g[static_cast<size_t>(i) * n + j] = srow[j] * (grow[j] - dot);
            }
            accumulate_grad(*x, g.data(), self.numel());
        };
    }
    return out;
}

TensorPtr log_softmax_rows(const TensorPtr& x) {
    require_2d(x, "log_softmax_rows");
    const int m = x->rows(), n = x->cols();
    auto out = make_op(x->shape, x->dtype, {x}, "log_softmax_rows");
    std::vector<double> lse(m);
    row_lse(x->data.data(), m, n, lse.data());
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out->data[static_cast<size_t>(i) * n + j] = x->data[static_cast<size_t>(i) * n + j] - lse[i];
        }
    }
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [x, m, n](Tensor& self) {
            std::vector<double> g(self.grad.size());
            for (int i = 0; i < m; ++i) {
                const double* orow = &self.data[static_cast<size_t>(i) * n];
                const double* grow = &self.grad[static_cast<size_t>(i) * n];
                double gsum = 0.0;
                for (int j = 0; j < n; ++j) gsum += grow[j];
                for (int j = 0; j < n; ++j) {
                    g[static_cast<size_t>(i) * n + j] = grow[j] - std::exp(orow[j]) * gsum;
                }
            }
            accumulate_grad(*x, g.data(), self.numel());
        };
    }
    return out;
}

TensorPtr cross_entropy_rows(const TensorPtr& logits, const std::vector<int>& labels) {
    require_2d(logits, "cross_entropy_rows");
    const int m = logits->rows(), n = logits->cols();
    if (static_cast<int>(labels.size()) != m) {
        throw ShapeError("cross_entropy_rows: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(m) + " rows");
    }
    for (int y : labels) {
        if (y < 0 || y >= n) throw DataError("cross_entropy_rows: label " + std::to_string(y) + " out of range");
    }
    auto out = make_op({1}, logits->dtype, {logits}, "cross_entropy_rows");
    std::vector<double> lse(m);
    row_lse(logits->data.data(), m, n, lse.data());
    double loss = 0.0;
    for (int i = 0; i < m; ++i) loss += lse[i] - logits->data[static_cast<size_t>(i) * n + labels[i]];
    out->data[0] = loss / m;
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [logits, labels, lse = std::move(lse), m, n](Tensor& self) {
            const double gs = self.grad[0] / m;
            std::vector<double> g(static_cast<size_t>(m) * n);
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) {
                    double p = std::exp(logits->data[static_cast<size_t>(i) * n + j] - lse[i]);
                    g[static_cast<size_t>(i) * n + j] = gs * (p - (j == labels[i] ? 1.0 : 0.0));
                }
            }
            accumulate_grad(*logits, g.data(), static_cast<int64_t>(m) * n);
        };
    }
    return out;
}

TensorPtr bce_with_logit(const TensorPtr& logit, double target) {
    if (!logit->is_scalar()) throw ShapeError("bce_with_logit: logit must be scalar");
    if (target != 0.0 && target != 1.0) throw DataError("bce_with_logit: target must be 0 or 1");
    auto out = make_op({1}, logit->dtype, {logit}, "bce_with_logit");
    const double z = logit->data[0];
    out->data[0] = std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [logit, target](Tensor& self) {
            double d = self.grad[0] * (stable_sigmoid(logit->data[0]) - target);
            accumulate_grad(*logit, &d, 1);
        };
    }
    return out;
}

TensorPtr squared_error(const TensorPtr& pred, double target) {
    if (!pred->is_scalar()) throw ShapeError("squared_error: prediction must be scalar");
    auto out = make_op({1}, pred->dtype, {pred}, "squared_error");
    const double d = pred->data[0] - target;
    out->data[0] = d * d;
    finalize_op(*out);
    if (out->requires_grad) {
        out->backprop = [pred, target](Tensor& self) {
            double g = self.grad[0] * 2.0 * (pred->data[0] - target);
            accumulate_grad(*pred, &g, 1);
        };
    }
    return out;
}

// --- LSTM ------------------------------------------------------------------

std::pair<TensorPtr, TensorPtr> lstm_step(const TensorPtr& x, const TensorPtr& h,
                                          const TensorPtr& c, const TensorPtr& wx,
                                          const TensorPtr& wh, const TensorPtr& b) {
    require_2d(x, "lstm_step");
    require_2d(h, "lstm_step");
    require_2d(c, "lstm_step");
    const int dh = h->cols();
    if (wx->ndim() != 2 || wx->rows() != x->cols() || wx->cols() != 4 * dh ||
        wh->ndim() != 2 || wh->rows() != dh || wh->cols() != 4 * dh ||
        b->ndim() != 1 || b->shape[0] != 4 * dh || c->cols() != dh ||
        x->rows() != 1 || h->rows() != 1 || c->rows() != 1) {
        throw ShapeError("lstm_step: inconsistent shapes");
    }
    auto z = add_bias(add(matmul(x, wx), matmul(h, wh)), b);
    auto gi = sigmoid(slice_cols(z, 0, dh));
    auto gf = sigmoid(slice_cols(z, dh, 2 * dh));
    auto gg = tanh_t(slice_cols(z, 2 * dh, 3 * dh));
    auto go = sigmoid(slice_cols(z, 3 * dh, 4 * dh));
    auto c2 = add(mul(gf, c), mul(gi, gg));
    auto h2 = mul(go, tanh_t(c2));
    return {h2, c2};
}

TensorPtr lstm_sequence(const TensorPtr& x, const TensorPtr& wx, const TensorPtr& wh,
                        const TensorPtr& b) {
    require_2d(x, "lstm_sequence");
    require_2d(wx, "lstm_sequence");
    require_2d(wh, "lstm_sequence");
    const int T = x->rows(), din = x->cols();
    const int dh = wh->rows();
    if (wx->rows() != din || wx->cols() != 4 * dh || wh->cols() != 4 * dh || b->ndim() != 1 ||
        b->shape[0] != 4 * dh) {
        throw ShapeError("lstm_sequence: inconsistent weight shapes");
    }
    require_same_dtype(x, wx, "lstm_sequence");

    auto out = make_op({T, dh}, x->dtype, {x, wx, wh, b}, "lstm_sequence");

    // z = x*wx, then the recurrent term is added step by step
    std::vector<double> z(static_cast<size_t>(T) * 4 * dh);
    kernels::matmul(x->data.data(), wx->data.data(), z.data(), T, din, 4 * dh);

    std::vector<double> gates(static_cast<size_t>(T) * 4 * dh); // post-activation i,f,g,o
    std::vector<double> cs(static_cast<size_t>(T) * dh);
    std::vector<double> tanh_cs(static_cast<size_t>(T) * dh);

    for (int t = 0; t < T; ++t) {
        double* zt = &z[static_cast<size_t>(t) * 4 * dh];
        if (t > 0) {
            kernels::serial::matmul(&out->data[static_cast<size_t>(t - 1) * dh], wh->data.data(),
                                    zt, 1, dh, 4 * dh, true);
        }
        for (int j = 0; j < 4 * dh; ++j) zt[j] += b->data[j];
        double* gt = &gates[static_cast<size_t>(t) * 4 * dh];
        for (int j = 0; j < dh; ++j) {
            gt[j] = stable_sigmoid(zt[j]);                       // i
            gt[dh + j] = stable_sigmoid(zt[dh + j]);             // f
            gt[2 * dh + j] = std::tanh(zt[2 * dh + j]);          // g
            gt[3 * dh + j] = stable_sigmoid(zt[3 * dh + j]);     // o
        }
        for (int j = 0; j < dh; ++j) {
            double cprev = t > 0 ? cs[static_cast<size_t>(t - 1) * dh + j] : 0.0;
            double cv = gt[dh + j] * cprev + gt[j] * gt[2 * dh + j];
            cs[static_cast<size_t>(t) * dh + j] = cv;
            double tc = std::tanh(cv);
            tanh_cs[static_cast<size_t>(t) * dh + j] = tc;
            out->data[static_cast<size_t>(t) * dh + j] = gt[3 * dh + j] * tc;
        }
    }
    finalize_op(*out);

    if (out->requires_grad) {
        out->backprop = [x, wx, wh, b, T, din, dh, gates = std::move(gates), cs = std::move(cs),
                         tanh_cs = std::move(tanh_cs)](Tensor& self) {
            std::vector<double> dz(static_cast<size_t>(T) * 4 * dh);
            std::vector<double> dh_next(dh, 0.0), dc_next(dh, 0.0);
            for (int t = T - 1; t >= 0; --t) {
                const double* gt = &gates[static_cast<size_t>(t) * 4 * dh];
                double* dzt = &dz[static_cast<size_t>(t) * 4 * dh];
                for (int j = 0; j < dh; ++j) {
                    const double i_ = gt[j], f_ = gt[dh + j], g_ = gt[2 * dh + j], o_ = gt[3 * dh + j];
                    const double tc = tanh_cs[static_cast<size_t>(t) * dh + j];
                    const double dhv = self.grad[static_cast<size_t>(t) * dh + j] + dh_next[j];
                    const double dc = dc_next[j] + dhv * o_ * (1.0 - tc * tc);
                    const double cprev = t > 0 ? cs[static_cast<size_t>(t - 1) * dh + j] : 0.0;
                    dzt[j] = dc * g_ * i_ * (1.0 - i_);
                    dzt[dh + j] = dc * cprev * f_ * (1.0 - f_);
                    dzt[2 * dh + j] = dc * i_ * (1.0 - g_ * g_);
                    dzt[3 * dh + j] = dhv * tc * o_ * (1.0 - o_);
                    dc_next[j] = dc * f_;
                }
                if (t > 0) {
                    kernels::serial::matmul_nt(dzt, wh->data.data(), dh_next.data(), 1, 4 * dh, dh,
                                               false);
                } // dh_next at t=0 is dropped (initial state is constant zero)
            }
            if (x->requires_grad) {
                x->ensure_grad();
                kernels::matmul_nt(dz.data(), wx->data.data(), x->grad.data(), T, 4 * dh, din, true);
                post_grad_update(*x);
            }
            if (wx->requires_grad) {
                wx->ensure_grad();
                kernels::matmul_tn(x->data.data(), dz.data(), wx->grad.data(), din, T, 4 * dh, true);
                post_grad_update(*wx);
            }
            if (wh->requires_grad && T > 1) {
                wh->ensure_grad();
                // pair h_{t-1} rows with dz_t rows
                kernels::matmul_tn(self.data.data(), dz.data() + static_cast<size_t>(4) * dh,
                                   wh->grad.data(), dh, T - 1, 4 * dh, true);
                post_grad_update(*wh);
            }
            if (b->requires_grad) {
                std::vector<double> gb(static_cast<size_t>(4) * dh, 0.0);
                for (int t = 0; t < T; ++t) {
                    for (int j = 0; j < 4 * dh; ++j) gb[j] += dz[static_cast<size_t>(t) * 4 * dh + j];
                }
                accumulate_grad(*b, gb.data(), 4 * dh);
            }
        };
    }
    return out;
}

// --- backward ----------------------------------------------------------------

void backward(const TensorPtr& loss) {
    if (!loss) throw TapeError("backward: null loss");
    if (!loss->is_scalar()) {
        throw TapeError("backward: loss must be scalar, got shape " + shape_str(loss->shape));
    }
    if (!loss->requires_grad) return; // constant loss; nothing to populate

    // Postorder DFS over parents; reverse order runs every consumer before
    // the node it feeds. The order list owns the nodes so that releasing a
    // node's parents mid-walk cannot free a tensor we still have to visit.
    std::vector<TensorPtr> order;
    std::unordered_set<Tensor*> seen;
    std::vector<std::pair<TensorPtr, size_t>> stack;
    stack.push_back({loss, 0});
    seen.insert(loss.get());
    if (loss->consumed) throw TapeError("backward: tape already consumed");
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            const TensorPtr& p = node->parents[idx];
            ++idx;
            if (p->requires_grad && !seen.count(p.get())) {
                if (p->consumed) throw TapeError("backward: tape already consumed");
                seen.insert(p.get());
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor& node = **it;
        node.ensure_grad();
        if (node.backprop) {
            node.backprop(node);
            node.consumed = true;
            node.backprop = nullptr;
            node.parents.clear();
        }
    }
}

} // namespace ehs

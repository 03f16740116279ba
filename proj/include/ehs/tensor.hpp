#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ehs/error.hpp"
#include "ehs/rng.hpp"

namespace ehs {

// Reverse-mode autodiff over dense row-major tensors. Graphs are built by
// the op functions below; backward() walks the recorded tape once and
// releases it. Compute is always double precision; a tensor tagged f32 has
// every written value rounded through float, so single-precision storage
// semantics hold without a second kernel set.

enum class DType { f32, f64 };

inline const char* dtype_name(DType d) { return d == DType::f32 ? "float32" : "float64"; }

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Tensor : std::enable_shared_from_this<Tensor> {
    std::vector<int> shape;   // positive extents; scalar = {1}
    DType dtype = DType::f64;
    std::vector<double> data; // row-major
    bool requires_grad = false;
    std::vector<double> grad; // empty means "no gradient accumulated yet"

    // Tape links; populated only on op outputs that need gradients.
    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backprop;
    bool consumed = false;
    const char* op = "leaf";

    int64_t numel() const {
        int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }
    bool is_scalar() const { return numel() == 1; }
    int ndim() const { return static_cast<int>(shape.size()); }
    int rows() const;
    int cols() const;
    double value() const; // scalar tensors only

    void ensure_grad();   // allocate zero-filled grad buffer if absent
    void zero_grad() { grad.clear(); }
};

// --- construction ---------------------------------------------------------

TensorPtr tensor(std::vector<int> shape, DType dt = DType::f64, bool requires_grad = false);
TensorPtr tensor(std::vector<int> shape, std::vector<double> data, DType dt = DType::f64,
                 bool requires_grad = false);
TensorPtr scalar_tensor(double v, DType dt = DType::f64);
TensorPtr full(std::vector<int> shape, double v, DType dt = DType::f64);

// Uniform Xavier-style init scaled by fan-in/fan-out.
TensorPtr xavier(std::vector<int> shape, int fan_in, int fan_out, Rng& rng,
                 DType dt = DType::f64);

// --- runtime switches ------------------------------------------------------

// NaN/Inf checking after every forward/backward write. On by default.
void set_finite_checks(bool on);
bool finite_checks();

// --- graph plumbing (exposed for fused ops in other modules and for tests) -

TensorPtr make_op(std::vector<int> shape, DType dt, std::vector<TensorPtr> parents,
                  const char* name);
void finalize_op(Tensor& t); // f32 rounding + finite check on t.data
void accumulate_grad(Tensor& t, const double* g, int64_t n);

// --- ops -------------------------------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double c);
TensorPtr add_bias(const TensorPtr& x, const TensorPtr& b); // [m,n] + [n], row-wise
TensorPtr add_channel_bias(const TensorPtr& x, const TensorPtr& b); // [C,H,W] + [C]
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& k, int stride_h, int stride_w);
TensorPtr relu(const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr tanh_t(const TensorPtr& x);
TensorPtr square(const TensorPtr& x);

// Max over one axis of a 2-D tensor, reduced extent kept as 1. Gradient
// goes to the first occurrence of the maximum.
TensorPtr reduce_max_axis(const TensorPtr& x, int axis);
TensorPtr sum_all(const TensorPtr& x);  // any shape -> {1}
TensorPtr mean_all(const TensorPtr& x); // any shape -> {1}

TensorPtr concat_cols(const std::vector<TensorPtr>& xs); // same row count
TensorPtr concat_rows(const std::vector<TensorPtr>& xs); // same col count
TensorPtr slice_rows(const TensorPtr& x, int r0, int r1); // half-open
TensorPtr slice_cols(const TensorPtr& x, int c0, int c1);
TensorPtr reshape(const TensorPtr& x, std::vector<int> shape);
TensorPtr reverse_rows(const TensorPtr& x);
// [C,T,F] -> [T, C*F]; frame-major layout for recurrent layers after convs.
TensorPtr time_major(const TensorPtr& x);

TensorPtr softmax_rows(const TensorPtr& x);
TensorPtr log_softmax_rows(const TensorPtr& x);
// Mean over rows of -log softmax(logits)[label]; labels in [0, cols).
TensorPtr cross_entropy_rows(const TensorPtr& logits, const std::vector<int>& labels);
// Logistic cross-entropy on a single logit; target in {0,1}.
TensorPtr bce_with_logit(const TensorPtr& logit, double target);
// (pred - target)^2 on a scalar prediction.
TensorPtr squared_error(const TensorPtr& pred, double target);

// One LSTM cell update (composite graph). x [1,d_in], h/c [1,d_h],
// wx [d_in,4h], wh [d_h,4h], b [4h]; gate order i,f,g,o.
std::pair<TensorPtr, TensorPtr> lstm_step(const TensorPtr& x, const TensorPtr& h,
                                          const TensorPtr& c, const TensorPtr& wx,
                                          const TensorPtr& wh, const TensorPtr& b);

// Full-sequence LSTM with fused BPTT backward; zero initial state.
// x [T,d_in] -> hidden sequence [T,d_h].
TensorPtr lstm_sequence(const TensorPtr& x, const TensorPtr& wx, const TensorPtr& wh,
                        const TensorPtr& b);

// Backpropagate from a scalar loss through the recorded tape. Each graph
// can be consumed once; gradients accumulate additively across fan-out.
void backward(const TensorPtr& loss);

} // namespace ehs

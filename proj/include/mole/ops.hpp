#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "mole/tensor.hpp"

namespace mole {

// Differentiable op set. Each op computes eagerly and, when a GraphScope is
// active and any input requires grad, records a backward thunk that
// accumulates (never overwrites) into input gradients.

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& a);                // [m,n] -> [n,m]

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& x, const Tensor& b);   // [t,d] + [d]
Tensor mul_colvec(const Tensor& x, const Tensor& w);   // [t,d] * [t] per row
Tensor smul(const Tensor& x, const Tensor& s);         // x * scalar tensor

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);  // NumericError on non-positive input
Tensor exp(const Tensor& x);

Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar
Tensor mean_rows(const Tensor& x);  // [t,d] -> [d], mean over rows

// Softmax along `axis` (-1 = last). Max-subtracted for stability.
// NumericError on NaN input.
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x);  // row-wise on [t,d] (or 1-d)

Tensor reshape(const Tensor& x, Shape shape);  // same element count/order
Tensor slice_rows(const Tensor& x, int r0, int rows);
Tensor slice_cols(const Tensor& x, int c0, int cols);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor take_row(const Tensor& x, int r);          // [t,d] -> [d]

Tensor gather_elems(const Tensor& x, const std::vector<int>& idx);  // 1-d gather
Tensor gather_cells(const Tensor& x, const std::vector<std::pair<int, int>>& cells);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
// y = base with rows[j] added at row indices[j].
Tensor scatter_rows_add(const Tensor& base, const Tensor& rows, const std::vector<int>& indices);

// y[i] = x[i-k] for i >= k else fill. Used by the CTC recursion.
Tensor shift_down(const Tensor& x, int k, double fill);
Tensor logsumexp2(const Tensor& a, const Tensor& b);                    // elementwise
Tensor logsumexp3(const Tensor& a, const Tensor& b, const Tensor& c);   // elementwise
Tensor logsumexp_vec(const Tensor& x);                                  // 1-d -> scalar
Tensor stack_scalars(const std::vector<Tensor>& xs);                    // n scalars -> [n]

// cos(u, v) in [-1, 1]; DegenerateInputError if either norm is zero.
Tensor cosine_similarity(const Tensor& u, const Tensor& v);

// Fused per-row normalization: (x - mu) / sqrt(var + eps) * gain + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Value copy cut off from the tape.
Tensor detach(const Tensor& x);

int argmax(const std::vector<double>& v);  // ties -> lowest index

struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::int64_t count = 0;
    bool passed = false;
};

// Central-difference check of autograd against f evaluated without a tape.
// f must be scalar-valued (ContractError otherwise). Relative error uses
// |a - n| / max(1, |a|, |n|).
GradCheckReport gradcheck(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                          double eps = 1e-5, double tol = 1e-5);
// Same, differentiating f() with respect to a set of tensors in place.
GradCheckReport gradcheck_params(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                                 double eps = 1e-5, double tol = 1e-5);

}  // namespace mole

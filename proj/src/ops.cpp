#include "mole/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mole {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool recording(std::initializer_list<const Tensor*> ins) {
    if (!Graph::current()) return false;
    for (const Tensor* t : ins) {
        if (t->requires_grad()) return true;
    }
    return false;
}

std::vector<double>& gbuf(const std::shared_ptr<TensorImpl>& t) {
    if (t->g.empty()) t->g.assign(t->v.size(), 0.0);
    return t->g;
}

// Marks out as a graph intermediate and records the thunk.
void record(Tensor& out, std::function<void()> back) {
    out.set_requires_grad(true);
    Graph::current()->record(std::move(back));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

void check_rank2(const Tensor& x, const char* op) {
    if (x.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                             shape_str(x.shape()));
    }
}

}  // namespace

int argmax(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i) {
        if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
    }
    return best;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Tensor out(Shape{m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* brow = pb + p * n;
            double* orow = po + i * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (recording({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        record(out, [ai, bi, oi, m, k, n] {
            if (oi->g.empty()) return;
            const double* go = oi->g.data();
            if (ai->requires_grad) {
                double* ga = gbuf(ai).data();
                const double* pb2 = bi->v.data();
                for (int i = 0; i < m; ++i) {
                    for (int p = 0; p < k; ++p) {
                        double s = 0.0;
                        const double* brow = pb2 + p * n;
                        const double* grow = go + i * n;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ga[i * k + p] += s;
                    }
                }
            }
            if (bi->requires_grad) {
                double* gb = gbuf(bi).data();
                const double* pa2 = ai->v.data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = go + i * n;
                    for (int p = 0; p < k; ++p) {
                        const double av = pa2[i * k + p];
                        double* gbrow = gb + p * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    check_rank2(a, "transpose");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out(Shape{n, m});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out(j, i) = a(i, j);
    }
    if (recording({&a})) {
        auto ai = a.ptr(), oi = out.ptr();
        record(out, [ai, oi, m, n] {
            if (oi->g.empty()) return;
            double* ga = gbuf(ai).data();
            const double* go = oi->g.data();
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
    if (recording({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        record(out, [ai, bi, oi] {
            if (oi->g.empty()) return;
            if (ai->requires_grad) {
                auto& ga = gbuf(ai);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->g[i];
            }
            if (bi->requires_grad) {
                auto& gb = gbuf(bi);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += oi->g[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] - b.values()[i];
    if (recording({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        record(out, [ai, bi, oi] {
            if (oi->g.empty()) return;
            if (ai->requires_grad) {
                auto& ga = gbuf(ai);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->g[i];
            }
            if (bi->requires_grad) {
                auto& gb = gbuf(bi);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= oi->g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
    if (recording({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        record(out, [ai, bi, oi] {
            if (oi->g.empty()) return;
            if (ai->requires_grad) {
                auto& ga = gbuf(ai);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->g[i] * bi->v[i];
            }
            if (bi->requires_grad) {
                auto& gb = gbuf(bi);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += oi->g[i] * ai->v[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * c;
    if (recording({&a})) {
        auto ai = a.ptr(), oi = out.ptr();
        record(out, [ai, oi, c] {
            if (oi->g.empty()) return;
            auto& ga = gbuf(ai);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * oi->g[i];
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    check_rank2(x, "add_rowvec");
    if (b.rank() != 1 || b.dim(0) != x.dim(1)) {
        throw DimensionError("add_rowvec: bias " + shape_str(b.shape()) + " does not match " +
                             shape_str(x.shape()));
    }
    const int t = x.dim(0), d = x.dim(1);
    Tensor out(x.shape());
    for (int r = 0; r < t; ++r) {
        for (int c = 0; c < d; ++c) out(r, c) = x(r, c) + b(c);
    }
    if (recording({&x, &b})) {
        auto xi = x.ptr(), bi = b.ptr(), oi = out.ptr();
        record(out, [xi, bi, oi, t, d] {
            if (oi->g.empty()) return;
            if (xi->requires_grad) {
                auto& gx = gbuf(xi);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->g[i];
            }
            if (bi->requires_grad) {
                auto& gb = gbuf(bi);
                for (int r = 0; r < t; ++r) {
                    for (int c = 0; c < d; ++c) gb[c] += oi->g[static_cast<std::size_t>(r) * d + c];
                }
            }
        });
    }
    return out;
}

Tensor mul_colvec(const Tensor& x, const Tensor& w) {
    check_rank2(x, "mul_colvec");
    if (w.rank() != 1 || w.dim(0) != x.dim(0)) {
        throw DimensionError("mul_colvec: weights " + shape_str(w.shape()) + " do not match " +
                             shape_str(x.shape()));
    }
    const int t = x.dim(0), d = x.dim(1);
    Tensor out(x.shape());
    for (int r = 0; r < t; ++r) {
        for (int c = 0; c < d; ++c) out(r, c) = x(r, c) * w(r);
    }
    if (recording({&x, &w})) {
        auto xi = x.ptr(), wi = w.ptr(), oi = out.ptr();
        record(out, [xi, wi, oi, t, d] {
            if (oi->g.empty()) return;
            if (xi->requires_grad) {
                auto& gx = gbuf(xi);
                for (int r = 0; r < t; ++r) {
                    for (int c = 0; c < d; ++c) {
                        gx[static_cast<std::size_t>(r) * d + c] +=
                            oi->g[static_cast<std::size_t>(r) * d + c] * wi->v[r];
                    }
                }
            }
            if (wi->requires_grad) {
                auto& gw = gbuf(wi);
                for (int r = 0; r < t; ++r) {
                    double s = 0.0;
                    for (int c = 0; c < d; ++c) {
                        s += oi->g[static_cast<std::size_t>(r) * d + c] *
                             xi->v[static_cast<std::size_t>(r) * d + c];
                    }
                    gw[r] += s;
                }
            }
        });
    }
    return out;
}

Tensor smul(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw DimensionError("smul: scale must be scalar, got " + shape_str(s.shape()));
    const double sv = s.values()[0];
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) out.values()[i] = x.values()[i] * sv;
    if (recording({&x, &s})) {
        auto xi = x.ptr(), si = s.ptr(), oi = out.ptr();
        record(out, [xi, si, oi] {
            if (oi->g.empty()) return;
            if (xi->requires_grad) {
                auto& gx = gbuf(xi);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += si->v[0] * oi->g[i];
            }
            if (si->requires_grad) {
                double acc = 0.0;
                for (std::size_t i = 0; i < xi->v.size(); ++i) acc += oi->g[i] * xi->v[i];
                gbuf(si)[0] += acc;
            }
        });
    }
    return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Bwd bwd) {
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) out.values()[i] = fwd(x.values()[i]);
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, bwd] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->g[i] * bwd(xi->v[i], oi->v[i]);
        });
    }
    return out;
}

}  // namespace

Tensor relu(const Tensor& x) {
    return unary_elementwise(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
    return unary_elementwise(
        x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_elementwise(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& x) {
    for (double v : x.values()) {
        if (!(v > 0.0)) throw NumericError("log: input must be positive, got " + std::to_string(v));
    }
    return unary_elementwise(
        x, [](double v) { return std::log(v); },
        [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
    return unary_elementwise(
        x, [](double v) { return std::exp(v); },
        [](double, double y) { return y; });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (auto& g : gx) g += oi->g[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw ContractError("mean of empty tensor");
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.size());
    Tensor out = Tensor::scalar(acc * inv);
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, inv] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (auto& g : gx) g += oi->g[0] * inv;
        });
    }
    return out;
}

Tensor mean_rows(const Tensor& x) {
    check_rank2(x, "mean_rows");
    const int t = x.dim(0), d = x.dim(1);
    if (t == 0) throw ContractError("mean_rows of zero-row tensor");
    Tensor out(Shape{d});
    for (int r = 0; r < t; ++r) {
        for (int c = 0; c < d; ++c) out(c) += x(r, c);
    }
    const double inv = 1.0 / t;
    for (int c = 0; c < d; ++c) out(c) *= inv;
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, t, d, inv] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (int r = 0; r < t; ++r) {
                for (int c = 0; c < d; ++c) gx[static_cast<std::size_t>(r) * d + c] += oi->g[c] * inv;
            }
        });
    }
    return out;
}

namespace {

// Row-wise stable softmax on a [rows x cols] view.
void softmax_rows_forward(const double* in, double* out, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const double* x = in + static_cast<std::size_t>(r) * cols;
        double* y = out + static_cast<std::size_t>(r) * cols;
        double mx = x[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            z += y[c];
        }
        const double inv = 1.0 / z;
        for (int c = 0; c < cols; ++c) y[c] *= inv;
    }
}

Tensor softmax_last(const Tensor& x) {
    const int rows = x.rank() == 2 ? x.dim(0) : 1;
    const int cols = x.rank() == 2 ? x.dim(1) : x.dim(0);
    Tensor out(x.shape());
    softmax_rows_forward(x.data(), out.data(), rows, cols);
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, rows, cols] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (int r = 0; r < rows; ++r) {
                const double* y = oi->v.data() + static_cast<std::size_t>(r) * cols;
                const double* gy = oi->g.data() + static_cast<std::size_t>(r) * cols;
                double dot = 0.0;
                for (int c = 0; c < cols; ++c) dot += gy[c] * y[c];
                double* gxr = gx.data() + static_cast<std::size_t>(r) * cols;
                for (int c = 0; c < cols; ++c) gxr[c] += (gy[c] - dot) * y[c];
            }
        });
    }
    return out;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    if (x.rank() < 1 || x.rank() > 2) {
        throw DimensionError("softmax: rank-1 or rank-2 input expected, got " + shape_str(x.shape()));
    }
    for (double v : x.values()) {
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
    }
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw DimensionError("softmax: axis out of range");
    if (axis == r - 1) return softmax_last(x);
    // axis 0 on a matrix: route through transposes so backward is composed.
    return transpose(softmax_last(transpose(x)));
}

Tensor log_softmax(const Tensor& x) {
    if (x.rank() < 1 || x.rank() > 2) {
        throw DimensionError("log_softmax: rank-1 or rank-2 input expected");
    }
    for (double v : x.values()) {
        if (std::isnan(v)) throw NumericError("log_softmax: NaN input");
    }
    const int rows = x.rank() == 2 ? x.dim(0) : 1;
    const int cols = x.rank() == 2 ? x.dim(1) : x.dim(0);
    Tensor out(x.shape());
    for (int r = 0; r < rows; ++r) {
        const double* xr = x.data() + static_cast<std::size_t>(r) * cols;
        double* yr = out.data() + static_cast<std::size_t>(r) * cols;
        double mx = xr[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
        const double lse = mx + std::log(z);
        for (int c = 0; c < cols; ++c) yr[c] = xr[c] - lse;
    }
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, rows, cols] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (int r = 0; r < rows; ++r) {
                const double* y = oi->v.data() + static_cast<std::size_t>(r) * cols;
                const double* gy = oi->g.data() + static_cast<std::size_t>(r) * cols;
                double gsum = 0.0;
                for (int c = 0; c < cols; ++c) gsum += gy[c];
                double* gxr = gx.data() + static_cast<std::size_t>(r) * cols;
                for (int c = 0; c < cols; ++c) gxr[c] += gy[c] - std::exp(y[c]) * gsum;
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                             " changes element count");
    }
    Tensor out(std::move(shape), x.values());
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->g[i];
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, int r0, int rows) {
    check_rank2(x, "slice_rows");
    const int t = x.dim(0), d = x.dim(1);
    if (r0 < 0 || rows < 0 || r0 + rows > t) {
        throw DimensionError("slice_rows: [" + std::to_string(r0) + ", " + std::to_string(r0 + rows) +
                             ") out of range for " + shape_str(x.shape()));
    }
    Tensor out(Shape{rows, d});
    std::copy_n(x.data() + static_cast<std::size_t>(r0) * d, static_cast<std::size_t>(rows) * d,
                out.data());
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, r0, rows, d] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (std::size_t i = 0; i < static_cast<std::size_t>(rows) * d; ++i) {
                gx[static_cast<std::size_t>(r0) * d + i] += oi->g[i];
            }
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, int c0, int cols) {
    check_rank2(x, "slice_cols");
    const int t = x.dim(0), d = x.dim(1);
    if (c0 < 0 || cols < 0 || c0 + cols > d) {
        throw DimensionError("slice_cols: [" + std::to_string(c0) + ", " + std::to_string(c0 + cols) +
                             ") out of range for " + shape_str(x.shape()));
    }
    Tensor out(Shape{t, cols});
    for (int r = 0; r < t; ++r) {
        std::copy_n(x.data() + static_cast<std::size_t>(r) * d + c0, cols,
                    out.data() + static_cast<std::size_t>(r) * cols);
    }
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, c0, cols, t, d] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (int r = 0; r < t; ++r) {
                for (int c = 0; c < cols; ++c) {
                    gx[static_cast<std::size_t>(r) * d + c0 + c] +=
                        oi->g[static_cast<std::size_t>(r) * cols + c];
                }
            }
        });
    }
    return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    check_rank2(a, "concat_rows");
    check_rank2(b, "concat_rows");
    if (a.dim(1) != b.dim(1)) {
        throw DimensionError("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const int ra = a.dim(0), rb = b.dim(0), d = a.dim(1);
    Tensor out(Shape{ra + rb, d});
    std::copy_n(a.data(), static_cast<std::size_t>(ra) * d, out.data());
    std::copy_n(b.data(), static_cast<std::size_t>(rb) * d, out.data() + static_cast<std::size_t>(ra) * d);
    if (recording({&a, &b})) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        record(out, [ai, bi, oi, ra, rb, d] {
            if (oi->g.empty()) return;
            if (ai->requires_grad) {
                auto& ga = gbuf(ai);
                for (std::size_t i = 0; i < static_cast<std::size_t>(ra) * d; ++i) ga[i] += oi->g[i];
            }
            if (bi->requires_grad) {
                auto& gb = gbuf(bi);
                for (std::size_t i = 0; i < static_cast<std::size_t>(rb) * d; ++i) {
                    gb[i] += oi->g[static_cast<std::size_t>(ra) * d + i];
                }
            }
        });
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols of zero tensors");
    const int t = parts[0].dim(0);
    int total = 0;
    for (const Tensor& p : parts) {
        check_rank2(p, "concat_cols");
        if (p.dim(0) != t) throw DimensionError("concat_cols: row mismatch");
        total += p.dim(1);
    }
    Tensor out(Shape{t, total});
    int off = 0;
    for (const Tensor& p : parts) {
        const int w = p.dim(1);
        for (int r = 0; r < t; ++r) {
            std::copy_n(p.data() + static_cast<std::size_t>(r) * w, w,
                        out.data() + static_cast<std::size_t>(r) * total + off);
        }
        off += w;
    }
    bool needs = false;
    for (const Tensor& p : parts) needs = needs || p.requires_grad();
    if (Graph::current() && needs) {
        std::vector<std::shared_ptr<TensorImpl>> ps;
        for (const Tensor& p : parts) ps.push_back(p.ptr());
        auto oi = out.ptr();
        record(out, [ps, oi, t, total] {
            if (oi->g.empty()) return;
            int off2 = 0;
            for (const auto& pi : ps) {
                const int w = pi->shape[1];
                if (pi->requires_grad) {
                    auto& gp = gbuf(pi);
                    for (int r = 0; r < t; ++r) {
                        for (int c = 0; c < w; ++c) {
                            gp[static_cast<std::size_t>(r) * w + c] +=
                                oi->g[static_cast<std::size_t>(r) * total + off2 + c];
                        }
                    }
                }
                off2 += w;
            }
        });
    }
    return out;
}

Tensor take_row(const Tensor& x, int r) {
    check_rank2(x, "take_row");
    const int t = x.dim(0), d = x.dim(1);
    if (r < 0 || r >= t) throw DimensionError("take_row: row " + std::to_string(r) + " out of range");
    Tensor out(Shape{d});
    std::copy_n(x.data() + static_cast<std::size_t>(r) * d, d, out.data());
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, r, d] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (int c = 0; c < d; ++c) gx[static_cast<std::size_t>(r) * d + c] += oi->g[c];
        });
    }
    return out;
}

Tensor gather_elems(const Tensor& x, const std::vector<int>& idx) {
    if (x.rank() != 1) throw DimensionError("gather_elems: rank-1 input expected");
    const int n = x.dim(0);
    Tensor out(Shape{static_cast<int>(idx.size())});
    for (std::size_t j = 0; j < idx.size(); ++j) {
        if (idx[j] < 0 || idx[j] >= n) throw DimensionError("gather_elems: index out of range");
        out(static_cast<int>(j)) = x(idx[j]);
    }
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, idx] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (std::size_t j = 0; j < idx.size(); ++j) gx[idx[j]] += oi->g[j];
        });
    }
    return out;
}

Tensor gather_cells(const Tensor& x, const std::vector<std::pair<int, int>>& cells) {
    check_rank2(x, "gather_cells");
    const int t = x.dim(0), d = x.dim(1);
    Tensor out(Shape{static_cast<int>(cells.size())});
    for (std::size_t j = 0; j < cells.size(); ++j) {
        auto [r, c] = cells[j];
        if (r < 0 || r >= t || c < 0 || c >= d) throw DimensionError("gather_cells: index out of range");
        out(static_cast<int>(j)) = x(r, c);
    }
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, cells, d] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (std::size_t j = 0; j < cells.size(); ++j) {
                gx[static_cast<std::size_t>(cells[j].first) * d + cells[j].second] += oi->g[j];
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    check_rank2(x, "gather_rows");
    const int t = x.dim(0), d = x.dim(1);
    Tensor out(Shape{static_cast<int>(rows.size()), d});
    for (std::size_t j = 0; j < rows.size(); ++j) {
        if (rows[j] < 0 || rows[j] >= t) throw DimensionError("gather_rows: index out of range");
        std::copy_n(x.data() + static_cast<std::size_t>(rows[j]) * d, d, out.data() + j * d);
    }
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, rows, d] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (std::size_t j = 0; j < rows.size(); ++j) {
                for (int c = 0; c < d; ++c) {
                    gx[static_cast<std::size_t>(rows[j]) * d + c] += oi->g[j * d + c];
                }
            }
        });
    }
    return out;
}

Tensor scatter_rows_add(const Tensor& base, const Tensor& rows, const std::vector<int>& indices) {
    check_rank2(base, "scatter_rows_add");
    check_rank2(rows, "scatter_rows_add");
    const int t = base.dim(0), d = base.dim(1);
    if (rows.dim(1) != d || rows.dim(0) != static_cast<int>(indices.size())) {
        throw DimensionError("scatter_rows_add: rows " + shape_str(rows.shape()) +
                             " do not match base " + shape_str(base.shape()));
    }
    Tensor out(base.shape(), base.values());
    for (std::size_t j = 0; j < indices.size(); ++j) {
        if (indices[j] < 0 || indices[j] >= t) throw DimensionError("scatter_rows_add: index out of range");
        for (int c = 0; c < d; ++c) {
            out(indices[j], c) += rows(static_cast<int>(j), c);
        }
    }
    if (recording({&base, &rows})) {
        auto bi = base.ptr(), ri = rows.ptr(), oi = out.ptr();
        record(out, [bi, ri, oi, indices, d] {
            if (oi->g.empty()) return;
            if (bi->requires_grad) {
                auto& gb = gbuf(bi);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += oi->g[i];
            }
            if (ri->requires_grad) {
                auto& gr = gbuf(ri);
                for (std::size_t j = 0; j < indices.size(); ++j) {
                    for (int c = 0; c < d; ++c) {
                        gr[j * d + c] += oi->g[static_cast<std::size_t>(indices[j]) * d + c];
                    }
                }
            }
        });
    }
    return out;
}

Tensor shift_down(const Tensor& x, int k, double fill) {
    if (x.rank() != 1) throw DimensionError("shift_down: rank-1 input expected");
    const int n = x.dim(0);
    Tensor out(Shape{n});
    for (int i = 0; i < n; ++i) out(i) = i < k ? fill : x(i - k);
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, k, n] {
            if (oi->g.empty()) return;
            auto& gx = gbuf(xi);
            for (int i = k; i < n; ++i) gx[i - k] += oi->g[i];
        });
    }
    return out;
}

namespace {

Tensor logsumexp_elementwise(const std::vector<Tensor>& xs) {
    const Shape& shape = xs[0].shape();
    for (const Tensor& x : xs) {
        if (x.shape() != shape) throw DimensionError("logsumexp: shape mismatch");
    }
    const std::int64_t n = xs[0].size();
    Tensor out(shape);
    for (std::int64_t i = 0; i < n; ++i) {
        double m = kNegInf;
        for (const Tensor& x : xs) m = std::max(m, x.values()[i]);
        if (m == kNegInf) {
            out.values()[i] = kNegInf;
            continue;
        }
        double z = 0.0;
        for (const Tensor& x : xs) z += std::exp(x.values()[i] - m);
        out.values()[i] = m + std::log(z);
    }
    bool needs = false;
    for (const Tensor& x : xs) needs = needs || x.requires_grad();
    if (Graph::current() && needs) {
        std::vector<std::shared_ptr<TensorImpl>> ps;
        for (const Tensor& x : xs) ps.push_back(x.ptr());
        auto oi = out.ptr();
        record(out, [ps, oi, n] {
            if (oi->g.empty()) return;
            for (const auto& pi : ps) {
                if (!pi->requires_grad) continue;
                auto& gp = gbuf(pi);
                for (std::int64_t i = 0; i < n; ++i) {
                    const double y = oi->v[i];
                    if (y == kNegInf) continue;  // no mass, no gradient
                    gp[i] += oi->g[i] * std::exp(pi->v[i] - y);
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor logsumexp2(const Tensor& a, const Tensor& b) { return logsumexp_elementwise({a, b}); }

Tensor logsumexp3(const Tensor& a, const Tensor& b, const Tensor& c) {
    return logsumexp_elementwise({a, b, c});
}

Tensor logsumexp_vec(const Tensor& x) {
    if (x.rank() != 1) throw DimensionError("logsumexp_vec: rank-1 input expected");
    const int n = x.dim(0);
    double m = kNegInf;
    for (double v : x.values()) m = std::max(m, v);
    double y;
    if (m == kNegInf) {
        y = kNegInf;
    } else {
        double z = 0.0;
        for (double v : x.values()) z += std::exp(v - m);
        y = m + std::log(z);
    }
    Tensor out = Tensor::scalar(y);
    if (recording({&x})) {
        auto xi = x.ptr(), oi = out.ptr();
        record(out, [xi, oi, n] {
            if (oi->g.empty()) return;
            const double yv = oi->v[0];
            if (yv == kNegInf) return;
            auto& gx = gbuf(xi);
            for (int i = 0; i < n; ++i) gx[i] += oi->g[0] * std::exp(xi->v[i] - yv);
        });
    }
    return out;
}

Tensor stack_scalars(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("stack_scalars of zero tensors");
    Tensor out(Shape{static_cast<int>(xs.size())});
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].size() != 1) throw DimensionError("stack_scalars: inputs must be scalar");
        out(static_cast<int>(i)) = xs[i].values()[0];
    }
    bool needs = false;
    for (const Tensor& x : xs) needs = needs || x.requires_grad();
    if (Graph::current() && needs) {
        std::vector<std::shared_ptr<TensorImpl>> ps;
        for (const Tensor& x : xs) ps.push_back(x.ptr());
        auto oi = out.ptr();
        record(out, [ps, oi] {
            if (oi->g.empty()) return;
            for (std::size_t i = 0; i < ps.size(); ++i) {
                if (ps[i]->requires_grad) gbuf(ps[i])[0] += oi->g[i];
            }
        });
    }
    return out;
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
    if (u.rank() != 1 || v.rank() != 1 || u.dim(0) != v.dim(0)) {
        throw DimensionError("cosine_similarity: rank-1 inputs of equal length expected, got " +
                             shape_str(u.shape()) + " and " + shape_str(v.shape()));
    }
    const int n = u.dim(0);
    double dot = 0.0, nu2 = 0.0, nv2 = 0.0;
    for (int i = 0; i < n; ++i) {
        dot += u(i) * v(i);
        nu2 += u(i) * u(i);
        nv2 += v(i) * v(i);
    }
    if (nu2 == 0.0 || nv2 == 0.0) {
        throw DegenerateInputError("cosine_similarity: zero-norm input");
    }
    const double nu = std::sqrt(nu2), nv = std::sqrt(nv2);
    const double c = dot / (nu * nv);
    Tensor out = Tensor::scalar(c);
    if (recording({&u, &v})) {
        auto ui = u.ptr(), vi = v.ptr(), oi = out.ptr();
        record(out, [ui, vi, oi, n, nu, nv, c] {
            if (oi->g.empty()) return;
            const double g = oi->g[0];
            if (ui->requires_grad) {
                auto& gu = gbuf(ui);
                for (int i = 0; i < n; ++i) {
                    gu[i] += g * (vi->v[i] / (nu * nv) - c * ui->v[i] / (nu * nu));
                }
            }
            if (vi->requires_grad) {
                auto& gv = gbuf(vi);
                for (int i = 0; i < n; ++i) {
                    gv[i] += g * (ui->v[i] / (nu * nv) - c * vi->v[i] / (nv * nv));
                }
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check_rank2(x, "layer_norm");
    const int t = x.dim(0), d = x.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
        throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    }
    Tensor out(x.shape());
    std::vector<double> xhat(static_cast<std::size_t>(t) * d);
    std::vector<double> inv_std(static_cast<std::size_t>(t));
    for (int r = 0; r < t; ++r) {
        double mu = 0.0;
        for (int c = 0; c < d; ++c) mu += x(r, c);
        mu /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) {
            const double dv = x(r, c) - mu;
            var += dv * dv;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = inv;
        for (int c = 0; c < d; ++c) {
            const double xh = (x(r, c) - mu) * inv;
            xhat[static_cast<std::size_t>(r) * d + c] = xh;
            out(r, c) = gain(c) * xh + bias(c);
        }
    }
    if (recording({&x, &gain, &bias})) {
        auto xi = x.ptr(), gi = gain.ptr(), bi = bias.ptr(), oi = out.ptr();
        record(out, [xi, gi, bi, oi, t, d, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
            if (oi->g.empty()) return;
            for (int r = 0; r < t; ++r) {
                const double* gy = oi->g.data() + static_cast<std::size_t>(r) * d;
                const double* xh = xhat.data() + static_cast<std::size_t>(r) * d;
                if (gi->requires_grad) {
                    auto& gg = gbuf(gi);
                    for (int c = 0; c < d; ++c) gg[c] += gy[c] * xh[c];
                }
                if (bi->requires_grad) {
                    auto& gb = gbuf(bi);
                    for (int c = 0; c < d; ++c) gb[c] += gy[c];
                }
                if (xi->requires_grad) {
                    auto& gx = gbuf(xi);
                    double m1 = 0.0, m2 = 0.0;
                    for (int c = 0; c < d; ++c) {
                        const double dxh = gy[c] * gi->v[c];
                        m1 += dxh;
                        m2 += dxh * xh[c];
                    }
                    m1 /= d;
                    m2 /= d;
                    const double inv = inv_std[static_cast<std::size_t>(r)];
                    for (int c = 0; c < d; ++c) {
                        const double dxh = gy[c] * gi->v[c];
                        gx[static_cast<std::size_t>(r) * d + c] += inv * (dxh - m1 - xh[c] * m2);
                    }
                }
            }
        });
    }
    return out;
}

Tensor detach(const Tensor& x) {
    return Tensor(x.shape(), x.values());
}

GradCheckReport gradcheck(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps,
                          double tol) {
    return gradcheck_params([&f, &x] { return f(x); }, {x}, eps, tol);
}

GradCheckReport gradcheck_params(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                                 double eps, double tol) {
    std::vector<bool> prev_rg;
    for (const Tensor& w : wrt) prev_rg.push_back(w.requires_grad());
    for (Tensor w : wrt) {
        w.set_requires_grad(true);
        w.ptr()->g.clear();
    }

    std::vector<std::vector<double>> analytic;
    {
        Graph graph;
        GraphScope scope(graph);
        Tensor y = f();
        if (y.size() != 1) {
            throw ContractError("gradcheck: f must be scalar-valued, got " + shape_str(y.shape()));
        }
        graph.backward(y);
        for (const Tensor& w : wrt) analytic.push_back(w.grad());
    }

    GradCheckReport rep;
    for (std::size_t wi = 0; wi < wrt.size(); ++wi) {
        Tensor w = wrt[wi];
        for (std::int64_t i = 0; i < w.size(); ++i) {
            const double orig = w.values()[i];
            w.values()[i] = orig + eps;
            const double fp = f().item();
            w.values()[i] = orig - eps;
            const double fm = f().item();
            w.values()[i] = orig;
            const double fd = (fp - fm) / (2.0 * eps);
            const double an = analytic[wi][static_cast<std::size_t>(i)];
            const double abs_err = std::abs(an - fd);
            const double rel = abs_err / std::max({1.0, std::abs(an), std::abs(fd)});
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
            rep.max_rel_err = std::max(rep.max_rel_err, rel);
            ++rep.count;
        }
    }
    rep.passed = rep.max_rel_err < tol;

    for (std::size_t wi = 0; wi < wrt.size(); ++wi) {
        Tensor w = wrt[wi];
        w.set_requires_grad(prev_rg[wi]);
        w.ptr()->g.clear();
    }
    return rep;
}

}  // namespace mole

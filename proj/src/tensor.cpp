#include "mole/tensor.hpp"

#include <cmath>

namespace mole {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, double fill) {
    for (int e : shape) {
        if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    }
    impl_ = std::make_shared<TensorImpl>();
    impl_->v.assign(static_cast<std::size_t>(numel(shape)), fill);
    impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
    if (numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    }
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->v = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

double& Tensor::operator()(int i, int j) {
    return impl_->v[static_cast<std::size_t>(i) * impl_->shape[1] + j];
}

double Tensor::operator()(int i, int j) const {
    return impl_->v[static_cast<std::size_t>(i) * impl_->shape[1] + j];
}

double Tensor::item() const {
    if (!defined() || impl_->v.size() != 1) {
        throw ContractError("item() requires a one-element tensor, got " +
                            (defined() ? shape_str(impl_->shape) : std::string("undefined")));
    }
    return impl_->v[0];
}

std::vector<double>& Tensor::grad() {
    if (impl_->g.empty()) impl_->g.assign(impl_->v.size(), 0.0);
    return impl_->g;
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->g.empty()) impl_->g.assign(impl_->v.size(), 0.0);
    return impl_->g;
}

void Tensor::zero_grad() {
    if (!impl_->g.empty()) impl_->g.assign(impl_->v.size(), 0.0);
}

namespace {
thread_local Graph* g_active_graph = nullptr;
}

Graph* Graph::current() { return g_active_graph; }

void Graph::backward(const Tensor& loss) {
    if (backward_done_) {
        throw ContractError("backward called twice on the same graph without reset");
    }
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward requires a scalar loss");
    }
    if (!loss.requires_grad()) {
        throw ContractError("loss is not attached to the graph (requires_grad is false)");
    }
    backward_done_ = true;
    loss.ptr()->g.assign(1, 1.0);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
}

void Graph::reset() {
    tape_.clear();
    backward_done_ = false;
}

GraphScope::GraphScope(Graph& g) : prev_(g_active_graph) { g_active_graph = &g; }
GraphScope::~GraphScope() { g_active_graph = prev_; }

std::uint64_t Rng::next_u64() {
    // splitmix64
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    // Box-Muller; u clamped away from 0 so log stays finite.
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    double v = uniform();
    return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * M_PI * v);
}

int Rng::randint(int lo, int hi) {
    return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
}

std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    Rng h(seed ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xc2b2ae3d27d4eb4fULL));
    return h.next_u64();
}

Tensor rand_uniform(const Shape& shape, double lo, double hi, Rng& rng) {
    Tensor t(shape);
    for (auto& x : t.values()) x = rng.uniform(lo, hi);
    return t;
}

Tensor rand_normal(const Shape& shape, double mean, double stddev, Rng& rng) {
    Tensor t(shape);
    for (auto& x : t.values()) x = mean + stddev * rng.normal();
    return t;
}

}  // namespace mole

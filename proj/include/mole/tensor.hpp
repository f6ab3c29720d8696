#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mole/error.hpp"

namespace mole {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::vector<double> v;  // values, row-major
    std::vector<double> g;  // gradient accumulator; empty until first touch
    bool requires_grad = false;
};

// Dense n-d value with an optional same-shape gradient accumulator.
// Cheap to copy: a Tensor is a shared handle onto its storage.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor zeros(const Shape& shape) { return Tensor(shape, 0.0); }
    static Tensor full(const Shape& shape, double fill) { return Tensor(shape, fill); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(impl_->v.size()); }

    std::vector<double>& values() { return impl_->v; }
    const std::vector<double>& values() const { return impl_->v; }
    double* data() { return impl_->v.data(); }
    const double* data() const { return impl_->v.data(); }

    double& operator()(int i) { return impl_->v[static_cast<std::size_t>(i)]; }
    double operator()(int i) const { return impl_->v[static_cast<std::size_t>(i)]; }
    double& operator()(int i, int j);
    double operator()(int i, int j) const;

    // Value of a one-element tensor; ContractError otherwise.
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }

    // Gradient accumulator, zero-initialized on first access.
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    bool has_grad() const { return defined() && !impl_->g.empty(); }
    void zero_grad();

    std::shared_ptr<TensorImpl> ptr() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Tape of one forward pass. Ops append backward thunks while a GraphScope
// is active; backward() replays them in reverse topological (= recording)
// order. A Graph and its tensors belong to a single thread.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    void record(std::function<void()> back) { tape_.push_back(std::move(back)); }

    // Seeds d(loss)/d(loss) = 1 and accumulates into every reachable grad.
    // loss must be scalar and attached to this graph. Calling twice
    // without reset() is a ContractError.
    void backward(const Tensor& loss);

    void reset();
    std::size_t node_count() const { return tape_.size(); }

    static Graph* current();

private:
    friend class GraphScope;
    std::vector<std::function<void()>> tape_;
    bool backward_done_ = false;
};

// RAII activation of a graph on the current thread.
class GraphScope {
public:
    explicit GraphScope(Graph& g);
    ~GraphScope();
    GraphScope(const GraphScope&) = delete;
    GraphScope& operator=(const GraphScope&) = delete;

private:
    Graph* prev_;
};

// Deterministic RNG used everywhere. normal() is hand-rolled Box-Muller so
// streams are reproducible independent of the standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    std::uint64_t next_u64();
    double uniform();                      // [0, 1)
    double uniform(double lo, double hi);  // [lo, hi)
    double normal();                       // standard normal
    int randint(int lo, int hi);           // inclusive both ends

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

private:
    std::uint64_t state_;
};

// Derives an independent stream from a base seed and stream coordinates,
// so parallel and serial generation agree.
std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

Tensor rand_uniform(const Shape& shape, double lo, double hi, Rng& rng);
Tensor rand_normal(const Shape& shape, double mean, double stddev, Rng& rng);

}  // namespace mole

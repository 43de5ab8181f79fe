#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mcblab/array.hpp"

namespace mcb {

// Named trainable array with its gradient accumulator.
struct Parameter {
    std::string name;
    Array value;
    Array grad;

    Parameter() = default;
    Parameter(std::string n, Array v) : name(std::move(n)), value(std::move(v)) {
        grad = Array::zeros(value.shape);
    }
    void zero_grad() { grad.fill(0.0); }
};

// Reverse-mode tape over dense arrays. Each operation records a closure that
// routes the output adjoint to its inputs; backward() replays them in reverse
// creation order. Parameter leaves additionally flush into Parameter::grad.
class Tape {
  public:
    using Var = int;

    Var constant(Array a);                // no gradient tracked
    Var input(Array a);                   // differentiable leaf
    Var param(Parameter& p);              // leaf accumulating into p.grad

    const Array& value(Var x) const { return nodes_[x].val; }
    const Array& grad(Var x) const { return nodes_[x].grad; }

    Var matmul(Var a, Var b, bool ta = false, bool tb = false);
    Var matvec(Var w, Var x);             // (m x n) * (n) -> (m)
    Var add(Var a, Var b);                // same shape
    Var scale(Var a, double c);
    Var add_rowvec(Var m, Var v);         // broadcast v over rows of m
    Var mul(Var a, Var b);                // elementwise, same shape
    Var relu(Var a);                      // subgradient at 0 is 0
    Var sigmoid(Var a);
    Var softmax_rows(Var a);
    Var slice_cols(Var a, std::size_t c0, std::size_t c1);
    Var concat_cols(const std::vector<Var>& parts);
    Var concat_vec(Var a, Var b);         // rank-1 concatenation
    Var row(Var m, std::size_t i);
    Var mean_rows(Var m);                 // column-wise mean -> rank-1
    Var layer_norm_rows(Var m, Var gamma, Var beta, double eps);
    Var embedding(Var table, const std::vector<int>& ids);
    Var mean_all(Var a);                  // -> scalar

    // Fused losses (scalar outputs, mean-reduced).
    Var focal_loss(Var logits, const std::vector<double>& targets, double gamma, double alpha);
    Var bce_loss(Var activations, const std::vector<double>& targets);
    Var cosine_align_loss(Var a, Var b);

    Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights);

    void backward(Var scalar_output, double seed = 1.0);

    std::size_t node_count() const { return nodes_.size(); }

  private:
    struct Node {
        Array val;
        Array grad;
        bool needs_grad = false;
        Parameter* sink = nullptr;
        std::function<void(Tape&)> back;  // empty for leaves/constants
    };

    Var emit(Array val, bool needs_grad, std::function<void(Tape&)> back = {});
    Array& g(Var x) { return nodes_[x].grad; }
    bool wants(Var x) const { return nodes_[x].needs_grad; }

    std::vector<Node> nodes_;
};

}  // namespace mcb

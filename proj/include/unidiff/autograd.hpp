#pragma once

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "unidiff/tensor.hpp"

namespace unidiff::nn {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
// sweep visits every consumer before its producers. Parameters are
// referenced, not copied; a trainable parameter's gradient is accumulated
// straight into the caller-owned buffer.
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, Var self, const Tensor<T>& grad_out)>;

    explicit Graph(bool record = true) : record_(record) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var input(Tensor<T> value);
    Var param(const Tensor<T>& value, Tensor<T>* grad_sink = nullptr);

    const Tensor<T>& value(Var v) const;
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    bool recording() const { return record_; }
    std::size_t node_count() const { return nodes_.size(); }

    // Only used by op implementations.
    Var push(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn);
    Tensor<T>& grad(Var v);

    // Seeds d(loss)/d(loss) = 1; loss must hold a single element.
    void backward(Var loss);

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Tensor<T>* grad_sink = nullptr;
        Tensor<T> grad;
        bool requires_grad = false;
        bool has_grad = false;
        BackwardFn backward;
    };

    bool record_;
    std::deque<Node> nodes_;
};

// Ops. Shapes: images NCHW, matrices [rows, cols], vectors [n].

// 2-D convolution, square kernel, zero padding k/2.
template <typename T>
Var conv2d(Graph<T>& g, Var x, Var weight, Var bias, int stride = 1);

// Per-sample group normalization without affine terms.
template <typename T>
Var group_norm(Graph<T>& g, Var x, int groups, double eps = 1e-5);

// y = x * scale + shift per channel; scale/shift are [C] (shared) or [N, C].
template <typename T>
Var scale_shift(Graph<T>& g, Var x, Var scale, Var shift);

template <typename T>
Var silu(Graph<T>& g, Var x);

template <typename T>
Var relu(Graph<T>& g, Var x);

template <typename T>
Var add(Graph<T>& g, Var a, Var b);

template <typename T>
Var add_scalar(Graph<T>& g, Var a, T s);

template <typename T>
Var concat_channels(Graph<T>& g, Var a, Var b);

template <typename T>
Var upsample_nearest2x(Graph<T>& g, Var x);

// Multi-head self-attention core over a packed [N, 3C, L] qkv tensor
// (per head: q, k, v blocks of C/heads channels). Returns [N, C, L].
template <typename T>
Var attention(Graph<T>& g, Var qkv, int heads);

template <typename T>
Var reshape(Graph<T>& g, Var x, std::vector<int> shape);

// y = x W^T + b with x [N, in], W [out, in], b [out].
template <typename T>
Var linear(Graph<T>& g, Var x, Var weight, Var bias);

// Row gather: table [K, E], ids in [0, K) -> [N, E].
template <typename T>
Var embedding(Graph<T>& g, Var table, std::span<const int> ids);

// Mean squared error over all elements, target held constant.
template <typename T>
Var mse(Graph<T>& g, Var pred, const Tensor<T>& target);

// Mean softmax cross-entropy; labels are 0-based row targets.
template <typename T>
Var softmax_cross_entropy(Graph<T>& g, Var logits, std::span<const int> labels);

// Plain (no-graph) helpers shared with inference paths.
template <typename T>
void softmax_rows(std::span<T> values, int rows, int cols);

}  // namespace unidiff::nn

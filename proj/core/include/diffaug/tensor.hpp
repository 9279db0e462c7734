#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "diffaug/common.hpp"

namespace diffaug {

using Dims = std::vector<int>;

int64_t dims_numel(const Dims& d);
std::string dims_str(const Dims& d);

// A named parameter array. Gradients are accumulated here by
// Tape::accumulate_param_grads and consumed by the optimizer.
struct Param {
    std::string name;
    Dims shape;
    std::vector<float> value;
    std::vector<float> grad;  // same length as value, zero between steps
    bool trainable = true;

    int64_t size() const { return static_cast<int64_t>(value.size()); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

class Tape;

// Lightweight handle to a node on a tape.
class Tensor {
public:
    Tensor() = default;
    Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

    bool defined() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int id() const { return id_; }

    const Dims& dims() const;
    int64_t size() const;
    const float* data() const;
    const float* grad_data() const;  // null if no grad reached this node
    float scalar() const;            // value of a 1-element tensor

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Dynamic reverse-mode tape. One tape per forward/backward pass; nodes are
// created in topological order so backward is a reverse sweep. A tape may be
// used grad-free as a plain evaluator (grad_enabled(false)).
class Tape {
public:
    struct Node {
        Dims shape;
        const float* val = nullptr;     // points into storage or borrowed
        std::vector<float> storage;     // empty when borrowed
        std::vector<float> grad;        // lazily allocated
        std::function<void()> back;     // empty for leaves
        bool needs_grad = false;
        Param* bound = nullptr;         // set for param leaves
        int64_t n = 0;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void set_grad_enabled(bool on) { grad_enabled_ = on; }
    bool grad_enabled() const { return grad_enabled_; }

    // Leaves.
    Tensor input(const Dims& d, const float* src);            // copies
    Tensor input(const Dims& d, const std::vector<float>& v); // copies
    Tensor input_borrow(const Dims& d, const float* src);     // caller keeps alive
    Tensor leaf_grad(const Dims& d, const float* src);        // copies, wants grad
    Tensor param(Param& p);                                    // borrows p.value
    Tensor zeros(const Dims& d);

    // Allocates an owned node. Ops fill value then install a backward fn.
    Tensor alloc(const Dims& d, bool needs_grad);
    void set_back(Tensor t, std::function<void()> fn);

    Node& node(int id) { return nodes_[id]; }
    const Node& node(int id) const { return nodes_[id]; }
    float* mutable_val(Tensor t);
    // Adds src into the grad buffer of node id (if it participates in grads).
    void accum_grad(int id, const float* src, int64_t n);
    float* grad_buffer(int id);  // allocates (zeroed) if missing
    bool wants_grad(int id) const { return nodes_[id].needs_grad; }

    // Reverse sweep seeded with d(root)/d(root) = 1. Root must be scalar.
    void backward(Tensor root);

    // Adds every bound param leaf's node grad into Param::grad.
    void accumulate_param_grads(float scale = 1.0f);

    size_t num_nodes() const { return nodes_.size(); }

private:
    std::deque<Node> nodes_;
    std::vector<std::pair<Param*, int>> bound_;
    bool grad_enabled_ = true;
    bool backward_done_ = false;
};

// ---- elementwise / algebra ----
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor scale(Tensor a, float s);
Tensor add_scalar(Tensor a, float s);
// alpha*a + beta*b, shapes equal
Tensor axpby(float alpha, Tensor a, float beta, Tensor b);
Tensor relu(Tensor a);
Tensor silu(Tensor a);
Tensor sigmoid(Tensor a);
Tensor square(Tensor a);

// ---- shape ----
Tensor reshape(Tensor a, const Dims& d);            // aliases the buffer
Tensor concat_channels(Tensor a, Tensor b);         // [B,C1,H,W]+[B,C2,H,W]
Tensor concat_rows(Tensor a, Tensor b);             // [R1,C]+[R2,C]
Tensor take_rows(Tensor table, std::vector<int> idx);  // [K,E] -> [n,E]
// [B,C,H,W] <-> [B,H*W,C] transposes for token-space attention.
Tensor chw_to_tokens(Tensor x);
Tensor tokens_to_chw(Tensor x, int h, int w);
Tensor select_sample(Tensor x, int n);              // [B,...] -> [1,...]
Tensor stack(const std::vector<Tensor>& xs);        // equal shapes -> new dim 0
Tensor mean_rows(Tensor x);                         // [R,C] -> [1,C]
Tensor repeat_row(Tensor row, int r);               // [C] or [1,C] -> [r,C]

// ---- linear algebra ----
// x [..., in] @ W[out, in]^T + b[out]; b may be undefined.
Tensor linear(Tensor x, Tensor w, Tensor b);
// Fused single-head attention: q [B,T,d], k/v [B,S,d] -> [B,T,d].
Tensor attention(Tensor q, Tensor k, Tensor v);
Tensor softmax_lastdim(Tensor a);
// Row-wise RMS norm over the last dim with learned gain g[E]. Zero rows stay zero.
Tensor rmsnorm_rows(Tensor x, Tensor g);

// ---- convolution / spatial (NCHW) ----
Tensor conv2d(Tensor x, Tensor w, Tensor b, int stride, int pad);
Tensor avg_pool2(Tensor x);
Tensor upsample_nearest2(Tensor x);
// b[C] broadcast over batch and space; bs[B,C] per-sample channel bias.
Tensor add_channel_bias(Tensor x, Tensor b);
Tensor add_sample_channel_bias(Tensor x, Tensor bs);
Tensor group_norm(Tensor x, int groups, Tensor gamma, Tensor beta);

// ---- reductions / losses ----
Tensor mean_all(Tensor a);
Tensor sum_all(Tensor a);
Tensor mse(Tensor a, Tensor b);  // mean of squared difference
// Mean binary cross entropy on logits, optional per-element weights.
Tensor bce_logits(Tensor logits, Tensor targets);
Tensor bce_logits_weighted(Tensor logits, Tensor targets, Tensor weights);

}  // namespace diffaug

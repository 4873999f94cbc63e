#pragma once

#include <functional>
#include <vector>

#include "cbdiff/rng.hpp"
#include "cbdiff/tensor.hpp"

namespace cbdiff {

// Reverse-mode autodiff over a linear tape. Ops append nodes; creation
// order is a topological order, so backward() is a single reverse sweep.
// One tape per training step; tapes are single-threaded by contract
// (individual ops parallelize internally with deterministic reductions).
template <class T>
class Tape {
  public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backward;  // empty for leaves / constant subgraphs
        const char* op = "leaf";
    };

    int leaf(Tensor<T> value, bool requires_grad);
    int constant(Tensor<T> value) { return leaf(std::move(value), false); }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor<T>& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
    bool wants_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    // non-null only while backward() runs and the node participates
    Tensor<T>* grad_if(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        return n.requires_grad ? &n.grad : nullptr;
    }

    // Seeds d(root)=1 and sweeps the tape in reverse. `root` must be scalar.
    // Gradients of fan-out nodes accumulate additively; constants get zeros.
    void backward(int root);

    void reset() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

    int push(Node&& n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void set_backward(int id, std::function<void(Tape&, int)> fn);

  private:
    std::vector<Node> nodes_;
};

// ---- elementwise ----
template <class T> int add(Tape<T>& t, int a, int b);
template <class T> int sub(Tape<T>& t, int a, int b);
// mul also accepts a broadcast rhs whose last dim is 1 (per-pixel scalar)
template <class T> int mul(Tape<T>& t, int a, int b);
template <class T> int div_(Tape<T>& t, int a, int b);
template <class T> int add_const(Tape<T>& t, int a, T c);
template <class T> int scale_const(Tape<T>& t, int a, T c);
template <class T> int exp_(Tape<T>& t, int a);
template <class T> int log_(Tape<T>& t, int a);
template <class T> int sigmoid_(Tape<T>& t, int a);
template <class T> int silu_(Tape<T>& t, int a);
template <class T> int clamp_min(Tape<T>& t, int a, T floor);

// ---- linear algebra ----
template <class T> int matmul(Tape<T>& t, int a, int b);     // (m,k)x(k,n)
template <class T> int matmul_nt(Tape<T>& t, int a, int b);  // (m,k)x(n,k)^T
template <class T> int add_rowvec(Tape<T>& t, int x, int v); // (m,n)+(n,)

// ---- structured ----
// x:(B,H,W,Ci)  w:(kh,kw,Ci,Co)  bias:(Co)  stride 1|2, same padding
template <class T> int conv2d(Tape<T>& t, int x, int w, int bias, int stride);
template <class T> int upsample2x(Tape<T>& t, int x);                 // nearest
template <class T> int softmax(Tape<T>& t, int x, int axis);
template <class T> int sum_all(Tape<T>& t, int x);
template <class T> int mean_all(Tape<T>& t, int x);
template <class T> int sum_last(Tape<T>& t, int x);                   // (...,C)->(...,1)
template <class T> int concat_last(Tape<T>& t, int a, int b);
template <class T> int slice_last(Tape<T>& t, int x, int c0, int c1); // [c0,c1)
template <class T> int reshape(Tape<T>& t, int x, Shape s);
template <class T> int select_batch(Tape<T>& t, int x, int b);        // (B,...)->(...)
template <class T> int stack_batch(Tape<T>& t, const std::vector<int>& ids);
// x:(B,H,W,C) * scale:(B,C) + shift:(B,C), broadcast over spatial dims
template <class T> int affine_nc(Tape<T>& t, int x, int scale, int shift);
template <class T> int group_norm(Tape<T>& t, int x, int gamma, int beta, int groups);
// train-mode only; identity when train=false; mask is a pure function of rng state
template <class T> int dropout(Tape<T>& t, int x, T rate, RngStream& rng, bool train);

// ---- verification ----
// Max over elements of |analytic - central difference| /
// max(|analytic|, |central|, 1e-12), for a scalar-valued builder `f`.
// When max_elems > 0, checks a seeded random subset of that size.
double grad_check(const std::function<int(Tape<double>&, const std::vector<int>&)>& f,
                  const std::vector<Tensor<double>>& inputs, double eps, int64_t max_elems = 0,
                  uint64_t subset_seed = 0);

}  // namespace cbdiff

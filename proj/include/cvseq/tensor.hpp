#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "cvseq/rng.hpp"

namespace cvseq {

using Shape = std::vector<int>;

int shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// One node of the per-forward-pass tape. The backward rule reads this node's
// grad and accumulates into its parents' grads. Buffers are recycled through
// a thread-local pool; every op fully overwrites its output.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    ~TensorNode();
    int numel() const { return static_cast<int>(data.size()); }
    void ensure_grad();
};

// Dense 64-bit real tensor participating in a reverse-mode autodiff tape.
// Value-semantic handle; copies share the underlying node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value);
    // entries ~ N(0, stddev^2)
    static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false);
    // entries ~ U(-limit, limit)
    static Tensor uniform(const Shape& shape, Rng& rng, double limit,
                          bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int numel() const { return node_->numel(); }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& data() { return node_->data; }
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    bool has_grad() const { return !node_->grad.empty(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    double value() const;                       // scalar tensors only
    double at(std::initializer_list<int> idx) const;  // row-major
    double operator()(int i) const;
    double operator()(int i, int j) const;

    void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

    // Reverse pass from a scalar root. Visits the tape in reverse topological
    // order exactly once, allocates grads for every reachable requires_grad
    // node, then frees the tape (backward rules and parent links).
    void backward();

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// --- elementwise / structural ops ------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
// x: [L x D], bias: [D] (the one sanctioned broadcast)
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // 2-D
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor softmax(const Tensor& a, int axis);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);

Tensor sum(const Tensor& a);        // -> shape {1}
Tensor mean(const Tensor& a);       // -> shape {1}
Tensor mean_rows(const Tensor& a);  // [L x D] -> [1 x D]
Tensor pick(const Tensor& a, int flat_index);  // -> shape {1}

// row-wise normalization over the last axis of a 2-D tensor
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// input [Cin x H x W], weight [Cout x Cin x kh x kw], bias [Cout]
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad);

// numerically stable log(sum(exp(x))) over all elements -> {1}
Tensor logsumexp(const Tensor& a);

double max_value(const Tensor& a);
int argmax_index(const Tensor& a);  // ties -> lowest index

// --- finite-difference oracle ----------------------------------------------

// Compares the autodiff gradient of a scalar-valued function against central
// finite differences, component by component, over every requires_grad input.
// Returns the worst relative error, |a - n| / max(1, |a|, |n|).
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double eps = 1e-5);
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);
// Same, probing at most max_components randomly sampled components per input.
double grad_check_sampled(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& inputs, int max_components, Rng& rng,
    double eps = 1e-5);

namespace detail {
// Row-major kernels; output rows are independent so parallel execution is
// bitwise identical to serial. acc=true accumulates into C.
void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c,
             bool acc);  // C[m x n] = A[m x k] * B[k x n]
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c,
             bool acc);  // C[m x n] = A[m x k] * B[n x k]^T
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c,
             bool acc);  // C[m x n] = A[k x m]^T * B[k x n]
}  // namespace detail

}  // namespace cvseq

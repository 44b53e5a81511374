#include "cvseq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace cvseq {

int shape_numel(const Shape& s) {
    int n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("non-positive dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); i++) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

// --- construction ------------------------------------------------------------

// Recycles data/grad buffers between tape nodes: graphs of one training step
// allocate the same sizes as the last, so reuse avoids both the malloc and
// the zero-fill of multi-megabyte score matrices. Graph building is
// single-threaded per context, hence thread_local.
namespace {

thread_local std::unordered_map<size_t, std::vector<std::vector<double>>> g_buffer_pool;

std::vector<double> pool_get(size_t n) {
    auto it = g_buffer_pool.find(n);
    if (it != g_buffer_pool.end() && !it->second.empty()) {
        std::vector<double> v = std::move(it->second.back());
        it->second.pop_back();
        return v;  // contents are stale; callers overwrite every element
    }
    return std::vector<double>(n);
}

void pool_put(std::vector<double>&& v) {
    if (v.empty()) return;
    auto& bucket = g_buffer_pool[v.size()];
    if (bucket.size() < 16) bucket.push_back(std::move(v));
}

}  // namespace

TensorNode::~TensorNode() {
    pool_put(std::move(data));
    pool_put(std::move(grad));
}

void TensorNode::ensure_grad() {
    if (grad.size() != data.size()) {
        grad = pool_get(data.size());
        std::fill(grad.begin(), grad.end(), 0.0);
    }
}

static std::shared_ptr<TensorNode> new_node(const Shape& shape, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->data = pool_get(static_cast<size_t>(shape_numel(shape)));
    n->requires_grad = requires_grad;
    return n;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    auto n = new_node(shape, requires_grad);
    std::fill(n->data.begin(), n->data.end(), 0.0);
    return Tensor(n);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    auto n = new_node(shape, requires_grad);
    std::fill(n->data.begin(), n->data.end(), value);
    return Tensor(n);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
    if (static_cast<int>(data.size()) != shape_numel(shape))
        throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                    " values for shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
    auto n = new_node(shape, requires_grad);
    for (auto& v : n->data) v = stddev * rng.normal();
    return Tensor(n);
}

Tensor Tensor::uniform(const Shape& shape, Rng& rng, double limit, bool requires_grad) {
    auto n = new_node(shape, requires_grad);
    for (auto& v : n->data) v = rng.uniform(-limit, limit);
    return Tensor(n);
}

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty())
        throw std::runtime_error("grad accessed before backward populated it");
    return node_->grad;
}

double Tensor::value() const {
    if (numel() != 1) throw std::invalid_argument("value() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const Shape& s = node_->shape;
    if (idx.size() != s.size()) throw std::invalid_argument("index rank mismatch");
    size_t flat = 0;
    size_t i = 0;
    for (int v : idx) {
        flat = flat * static_cast<size_t>(s[i]) + static_cast<size_t>(v);
        i++;
    }
    return node_->data[flat];
}

double Tensor::operator()(int i) const { return node_->data[static_cast<size_t>(i)]; }

double Tensor::operator()(int i, int j) const {
    return node_->data[static_cast<size_t>(i) * static_cast<size_t>(node_->shape[1]) +
                       static_cast<size_t>(j)];
}

// --- backward ----------------------------------------------------------------

void Tensor::backward() {
    if (numel() != 1) throw std::invalid_argument("backward() requires a scalar root, got " +
                                                  shape_str(shape()));
    // iterative post-order DFS; recursion would overflow on long BPTT tapes
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode* p = f.node->parents[f.next_parent++].get();
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    for (TensorNode* n : order)
        if (n->requires_grad) n->ensure_grad();
    node_->ensure_grad();  // a constant root still seeds the pass
    node_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
    }
    // free the tape; leaves keep their grads for the optimizer
    for (TensorNode* n : order) {
        n->backward_fn = nullptr;
        n->parents.clear();
    }
}

// --- op plumbing ---------------------------------------------------------------

// below this element count the fork/join overhead outweighs the work
static constexpr int kParallelCutoff = 1 << 15;

static Tensor make_op(const Shape& shape, std::vector<Tensor> inputs,
                      std::function<void(TensorNode&)> backward) {
    auto n = new_node(shape, false);
    for (const auto& in : inputs)
        if (in.requires_grad()) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents.reserve(inputs.size());
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::move(backward);
    }
    return Tensor(n);
}

static void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// --- elementwise ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    auto an = a.node(), bn = b.node();
    Tensor out = make_op(a.shape(), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
            for (size_t i = 0; i < self.grad.size(); i++) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
            for (size_t i = 0; i < self.grad.size(); i++) bn->grad[i] += self.grad[i];
        }
    });
    auto& o = out.data();
    const auto& x = a.data();
    const auto& y = b.data();
    #pragma omp parallel for if (o.size() >= kParallelCutoff)
    for (size_t i = 0; i < o.size(); i++) o[i] = x[i] + y[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    auto an = a.node(), bn = b.node();
    Tensor out = make_op(a.shape(), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
            for (size_t i = 0; i < self.grad.size(); i++) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
            for (size_t i = 0; i < self.grad.size(); i++) bn->grad[i] -= self.grad[i];
        }
    });
    auto& o = out.data();
    const auto& x = a.data();
    const auto& y = b.data();
    #pragma omp parallel for if (o.size() >= kParallelCutoff)
    for (size_t i = 0; i < o.size(); i++) o[i] = x[i] - y[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    auto an = a.node(), bn = b.node();
    Tensor out = make_op(a.shape(), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
            for (size_t i = 0; i < self.grad.size(); i++)
                an->grad[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
            for (size_t i = 0; i < self.grad.size(); i++)
                bn->grad[i] += self.grad[i] * an->data[i];
        }
    });
    auto& o = out.data();
    const auto& x = a.data();
    const auto& y = b.data();
    #pragma omp parallel for if (o.size() >= kParallelCutoff)
    for (size_t i = 0; i < o.size(); i++) o[i] = x[i] * y[i];
    return out;
}

Tensor scale(const Tensor& a, double c) {
    auto an = a.node();
    Tensor out = make_op(a.shape(), {a}, [an, c](TensorNode& self) {
        an->ensure_grad();
        #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
        for (size_t i = 0; i < self.grad.size(); i++) an->grad[i] += c * self.grad[i];
    });
    auto& o = out.data();
    const auto& x = a.data();
    #pragma omp parallel for if (o.size() >= kParallelCutoff)
    for (size_t i = 0; i < o.size(); i++) o[i] = c * x[i];
    return out;
}

Tensor add_scalar(const Tensor& a, double c) {
    auto an = a.node();
    Tensor out = make_op(a.shape(), {a}, [an](TensorNode& self) {
        an->ensure_grad();
        #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
        for (size_t i = 0; i < self.grad.size(); i++) an->grad[i] += self.grad[i];
    });
    auto& o = out.data();
    const auto& x = a.data();
    #pragma omp parallel for if (o.size() >= kParallelCutoff)
    for (size_t i = 0; i < o.size(); i++) o[i] = x[i] + c;
    return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    if (x.ndim() != 2 || bias.ndim() != 1 || x.dim(1) != bias.dim(0))
        throw std::invalid_argument("add_row_bias: shape mismatch " + shape_str(x.shape()) +
                                    " vs " + shape_str(bias.shape()));
    int rows = x.dim(0), cols = x.dim(1);
    auto xn = x.node(), bn = bias.node();
    Tensor out = make_op(x.shape(), {x, bias}, [xn, bn, rows, cols](TensorNode& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
#pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
            for (size_t i = 0; i < self.grad.size(); i++) xn->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int r = 0; r < rows; r++)
                for (int c = 0; c < cols; c++)
                    bn->grad[static_cast<size_t>(c)] +=
                        self.grad[static_cast<size_t>(r) * cols + c];
        }
    });
    auto& o = out.data();
    const auto& xd = x.data();
    const auto& bd = bias.data();
#pragma omp parallel for if (rows * cols >= kParallelCutoff) schedule(static)
    for (int r = 0; r < rows; r++)
        for (int c = 0; c < cols; c++)
            o[static_cast<size_t>(r) * cols + c] = xd[static_cast<size_t>(r) * cols + c] + bd[static_cast<size_t>(c)];
    return out;
}

Tensor relu(const Tensor& a) {
    auto an = a.node();
    Tensor out = make_op(a.shape(), {a}, [an](TensorNode& self) {
        an->ensure_grad();
        #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
        for (size_t i = 0; i < self.grad.size(); i++)
            if (an->data[i] > 0.0) an->grad[i] += self.grad[i];
    });
    auto& o = out.data();
    const auto& x = a.data();
    #pragma omp parallel for if (o.size() >= kParallelCutoff)
    for (size_t i = 0; i < o.size(); i++) o[i] = x[i] > 0.0 ? x[i] : 0.0;
    return out;
}

Tensor sigmoid(const Tensor& a) {
    auto an = a.node();
    Tensor out = make_op(a.shape(), {a}, [an](TensorNode& self) {
        an->ensure_grad();
        #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
        for (size_t i = 0; i < self.grad.size(); i++) {
            double y = self.data[i];
            an->grad[i] += self.grad[i] * y * (1.0 - y);
        }
    });
    auto& o = out.data();
    const auto& x = a.data();
    #pragma omp parallel for if (o.size() >= kParallelCutoff)
    for (size_t i = 0; i < o.size(); i++) o[i] = 1.0 / (1.0 + std::exp(-x[i]));
    return out;
}

Tensor exp(const Tensor& a) {
    auto an = a.node();
    Tensor out = make_op(a.shape(), {a}, [an](TensorNode& self) {
        an->ensure_grad();
        #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
        for (size_t i = 0; i < self.grad.size(); i++)
            an->grad[i] += self.grad[i] * self.data[i];
    });
    auto& o = out.data();
    const auto& x = a.data();
    #pragma omp parallel for if (o.size() >= kParallelCutoff)
    for (size_t i = 0; i < o.size(); i++) o[i] = std::exp(x[i]);
    return out;
}

Tensor log(const Tensor& a) {
    auto an = a.node();
    Tensor out = make_op(a.shape(), {a}, [an](TensorNode& self) {
        an->ensure_grad();
        #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
        for (size_t i = 0; i < self.grad.size(); i++)
            an->grad[i] += self.grad[i] / an->data[i];
    });
    auto& o = out.data();
    const auto& x = a.data();
    #pragma omp parallel for if (o.size() >= kParallelCutoff)
    for (size_t i = 0; i < o.size(); i++) o[i] = std::log(x[i]);
    return out;
}

// --- gemm kernels --------------------------------------------------------------

namespace detail {

void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c, bool acc) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; i++) {
        double* crow = c + static_cast<size_t>(i) * n;
        if (!acc)
            for (int j = 0; j < n; j++) crow[j] = 0.0;
        const double* arow = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; p++) {
            double av = arow[p];
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; j++) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c, bool acc) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; i++) {
        double* crow = c + static_cast<size_t>(i) * n;
        const double* arow = a + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; j++) {
            const double* brow = b + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; p++) s += arow[p] * brow[p];
            crow[j] = acc ? crow[j] + s : s;
        }
    }
}

void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c, bool acc) {
    // walking a column-wise is a cache miss per element at large m; a blocked
    // transpose into scratch first keeps both factors sequential
    static thread_local std::vector<double> scratch;
    scratch.resize(static_cast<size_t>(m) * k);
    double* at = scratch.data();  // workers must share the caller's buffer
    constexpr int kBlock = 64;
#pragma omp parallel for schedule(static) collapse(2)
    for (int pb = 0; pb < (k + kBlock - 1) / kBlock; pb++)
        for (int ib = 0; ib < (m + kBlock - 1) / kBlock; ib++) {
            int p_end = std::min(k, (pb + 1) * kBlock);
            int i_end = std::min(m, (ib + 1) * kBlock);
            for (int p = pb * kBlock; p < p_end; p++)
                for (int i = ib * kBlock; i < i_end; i++)
                    at[static_cast<size_t>(i) * k + p] = a[static_cast<size_t>(p) * m + i];
        }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; i++) {
        double* crow = c + static_cast<size_t>(i) * n;
        if (!acc)
            for (int j = 0; j < n; j++) crow[j] = 0.0;
        const double* arow = at + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; p++) {
            double av = arow[p];
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; j++) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw std::invalid_argument("matmul: 2-D tensors required, got " + shape_str(a.shape()) +
                                    " and " + shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto an = a.node(), bn = b.node();
    Tensor out = make_op({m, n}, {a, b}, [an, bn, m, k, n](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();  // dA += dC * B^T
            detail::gemm_nt(m, k, n, self.grad.data(), bn->data.data(), an->grad.data(), true);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();  // dB += A^T * dC
            detail::gemm_tn(k, n, m, an->data.data(), self.grad.data(), bn->grad.data(), true);
        }
    });
    detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data().data(), false);
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2)
        throw std::invalid_argument("transpose: 2-D tensor required, got " + shape_str(a.shape()));
    int r = a.dim(0), c = a.dim(1);
    auto an = a.node();
    Tensor out = make_op({c, r}, {a}, [an, r, c](TensorNode& self) {
        an->ensure_grad();
        for (int i = 0; i < c; i++)
            for (int j = 0; j < r; j++)
                an->grad[static_cast<size_t>(j) * c + i] +=
                    self.grad[static_cast<size_t>(i) * r + j];
    });
    auto& o = out.data();
    const auto& x = a.data();
    for (int i = 0; i < r; i++)
        for (int j = 0; j < c; j++)
            o[static_cast<size_t>(j) * r + i] = x[static_cast<size_t>(i) * c + j];
    return out;
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel())
        throw std::invalid_argument("reshape: element count changes, " + shape_str(a.shape()) +
                                    " -> " + shape_str(shape));
    auto an = a.node();
    Tensor out = make_op(shape, {a}, [an](TensorNode& self) {
        an->ensure_grad();
        #pragma omp parallel for if (self.grad.size() >= kParallelCutoff)
        for (size_t i = 0; i < self.grad.size(); i++) an->grad[i] += self.grad[i];
    });
    out.data() = a.data();
    return out;
}

// --- softmax -------------------------------------------------------------------

static void axis_split(const Shape& s, int axis, int& outer, int& len, int& inner) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw std::invalid_argument("axis " + std::to_string(axis) + " invalid for shape " +
                                    shape_str(s));
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; i++) outer *= s[static_cast<size_t>(i)];
    len = s[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); i++) inner *= s[i];
}

Tensor softmax(const Tensor& a, int axis) {
    int outer, len, inner;
    axis_split(a.shape(), axis, outer, len, inner);
    auto an = a.node();
    Tensor out = make_op(a.shape(), {a}, [an, outer, len, inner](TensorNode& self) {
        an->ensure_grad();
        // dx = y * (dy - sum(dy * y))  per slice; slices are independent
#pragma omp parallel for if (outer * inner >= 256) schedule(static)
        for (int o = 0; o < outer; o++)
            for (int i = 0; i < inner; i++) {
                size_t base = static_cast<size_t>(o) * len * inner + i;
                double dot = 0.0;
                for (int l = 0; l < len; l++) {
                    size_t idx = base + static_cast<size_t>(l) * inner;
                    dot += self.grad[idx] * self.data[idx];
                }
                for (int l = 0; l < len; l++) {
                    size_t idx = base + static_cast<size_t>(l) * inner;
                    an->grad[idx] += self.data[idx] * (self.grad[idx] - dot);
                }
            }
    });
    auto& o = out.data();
    const auto& x = a.data();
#pragma omp parallel for if (outer * inner >= 256) schedule(static)
    for (int ou = 0; ou < outer; ou++)
        for (int i = 0; i < inner; i++) {
            size_t base = static_cast<size_t>(ou) * len * inner + i;
            double mx = x[base];
            for (int l = 1; l < len; l++)
                mx = std::max(mx, x[base + static_cast<size_t>(l) * inner]);
            double z = 0.0;
            for (int l = 0; l < len; l++) {
                size_t idx = base + static_cast<size_t>(l) * inner;
                o[idx] = std::exp(x[idx] - mx);
                z += o[idx];
            }
            for (int l = 0; l < len; l++) o[base + static_cast<size_t>(l) * inner] /= z;
        }
    return out;
}

// --- concat / slice --------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Shape out_shape = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(out_shape.size()))
        throw std::invalid_argument("concat: axis " + std::to_string(axis) + " invalid for " +
                                    shape_str(out_shape));
    int total = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size())
            throw std::invalid_argument("concat: rank mismatch");
        for (size_t i = 0; i < s.size(); i++)
            if (static_cast<int>(i) != axis && s[i] != out_shape[i])
                throw std::invalid_argument("concat: shape mismatch " + shape_str(s) + " vs " +
                                            shape_str(out_shape));
        total += s[static_cast<size_t>(axis)];
    }
    out_shape[static_cast<size_t>(axis)] = total;

    int outer, len, inner;
    axis_split(out_shape, axis, outer, len, inner);
    (void)len;

    std::vector<Tensor> inputs = parts;
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<int> lens;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        lens.push_back(p.shape()[static_cast<size_t>(axis)]);
    }
    Tensor out = make_op(out_shape, inputs, [nodes, lens, outer, inner, total](TensorNode& self) {
        int off = 0;
        for (size_t pi = 0; pi < nodes.size(); pi++) {
            auto& pn = nodes[pi];
            int plen = lens[pi];
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (int o = 0; o < outer; o++)
                    for (int l = 0; l < plen; l++)
                        for (int i = 0; i < inner; i++)
                            pn->grad[(static_cast<size_t>(o) * plen + l) * inner + i] +=
                                self.grad[(static_cast<size_t>(o) * total + off + l) * inner + i];
            }
            off += plen;
        }
    });
    auto& o = out.data();
    int off = 0;
    for (size_t pi = 0; pi < parts.size(); pi++) {
        const auto& x = parts[pi].data();
        int plen = lens[pi];
        for (int ou = 0; ou < outer; ou++)
            for (int l = 0; l < plen; l++)
                for (int i = 0; i < inner; i++)
                    o[(static_cast<size_t>(ou) * total + off + l) * inner + i] =
                        x[(static_cast<size_t>(ou) * plen + l) * inner + i];
        off += plen;
    }
    return out;
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
    int outer, alen, inner;
    axis_split(a.shape(), axis, outer, alen, inner);
    if (start < 0 || len <= 0 || start + len > alen)
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") invalid for axis length " +
                                    std::to_string(alen));
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    auto an = a.node();
    Tensor out = make_op(out_shape, {a}, [an, outer, alen, inner, start, len](TensorNode& self) {
        an->ensure_grad();
        for (int o = 0; o < outer; o++)
            for (int l = 0; l < len; l++)
                for (int i = 0; i < inner; i++)
                    an->grad[(static_cast<size_t>(o) * alen + start + l) * inner + i] +=
                        self.grad[(static_cast<size_t>(o) * len + l) * inner + i];
    });
    auto& o = out.data();
    const auto& x = a.data();
    for (int ou = 0; ou < outer; ou++)
        for (int l = 0; l < len; l++)
            for (int i = 0; i < inner; i++)
                o[(static_cast<size_t>(ou) * len + l) * inner + i] =
                    x[(static_cast<size_t>(ou) * alen + start + l) * inner + i];
    return out;
}

// --- reductions ------------------------------------------------------------------

Tensor sum(const Tensor& a) {
    auto an = a.node();
    Tensor out = make_op({1}, {a}, [an](TensorNode& self) {
        an->ensure_grad();
        #pragma omp parallel for if (an->grad.size() >= kParallelCutoff)
        for (size_t i = 0; i < an->grad.size(); i++) an->grad[i] += self.grad[0];
    });
    double s = 0.0;
    for (double v : a.data()) s += v;
    out.data()[0] = s;
    return out;
}

Tensor mean(const Tensor& a) {
    int n = a.numel();
    auto an = a.node();
    Tensor out = make_op({1}, {a}, [an, n](TensorNode& self) {
        an->ensure_grad();
        double g = self.grad[0] / n;
        #pragma omp parallel for if (an->grad.size() >= kParallelCutoff)
        for (size_t i = 0; i < an->grad.size(); i++) an->grad[i] += g;
    });
    double s = 0.0;
    for (double v : a.data()) s += v;
    out.data()[0] = s / n;
    return out;
}

Tensor mean_rows(const Tensor& a) {
    if (a.ndim() != 2)
        throw std::invalid_argument("mean_rows: 2-D tensor required, got " + shape_str(a.shape()));
    int rows = a.dim(0), cols = a.dim(1);
    auto an = a.node();
    Tensor out = make_op({1, cols}, {a}, [an, rows, cols](TensorNode& self) {
        an->ensure_grad();
        for (int r = 0; r < rows; r++)
            for (int c = 0; c < cols; c++)
                an->grad[static_cast<size_t>(r) * cols + c] += self.grad[static_cast<size_t>(c)] / rows;
    });
    auto& o = out.data();
    const auto& x = a.data();
    for (int c = 0; c < cols; c++) {
        double s = 0.0;
        for (int r = 0; r < rows; r++) s += x[static_cast<size_t>(r) * cols + c];
        o[static_cast<size_t>(c)] = s / rows;
    }
    return out;
}

Tensor pick(const Tensor& a, int flat_index) {
    if (flat_index < 0 || flat_index >= a.numel())
        throw std::invalid_argument("pick: index " + std::to_string(flat_index) +
                                    " out of range for " + shape_str(a.shape()));
    auto an = a.node();
    Tensor out = make_op({1}, {a}, [an, flat_index](TensorNode& self) {
        an->ensure_grad();
        an->grad[static_cast<size_t>(flat_index)] += self.grad[0];
    });
    out.data()[0] = a.data()[static_cast<size_t>(flat_index)];
    return out;
}

// --- layer norm -------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.ndim() != 2)
        throw std::invalid_argument("layer_norm: 2-D tensor required, got " + shape_str(x.shape()));
    int rows = x.dim(0), cols = x.dim(1);
    if (gamma.ndim() != 1 || gamma.dim(0) != cols || beta.ndim() != 1 || beta.dim(0) != cols)
        throw std::invalid_argument("layer_norm: gamma/beta must be [" + std::to_string(cols) +
                                    "], got " + shape_str(gamma.shape()) + " and " +
                                    shape_str(beta.shape()));
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    // cache the per-row normalized values and inverse stddevs for the backward rule
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * cols);
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));

    Tensor out = make_op(x.shape(), {x, gamma, beta},
                         [xn, gn, bn, xhat, inv_std, rows, cols](TensorNode& self) {
        if (gn->requires_grad) {
            gn->ensure_grad();
            for (int r = 0; r < rows; r++)
                for (int c = 0; c < cols; c++)
                    gn->grad[static_cast<size_t>(c)] +=
                        self.grad[static_cast<size_t>(r) * cols + c] *
                        (*xhat)[static_cast<size_t>(r) * cols + c];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int r = 0; r < rows; r++)
                for (int c = 0; c < cols; c++)
                    bn->grad[static_cast<size_t>(c)] += self.grad[static_cast<size_t>(r) * cols + c];
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
#pragma omp parallel for if (rows >= 64) schedule(static)
            for (int r = 0; r < rows; r++) {
                size_t row = static_cast<size_t>(r) * cols;
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (int c = 0; c < cols; c++) {
                    double dxhat = self.grad[row + c] * gn->data[static_cast<size_t>(c)];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * (*xhat)[row + c];
                }
                mean_dxhat /= cols;
                mean_dxhat_xhat /= cols;
                for (int c = 0; c < cols; c++) {
                    double dxhat = self.grad[row + c] * gn->data[static_cast<size_t>(c)];
                    xn->grad[row + c] += (*inv_std)[static_cast<size_t>(r)] *
                                         (dxhat - mean_dxhat - (*xhat)[row + c] * mean_dxhat_xhat);
                }
            }
        }
    });

    auto& o = out.data();
    const auto& xd = x.data();
    const auto& gd = gamma.data();
    const auto& bd = beta.data();
#pragma omp parallel for if (rows >= 64) schedule(static)
    for (int r = 0; r < rows; r++) {
        size_t row = static_cast<size_t>(r) * cols;
        double mu = 0.0;
        for (int c = 0; c < cols; c++) mu += xd[row + c];
        mu /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; c++) {
            double d = xd[row + c] - mu;
            var += d * d;
        }
        var /= cols;
        double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = istd;
        for (int c = 0; c < cols; c++) {
            double h = (xd[row + c] - mu) * istd;
            (*xhat)[row + c] = h;
            o[row + c] = h * gd[static_cast<size_t>(c)] + bd[static_cast<size_t>(c)];
        }
    }
    return out;
}

// --- conv2d ----------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int pad) {
    if (input.ndim() != 3 || weight.ndim() != 4)
        throw std::invalid_argument("conv2d: input [C,H,W] and weight [Co,Ci,kh,kw] required, got " +
                                    shape_str(input.shape()) + " and " + shape_str(weight.shape()));
    int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
    int co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != ci)
        throw std::invalid_argument("conv2d: channel mismatch " + shape_str(input.shape()) +
                                    " vs " + shape_str(weight.shape()));
    if (bias.ndim() != 1 || bias.dim(0) != co)
        throw std::invalid_argument("conv2d: bias must be [" + std::to_string(co) + "]");
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (w + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0)
        throw std::invalid_argument("conv2d: empty output for input " + shape_str(input.shape()));

    auto in = input.node(), wn = weight.node(), bn = bias.node();
    Tensor out = make_op({co, oh, ow}, {input, weight, bias},
                         [in, wn, bn, ci, h, w, co, kh, kw, oh, ow, stride, pad](TensorNode& self) {
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int oc = 0; oc < co; oc++) {
                double s = 0.0;
                size_t base = static_cast<size_t>(oc) * oh * ow;
                for (int i = 0; i < oh * ow; i++) s += self.grad[base + i];
                bn->grad[static_cast<size_t>(oc)] += s;
            }
        }
        bool need_dx = in->requires_grad, need_dw = wn->requires_grad;
        if (need_dx) in->ensure_grad();
        if (need_dw) wn->ensure_grad();
        if (!need_dx && !need_dw) return;
        for (int oc = 0; oc < co; oc++)
            for (int oy = 0; oy < oh; oy++)
                for (int ox = 0; ox < ow; ox++) {
                    double g = self.grad[(static_cast<size_t>(oc) * oh + oy) * ow + ox];
                    if (g == 0.0) continue;
                    for (int ic = 0; ic < ci; ic++)
                        for (int ky = 0; ky < kh; ky++) {
                            int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < kw; kx++) {
                                int ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= w) continue;
                                size_t xi = (static_cast<size_t>(ic) * h + iy) * w + ix;
                                size_t wi = ((static_cast<size_t>(oc) * ci + ic) * kh + ky) * kw + kx;
                                if (need_dx) in->grad[xi] += g * wn->data[wi];
                                if (need_dw) wn->grad[wi] += g * in->data[xi];
                            }
                        }
                }
    });

    auto& o = out.data();
    const auto& xd = input.data();
    const auto& wd = weight.data();
    const auto& bd = bias.data();
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < co; oc++)
        for (int oy = 0; oy < oh; oy++)
            for (int ox = 0; ox < ow; ox++) {
                double s = bd[static_cast<size_t>(oc)];
                for (int ic = 0; ic < ci; ic++)
                    for (int ky = 0; ky < kh; ky++) {
                        int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; kx++) {
                            int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= w) continue;
                            s += xd[(static_cast<size_t>(ic) * h + iy) * w + ix] *
                                 wd[((static_cast<size_t>(oc) * ci + ic) * kh + ky) * kw + kx];
                        }
                    }
                o[(static_cast<size_t>(oc) * oh + oy) * ow + ox] = s;
            }
    return out;
}

// --- composites ---------------------------------------------------------------

Tensor logsumexp(const Tensor& a) {
    double m = max_value(a);
    return add_scalar(log(sum(exp(add_scalar(a, -m)))), m);
}

double max_value(const Tensor& a) {
    const auto& d = a.data();
    double m = d[0];
    for (double v : d) m = std::max(m, v);
    return m;
}

int argmax_index(const Tensor& a) {
    const auto& d = a.data();
    int best = 0;
    for (size_t i = 1; i < d.size(); i++)
        if (d[i] > d[best]) best = static_cast<int>(i);
    return best;
}

// --- finite differences ---------------------------------------------------------

static double rel_err(double a, double n) {
    return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double eps) {
    Rng dummy(0);
    return grad_check_sampled(f, inputs, -1, dummy, eps);
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    return grad_check([&f](const std::vector<Tensor>& xs) { return f(xs[0]); }, {x}, eps);
}

double grad_check_sampled(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          const std::vector<Tensor>& inputs, int max_components, Rng& rng,
                          double eps) {
    // analytic pass on requires_grad copies
    std::vector<Tensor> live;
    live.reserve(inputs.size());
    for (const auto& in : inputs) {
        Tensor t = Tensor::from_data(in.shape(), in.data(), true);
        live.push_back(t);
    }
    Tensor y = f(live);
    if (y.numel() != 1)
        throw std::invalid_argument("grad_check: function must return a scalar");
    if (!std::isfinite(y.value())) throw std::runtime_error("grad_check: non-finite value");
    y.backward();

    // finite-difference pass on detached copies
    std::vector<Tensor> probe;
    probe.reserve(inputs.size());
    for (const auto& in : inputs) probe.push_back(Tensor::from_data(in.shape(), in.data(), false));
    auto eval = [&]() {
        Tensor v = f(probe);
        double s = v.value();
        if (!std::isfinite(s)) throw std::runtime_error("grad_check: non-finite value");
        return s;
    };

    double worst = 0.0;
    for (size_t t = 0; t < inputs.size(); t++) {
        int n = probe[t].numel();
        std::vector<int> idx;
        if (max_components > 0 && n > max_components) {
            for (int c = 0; c < max_components; c++) idx.push_back(rng.uniform_int(0, n - 1));
        } else {
            idx.resize(static_cast<size_t>(n));
            for (int c = 0; c < n; c++) idx[static_cast<size_t>(c)] = c;
        }
        static const std::vector<double> no_grad;
        const std::vector<double>& analytic = live[t].has_grad() ? live[t].grad() : no_grad;
        for (int c : idx) {
            double saved = probe[t].data()[static_cast<size_t>(c)];
            probe[t].data()[static_cast<size_t>(c)] = saved + eps;
            double fp = eval();
            probe[t].data()[static_cast<size_t>(c)] = saved - eps;
            double fm = eval();
            probe[t].data()[static_cast<size_t>(c)] = saved;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic.empty() ? 0.0 : analytic[static_cast<size_t>(c)];
            worst = std::max(worst, rel_err(a, numeric));
        }
    }
    return worst;
}

}  // namespace cvseq

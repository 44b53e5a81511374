#include "cvseq/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace cvseq {

Linear::Linear(int in_dim, int out_dim, Rng& rng) {
    double limit = std::sqrt(6.0 / (in_dim + out_dim));
    weight = Tensor::uniform({out_dim, in_dim}, rng, limit, true);
    bias = Tensor::zeros({out_dim}, true);
}

Tensor Linear::forward(const Tensor& x) const {
    return add_row_bias(matmul(x, transpose(weight)), bias);
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(int dim) {
    gamma = Tensor::full({dim}, 1.0, true);
    beta = Tensor::zeros({dim}, true);
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
}

FeedForward::FeedForward(int dim, int hidden, Rng& rng)
    : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

Tensor FeedForward::forward(const Tensor& x) const { return fc2.forward(relu(fc1.forward(x))); }

void FeedForward::collect(const std::string& prefix, ParamList& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

MultiHeadAttention::MultiHeadAttention(int model_dim, int num_heads, Rng& rng)
    : wq(model_dim, model_dim, rng),
      wk(model_dim, model_dim, rng),
      wv(model_dim, model_dim, rng),
      wo(model_dim, model_dim, rng),
      num_heads_(num_heads) {
    if (num_heads <= 0 || model_dim % num_heads != 0)
        throw std::invalid_argument("attention: model dim " + std::to_string(model_dim) +
                                    " not divisible by " + std::to_string(num_heads) + " heads");
    head_dim_ = model_dim / num_heads;
}

Tensor MultiHeadAttention::forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const Tensor* pe_q, const Tensor* pe_k) const {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw std::invalid_argument("attention: 2-D token tensors required");
    if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
        throw std::invalid_argument("attention: shape mismatch q=" + shape_str(q.shape()) +
                                    " k=" + shape_str(k.shape()) + " v=" + shape_str(v.shape()));
    if (pe_q && pe_q->shape() != q.shape())
        throw std::invalid_argument("attention: pe_q " + shape_str(pe_q->shape()) +
                                    " does not match queries " + shape_str(q.shape()));
    if (pe_k && pe_k->shape() != k.shape())
        throw std::invalid_argument("attention: pe_k " + shape_str(pe_k->shape()) +
                                    " does not match keys " + shape_str(k.shape()));

    Tensor qq = pe_q ? add(q, *pe_q) : q;
    Tensor kk = pe_k ? add(k, *pe_k) : k;
    Tensor qp = wq.forward(qq);
    Tensor kp = wk.forward(kk);
    Tensor vp = wv.forward(v);

    double scl = 1.0 / std::sqrt(static_cast<double>(head_dim_));
    last_attn_.clear();
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(num_heads_));
    for (int h = 0; h < num_heads_; h++) {
        Tensor qh = slice(qp, 1, h * head_dim_, head_dim_);
        Tensor kh = slice(kp, 1, h * head_dim_, head_dim_);
        Tensor vh = slice(vp, 1, h * head_dim_, head_dim_);
        Tensor scores = scale(matmul(qh, transpose(kh)), scl);
        Tensor weights = softmax(scores, 1);
        last_attn_.push_back(weights);
        heads.push_back(matmul(weights, vh));
    }
    Tensor merged = num_heads_ == 1 ? heads[0] : concat(heads, 1);
    return wo.forward(merged);
}

void MultiHeadAttention::collect(const std::string& prefix, ParamList& out) const {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
}

Tensor sinusoidal_pe_1d(int length, int dim) {
    if (length <= 0) throw std::invalid_argument("sinusoidal_pe_1d: non-positive length");
    if (dim <= 0 || dim % 2 != 0)
        throw std::invalid_argument("sinusoidal_pe_1d: dim must be even, got " +
                                    std::to_string(dim));
    Tensor pe = Tensor::zeros({length, dim});
    auto& d = pe.data();
    for (int pos = 0; pos < length; pos++)
        for (int i = 0; i < dim / 2; i++) {
            double freq = std::pow(10000.0, 2.0 * i / dim);
            double arg = pos / freq;
            d[static_cast<size_t>(pos) * dim + 2 * i] = std::sin(arg);
            d[static_cast<size_t>(pos) * dim + 2 * i + 1] = std::cos(arg);
        }
    return pe;
}

Tensor sinusoidal_pe_2d(int grid, int dim) {
    if (grid <= 0) throw std::invalid_argument("sinusoidal_pe_2d: non-positive grid");
    if (dim <= 0 || dim % 4 != 0)
        throw std::invalid_argument("sinusoidal_pe_2d: dim must be divisible by 4, got " +
                                    std::to_string(dim));
    int half = dim / 2;
    Tensor rows = sinusoidal_pe_1d(grid, half);
    Tensor pe = Tensor::zeros({grid * grid, dim});
    auto& d = pe.data();
    const auto& rd = rows.data();
    for (int r = 0; r < grid; r++)
        for (int c = 0; c < grid; c++) {
            size_t base = (static_cast<size_t>(r) * grid + c) * dim;
            for (int i = 0; i < half; i++) {
                d[base + i] = rd[static_cast<size_t>(r) * half + i];
                d[base + half + i] = rd[static_cast<size_t>(c) * half + i];
            }
        }
    return pe;
}

SelfAttentionBlock::SelfAttentionBlock(int dim, int num_heads, int ffn_hidden, Rng& rng)
    : mha(dim, num_heads, rng), ffn(dim, ffn_hidden, rng), norm1(dim), norm2(dim) {}

Tensor SelfAttentionBlock::forward(const Tensor& x, const Tensor* pe) const {
    Tensor xn = norm1.forward(x);
    Tensor x1 = add(x, mha.forward(xn, xn, xn, pe, pe));
    return add(x1, ffn.forward(norm2.forward(x1)));
}

void SelfAttentionBlock::collect(const std::string& prefix, ParamList& out) const {
    mha.collect(prefix + ".mha", out);
    ffn.collect(prefix + ".ffn", out);
    norm1.collect(prefix + ".norm1", out);
    norm2.collect(prefix + ".norm2", out);
}

CrossAttentionBlock::CrossAttentionBlock(int dim, int num_heads, int ffn_hidden, Rng& rng)
    : mha(dim, num_heads, rng),
      ffn(dim, ffn_hidden, rng),
      norm_q(dim),
      norm_kv(dim),
      norm2(dim) {}

Tensor CrossAttentionBlock::forward(const Tensor& x, const Tensor& y, const Tensor* pe_q,
                                    const Tensor* pe_k) const {
    Tensor xn = norm_q.forward(x);
    Tensor yn = norm_kv.forward(y);
    Tensor x1 = add(x, mha.forward(xn, yn, yn, pe_q, pe_k));
    return add(x1, ffn.forward(norm2.forward(x1)));
}

void CrossAttentionBlock::collect(const std::string& prefix, ParamList& out) const {
    mha.collect(prefix + ".mha", out);
    ffn.collect(prefix + ".ffn", out);
    norm_q.collect(prefix + ".norm_q", out);
    norm_kv.collect(prefix + ".norm_kv", out);
    norm2.collect(prefix + ".norm2", out);
}

}  // namespace cvseq

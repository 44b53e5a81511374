#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cvseq/tensor.hpp"

namespace cvseq {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

// y = x W^T + b, weight [out x in], Xavier-uniform weights, zero biases
class Linear {
public:
    Linear() = default;
    Linear(int in_dim, int out_dim, Rng& rng);

    Tensor forward(const Tensor& x) const;  // [L x in] -> [L x out]
    void collect(const std::string& prefix, ParamList& out) const;

    Tensor weight;  // [out x in]
    Tensor bias;    // [out]
};

class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(int dim);

    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;

    Tensor gamma;  // [dim], ones
    Tensor beta;   // [dim], zeros
    double eps = 1e-5;
};

// two linear projections with a ReLU between
class FeedForward {
public:
    FeedForward() = default;
    FeedForward(int dim, int hidden, Rng& rng);

    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;

    Linear fc1, fc2;
};

// Scaled dot-product multi-head attention. Positional encodings, when given,
// are added to queries and keys before the head projections, never to values.
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(int model_dim, int num_heads, Rng& rng);

    Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v,
                   const Tensor* pe_q = nullptr, const Tensor* pe_k = nullptr) const;
    void collect(const std::string& prefix, ParamList& out) const;

    // softmaxed per-head weights [Lq x Lk] from the most recent forward
    const std::vector<Tensor>& last_attention() const { return last_attn_; }

    int num_heads() const { return num_heads_; }
    int head_dim() const { return head_dim_; }

    Linear wq, wk, wv, wo;

private:
    int num_heads_ = 0;
    int head_dim_ = 0;
    mutable std::vector<Tensor> last_attn_;
};

// pe[pos, 2i] = sin(pos / 10000^(2i/dim)), pe[pos, 2i+1] = cos(same)
Tensor sinusoidal_pe_1d(int length, int dim);

// First dim/2 channels encode the row index, second half the column index,
// flattened row-major to grid*grid tokens.
Tensor sinusoidal_pe_2d(int grid, int dim);

// Pre-norm residual attention blocks: with value projections and FFN output
// weights zeroed they reduce exactly to the identity.
class SelfAttentionBlock {
public:
    SelfAttentionBlock() = default;
    SelfAttentionBlock(int dim, int num_heads, int ffn_hidden, Rng& rng);

    Tensor forward(const Tensor& x, const Tensor* pe = nullptr) const;
    void collect(const std::string& prefix, ParamList& out) const;

    MultiHeadAttention mha;
    FeedForward ffn;
    LayerNorm norm1, norm2;
};

class CrossAttentionBlock {
public:
    CrossAttentionBlock() = default;
    CrossAttentionBlock(int dim, int num_heads, int ffn_hidden, Rng& rng);

    // x provides queries, y provides keys and values; residual on x
    Tensor forward(const Tensor& x, const Tensor& y, const Tensor* pe_q = nullptr,
                   const Tensor* pe_k = nullptr) const;
    void collect(const std::string& prefix, ParamList& out) const;

    MultiHeadAttention mha;
    FeedForward ffn;
    LayerNorm norm_q, norm_kv, norm2;
};

}  // namespace cvseq

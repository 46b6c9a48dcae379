#pragma once

// Parameter registry and the small set of layers shared by the encoders and
// task heads.

#include <random>

#include "mtvl/tensor.hpp"

namespace mtvl {

template <typename T>
class ParamStore {
  public:
    explicit ParamStore(uint64_t seed = 0) : rng_(seed) {}

    Tensor<T> create(const std::string& name, Shape shape, std::vector<T> init) {
        require(!index_.count(name), "ParamStore: duplicate parameter name " + name);
        Tensor<T> p = Tensor<T>::param(name, std::move(shape), std::move(init));
        index_[name] = params_.size();
        params_.push_back(p);
        return p;
    }

    Tensor<T> create_normal(const std::string& name, Shape shape, T std_dev) {
        std::normal_distribution<double> dist(0.0, static_cast<double>(std_dev));
        std::vector<T> v(static_cast<size_t>(numel(shape)));
        for (auto& x : v) x = static_cast<T>(dist(rng_));
        return create(name, std::move(shape), std::move(v));
    }

    Tensor<T> create_zeros(const std::string& name, Shape shape) {
        return create(name, shape, std::vector<T>(static_cast<size_t>(numel(shape)), T(0)));
    }

    Tensor<T> create_full(const std::string& name, Shape shape, T x) {
        return create(name, shape, std::vector<T>(static_cast<size_t>(numel(shape)), x));
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        require(it != index_.end(), "ParamStore: unknown parameter " + name);
        return params_[it->second];
    }
    const Tensor<T>& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }

    std::vector<Tensor<T>>& all() { return params_; }
    const std::vector<Tensor<T>>& all() const { return params_; }
    size_t count() const { return params_.size(); }

    int64_t total_scalars() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }

  private:
    std::mt19937_64 rng_;
    std::vector<Tensor<T>> params_;
    std::unordered_map<std::string, size_t> index_;
};

// y = x W + b ; x is [R, in].
template <typename T>
struct Linear {
    Tensor<T> w, b;

    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& prefix, int in, int out) {
        w = ps.create_normal(prefix + ".w", {in, out}, T(1) / std::sqrt(static_cast<T>(in)));
        b = ps.create_zeros(prefix + ".b", {out});
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, w), b); }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gain, bias;

    LayerNorm() = default;
    LayerNorm(ParamStore<T>& ps, const std::string& prefix, int dim) {
        gain = ps.create_full(prefix + ".g", {dim}, T(1));
        bias = ps.create_zeros(prefix + ".b", {dim});
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return add(mul(layernorm_rows(x), gain), bias);
    }
};

// Multi-head attention over a key/value sequence; query may be a different
// (shorter) sequence, which covers both self- and cross-attention.
template <typename T>
struct MultiHeadAttention {
    Linear<T> wq, wk, wv, wo;
    int heads = 1;
    int dim = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<T>& ps, const std::string& prefix, int d, int n_heads)
        : wq(ps, prefix + ".q", d, d),
          wk(ps, prefix + ".k", d, d),
          wv(ps, prefix + ".v", d, d),
          wo(ps, prefix + ".o", d, d),
          heads(n_heads),
          dim(d) {
        require(d % n_heads == 0, "MultiHeadAttention: dim not divisible by heads");
    }

    Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& kv) const {
        const int hd = dim / heads;
        Tensor<T> q = wq(query), k = wk(kv), v = wv(kv);
        const T scale = T(1) / std::sqrt(static_cast<T>(hd));
        std::vector<Tensor<T>> head_outs;
        for (int h = 0; h < heads; ++h) {
            Tensor<T> qh = slice_cols(q, h * hd, (h + 1) * hd);
            Tensor<T> kh = slice_cols(k, h * hd, (h + 1) * hd);
            Tensor<T> vh = slice_cols(v, h * hd, (h + 1) * hd);
            Tensor<T> att = softmax_rows(mul(matmul(qh, transpose2d(kh)), scale));
            head_outs.push_back(matmul(att, vh));
        }
        return wo(concat_cols(head_outs));
    }
};

// Two-layer GELU MLP with the conventional 4x expansion.
template <typename T>
struct Mlp {
    Linear<T> fc1, fc2;

    Mlp() = default;
    Mlp(ParamStore<T>& ps, const std::string& prefix, int dim, int hidden) {
        fc1 = Linear<T>(ps, prefix + ".fc1", dim, hidden);
        fc2 = Linear<T>(ps, prefix + ".fc2", hidden, dim);
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }
};

// Pre-LN transformer block.
template <typename T>
struct TransformerBlock {
    LayerNorm<T> ln1, ln2;
    MultiHeadAttention<T> attn;
    Mlp<T> mlp;

    TransformerBlock() = default;
    TransformerBlock(ParamStore<T>& ps, const std::string& prefix, int dim, int heads)
        : ln1(ps, prefix + ".ln1", dim),
          ln2(ps, prefix + ".ln2", dim),
          attn(ps, prefix + ".attn", dim, heads),
          mlp(ps, prefix + ".mlp", dim, dim * 4) {}

    Tensor<T> operator()(const Tensor<T>& x) const {
        Tensor<T> n1 = ln1(x);
        Tensor<T> y = add(x, attn(n1, n1));
        return add(y, mlp(ln2(y)));
    }
};

// Weight-normalized projection: rows of v are L2-normalized and rescaled by g.
template <typename T>
struct WeightNormLinear {
    Tensor<T> v, g;
    int out = 0;

    WeightNormLinear() = default;
    WeightNormLinear(ParamStore<T>& ps, const std::string& prefix, int in, int out_dim) : out(out_dim) {
        v = ps.create_normal(prefix + ".v", {out_dim, in}, T(1) / std::sqrt(static_cast<T>(in)));
        g = ps.create_full(prefix + ".g", {out_dim}, T(1));
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        Tensor<T> w = mul(l2_normalize_rows(v), reshape(g, {out, 1}));
        return matmul(x, transpose2d(w));
    }
};

}  // namespace mtvl

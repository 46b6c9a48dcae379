#pragma once

// Sigmoid image-text contrastive loss and the differentiable cross-worker
// text-embedding gather.

#include "mtvl/nn.hpp"

namespace mtvl {

// Logit scale is kept in log space so tau stays positive.
template <typename T>
struct VLParams {
    Tensor<T> log_scale;  // tau' ; tau = exp(tau')
    Tensor<T> bias;       // beta

    VLParams() = default;
    VLParams(ParamStore<T>& ps, const std::string& prefix) {
        log_scale = ps.create_full(prefix + ".log_scale", {1}, T(std::log(10.0)));
        bias = ps.create_full(prefix + ".bias", {1}, T(-10));
    }

    T tau() const { return std::exp(log_scale.item()); }
};

// y in {+1, -1}; +1 on the diagonal for aligned batches.
struct MatchMatrix {
    int rows = 0, cols = 0;
    std::vector<int8_t> y;

    static MatchMatrix diagonal(int b) {
        MatchMatrix m;
        m.rows = m.cols = b;
        m.y.assign(static_cast<size_t>(b) * b, -1);
        for (int i = 0; i < b; ++i) m.y[static_cast<size_t>(i) * b + i] = 1;
        return m;
    }

    int8_t at(int i, int j) const { return y[static_cast<size_t>(i) * cols + j]; }
};

// L = -(1/B) sum_ij log sigmoid(-y_ij (-tau v_i.t_j + beta))
//   =  (1/B) sum_ij softplus(y_ij (-tau v_i.t_j + beta))
// computed overflow-safe; gradients flow to V, T, tau' and beta.
template <typename T>
Tensor<T> sigmoid_contrastive_loss(const Tensor<T>& img_emb, const Tensor<T>& txt_emb,
                                   const VLParams<T>& params, const MatchMatrix& match) {
    require(img_emb.ndim() == 2 && txt_emb.ndim() == 2, "sigmoid_contrastive_loss: 2-d inputs expected");
    const int b = img_emb.dim(0);
    const int bp = txt_emb.dim(0);
    require(b >= 1, "sigmoid_contrastive_loss: empty image batch rejected");
    if (img_emb.dim(1) != txt_emb.dim(1))
        fail("sigmoid_contrastive_loss: dim mismatch " + shape_str(img_emb.shape()) + " vs " +
             shape_str(txt_emb.shape()));
    require(match.rows == b && match.cols == bp, "sigmoid_contrastive_loss: match matrix shape mismatch");
    require(img_emb.all_finite() && txt_emb.all_finite(),
            "sigmoid_contrastive_loss: non-finite embeddings rejected");

    std::vector<T> yv(match.y.size());
    for (size_t i = 0; i < yv.size(); ++i) yv[i] = static_cast<T>(match.y[i]);
    Tensor<T> y({b, bp}, std::move(yv));

    Tensor<T> dots = matmul(img_emb, transpose2d(txt_emb));
    Tensor<T> tau = exp(params.log_scale);
    Tensor<T> logits = add(neg(mul(dots, tau)), params.bias);
    Tensor<T> per_pair = softplus(mul(y, logits));
    return div(sum(per_pair), static_cast<T>(b));
}

// Concatenation of per-worker shards in worker order. In the lockstep
// in-process simulation the gather is the graph concat itself: backward
// routes each gradient slice to the worker tensor that contributed it.
template <typename T>
Tensor<T> gather_text_embeddings(const std::vector<Tensor<T>>& shards) {
    require(!shards.empty(), "gather_text_embeddings: need at least one worker");
    if (shards.size() == 1 && shards[0].ndim() == 2) return shards[0];
    return concat_rows(shards);
}

}  // namespace mtvl

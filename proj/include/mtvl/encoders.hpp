#pragma once

// Toy-scale shared vision transformer, attentive pooling and text encoder.

#include <map>

#include "mtvl/nn.hpp"

namespace mtvl {

struct EncoderConfig {
    int layers = 6;
    int patch_size = 8;
    int image_size = 32;  // global crop side
    int local_size = 16;  // local crop side
    int width = 64;
    int heads = 4;
    int text_vocab = 64;
    int text_len = 16;
    int text_layers = 2;
    std::vector<int> tap_layers = {2, 3, 4, 6};  // dense-feature taps

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }

    void validate() const {
        require(image_size % patch_size == 0, "EncoderConfig: image_size not divisible by patch_size");
        require(local_size % patch_size == 0, "EncoderConfig: local_size not divisible by patch_size");
        require(local_size <= image_size, "EncoderConfig: local_size exceeds image_size");
        for (size_t i = 0; i < tap_layers.size(); ++i) {
            require(tap_layers[i] >= 1 && tap_layers[i] <= layers,
                    "EncoderConfig: tap layer out of range");
            if (i) require(tap_layers[i] > tap_layers[i - 1], "EncoderConfig: tap layers not sorted");
        }
    }
};

struct TokenSequence {
    std::vector<int> ids;

    size_t length() const { return ids.size(); }
    bool operator==(const TokenSequence&) const = default;
};

struct MaskPattern {
    std::vector<uint8_t> mask;  // one flag per patch
    double ratio = 0.0;

    size_t popcount() const {
        size_t c = 0;
        for (auto m : mask) c += (m != 0);
        return c;
    }
    void validate() const {
        require(!mask.empty(), "MaskPattern: empty");
        double m = static_cast<double>(popcount()) / static_cast<double>(mask.size());
        require(std::abs(m - ratio) <= 1.0 / static_cast<double>(mask.size()) + 1e-12,
                "MaskPattern: mean deviates from ratio");
    }
    std::vector<int> masked_indices() const {
        std::vector<int> out;
        for (size_t i = 0; i < mask.size(); ++i)
            if (mask[i]) out.push_back(static_cast<int>(i));
        return out;
    }
};

// Per-layer patch features for one image. Tap tensors are shared with every
// consumer in the same step (no recomputation).
template <typename T>
struct EncoderOutput {
    std::map<int, Tensor<T>> taps;  // block outputs for l in S, plus L
    Tensor<T> prenorm;              // z^(L) before the final layer norm
    Tensor<T> normed;               // after the final layer norm
};

namespace detail {

// Bilinear interpolation matrix from a src x src grid to dst x dst, row-major.
template <typename T>
Tensor<T> grid_interp_matrix(int src, int dst) {
    std::vector<T> m(static_cast<size_t>(dst * dst * src * src), T(0));
    for (int i = 0; i < dst; ++i) {
        for (int j = 0; j < dst; ++j) {
            double fy = dst == 1 ? 0.0 : static_cast<double>(i) * (src - 1) / (dst - 1);
            double fx = dst == 1 ? 0.0 : static_cast<double>(j) * (src - 1) / (dst - 1);
            int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            int y1 = std::min(y0 + 1, src - 1), x1 = std::min(x0 + 1, src - 1);
            double wy = fy - y0, wx = fx - x0;
            auto put = [&](int y, int x, double w) {
                if (w == 0.0) return;
                m[static_cast<size_t>((i * dst + j) * src * src + y * src + x)] += static_cast<T>(w);
            };
            put(y0, x0, (1 - wy) * (1 - wx));
            put(y0, x1, (1 - wy) * wx);
            put(y1, x0, wy * (1 - wx));
            put(y1, x1, wy * wx);
        }
    }
    return Tensor<T>({dst * dst, src * src}, std::move(m));
}

}  // namespace detail

template <typename T>
class VisionTransformer {
  public:
    VisionTransformer() = default;
    VisionTransformer(ParamStore<T>& ps, const EncoderConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.width;
        const int pdim = cfg_.patch_size * cfg_.patch_size * 3;
        patch_proj_ = Linear<T>(ps, "vit.patch", pdim, d);
        pos_embed_ = ps.create_normal("vit.pos", {cfg_.num_patches(), d}, T(0.02));
        mask_token_ = ps.create_normal("vit.mask_token", {1, d}, T(0.02));
        for (int l = 0; l < cfg_.layers; ++l)
            blocks_.emplace_back(ps, "vit.block" + std::to_string(l), d, cfg_.heads);
        final_ln_ = LayerNorm<T>(ps, "vit.ln_f", d);
    }

    const EncoderConfig& config() const { return cfg_; }
    const Tensor<T>& mask_token() const { return mask_token_; }

    // image: [H, W, 3] constant tensor with values in [0, 1].
    EncoderOutput<T> encode(const Tensor<T>& image, const MaskPattern* mask = nullptr) const {
        require(image.ndim() == 3 && image.dim(2) == 3,
                "encode_image: image must be [H, W, 3], got " + shape_str(image.shape()));
        const int side = image.dim(0);
        require(image.dim(1) == side, "encode_image: image must be square");
        require(side == cfg_.image_size || side == cfg_.local_size,
                "encode_image: unsupported image size " + std::to_string(side) +
                    " (no implicit resize)");
        const int g = side / cfg_.patch_size;
        const int n = g * g;

        Tensor<T> x = patch_proj_(patchify(image, g));
        if (mask != nullptr) {
            require(static_cast<int>(mask->mask.size()) == n,
                    "encode_image: mask length does not match patch count");
            if (mask->popcount() > 0) {
                std::vector<T> keep(static_cast<size_t>(n)), drop(static_cast<size_t>(n));
                for (int i = 0; i < n; ++i) {
                    keep[static_cast<size_t>(i)] = mask->mask[static_cast<size_t>(i)] ? T(0) : T(1);
                    drop[static_cast<size_t>(i)] = mask->mask[static_cast<size_t>(i)] ? T(1) : T(0);
                }
                Tensor<T> keep_col({n, 1}, std::move(keep));
                Tensor<T> drop_col({n, 1}, std::move(drop));
                x = add(mul(x, keep_col), matmul(drop_col, mask_token_));
            }
        }
        x = add(x, positional(g));

        EncoderOutput<T> out;
        for (int l = 1; l <= cfg_.layers; ++l) {
            x = blocks_[static_cast<size_t>(l - 1)](x);
            if (std::find(cfg_.tap_layers.begin(), cfg_.tap_layers.end(), l) != cfg_.tap_layers.end() ||
                l == cfg_.layers)
                out.taps.emplace(l, x);
        }
        out.prenorm = x;
        out.normed = final_ln_(x);
        return out;
    }

  private:
    Tensor<T> patchify(const Tensor<T>& image, int g) const {
        const int p = cfg_.patch_size;
        const int side = g * p;
        const int pdim = p * p * 3;
        std::vector<T> rows(static_cast<size_t>(g * g * pdim));
        auto v = image.value();
        for (int pi = 0; pi < g; ++pi)
            for (int pj = 0; pj < g; ++pj) {
                T* dst = rows.data() + static_cast<size_t>((pi * g + pj) * pdim);
                for (int i = 0; i < p; ++i)
                    for (int j = 0; j < p; ++j)
                        for (int c = 0; c < 3; ++c)
                            *dst++ = v[static_cast<size_t>(((pi * p + i) * side + pj * p + j) * 3 + c)];
            }
        return Tensor<T>({g * g, pdim}, std::move(rows));
    }

    Tensor<T> positional(int g) const {
        if (g == cfg_.grid()) return pos_embed_;
        return matmul(detail::grid_interp_matrix<T>(cfg_.grid(), g), pos_embed_);
    }

    EncoderConfig cfg_;
    Linear<T> patch_proj_;
    Tensor<T> pos_embed_;
    Tensor<T> mask_token_;  // [1, D]
    std::vector<TransformerBlock<T>> blocks_;
    LayerNorm<T> final_ln_;
};

// Single learned query, multi-head cross-attention over the patch set,
// followed by a residual MLP.
template <typename T>
class AttentivePool {
  public:
    AttentivePool() = default;
    AttentivePool(ParamStore<T>& ps, const std::string& prefix, int dim, int heads) {
        query_ = ps.create_normal(prefix + ".query", {1, dim}, T(0.02));
        attn_ = MultiHeadAttention<T>(ps, prefix + ".attn", dim, heads);
        ln_ = LayerNorm<T>(ps, prefix + ".ln", dim);
        mlp_ = Mlp<T>(ps, prefix + ".mlp", dim, dim * 4);
    }

    // z: [N, D] -> [D]
    Tensor<T> operator()(const Tensor<T>& z) const {
        require(z.ndim() == 2 && z.dim(0) >= 1, "attentive_pool: empty patch sequence");
        Tensor<T> y = add(query_, attn_(query_, z));
        y = add(y, mlp_(ln_(y)));
        return reshape(y, {y.dim(1)});
    }

  private:
    Tensor<T> query_;
    MultiHeadAttention<T> attn_;
    LayerNorm<T> ln_;
    Mlp<T> mlp_;
};

// Token + positional embeddings, a short transformer stack, mean pooling and
// projection into the joint space. Output is L2-normalized.
template <typename T>
class TextEncoder {
  public:
    TextEncoder() = default;
    TextEncoder(ParamStore<T>& ps, const EncoderConfig& cfg) : cfg_(cfg) {
        const int d = cfg.width;
        tok_embed_ = ps.create_normal("txt.tok", {cfg.text_vocab, d}, T(0.02));
        pos_embed_ = ps.create_normal("txt.pos", {cfg.text_len, d}, T(0.02));
        for (int l = 0; l < cfg.text_layers; ++l)
            blocks_.emplace_back(ps, "txt.block" + std::to_string(l), d, cfg.heads);
        ln_ = LayerNorm<T>(ps, "txt.ln_f", d);
        proj_ = Linear<T>(ps, "txt.proj", d, d);
    }

    // -> [D], unit norm
    Tensor<T> operator()(const TokenSequence& tokens) const {
        require(!tokens.ids.empty(), "encode_text: empty token sequence rejected");
        require(tokens.ids.size() <= static_cast<size_t>(cfg_.text_len),
                "encode_text: sequence longer than text_len");
        for (int id : tokens.ids)
            require(0 <= id && id < cfg_.text_vocab, "encode_text: token id out of vocab");
        const int n = static_cast<int>(tokens.ids.size());
        Tensor<T> x = add(gather_rows(tok_embed_, tokens.ids), slice_rows(pos_embed_, 0, n));
        for (const auto& blk : blocks_) x = blk(x);
        // Last-token pooling: mean pooling of (token + position) embeddings is
        // permutation-invariant before attention, which erases word order; the
        // final position reads the whole sequence through attention instead.
        Tensor<T> pooled = slice_rows(ln_(x), n - 1, n);
        Tensor<T> out = proj_(pooled);
        return reshape(l2_normalize_rows(out), {cfg_.width});
    }

  private:
    EncoderConfig cfg_;
    Tensor<T> tok_embed_, pos_embed_;
    std::vector<TransformerBlock<T>> blocks_;
    LayerNorm<T> ln_;
    Linear<T> proj_;
};

}  // namespace mtvl

#pragma once

// Region-text grounding (soft-region prompter + sigmoid loss) and dense depth
// supervision (DPT-style head, scale/shift-invariant trimmed loss, multi-scale
// gradient matching).

#include "mtvl/encoders.hpp"
#include "mtvl/objective_vl.hpp"

namespace mtvl {

// Normalized [0,1] image coordinates.
struct RegionBox {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    bool valid() const {
        return x0 >= 0 && y0 >= 0 && x1 <= 1 && y1 <= 1 && x0 < x1 && y0 < y1;
    }
};

// Query token attends over pre-pool patch features, conditioned on a
// sinusoidal encoding of the box corners. Output is L2-normalized.
template <typename T>
class Prompter {
  public:
    static constexpr int kFreqs = 8;  // per coordinate, sin+cos each

    Prompter() = default;
    Prompter(ParamStore<T>& ps, const std::string& prefix, int dim, int heads) : dim_(dim) {
        query_ = ps.create_normal(prefix + ".query", {1, dim}, T(0.02));
        loc_proj_ = Linear<T>(ps, prefix + ".loc", 4 * 2 * kFreqs, dim);
        attn_ = MultiHeadAttention<T>(ps, prefix + ".attn", dim, heads);
        ln_ = LayerNorm<T>(ps, prefix + ".ln", dim);
        mlp_ = Mlp<T>(ps, prefix + ".mlp", dim, dim * 4);
        out_proj_ = Linear<T>(ps, prefix + ".out", dim, dim);
    }

    // prepool: [N, D] features tapped before the final norm and pooling.
    Tensor<T> operator()(const Tensor<T>& prepool, const RegionBox& box) const {
        require(box.valid(), "prompter: degenerate box rejected");
        require(prepool.ndim() == 2 && prepool.dim(1) == dim_,
                "prompter: feature shape mismatch " + shape_str(prepool.shape()));
        Tensor<T> q = add(query_, loc_proj_(location_encoding(box)));
        Tensor<T> y = add(q, attn_(q, prepool));
        y = add(y, mlp_(ln_(y)));
        Tensor<T> out = out_proj_(y);
        return reshape(l2_normalize_rows(out), {dim_});
    }

  private:
    Tensor<T> location_encoding(const RegionBox& box) const {
        const double coords[4] = {box.x0, box.y0, box.x1, box.y1};
        std::vector<T> enc;
        enc.reserve(4 * 2 * kFreqs);
        for (double c : coords)
            for (int f = 0; f < kFreqs; ++f) {
                double w = std::pow(2.0, f) * 3.14159265358979323846;
                enc.push_back(static_cast<T>(std::sin(w * c)));
                enc.push_back(static_cast<T>(std::cos(w * c)));
            }
        return Tensor<T>({1, 4 * 2 * kFreqs}, std::move(enc));
    }

    int dim_ = 0;
    Tensor<T> query_;
    Linear<T> loc_proj_;
    MultiHeadAttention<T> attn_;
    LayerNorm<T> ln_;
    Mlp<T> mlp_;
    Linear<T> out_proj_;
};

// Region embeddings vs region-text embeddings, diagonal matching. Shares the
// sigmoid loss code path with the VL objective.
template <typename T>
Tensor<T> grounding_loss(const Tensor<T>& region_emb, const Tensor<T>& region_txt,
                         const VLParams<T>& params, bool* empty_flag = nullptr) {
    if (empty_flag) *empty_flag = false;
    if (region_emb.size() == 0 || region_emb.dim(0) == 0) {
        if (empty_flag) *empty_flag = true;
        return Tensor<T>::scalar(T(0));
    }
    return sigmoid_contrastive_loss(region_emb, region_txt, params,
                                    MatchMatrix::diagonal(region_emb.dim(0)));
}

// ---------------------------------------------------------------------------
// depth head
// ---------------------------------------------------------------------------

struct DepthHeadConfig {
    std::vector<int> tap_layers = {2, 3, 4, 6};  // must equal the encoder taps
    int fusion_width = 64;
    int output_stride = 1;  // final prediction computed at H/stride, then upsampled
};

// DPT-lite: project each tap to a 2-d feature grid, fuse with two 3x3 conv
// stages per tap, decode by nearest-upsampling + convolution to one channel
// at full input resolution.
template <typename T>
class DepthHead {
  public:
    DepthHead() = default;
    DepthHead(ParamStore<T>& ps, const std::string& prefix, const EncoderConfig& enc,
              const DepthHeadConfig& cfg)
        : cfg_(cfg), grid_(enc.grid()), image_size_(enc.image_size) {
        require(cfg.tap_layers == enc.tap_layers, "DepthHead: tap layers must match encoder taps");
        require(cfg.output_stride >= 1 && image_size_ % cfg.output_stride == 0,
                "DepthHead: bad output stride");
        const int c = cfg.fusion_width;
        for (size_t i = 0; i < cfg.tap_layers.size(); ++i) {
            std::string p = prefix + ".tap" + std::to_string(cfg.tap_layers[i]);
            tap_proj_.emplace_back(ps, p + ".proj", enc.width, c);
            fuse1_.push_back(make_conv(ps, p + ".fuse1", c, c));
            fuse2_.push_back(make_conv(ps, p + ".fuse2", c, c));
        }
        int size = grid_;
        const int target = image_size_ / cfg.output_stride;
        int stage = 0;
        while (size < target) {
            up_convs_.push_back(make_conv(ps, prefix + ".up" + std::to_string(stage++), c, c));
            size *= 2;
        }
        require(size == target, "DepthHead: output stride unreachable from patch grid");
        head_ = make_conv(ps, prefix + ".head", c, 1);
    }

    // taps from the encoder output; every configured tap must be present.
    Tensor<T> operator()(const std::map<int, Tensor<T>>& taps) const {
        std::vector<Tensor<T>> grids;
        for (size_t i = 0; i < cfg_.tap_layers.size(); ++i) {
            auto it = taps.find(cfg_.tap_layers[i]);
            if (it == taps.end())
                fail("predict_depth: missing tap layer " + std::to_string(cfg_.tap_layers[i]));
            grids.push_back(to_grid(tap_proj_[i](it->second)));
        }
        // Deepest tap first, fusing shallower taps in.
        Tensor<T> x = grids.back();
        for (int i = static_cast<int>(grids.size()) - 1; i >= 0; --i) {
            Tensor<T> merged = (i == static_cast<int>(grids.size()) - 1) ? x : add(x, grids[static_cast<size_t>(i)]);
            x = apply_conv(fuse2_[static_cast<size_t>(i)], gelu(apply_conv(fuse1_[static_cast<size_t>(i)], merged)));
        }
        for (const auto& cw : up_convs_) x = gelu(apply_conv(cw, upsample_nearest2d(x, 2)));
        Tensor<T> d = apply_conv(head_, x);  // [1, h, w]
        if (cfg_.output_stride > 1) d = upsample_nearest2d(d, cfg_.output_stride);
        return reshape(d, {image_size_, image_size_});
    }

  private:
    struct ConvW {
        Tensor<T> w, b;
    };

    ConvW make_conv(ParamStore<T>& ps, const std::string& name, int cin, int cout) {
        ConvW c;
        c.w = ps.create_normal(name + ".w", {cout, cin, 3, 3}, T(1) / std::sqrt(static_cast<T>(cin * 9)));
        c.b = ps.create_zeros(name + ".b", {cout});
        return c;
    }

    static Tensor<T> apply_conv(const ConvW& c, const Tensor<T>& x) {
        return conv2d_3x3(x, c.w, c.b);
    }

    // [N, C] tokens -> [C, g, g]
    Tensor<T> to_grid(const Tensor<T>& tokens) const {
        return reshape(transpose2d(tokens), {cfg_.fusion_width, grid_, grid_});
    }

    DepthHeadConfig cfg_;
    int grid_ = 0;
    int image_size_ = 0;
    std::vector<Linear<T>> tap_proj_;
    std::vector<ConvW> fuse1_, fuse2_, up_convs_;
    ConvW head_;
};

// ---------------------------------------------------------------------------
// depth losses
// ---------------------------------------------------------------------------

// (d - median(d)) / mad(d); the statistics are gradient-stopped, so gradients
// flow through the numerator only.
template <typename T>
Tensor<T> normalize_depth(const Tensor<T>& d) {
    T t = median_value(d);
    T s = mad_value(d);
    require(s > T(0), "normalize_depth: constant map rejected as degenerate");
    return div(sub(d, t), s);
}

// Trimmed scale- and shift-invariant loss. Residuals are sorted ascending and
// only the smallest floor((1 - trim) * HW) contribute; the trim mask is
// recomputed per call and gradient-stopped.
template <typename T>
Tensor<T> ssi_trim_loss(const Tensor<T>& pred, const Tensor<T>& target, double trim = 0.10) {
    require_same_shape(pred.shape(), target.shape(), "ssi_trim_loss");
    require(trim >= 0.0 && trim < 1.0, "ssi_trim_loss: trim fraction out of range");
    const int64_t hw = pred.size();
    Tensor<T> r = abs(sub(normalize_depth(target), normalize_depth(pred)));
    const int64_t keep = static_cast<int64_t>(std::floor((1.0 - trim) * static_cast<double>(hw)));
    Tensor<T> kept = (keep == hw) ? r : mul(r, topk_mask(r, keep, /*largest=*/false));
    return div(sum(kept), T(2) * static_cast<T>(hw));
}

// Multi-scale gradient matching on median/MAD-normalized maps: stride-2
// subsampling per scale, finite differences on the residual, mean per
// derivative map, summed over scales.
template <typename T>
Tensor<T> gradient_matching_loss(const Tensor<T>& pred, const Tensor<T>& target, int scales = 4) {
    require_same_shape(pred.shape(), target.shape(), "gradient_matching_loss");
    require(pred.ndim() == 2, "gradient_matching_loss: expects [H, W]");
    const int h = pred.dim(0), w = pred.dim(1);
    require(scales >= 1, "gradient_matching_loss: scales must be >= 1");
    require(h >= (1 << scales) && w >= (1 << scales),
            "gradient_matching_loss: map too small for " + std::to_string(scales) + " scales");
    Tensor<T> resid = sub(normalize_depth(target), normalize_depth(pred));
    Tensor<T> total = Tensor<T>::scalar(T(0));
    for (int k = 0; k < scales; ++k) {
        Tensor<T> rk = (k == 0) ? resid : subsample2d(resid, 1 << k);
        const int rh = rk.dim(0), rw = rk.dim(1);
        Tensor<T> dx = sub(slice_cols(rk, 1, rw), slice_cols(rk, 0, rw - 1));
        Tensor<T> dy = sub(slice_rows(rk, 1, rh), slice_rows(rk, 0, rh - 1));
        total = add(total, add(mean(abs(dx)), mean(abs(dy))));
    }
    return total;
}

// L_depth = L_ssitrim + 2 L_gm
template <typename T>
Tensor<T> depth_loss(const Tensor<T>& ssitrim, const Tensor<T>& gm) {
    return add(ssitrim, mul(gm, T(2)));
}

// L_dense = L_ground + L_depth
template <typename T>
Tensor<T> dense_total(const Tensor<T>& ground, const Tensor<T>& depth) {
    return add(ground, depth);
}

}  // namespace mtvl

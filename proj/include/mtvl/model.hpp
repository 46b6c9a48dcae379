#pragma once

// Student model bundle (shared encoder, text encoder, task heads) and the EMA
// teacher snapshot.

#include "mtvl/checkpoint.hpp"
#include "mtvl/objective_dense.hpp"
#include "mtvl/objective_ssl.hpp"
#include "mtvl/objective_vl.hpp"

namespace mtvl {

struct ModelConfig {
    EncoderConfig enc;
    int prototypes = 256;  // toy K; the reference setting is scale-bound
    int head_hidden = 128;
    int head_bottleneck = 64;
    DepthHeadConfig depth;
    TeacherSchedule sched;
    int local_crops = 6;
    double mask_ratio = 0.5;

    void validate() const {
        enc.validate();
        require(prototypes >= 2, "ModelConfig: prototypes must be >= 2");
        require(depth.tap_layers == enc.tap_layers, "ModelConfig: depth taps must equal encoder taps");
    }
};

template <typename T>
struct Model {
    ModelConfig cfg;
    ParamStore<T> ps;
    VisionTransformer<T> vit;
    AttentivePool<T> pool;
    TextEncoder<T> txt;
    ProjectionHead<T> distill_head, masked_head;
    Prompter<T> prompter;
    DepthHead<T> depth_head;
    VLParams<T> vl, ground;

    Model(const ModelConfig& config, uint64_t seed) : cfg(config), ps(seed) {
        cfg.validate();
        const int d = cfg.enc.width;
        vit = VisionTransformer<T>(ps, cfg.enc);
        pool = AttentivePool<T>(ps, "pool", d, cfg.enc.heads);
        txt = TextEncoder<T>(ps, cfg.enc);
        distill_head = ProjectionHead<T>(ps, "head.distill", d, cfg.head_hidden, cfg.head_bottleneck,
                                         cfg.prototypes);
        masked_head = ProjectionHead<T>(ps, "head.masked", d, cfg.head_hidden, cfg.head_bottleneck,
                                        cfg.prototypes);
        prompter = Prompter<T>(ps, "prompter", d, cfg.enc.heads);
        depth_head = DepthHead<T>(ps, "depth", cfg.enc, cfg.depth);
        vl = VLParams<T>(ps, "vl");
        ground = VLParams<T>(ps, "ground");
    }
};

// Gradient-free copy of the student's shared encoder, pooling and SSL heads,
// plus the centering state. Updated by EMA between optimizer steps.
template <typename T>
struct Teacher {
    ParamStore<T> ps;
    VisionTransformer<T> vit;
    AttentivePool<T> pool;
    ProjectionHead<T> distill_head, masked_head;
    std::vector<T> center;

    explicit Teacher(const Model<T>& student) : ps(0) {
        const auto& cfg = student.cfg;
        const int d = cfg.enc.width;
        vit = VisionTransformer<T>(ps, cfg.enc);
        pool = AttentivePool<T>(ps, "pool", d, cfg.enc.heads);
        distill_head = ProjectionHead<T>(ps, "head.distill", d, cfg.head_hidden,
                                         cfg.head_bottleneck, cfg.prototypes);
        masked_head = ProjectionHead<T>(ps, "head.masked", d, cfg.head_hidden, cfg.head_bottleneck,
                                        cfg.prototypes);
        center.assign(static_cast<size_t>(cfg.prototypes), T(0));
        // Start from the student's weights (EMA with zero history).
        ema_update(ps, student.ps, T(0));
        freeze();
    }

    // Teacher parameters never receive gradients.
    void freeze() {
        for (auto& p : ps.all()) p.node()->requires_grad = false;
    }
};

}  // namespace mtvl

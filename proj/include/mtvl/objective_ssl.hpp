#pragma once

// Teacher-student self-supervision: local-to-global distillation, masked
// feature prediction, KoLeo regularization, EMA and centering updates.

#include "mtvl/nn.hpp"

namespace mtvl {

// 3-layer MLP with L2 normalization, then a weight-normalized projection to
// K prototypes. Distillation and masked heads share this architecture but
// never parameters.
template <typename T>
class ProjectionHead {
  public:
    ProjectionHead() = default;
    ProjectionHead(ParamStore<T>& ps, const std::string& prefix, int in_dim, int hidden,
                   int bottleneck, int prototypes)
        : fc1_(ps, prefix + ".fc1", in_dim, hidden),
          fc2_(ps, prefix + ".fc2", hidden, hidden),
          fc3_(ps, prefix + ".fc3", hidden, bottleneck),
          proj_(ps, prefix + ".proj", bottleneck, prototypes),
          in_dim_(in_dim),
          prototypes_(prototypes) {}

    int prototypes() const { return prototypes_; }

    // features: [P, in_dim] -> raw prototype scores [P, K]
    Tensor<T> operator()(const Tensor<T>& features) const {
        require(features.ndim() == 2 && features.dim(1) == in_dim_,
                "prototype_scores: feature dim mismatch, got " + shape_str(features.shape()));
        Tensor<T> h = gelu(fc2_(gelu(fc1_(features))));
        Tensor<T> z = l2_normalize_rows(fc3_(h));
        return proj_(z);
    }

  private:
    Linear<T> fc1_, fc2_, fc3_;
    WeightNormLinear<T> proj_;
    int in_dim_ = 0;
    int prototypes_ = 0;
};

// Centering/sharpening hyperparameters and the EMA momenta.
struct TeacherSchedule {
    double ema_momentum = 0.994;
    double center_momentum = 0.9;
    double tau_student = 0.1;
    double tau_teacher_start = 0.04;
    double tau_teacher_end = 0.07;
    int tau_warmup_steps = 1000;
};

// Linear warmup of the teacher temperature, constant after the horizon.
inline double teacher_temperature(int64_t step, const TeacherSchedule& sched) {
    require(step >= 0, "teacher_temperature: negative step");
    if (sched.tau_warmup_steps <= 0 || step >= sched.tau_warmup_steps) return sched.tau_teacher_end;
    double f = static_cast<double>(step) / static_cast<double>(sched.tau_warmup_steps);
    return sched.tau_teacher_start + f * (sched.tau_teacher_end - sched.tau_teacher_start);
}

namespace detail {

// Mean over rows of H(p_t, softmax(p_s / tau_s)). Teacher rows must already
// be probabilities and carry no gradient graph.
template <typename T>
Tensor<T> score_cross_entropy(const Tensor<T>& student_scores, const Tensor<T>& teacher_probs,
                              T tau_s) {
    require_same_shape(student_scores.shape(), teacher_probs.shape(), "score_cross_entropy");
    require(!teacher_probs.requires_grad(), "score_cross_entropy: teacher targets must be gradient-stopped");
    Tensor<T> log_ps = log_softmax_rows(div(student_scores, tau_s));
    Tensor<T> per_pos = neg(sum_rows(mul(teacher_probs, log_ps)));
    return mean(per_pos);
}

// softmax((scores - center) / tau_t) on detached values.
template <typename T>
Tensor<T> teacher_probabilities(const Tensor<T>& teacher_scores, const std::vector<T>& center,
                                T tau_t) {
    require(tau_t > T(0), "teacher_probabilities: temperature must be positive");
    const int64_t k = last_dim(teacher_scores.shape());
    require(static_cast<int64_t>(center.size()) == k, "teacher_probabilities: center dim mismatch");
    Tensor<T> centered =
        sub(teacher_scores.detach(), Tensor<T>({static_cast<int>(k)},
                                               std::vector<T>(center.begin(), center.end())));
    return softmax_rows(div(centered, tau_t));
}

}  // namespace detail

// student_local_scores: [B*M, K] (M crops per image, image-major order);
// teacher_global_scores: [B, K], gradient-stopped by the caller or detached here.
template <typename T>
Tensor<T> distillation_loss(const Tensor<T>& student_local_scores,
                            const Tensor<T>& teacher_global_scores, int crops_per_image,
                            const std::vector<T>& center, T tau_t, T tau_s) {
    require(tau_t > T(0) && tau_s > T(0), "distillation_loss: temperatures must be positive");
    const int b = teacher_global_scores.dim(0);
    const int k = teacher_global_scores.dim(1);
    require(student_local_scores.dim(0) == b * crops_per_image && student_local_scores.dim(1) == k,
            "distillation_loss: score shape mismatch");
    Tensor<T> pt = detail::teacher_probabilities(teacher_global_scores, center, tau_t);
    // Repeat each teacher row across that image's crops.
    std::vector<T> rep(static_cast<size_t>(b * crops_per_image * k));
    auto pv = pt.value();
    for (int i = 0; i < b; ++i)
        for (int m = 0; m < crops_per_image; ++m)
            std::copy_n(pv.data() + static_cast<size_t>(i) * k, k,
                        rep.data() + (static_cast<size_t>(i) * crops_per_image + m) * k);
    Tensor<T> targets({b * crops_per_image, k}, std::move(rep));
    return detail::score_cross_entropy(student_local_scores, targets, tau_s);
}

// student/teacher scores at exactly the masked positions: [P, K] each.
// Empty masked sets contribute zero and raise the flag.
template <typename T>
Tensor<T> masked_prediction_loss(const Tensor<T>& student_scores, const Tensor<T>& teacher_scores,
                                 const std::vector<T>& center, T tau_t, T tau_s,
                                 bool* empty_flag = nullptr) {
    require(tau_t > T(0) && tau_s > T(0), "masked_prediction_loss: temperatures must be positive");
    if (empty_flag) *empty_flag = false;
    if (student_scores.size() == 0 || student_scores.dim(0) == 0) {
        if (empty_flag) *empty_flag = true;
        return Tensor<T>::scalar(T(0));
    }
    require_same_shape(student_scores.shape(), teacher_scores.shape(), "masked_prediction_loss");
    Tensor<T> pt = detail::teacher_probabilities(teacher_scores, center, tau_t);
    return detail::score_cross_entropy(student_scores, pt, tau_s);
}

// -(1/B) sum_i log(min_{j != i} || x_i - x_j ||) over L2-normalized rows,
// distance floored at 1e-8. Nearest-neighbor selection is gradient-stopped;
// gradients flow through the selected pair's distance.
template <typename T>
Tensor<T> koleo_loss(const Tensor<T>& embeddings) {
    require(embeddings.ndim() == 2, "koleo_loss: expects [B, D]");
    const int b = embeddings.dim(0);
    require(b >= 2, "koleo_loss: needs at least two embeddings");
    Tensor<T> x = l2_normalize_rows(embeddings);
    auto xv = x.value();
    const int d = x.dim(1);

    std::vector<Tensor<T>> log_dists;
    for (int i = 0; i < b; ++i) {
        int best = -1;
        T best_sq = T(0);
        for (int j = 0; j < b; ++j) {
            if (j == i) continue;
            T s = T(0);
            for (int c = 0; c < d; ++c) {
                T diff = xv[static_cast<size_t>(i * d + c)] - xv[static_cast<size_t>(j * d + c)];
                s += diff * diff;
            }
            if (best < 0 || s < best_sq) {
                best = j;
                best_sq = s;
            }
        }
        Tensor<T> diff = sub(slice_rows(x, i, i + 1), slice_rows(x, best, best + 1));
        Tensor<T> dist = sqrt(clamp_min(sum(square(diff)), T(1e-16)));
        log_dists.push_back(log(clamp_min(dist, T(1e-8))));
    }
    Tensor<T> total = log_dists[0];
    for (size_t i = 1; i < log_dists.size(); ++i) total = add(total, log_dists[i]);
    return neg(div(total, static_cast<T>(b)));
}

// L_SSL = L_distill + 2 L_mask + 0.1 L_koleo
template <typename T>
Tensor<T> ssl_total(const Tensor<T>& distill, const Tensor<T>& mask, const Tensor<T>& koleo,
                    T lambda_mask = T(2), T lambda_koleo = T(0.1)) {
    require(std::isfinite(static_cast<double>(distill.item())) &&
                std::isfinite(static_cast<double>(mask.item())) &&
                std::isfinite(static_cast<double>(koleo.item())),
            "ssl_total: non-finite component");
    return add(distill, add(mul(mask, lambda_mask), mul(koleo, lambda_koleo)));
}

// teacher <- m * teacher + (1 - m) * student, parameter-wise, no graph.
template <typename T>
void ema_update(ParamStore<T>& teacher, const ParamStore<T>& student, T m) {
    require(m >= T(0) && m <= T(1), "ema_update: momentum out of [0, 1]");
    for (auto& tp : teacher.all()) {
        require(student.contains(tp.name()), "ema_update: parameter tree mismatch at " + tp.name());
        const auto& sp = student.at(tp.name());
        require(sp.shape() == tp.shape(), "ema_update: shape mismatch at " + tp.name());
        auto tv = tp.mutable_value();
        auto sv = sp.value();
        for (size_t i = 0; i < tv.size(); ++i) tv[i] = m * tv[i] + (T(1) - m) * sv[i];
    }
}

// c <- momentum * c + (1 - momentum) * batch_mean
template <typename T>
void update_center(std::vector<T>& center, std::span<const T> batch_mean, T momentum) {
    require(center.size() == batch_mean.size(), "update_center: dim mismatch");
    for (size_t i = 0; i < center.size(); ++i)
        center[i] = momentum * center[i] + (T(1) - momentum) * batch_mean[i];
}

}  // namespace mtvl

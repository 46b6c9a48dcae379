#pragma once

// Joint optimization over the uniform-weighted total loss: simulated lockstep
// data parallelism, AdamW, EMA/center maintenance, checkpointing, metrics log.

#include <functional>
#include <iomanip>
#include <optional>

#include "mtvl/data.hpp"
#include "mtvl/model.hpp"

namespace mtvl {

struct TaskFlags {
    bool vl = true, ssl = true, ground = true, depth = true;

    bool any() const { return vl || ssl || ground || depth; }
    std::string str() const {
        std::string s;
        auto app = [&](bool on, const char* n) {
            if (on) s += (s.empty() ? "" : ",") + std::string(n);
        };
        app(vl, "vl");
        app(ssl, "ssl");
        app(ground, "ground");
        app(depth, "depth");
        return s;
    }

    static TaskFlags parse(const std::string& spec) {
        TaskFlags t{false, false, false, false};
        std::string cur;
        std::istringstream is(spec);
        while (std::getline(is, cur, ',')) {
            if (cur == "vl") t.vl = true;
            else if (cur == "ssl") t.ssl = true;
            else if (cur == "ground") t.ground = true;
            else if (cur == "depth") t.depth = true;
            else if (!cur.empty()) fail("unknown task '" + cur + "' (expected vl,ssl,ground,depth)");
        }
        require(t.any(), "task list enables nothing");
        return t;
    }
};

struct TrainConfig {
    TaskFlags tasks;
    double lr = 5e-4;
    int64_t warmup_steps = 100;
    bool cosine = false;  // optional decay after warmup, off by default
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
    int batch_per_worker = 8;
    int workers = 1;
    int64_t steps = 200;
    uint64_t seed = 0;
    std::string precision = "f32";
    ModelConfig model;
    int64_t debug_inject_nan_step = -1;  // test hook: poison the loss at this step

    void validate() const {
        require(tasks.any(), "TrainConfig: at least one task must be enabled");
        require(lr > 0, "TrainConfig: lr must be positive");
        require(batch_per_worker >= 1 && workers >= 1, "TrainConfig: bad batch/worker sizes");
        require(steps >= 1, "TrainConfig: steps must be >= 1");
        require(precision == "f32" || precision == "f64", "TrainConfig: precision must be f32 or f64");
        model.validate();
    }
};

// Linear warmup to the peak, constant after (cosine decay only when asked).
inline double lr_schedule(int64_t step, const TrainConfig& cfg) {
    require(step >= 0, "lr_schedule: negative step");
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (!cfg.cosine) return cfg.lr;
    double t = static_cast<double>(step - cfg.warmup_steps) /
               static_cast<double>(std::max<int64_t>(1, cfg.steps - cfg.warmup_steps));
    t = std::clamp(t, 0.0, 1.0);
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Decoupled-decay Adam with bias correction; decay defaults to zero, which
// reduces it to the plain adaptive update. Parameters with no gradient this
// step are treated as zero-gradient (their moments still decay).
template <typename T>
class AdamW {
  public:
    AdamW() = default;
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

    int64_t steps_taken() const { return t_; }

    void step(ParamStore<T>& params, const GradientMap<T>& grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (auto& p : params.all()) {
            auto& st = state_[p.name()];
            auto val = p.mutable_value();
            if (st.m.empty()) {
                st.m.assign(val.size(), T(0));
                st.v.assign(val.size(), T(0));
            }
            require(st.m.size() == val.size(), "AdamW: state shape mismatch for " + p.name());
            const Tensor<T>* g = grads.contains(p.name()) ? &grads.at(p.name()) : nullptr;
            if (g) require(g->size() == static_cast<int64_t>(val.size()),
                           "AdamW: gradient shape mismatch for " + p.name());
            for (size_t i = 0; i < val.size(); ++i) {
                double gi = g ? static_cast<double>(g->at(static_cast<int64_t>(i))) : 0.0;
                double m = b1_ * static_cast<double>(st.m[i]) + (1.0 - b1_) * gi;
                double v = b2_ * static_cast<double>(st.v[i]) + (1.0 - b2_) * gi * gi;
                st.m[i] = static_cast<T>(m);
                st.v[i] = static_cast<T>(v);
                double upd = (m / bc1) / (std::sqrt(v / bc2) + eps_);
                double x = static_cast<double>(val[i]);
                val[i] = static_cast<T>(x - lr * (upd + wd_ * x));
            }
        }
    }

    // Checkpoint plumbing.
    template <typename Fn>
    void for_each_state(Fn&& fn) const {
        for (const auto& [name, st] : state_) fn(name, st.m, st.v);
    }
    void set_state(const std::string& name, std::vector<T> m, std::vector<T> v) {
        state_[name] = {std::move(m), std::move(v)};
    }
    void set_steps_taken(int64_t t) { t_ = t; }

  private:
    struct State {
        std::vector<T> m, v;
    };
    double b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8, wd_ = 0.0;
    int64_t t_ = 0;
    std::unordered_map<std::string, State> state_;
};

struct LossReport {
    int64_t step = 0;
    double lr = 0, tau_t = 0;
    double vl = 0, distill = 0, mask = 0, koleo = 0, ssl = 0, ground = 0, depth = 0;
    double total = 0;
    double grad_norm = 0;
    double teacher_entropy = 0;  // mean entropy of teacher target rows
    bool rolled_back = false;
    bool ground_without_vl = false;  // grounding is training the text encoder alone
    bool ground_empty = false;       // no usable regions this step

    std::string line() const {
        std::ostringstream os;
        os << std::setprecision(17);
        os << "step=" << step << " lr=" << lr << " tau_t=" << tau_t << " vl=" << vl
           << " distill=" << distill << " mask=" << mask << " koleo=" << koleo << " ssl=" << ssl
           << " ground=" << ground << " depth=" << depth << " total=" << total
           << " grad_norm=" << grad_norm << " teacher_entropy=" << teacher_entropy
           << " rolled_back=" << (rolled_back ? 1 : 0);
        if (ground_without_vl) os << " ground_without_vl=1";
        if (ground_empty) os << " ground_empty=1";
        return os.str();
    }
};

template <typename T>
class Trainer {
  public:
    Trainer(const TrainConfig& cfg, std::vector<Sample> dataset)
        : cfg_(cfg),
          data_(std::move(dataset)),
          model_(cfg.model, cfg.seed),
          teacher_(model_),
          opt_(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay) {
        cfg_.validate();
        require(!data_.empty(), "Trainer: empty dataset");
        for (const auto& s : data_) s.validate();
    }

    const TrainConfig& config() const { return cfg_; }
    Model<T>& model() { return model_; }
    Teacher<T>& teacher() { return teacher_; }
    int64_t step() const { return step_; }
    bool centering_enabled = true;  // test hook for the collapse sentinel

    // One lockstep multi-worker step over pre-split per-worker batches.
    LossReport train_step(const StepBatches& batches) {
        require(static_cast<int>(batches.size()) == cfg_.workers,
                "train_step: batch split does not match worker count");
        const double tau_t = teacher_temperature(step_, cfg_.model.sched);
        const double lr = lr_schedule(step_, cfg_);
        LossReport rep;
        rep.step = step_;
        rep.lr = lr;
        rep.tau_t = tau_t;
        rep.ground_without_vl = cfg_.tasks.ground && !cfg_.tasks.vl;

        // Phase 1: per-worker forwards over immutable parameters. Workers run
        // in deterministic order; the cross-worker gathers below are graph
        // concatenations, so gradient slices route back to their owners and
        // the summed loss plays the role of the mean all-reduce.
        std::vector<WorkerOut> outs;
        int64_t total_rows = 0;
        for (int w = 0; w < cfg_.workers; ++w) {
            outs.push_back(forward_worker(batches[static_cast<size_t>(w)]));
            total_rows += outs.back().rows;
        }
        require(total_rows >= 1, "train_step: empty global batch");

        // Phase 2: joint loss assembly (the barrier point).
        Tensor<T> total = Tensor<T>::scalar(T(0));
        const T inv_w = T(1) / static_cast<T>(cfg_.workers);

        if (cfg_.tasks.vl) {
            std::vector<Tensor<T>> txt_shards;
            std::vector<const std::vector<int>*> cap_global;
            for (auto& o : outs) {
                txt_shards.push_back(o.txt_emb);
                for (const auto& c : o.caption_ids) cap_global.push_back(&c);
            }
            Tensor<T> txt_global = gather_text_embeddings(txt_shards);
            Tensor<T> vl_sum = Tensor<T>::scalar(T(0));
            int offset = 0;
            for (auto& o : outs) {
                // A pair matches when the texts are equal, not just on the
                // diagonal: duplicate captions in a batch are the same text
                // and must not be pushed away as negatives.
                MatchMatrix match;
                match.rows = o.rows;
                match.cols = static_cast<int>(total_rows);
                match.y.assign(static_cast<size_t>(match.rows) * match.cols, -1);
                for (int i = 0; i < o.rows; ++i)
                    for (int j = 0; j < match.cols; ++j)
                        if (*cap_global[static_cast<size_t>(offset + i)] ==
                            *cap_global[static_cast<size_t>(j)])
                            match.y[static_cast<size_t>(i) * match.cols + j] = 1;
                vl_sum = add(vl_sum, sigmoid_contrastive_loss(o.img_emb, txt_global, model_.vl, match));
                offset += o.rows;
            }
            Tensor<T> vl = mul(vl_sum, inv_w);
            rep.vl = static_cast<double>(vl.item());
            total = add(total, vl);
        }

        Tensor<T> teacher_scores_global;  // [B, K], for the center update
        if (cfg_.tasks.ssl) {
            std::vector<Tensor<T>> tg;
            for (auto& o : outs) tg.push_back(o.teacher_distill);
            teacher_scores_global = concat_rows(tg);
            rep.teacher_entropy = teacher_entropy(teacher_scores_global, tau_t);

            Tensor<T> distill_sum = Tensor<T>::scalar(T(0));
            Tensor<T> mask_sum = Tensor<T>::scalar(T(0));
            for (auto& o : outs) {
                distill_sum = add(distill_sum,
                                  distillation_loss(o.distill_student, o.teacher_distill,
                                                    cfg_.model.local_crops, center(),
                                                    static_cast<T>(tau_t),
                                                    static_cast<T>(cfg_.model.sched.tau_student)));
                Tensor<T> sm = concat_rows(o.masked_student);
                Tensor<T> tm = concat_rows(o.masked_teacher);
                mask_sum = add(mask_sum, masked_prediction_loss(sm, tm, center(),
                                                                static_cast<T>(tau_t),
                                                                static_cast<T>(cfg_.model.sched.tau_student)));
            }
            Tensor<T> distill = mul(distill_sum, inv_w);
            Tensor<T> maskl = mul(mask_sum, inv_w);
            // KoLeo over the gathered global embeddings, once per step.
            std::vector<Tensor<T>> emb_shards;
            for (auto& o : outs) emb_shards.push_back(o.img_emb);
            Tensor<T> koleo = koleo_loss(concat_rows(emb_shards));
            Tensor<T> ssl = ssl_total(distill, maskl, koleo);
            rep.distill = static_cast<double>(distill.item());
            rep.mask = static_cast<double>(maskl.item());
            rep.koleo = static_cast<double>(koleo.item());
            rep.ssl = static_cast<double>(ssl.item());
            total = add(total, ssl);
        }

        if (cfg_.tasks.ground) {
            // Regions pooled across the whole batch into one problem so the
            // loss is identical for any worker split.
            std::vector<Tensor<T>> remb, rtxt;
            for (auto& o : outs) {
                remb.insert(remb.end(), o.region_emb.begin(), o.region_emb.end());
                rtxt.insert(rtxt.end(), o.region_txt.begin(), o.region_txt.end());
            }
            if (remb.empty()) {
                rep.ground_empty = true;
            } else {
                std::vector<const std::vector<int>*> rcap;
                for (auto& o : outs)
                    for (const auto& c : o.region_text_ids) rcap.push_back(&c);
                const int rn = static_cast<int>(rcap.size());
                MatchMatrix rmatch;
                rmatch.rows = rmatch.cols = rn;
                rmatch.y.assign(static_cast<size_t>(rn) * rn, -1);
                for (int i = 0; i < rn; ++i)
                    for (int j = 0; j < rn; ++j)
                        if (*rcap[static_cast<size_t>(i)] == *rcap[static_cast<size_t>(j)])
                            rmatch.y[static_cast<size_t>(i) * rn + j] = 1;
                Tensor<T> ground = sigmoid_contrastive_loss(concat_rows(remb), concat_rows(rtxt),
                                                            model_.ground, rmatch);
                rep.ground = static_cast<double>(ground.item());
                total = add(total, ground);
            }
        }

        if (cfg_.tasks.depth) {
            Tensor<T> depth_sum = Tensor<T>::scalar(T(0));
            for (auto& o : outs) {
                require(o.depth_count > 0, "train_step: worker batch has no usable depth targets");
                depth_sum = add(depth_sum, div(o.depth_sum, static_cast<T>(o.depth_count)));
            }
            Tensor<T> dep = mul(depth_sum, inv_w);
            rep.depth = static_cast<double>(dep.item());
            total = add(total, dep);
        }

        if (step_ == cfg_.debug_inject_nan_step)
            total = mul(total, Tensor<T>::scalar(std::numeric_limits<T>::quiet_NaN()));

        rep.total = static_cast<double>(total.item());

        // Phase 3: single-writer updates, skipped wholesale if anything is
        // non-finite so parameters stay at their pre-step values.
        if (!std::isfinite(rep.total)) {
            rep.rolled_back = true;
            ++step_;
            return rep;
        }
        GradientMap<T> grads = backward(total);
        double sq = 0;
        bool finite = true;
        for (const auto& [name, g] : grads.grads) {
            for (int64_t i = 0; i < g.size(); ++i) {
                double x = static_cast<double>(g.at(i));
                if (!std::isfinite(x)) finite = false;
                sq += x * x;
            }
        }
        if (!finite) {
            rep.rolled_back = true;
            ++step_;
            return rep;
        }
        rep.grad_norm = std::sqrt(sq);

        opt_.step(model_.ps, grads, lr);
        ema_update(teacher_.ps, model_.ps, static_cast<T>(cfg_.model.sched.ema_momentum));
        if (cfg_.tasks.ssl && centering_enabled) {
            Tensor<T> batch_mean = mean_cols(teacher_scores_global);
            update_center(teacher_.center, batch_mean.value(),
                          static_cast<T>(cfg_.model.sched.center_momentum));
        }
        ++step_;
        return rep;
    }

    // Runs until cfg.steps, planning epochs deterministically from (seed,
    // epoch). Reports stream to the callback (typically the metrics log).
    void run(const std::function<void(const LossReport&)>& on_report = {}) {
        while (step_ < cfg_.steps) {
            auto plan = plan_epoch(static_cast<int>(data_.size()), cfg_.batch_per_worker,
                                   cfg_.workers, cfg_.seed, epoch_);
            while (cursor_ < static_cast<int64_t>(plan.size()) && step_ < cfg_.steps) {
                LossReport rep = train_step(plan[static_cast<size_t>(cursor_)]);
                ++cursor_;
                if (on_report) on_report(rep);
            }
            if (cursor_ >= static_cast<int64_t>(plan.size())) {
                ++epoch_;
                cursor_ = 0;
            }
        }
    }

    // ------------------------------------------------------------------
    // checkpointing: model + teacher + optimizer + loop counters
    // ------------------------------------------------------------------

    void save(const std::string& path) const {
        Checkpoint<T> ckpt;
        ckpt.add_params(model_.ps);
        ckpt.add_params(teacher_.ps, "teacher.");
        ckpt.add("teacher.center", {static_cast<int>(teacher_.center.size())},
                 std::span<const T>(teacher_.center.data(), teacher_.center.size()));
        opt_.for_each_state([&](const std::string& name, const std::vector<T>& m,
                                const std::vector<T>& v) {
            ckpt.add("opt.m." + name, {static_cast<int>(m.size())},
                     std::span<const T>(m.data(), m.size()));
            ckpt.add("opt.v." + name, {static_cast<int>(v.size())},
                     std::span<const T>(v.data(), v.size()));
        });
        ckpt.extra["step"] = step_;
        ckpt.extra["epoch"] = epoch_;
        ckpt.extra["cursor"] = cursor_;
        ckpt.extra["opt_steps"] = opt_.steps_taken();
        ckpt.extra["seed"] = cfg_.seed;
        ckpt.extra["tasks"] = cfg_.tasks.str();
        save_checkpoint(path, ckpt);
    }

    void load(const std::string& path) {
        Checkpoint<T> ckpt = load_checkpoint<T>(path);
        restore_params(model_.ps, ckpt);
        restore_params(teacher_.ps, ckpt, "teacher.");
        const auto* c = ckpt.find("teacher.center");
        require(c != nullptr, "Trainer::load: center missing from checkpoint");
        teacher_.center.assign(c->values.begin(), c->values.end());
        for (const auto& p : model_.ps.all()) {
            const auto* m = ckpt.find("opt.m." + p.name());
            const auto* v = ckpt.find("opt.v." + p.name());
            if (m && v) opt_.set_state(p.name(), m->values, v->values);
        }
        step_ = ckpt.extra.at("step").template get<int64_t>();
        epoch_ = ckpt.extra.at("epoch").template get<int64_t>();
        cursor_ = ckpt.extra.at("cursor").template get<int64_t>();
        opt_.set_steps_taken(ckpt.extra.at("opt_steps").template get<int64_t>());
    }

  private:
    const std::vector<T>& center() const { return teacher_.center; }

    double teacher_entropy(const Tensor<T>& teacher_scores, double tau_t) const {
        Tensor<T> probs = detail::teacher_probabilities(teacher_scores, teacher_.center,
                                                        static_cast<T>(tau_t));
        auto pv = probs.value();
        const int b = probs.dim(0), k = probs.dim(1);
        double h = 0;
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < k; ++j) {
                double p = static_cast<double>(pv[static_cast<size_t>(i) * k + j]);
                if (p > 0) h -= p * std::log(p);
            }
        return h / b;
    }

    struct WorkerOut {
        Tensor<T> img_emb;          // [b, D], normalized
        Tensor<T> txt_emb;          // [b, D]
        Tensor<T> distill_student;  // [b*M, K]
        Tensor<T> teacher_distill;  // [b, K]
        std::vector<Tensor<T>> masked_student, masked_teacher;  // [P_i, K] per sample
        std::vector<Tensor<T>> region_emb, region_txt;          // [1, D] rows
        std::vector<std::vector<int>> caption_ids;              // token ids per row
        std::vector<std::vector<int>> region_text_ids;          // token ids per region row
        Tensor<T> depth_sum;  // per-worker summed depth loss
        int depth_count = 0;
        int rows = 0;
    };

    WorkerOut forward_worker(const std::vector<int>& batch) {
        WorkerOut o;
        o.rows = static_cast<int>(batch.size());
        require(o.rows >= 1, "train_step: empty worker batch");
        const auto& enc = cfg_.model.enc;
        const int d = enc.width;

        std::vector<Tensor<T>> v_rows, t_rows, local_score_rows, teacher_rows;
        o.depth_sum = Tensor<T>::scalar(T(0));
        for (int idx : batch) {
            const Sample& s = data_[static_cast<size_t>(idx)];
            std::mt19937_64 rng(mix_seed(cfg_.seed, static_cast<uint64_t>(epoch_),
                                         static_cast<uint64_t>(idx)));
            ViewSet<T> views = make_views<T>(s, rng, enc, cfg_.model.local_crops,
                                             cfg_.model.mask_ratio);

            EncoderOutput<T> eg = model_.vit.encode(views.global_image);
            Tensor<T> v = reshape(model_.pool(eg.normed), {1, d});
            v_rows.push_back(v);

            if (cfg_.tasks.vl) {
                t_rows.push_back(reshape(model_.txt(s.caption), {1, d}));
                o.caption_ids.push_back(s.caption.ids);
            }

            if (cfg_.tasks.ssl) {
                EncoderOutput<T> tg = teacher_.vit.encode(views.global_image);
                teacher_rows.push_back(
                    teacher_.distill_head(reshape(teacher_.pool(tg.normed), {1, d})));
                for (const auto& crop : views.local_crops) {
                    EncoderOutput<T> el = model_.vit.encode(crop);
                    local_score_rows.push_back(
                        model_.distill_head(reshape(model_.pool(el.normed), {1, d})));
                }
                EncoderOutput<T> em = model_.vit.encode(views.global_image, &views.mask);
                std::vector<int> mids = views.mask.masked_indices();
                o.masked_student.push_back(gather_rows(model_.masked_head(em.normed), mids));
                o.masked_teacher.push_back(gather_rows(teacher_.masked_head(tg.normed), mids));
            }

            if (cfg_.tasks.ground) {
                auto regions = views.regions;
                if (regions.size() > 4) {
                    std::shuffle(regions.begin(), regions.end(), rng);
                    regions.resize(4);
                }
                for (const auto& r : regions) {
                    o.region_emb.push_back(reshape(model_.prompter(eg.prenorm, r.box), {1, d}));
                    o.region_txt.push_back(reshape(model_.txt(r.text), {1, d}));
                    o.region_text_ids.push_back(r.text.ids);
                }
            }

            if (cfg_.tasks.depth) {
                if (mad_value(views.global_depth) > T(0)) {
                    Tensor<T> pred = model_.depth_head(eg.taps);
                    Tensor<T> ssi = ssi_trim_loss(pred, views.global_depth);
                    Tensor<T> gm = gradient_matching_loss(pred, views.global_depth);
                    o.depth_sum = add(o.depth_sum, depth_loss(ssi, gm));
                    ++o.depth_count;
                }
            }
        }
        o.img_emb = l2_normalize_rows(concat_rows(v_rows));
        if (cfg_.tasks.vl) o.txt_emb = concat_rows(t_rows);
        if (cfg_.tasks.ssl) {
            o.distill_student = concat_rows(local_score_rows);
            o.teacher_distill = concat_rows(teacher_rows);
        }
        return o;
    }

    TrainConfig cfg_;
    std::vector<Sample> data_;
    Model<T> model_;
    Teacher<T> teacher_;
    AdamW<T> opt_;
    int64_t step_ = 0, epoch_ = 0, cursor_ = 0;
};

// ---------------------------------------------------------------------------
// config file (INI-style sections, key = value)
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> parse_ini(std::istream& in) {
    std::map<std::string, std::string> kv;
    std::string line, section;
    while (std::getline(in, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            size_t a = s.find_first_not_of(" \t\r");
            size_t b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        auto eq = line.find('=');
        require(eq != std::string::npos, "config: expected key = value, got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        kv[section.empty() ? key : section + "." + key] = val;
    }
    return kv;
}

// Applies a parsed config onto a TrainConfig. Returns the list of keys that
// were set (so the CLI can warn when a flag is overridden).
inline std::vector<std::string> apply_train_config(const std::map<std::string, std::string>& kv,
                                                   TrainConfig& cfg) {
    std::vector<std::string> applied;
    auto want = [&](const std::string& key, auto&& setter) {
        auto it = kv.find(key);
        if (it == kv.end()) return;
        setter(it->second);
        applied.push_back(key);
    };
    auto to_bool = [](const std::string& v) {
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        fail("config: expected boolean, got '" + v + "'");
    };
    want("tasks.enabled", [&](const std::string& v) { cfg.tasks = TaskFlags::parse(v); });
    want("optim.lr", [&](const std::string& v) { cfg.lr = std::stod(v); });
    want("optim.warmup_steps", [&](const std::string& v) { cfg.warmup_steps = std::stoll(v); });
    want("optim.cosine", [&](const std::string& v) { cfg.cosine = to_bool(v); });
    want("optim.beta1", [&](const std::string& v) { cfg.beta1 = std::stod(v); });
    want("optim.beta2", [&](const std::string& v) { cfg.beta2 = std::stod(v); });
    want("optim.eps", [&](const std::string& v) { cfg.eps = std::stod(v); });
    want("optim.weight_decay", [&](const std::string& v) { cfg.weight_decay = std::stod(v); });
    want("run.steps", [&](const std::string& v) { cfg.steps = std::stoll(v); });
    want("run.batch_per_worker", [&](const std::string& v) { cfg.batch_per_worker = std::stoi(v); });
    want("run.workers", [&](const std::string& v) { cfg.workers = std::stoi(v); });
    want("run.seed", [&](const std::string& v) { cfg.seed = std::stoull(v); });
    want("run.precision", [&](const std::string& v) { cfg.precision = v; });
    want("model.layers", [&](const std::string& v) { cfg.model.enc.layers = std::stoi(v); });
    want("model.width", [&](const std::string& v) { cfg.model.enc.width = std::stoi(v); });
    want("model.heads", [&](const std::string& v) { cfg.model.enc.heads = std::stoi(v); });
    want("model.text_layers", [&](const std::string& v) { cfg.model.enc.text_layers = std::stoi(v); });
    want("model.taps", [&](const std::string& v) {
        std::vector<int> taps;
        std::istringstream is(v);
        std::string tok;
        while (std::getline(is, tok, ',')) taps.push_back(std::stoi(tok));
        require(!taps.empty(), "config: model.taps needs at least one layer");
        cfg.model.enc.tap_layers = taps;
        cfg.model.depth.tap_layers = std::move(taps);
    });
    want("model.head_hidden", [&](const std::string& v) { cfg.model.head_hidden = std::stoi(v); });
    want("model.head_bottleneck",
         [&](const std::string& v) { cfg.model.head_bottleneck = std::stoi(v); });
    want("model.prototypes", [&](const std::string& v) { cfg.model.prototypes = std::stoi(v); });
    want("model.local_crops", [&](const std::string& v) { cfg.model.local_crops = std::stoi(v); });
    want("model.mask_ratio", [&](const std::string& v) { cfg.model.mask_ratio = std::stod(v); });
    want("model.depth_fusion_width",
         [&](const std::string& v) { cfg.model.depth.fusion_width = std::stoi(v); });
    want("model.depth_output_stride",
         [&](const std::string& v) { cfg.model.depth.output_stride = std::stoi(v); });
    want("model.tau_warmup_steps",
         [&](const std::string& v) { cfg.model.sched.tau_warmup_steps = std::stoi(v); });
    return applied;
}

// Emits every key apply_train_config understands, so write -> parse -> apply
// round-trips to the same configuration.
inline void write_train_config(std::ostream& os, const TrainConfig& cfg) {
    os << std::setprecision(17);
    os << "[tasks]\nenabled = " << cfg.tasks.str() << "\n\n";
    os << "[optim]\n"
       << "lr = " << cfg.lr << "\n"
       << "warmup_steps = " << cfg.warmup_steps << "\n"
       << "cosine = " << (cfg.cosine ? "true" : "false") << "\n"
       << "beta1 = " << cfg.beta1 << "\n"
       << "beta2 = " << cfg.beta2 << "\n"
       << "eps = " << cfg.eps << "\n"
       << "weight_decay = " << cfg.weight_decay << "\n\n";
    os << "[run]\n"
       << "steps = " << cfg.steps << "\n"
       << "batch_per_worker = " << cfg.batch_per_worker << "\n"
       << "workers = " << cfg.workers << "\n"
       << "seed = " << cfg.seed << "\n"
       << "precision = " << cfg.precision << "\n\n";
    os << "[model]\n"
       << "layers = " << cfg.model.enc.layers << "\n"
       << "width = " << cfg.model.enc.width << "\n"
       << "heads = " << cfg.model.enc.heads << "\n"
       << "text_layers = " << cfg.model.enc.text_layers << "\n";
    os << "taps = ";
    for (size_t i = 0; i < cfg.model.enc.tap_layers.size(); ++i)
        os << (i ? "," : "") << cfg.model.enc.tap_layers[i];
    os << "\n"
       << "head_hidden = " << cfg.model.head_hidden << "\n"
       << "head_bottleneck = " << cfg.model.head_bottleneck << "\n"
       << "prototypes = " << cfg.model.prototypes << "\n"
       << "local_crops = " << cfg.model.local_crops << "\n"
       << "mask_ratio = " << cfg.model.mask_ratio << "\n"
       << "depth_fusion_width = " << cfg.model.depth.fusion_width << "\n"
       << "depth_output_stride = " << cfg.model.depth.output_stride << "\n"
       << "tau_warmup_steps = " << cfg.model.sched.tau_warmup_steps << "\n";
}

}  // namespace mtvl

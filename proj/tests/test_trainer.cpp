#include <doctest.h>

#include <cstdio>
#include <sstream>

#include "mtvl/trainer.hpp"

using namespace mtvl;

namespace {

ModelConfig tiny_model() {
    ModelConfig m;
    m.enc.layers = 2;
    m.enc.width = 16;
    m.enc.heads = 2;
    m.enc.text_layers = 1;
    m.enc.tap_layers = {1, 2};
    m.prototypes = 8;
    m.head_hidden = 16;
    m.head_bottleneck = 8;
    m.depth.tap_layers = {1, 2};
    m.depth.fusion_width = 8;
    m.local_crops = 2;
    m.mask_ratio = 0.5;
    return m;
}

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.model = tiny_model();
    cfg.batch_per_worker = 4;
    cfg.workers = 1;
    cfg.steps = 3;
    cfg.warmup_steps = 0;
    cfg.lr = 1e-3;
    cfg.seed = 0;
    return cfg;
}

std::vector<Sample> tiny_dataset(uint64_t seed, int n) {
    return generate_dataset(seed, n, default_class_catalog());
}

}  // namespace

TEST_CASE("task flag parsing and rendering") {
    TaskFlags t = TaskFlags::parse("vl,depth");
    CHECK(t.vl);
    CHECK(t.depth);
    CHECK_FALSE(t.ssl);
    CHECK_FALSE(t.ground);
    CHECK(t.str() == "vl,depth");
    CHECK(TaskFlags::parse("ssl,ground,vl").str() == "vl,ssl,ground");
    CHECK_THROWS_AS(TaskFlags::parse("vl,flying"), std::invalid_argument);
    CHECK_THROWS_AS(TaskFlags::parse(""), std::invalid_argument);
}

TEST_CASE("learning-rate schedule: linear warmup then constant, cosine on request") {
    TrainConfig cfg = tiny_config();
    cfg.lr = 1e-3;
    cfg.warmup_steps = 10;
    cfg.steps = 110;
    CHECK(lr_schedule(0, cfg) == 0.0);
    CHECK(lr_schedule(5, cfg) == doctest::Approx(5e-4));
    CHECK(lr_schedule(10, cfg) == doctest::Approx(1e-3));
    CHECK(lr_schedule(80, cfg) == doctest::Approx(1e-3));

    cfg.cosine = true;
    CHECK(lr_schedule(10, cfg) == doctest::Approx(1e-3));
    CHECK(lr_schedule(60, cfg) == doctest::Approx(5e-4));  // halfway through the decay
    CHECK(lr_schedule(110, cfg) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK_THROWS_AS(lr_schedule(-1, cfg), std::invalid_argument);
}

TEST_CASE("adamw: first step matches the bias-corrected closed form") {
    ParamStore<double> ps(0);
    ps.create("w", {2}, {1.0, -2.0});
    GradientMap<double> grads;
    grads.grads.emplace("w", Tensor<double>({2}, {0.5, -0.25}));

    AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
    opt.step(ps, grads, 0.1);
    // After one step m/bc1 = g and sqrt(v/bc2) = |g|, so each coordinate moves
    // by lr * g / (|g| + eps).
    auto w = ps.at("w");
    CHECK(w.at(0) == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
    CHECK(w.at(1) == doctest::Approx(-2.0 - 0.1 * (-0.25) / (0.25 + 1e-8)).epsilon(1e-12));
    CHECK(opt.steps_taken() == 1);
}

TEST_CASE("adamw: parameters without gradients stay in place at zero decay") {
    ParamStore<double> ps(0);
    ps.create("a", {1}, {3.0});
    ps.create("b", {1}, {4.0});
    GradientMap<double> grads;
    grads.grads.emplace("a", Tensor<double>({1}, {1.0}));
    AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
    opt.step(ps, grads, 0.01);
    CHECK(ps.at("b").at(0) == 4.0);
    CHECK(ps.at("a").at(0) < 3.0);
}

TEST_CASE("adamw: decoupled weight decay shrinks ungraded parameters") {
    ParamStore<double> ps(0);
    ps.create("w", {1}, {2.0});
    AdamW<double> opt(0.9, 0.999, 1e-8, 0.1);
    opt.step(ps, GradientMap<double>{}, 0.5);
    CHECK(ps.at("w").at(0) == doctest::Approx(2.0 - 0.5 * 0.1 * 2.0).epsilon(1e-12));
}

TEST_CASE("reported total is the sum of the enabled task losses") {
    TrainConfig cfg = tiny_config();
    Trainer<double> trainer(cfg, tiny_dataset(1, 8));
    auto plan = plan_epoch(8, cfg.batch_per_worker, cfg.workers, cfg.seed, 0);
    LossReport rep = trainer.train_step(plan[0]);
    CHECK(rep.total ==
          doctest::Approx(rep.vl + rep.ssl + rep.ground + rep.depth).epsilon(1e-7));
    CHECK(rep.ssl == doctest::Approx(rep.distill + 2.0 * rep.mask + 0.1 * rep.koleo).epsilon(1e-7));
    CHECK(rep.grad_norm > 0.0);
    CHECK_FALSE(rep.rolled_back);
}

TEST_CASE("single-task run reports exactly that component") {
    TrainConfig cfg = tiny_config();
    cfg.tasks = TaskFlags::parse("vl");
    Trainer<double> trainer(cfg, tiny_dataset(2, 8));
    auto plan = plan_epoch(8, cfg.batch_per_worker, cfg.workers, cfg.seed, 0);
    LossReport rep = trainer.train_step(plan[0]);
    CHECK(rep.total == doctest::Approx(rep.vl).epsilon(1e-12));
    CHECK(rep.ssl == 0.0);
    CHECK(rep.ground == 0.0);
    CHECK(rep.depth == 0.0);
}

TEST_CASE("grounding without the vl task raises the co-training flag") {
    TrainConfig cfg = tiny_config();
    cfg.tasks = TaskFlags::parse("ground");
    Trainer<double> trainer(cfg, tiny_dataset(3, 8));
    auto plan = plan_epoch(8, cfg.batch_per_worker, cfg.workers, cfg.seed, 0);
    LossReport rep = trainer.train_step(plan[0]);
    CHECK(rep.ground_without_vl);
}

TEST_CASE("identical configurations reproduce identical report lines") {
    TrainConfig cfg = tiny_config();
    auto data = tiny_dataset(4, 8);
    std::vector<std::string> a, b;
    Trainer<double> ta(cfg, data);
    ta.run([&](const LossReport& r) { a.push_back(r.line()); });
    Trainer<double> tb(cfg, data);
    tb.run([&](const LossReport& r) { b.push_back(r.line()); });
    REQUIRE(a.size() == 3);
    CHECK(a == b);
}

TEST_CASE("depth-only training descends on a fixed tiny corpus") {
    TrainConfig cfg = tiny_config();
    cfg.tasks = TaskFlags::parse("depth");
    cfg.steps = 100;
    cfg.lr = 5e-4;
    Trainer<double> trainer(cfg, tiny_dataset(5, 4));
    std::vector<double> totals;
    trainer.run([&](const LossReport& r) { totals.push_back(r.total); });
    REQUIRE(totals.size() == 100);
    // Augmentation makes per-step losses noisy; compare 20-step windows.
    double head = 0, tail = 0;
    for (int i = 0; i < 20; ++i) {
        head += totals[static_cast<size_t>(i)];
        tail += totals[totals.size() - 20 + static_cast<size_t>(i)];
    }
    CHECK(tail < head);
}

TEST_CASE("a non-finite loss rolls the step back without touching state") {
    TrainConfig cfg = tiny_config();
    cfg.debug_inject_nan_step = 0;
    Trainer<double> trainer(cfg, tiny_dataset(6, 8));

    std::vector<std::vector<double>> before;
    for (const auto& p : trainer.model().ps.all())
        before.emplace_back(p.value().begin(), p.value().end());
    std::vector<double> center_before = trainer.teacher().center;

    auto plan = plan_epoch(8, cfg.batch_per_worker, cfg.workers, cfg.seed, 0);
    LossReport rep = trainer.train_step(plan[0]);
    CHECK(rep.rolled_back);
    CHECK(trainer.step() == 1);

    size_t pi = 0;
    for (const auto& p : trainer.model().ps.all()) {
        auto v = p.value();
        for (size_t i = 0; i < v.size(); ++i) CHECK(v[i] == before[pi][i]);
        ++pi;
    }
    CHECK(trainer.teacher().center == center_before);

    // The next step proceeds normally.
    LossReport rep2 = trainer.train_step(plan[1 % plan.size()]);
    CHECK_FALSE(rep2.rolled_back);
}

TEST_CASE("one and two workers produce the same step at equal global batch") {
    auto data = tiny_dataset(7, 8);
    TrainConfig c1 = tiny_config();
    c1.batch_per_worker = 4;
    c1.workers = 1;
    TrainConfig c2 = tiny_config();
    c2.batch_per_worker = 2;
    c2.workers = 2;

    Trainer<double> t1(c1, data), t2(c2, data);
    auto p1 = plan_epoch(8, 4, 1, 0, 0);
    auto p2 = plan_epoch(8, 2, 2, 0, 0);
    LossReport r1 = t1.train_step(p1[0]);
    LossReport r2 = t2.train_step(p2[0]);
    CHECK(r1.total == doctest::Approx(r2.total).epsilon(1e-9));
    CHECK(r1.vl == doctest::Approx(r2.vl).epsilon(1e-9));
    CHECK(r1.ssl == doctest::Approx(r2.ssl).epsilon(1e-9));
    CHECK(r1.ground == doctest::Approx(r2.ground).epsilon(1e-9));
    CHECK(r1.depth == doctest::Approx(r2.depth).epsilon(1e-9));

    double max_diff = 0;
    auto& psa = t1.model().ps;
    for (const auto& p : t2.model().ps.all()) {
        auto a = psa.at(p.name()).value();
        auto b = p.value();
        for (size_t i = 0; i < b.size(); ++i)
            max_diff = std::max(max_diff, std::abs(static_cast<double>(a[i] - b[i])));
    }
    CHECK(max_diff < 1e-6);
}

TEST_CASE("resuming from a checkpoint replays the uninterrupted run exactly") {
    auto data = tiny_dataset(8, 8);
    TrainConfig full = tiny_config();
    full.steps = 5;

    std::vector<std::string> straight;
    Trainer<double> ta(full, data);
    ta.run([&](const LossReport& r) { straight.push_back(r.line()); });

    TrainConfig half = full;
    half.steps = 3;
    Trainer<double> tb(half, data);
    tb.run();
    std::string path = "trainer_resume_test.bin";
    tb.save(path);

    Trainer<double> tc(full, data);
    tc.load(path);
    CHECK(tc.step() == 3);
    std::vector<std::string> resumed;
    tc.run([&](const LossReport& r) { resumed.push_back(r.line()); });
    REQUIRE(resumed.size() == 2);
    CHECK(resumed[0] == straight[3]);
    CHECK(resumed[1] == straight[4]);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint state is restored bit-exactly") {
    auto data = tiny_dataset(9, 8);
    TrainConfig cfg = tiny_config();
    Trainer<double> ta(cfg, data);
    ta.run();
    std::string path = "trainer_ckpt_test.bin";
    ta.save(path);

    Trainer<double> tb(cfg, data);
    tb.load(path);
    for (const auto& p : ta.model().ps.all()) {
        auto a = p.value();
        auto b = tb.model().ps.at(p.name()).value();
        for (size_t i = 0; i < a.size(); ++i)
            CHECK(std::memcmp(&a[i], &b[i], sizeof(double)) == 0);
    }
    for (const auto& p : ta.teacher().ps.all()) {
        auto a = p.value();
        auto b = tb.teacher().ps.at(p.name()).value();
        for (size_t i = 0; i < a.size(); ++i)
            CHECK(std::memcmp(&a[i], &b[i], sizeof(double)) == 0);
    }
    CHECK(ta.teacher().center == tb.teacher().center);
    std::remove(path.c_str());

    CHECK_THROWS_AS(tb.load("no_such_trainer_checkpoint.bin"), std::runtime_error);
}

TEST_CASE("ini parsing: sections, comments, whitespace, malformed lines") {
    std::istringstream in(
        "# top comment\n"
        "[optim]\n"
        "lr = 0.002   # peak\n"
        "  warmup_steps=7\n"
        "[run]\n"
        "steps = 12\n"
        "\n"
        "precision = f64\n");
    auto kv = parse_ini(in);
    CHECK(kv.at("optim.lr") == "0.002");
    CHECK(kv.at("optim.warmup_steps") == "7");
    CHECK(kv.at("run.steps") == "12");
    CHECK(kv.at("run.precision") == "f64");

    std::istringstream bad("[optim]\nthis line has no equals\n");
    CHECK_THROWS_AS(parse_ini(bad), std::invalid_argument);
}

TEST_CASE("config application reports exactly the keys it consumed") {
    std::map<std::string, std::string> kv = {
        {"tasks.enabled", "vl,ssl"}, {"optim.lr", "0.002"},      {"run.steps", "12"},
        {"run.workers", "2"},        {"model.prototypes", "32"}, {"run.precision", "f64"},
    };
    TrainConfig cfg = tiny_config();
    auto applied = apply_train_config(kv, cfg);
    CHECK(applied.size() == 6);
    CHECK(cfg.tasks.str() == "vl,ssl");
    CHECK(cfg.lr == doctest::Approx(0.002));
    CHECK(cfg.steps == 12);
    CHECK(cfg.workers == 2);
    CHECK(cfg.model.prototypes == 32);
    CHECK(cfg.precision == "f64");

    std::map<std::string, std::string> boolbad = {{"optim.cosine", "maybe"}};
    CHECK_THROWS_AS(apply_train_config(boolbad, cfg), std::invalid_argument);
}

#include <doctest.h>

#include <random>

#include "mtvl/analysis.hpp"

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
    return m;
}

}  // namespace

TEST_CASE("argmax breaks ties toward the lowest index") {
    CHECK(argmax_lowest({1.0, 3.0, 3.0}) == 1);
    CHECK(argmax_lowest({5.0, 5.0, 5.0}) == 0);
    CHECK(argmax_lowest({-2.0, -1.0, -3.0}) == 1);
    CHECK_THROWS_AS(argmax_lowest({}), std::invalid_argument);
}

TEST_CASE("synergy percentage arithmetic and the undefined case") {
    CHECK(*synergy(1.0, 2.0, 2.0) == doctest::Approx(0.0));
    CHECK(*synergy(1.0, 2.0, 4.0) == doctest::Approx(100.0));
    CHECK(*synergy(3.0, 1.5, 4.0) == doctest::Approx(100.0 / 3.0));
    CHECK(*synergy(1.0, 2.0, 1.0) == doctest::Approx(-50.0));
    CHECK_FALSE(synergy(0.0, 0.0, 1.0).has_value());
    CHECK_FALSE(synergy(-1.0, 0.0, 1.0).has_value());

    // Scale invariance: rescaling all gains leaves the percentage unchanged.
    CHECK(*synergy(0.3, 0.15, 0.4) == doctest::Approx(*synergy(3.0, 1.5, 4.0)).epsilon(1e-12));
}

TEST_CASE("marginal gains reproduce the published column") {
    auto g = marginal_gain_table({"vl", "vl+ssl", "vl+ssl+ground", "vl+ssl+ground+depth"},
                                 {"zeroshot_acc"}, {{36.2}, {43.7}, {49.0}, {49.7}});
    REQUIRE(g.increments.size() == 3);
    CHECK(g.increments[0][0] == doctest::Approx(7.5).epsilon(1e-12));
    CHECK(g.increments[1][0] == doctest::Approx(5.3).epsilon(1e-12));
    CHECK(g.increments[2][0] == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(g.delta[0] == doctest::Approx(13.5).epsilon(1e-12));

    // Telescoping holds bit-exactly because delta sums the same increments.
    double total = 0;
    for (const auto& inc : g.increments) total += inc[0];
    CHECK(g.delta[0] == total);
    CHECK(g.is_improvement(0, g.increments[0][0]));
}

TEST_CASE("identical rows yield all-zero increments") {
    auto g = marginal_gain_table({"a", "b", "c"}, {"m1", "m2"},
                                 {{0.5, 0.3}, {0.5, 0.3}, {0.5, 0.3}});
    for (const auto& inc : g.increments)
        for (double v : inc) CHECK(v == 0.0);
    CHECK(g.delta == std::vector<double>{0.0, 0.0});
}

TEST_CASE("lower-is-better metrics orient improvements negatively") {
    auto g = marginal_gain_table({"a", "b"}, {"depth_rmse"}, {{0.643}, {0.568}}, {true});
    CHECK(g.increments[0][0] == doctest::Approx(-0.075).epsilon(1e-9));
    CHECK(g.is_improvement(0, g.increments[0][0]));
    CHECK_FALSE(g.is_improvement(0, 0.02));
}

TEST_CASE("marginal gain table rejects malformed input") {
    CHECK_THROWS_AS(marginal_gain_table({"a"}, {"m"}, {{1.0}, {2.0}}), std::invalid_argument);
    CHECK_THROWS_AS(marginal_gain_table({"a", "b"}, {"m"}, {{1.0}, {2.0, 3.0}}),
                    std::invalid_argument);
}

TEST_CASE("grid rendering carries labels, values, increments, and the delta row") {
    auto g = marginal_gain_table({"vl", "vl+ssl"}, {"acc"}, {{0.4}, {0.5}});
    std::string s = render_grid(g);
    CHECK(s.find("tasks\tacc") != std::string::npos);
    CHECK(s.find("vl+ssl") != std::string::npos);
    CHECK(s.find("(+0.1)") != std::string::npos);
    CHECK(s.find("delta\t+0.1") != std::string::npos);
}

TEST_CASE("retrieval on orthogonal pairs is perfect; swapping halves breaks it") {
    std::vector<std::vector<double>> img = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    auto r = retrieval_recall_at_1(img, img);
    CHECK(r.recall_i2t == 1.0);
    CHECK(r.recall_t2i == 1.0);
    CHECK_FALSE(r.duplicate_texts);

    std::vector<std::vector<double>> swapped = {{0, 1, 0}, {1, 0, 0}, {0, 0, 1}};
    auto rs = retrieval_recall_at_1(img, swapped);
    CHECK(rs.recall_i2t == doctest::Approx(1.0 / 3.0));
    CHECK(rs.recall_t2i == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("duplicated texts share one retrieval target instead of competing") {
    // Both captions are the same text, so either column is a correct hit and
    // either image satisfies the text query.
    std::vector<std::vector<double>> img = {{1, 0}, {0, 1}};
    std::vector<std::vector<double>> txt = {{0.6, 0.8}, {0.6, 0.8}};
    auto r = retrieval_recall_at_1(img, txt);
    CHECK(r.duplicate_texts);
    CHECK(r.recall_i2t == 1.0);
    CHECK(r.recall_t2i == 1.0);

    // A third, distinct pair must still be matched on its own.
    img.push_back({-1, 0});
    txt.push_back({-0.6, -0.8});
    auto r3 = retrieval_recall_at_1(img, txt);
    CHECK(r3.recall_i2t == 1.0);
    CHECK(r3.recall_t2i == 1.0);

    CHECK_THROWS_AS(retrieval_recall_at_1(img, {{1.0, 0.0}}), std::invalid_argument);
    CHECK_THROWS_AS(retrieval_recall_at_1({{1.0, 0.0}}, {{1.0, 0.0}}), std::invalid_argument);
}

TEST_CASE("solve_linear inverts a random well-conditioned system") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> dist(0, 1);
    const int n = 5;
    std::vector<double> M(n * n);
    for (auto& x : M) x = dist(rng);
    // A = M^T M + I is symmetric positive definite.
    std::vector<double> A(n * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            for (int k = 0; k < n; ++k) A[static_cast<size_t>(i) * n + j] += M[static_cast<size_t>(k) * n + i] * M[static_cast<size_t>(k) * n + j];
            if (i == j) A[static_cast<size_t>(i) * n + j] += 1.0;
        }
    std::vector<double> x_true(n);
    for (auto& x : x_true) x = dist(rng);
    std::vector<double> b(n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) b[static_cast<size_t>(i)] += A[static_cast<size_t>(i) * n + j] * x_true[static_cast<size_t>(j)];
    auto x = detail::solve_linear(A, b);
    for (int i = 0; i < n; ++i)
        CHECK(x[static_cast<size_t>(i)] == doctest::Approx(x_true[static_cast<size_t>(i)]).epsilon(1e-9));

    std::vector<double> singular = {1, 2, 2, 4};
    CHECK_THROWS_AS(detail::solve_linear(singular, {1, 1}), std::invalid_argument);
}

TEST_CASE("baseline rmse equals the standard deviation of the probe targets") {
    Model<double> model(tiny_model(), 3);
    auto eval_set = generate_dataset(3, 4, default_class_catalog());
    std::vector<std::vector<double>> X;
    std::vector<double> y;
    detail::probe_features(model, eval_set, X, y);
    double mean = 0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(y.size());
    double sq = 0;
    for (double v : y) sq += (v - mean) * (v - mean);
    CHECK(depth_baseline_rmse(model, eval_set) ==
          doctest::Approx(std::sqrt(sq / static_cast<double>(y.size()))).epsilon(1e-12));
}

TEST_CASE("the frozen-feature depth probe produces a finite nonnegative rmse") {
    Model<double> model(tiny_model(), 4);
    auto train = generate_dataset(4, 6, default_class_catalog());
    auto eval_set = generate_dataset(5, 4, default_class_catalog());
    double rmse = depth_probe_rmse(model, train, eval_set);
    CHECK(std::isfinite(rmse));
    CHECK(rmse >= 0.0);
    CHECK_THROWS_AS(depth_probe_rmse(model, {}, eval_set), std::invalid_argument);
}

TEST_CASE("zero-shot classification: bounds, 1-class degenerate case, rejections") {
    Model<double> model(tiny_model(), 5);
    auto catalog = default_class_catalog();
    GenConfig single{32, 1, 1};
    auto eval_set = generate_dataset(6, 10, catalog, single);
    double acc = zero_shot_classify(model, default_prompts(catalog), eval_set);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);

    // Every sample of the sole class is trivially correct.
    std::vector<ClassSpec> one = {catalog[0]};
    std::vector<Sample> only_zero;
    for (auto s : eval_set)
        if (s.class_id == 0) only_zero.push_back(std::move(s));
    if (!only_zero.empty())
        CHECK(zero_shot_classify(model, default_prompts(one), only_zero) == 1.0);

    CHECK_THROWS_AS(zero_shot_classify(model, default_prompts(catalog), {}),
                    std::invalid_argument);
    CHECK_THROWS_AS(zero_shot_classify(model, {}, eval_set), std::invalid_argument);
}

TEST_CASE("eval records render all fields and validate their metric names") {
    EvalResult r{"zeroshot_acc", 0.75, "eval_class", "ckpt.bin", 7};
    CHECK_NOTHROW(r.validate());
    std::string s = r.line();
    CHECK(s.find("metric=zeroshot_acc") != std::string::npos);
    CHECK(s.find("value=0.75") != std::string::npos);
    CHECK(s.find("seed=7") != std::string::npos);
    r.metric = "accuracy";
    CHECK_THROWS_AS(r.validate(), std::invalid_argument);
}

TEST_CASE("ablation data splits are disjoint in purpose and sized as asked") {
    auto d = make_ablation_data(0, 12, 8);
    CHECK(d.train.size() == 12);
    CHECK(d.eval_class.size() == 8);
    CHECK(d.eval_pairs.size() == 8);
    CHECK(d.probe_train.size() == 8);
    CHECK(d.probe_eval.size() == 8);
    for (const auto& s : d.eval_class) CHECK(s.regions.size() == 1);
}

TEST_CASE("model evaluation emits the four standard metrics") {
    Model<double> model(tiny_model(), 6);
    auto d = make_ablation_data(1, 8, 6);
    auto m = evaluate_model(model, d);
    REQUIRE(m.size() == 4);
    for (const char* k : {"zeroshot_acc", "recall_i2t", "recall_t2i", "depth_rmse"})
        CHECK(m.count(k) == 1);
    CHECK(m["zeroshot_acc"] >= 0.0);
    CHECK(m["recall_i2t"] <= 1.0);
    CHECK(std::isfinite(m["depth_rmse"]));
}

TEST_CASE("a short ablation produces the path grid and all pairwise synergies") {
    TrainConfig base;
    base.model = tiny_model();
    base.batch_per_worker = 4;
    base.workers = 1;
    base.steps = 2;
    base.warmup_steps = 0;
    base.seed = 0;
    auto d = make_ablation_data(2, 8, 6);

    auto result = run_ablation<double>(base, d);
    REQUIRE(result.runs.size() == 8);
    CHECK(result.grid.row_labels ==
          std::vector<std::string>{"vl", "vl+ssl", "vl+ssl+ground", "vl+ssl+ground+depth"});
    CHECK(result.grid.values.size() == 4);
    CHECK(result.grid.increments.size() == 3);
    REQUIRE(result.synergy_table.size() == 12);
    for (const auto& e : result.synergy_table) CHECK(std::isfinite(e.dAB));

    std::string rendered = render_synergy(result.synergy_table);
    CHECK(rendered.find("pair\tmetric") != std::string::npos);
    CHECK(rendered.find("ssl+ground") != std::string::npos);

    // The path rows must be exactly the metrics of the matching runs.
    auto find_run = [&](const std::string& label) {
        for (const auto& r : result.runs)
            if (r.label == label) return r.metrics;
        FAIL("missing run");
        return std::map<std::string, double>{};
    };
    auto vl = find_run("vl");
    CHECK(result.grid.values[0][0] == vl.at("zeroshot_acc"));
    CHECK(result.grid.values[0][3] == vl.at("depth_rmse"));
}

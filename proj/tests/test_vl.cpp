#include <doctest.h>

#include <random>

#include "mtvl/objective_vl.hpp"

using namespace mtvl;
using D = Tensor<double>;

namespace {

// Fresh learnable (log tau, beta) at their initial values log 10 and -10.
VLParams<double> fresh_params(ParamStore<double>& ps) { return VLParams<double>(ps, "vl"); }

D random_rows(int r, int c, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0, 1);
    std::vector<double> v(static_cast<size_t>(r) * c);
    for (auto& x : v) x = dist(rng);
    return D({r, c}, std::move(v));
}

}  // namespace

TEST_CASE("single pair at zero similarity evaluates to log(1+e^-10)") {
    ParamStore<double> ps(0);
    auto params = fresh_params(ps);
    CHECK(params.tau() == doctest::Approx(10.0));
    D v({1, 2}, {1, 0});
    D t({1, 2}, {0, 1});
    double loss = sigmoid_contrastive_loss(v, t, params, MatchMatrix::diagonal(1)).item();
    CHECK(loss == doctest::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-9));
    CHECK(loss == doctest::Approx(4.5399e-5).epsilon(1e-3));
}

TEST_CASE("2x2 batch with all dot products 1 evaluates to ~20") {
    ParamStore<double> ps(0);
    auto params = fresh_params(ps);
    D v({2, 2}, {1, 0, 1, 0});
    D t({2, 2}, {1, 0, 1, 0});
    double loss = sigmoid_contrastive_loss(v, t, params, MatchMatrix::diagonal(2)).item();
    double expected = 0.5 * (2 * std::log1p(std::exp(-20.0)) + 2 * std::log1p(std::exp(20.0)));
    CHECK(loss == doctest::Approx(expected).epsilon(1e-12));
    CHECK(loss == doctest::Approx(20.0).epsilon(1e-4));
}

TEST_CASE("gradients match finite differences on a random 3x3 batch") {
    ParamStore<double> ps(7);
    auto params = fresh_params(ps);
    std::mt19937_64 rng(7);
    std::normal_distribution<double> dist(0, 1);
    auto mk = [&](const std::string& name) {
        std::vector<double> v(12);
        for (auto& x : v) x = 0.3 * dist(rng);
        return ps.create(name, {3, 4}, std::move(v));
    };
    D v = mk("v"), t = mk("t");
    std::vector<D> leaves = {v, t, params.log_scale, params.bias};
    auto f = [&]() {
        return sigmoid_contrastive_loss(v, t, params, MatchMatrix::diagonal(3));
    };
    CHECK(finite_difference_check<double>(f, leaves, 1e-5) < 1e-4);
}

TEST_CASE("loss is invariant to simultaneous row permutation") {
    ParamStore<double> ps(9);
    auto params = fresh_params(ps);
    D v = random_rows(4, 5, 1);
    D t = random_rows(4, 5, 2);
    double base = sigmoid_contrastive_loss(v, t, params, MatchMatrix::diagonal(4)).item();
    std::vector<int> perm = {2, 0, 3, 1};
    double permuted = sigmoid_contrastive_loss(gather_rows(v, perm), gather_rows(t, perm), params,
                                               MatchMatrix::diagonal(4))
                          .item();
    CHECK(base == doctest::Approx(permuted).epsilon(1e-12));
}

TEST_CASE("directional: matched similarity lowers the loss, unmatched raises it") {
    ParamStore<double> ps(11);
    auto params = fresh_params(ps);
    auto loss_at = [&](double matched, double unmatched) {
        D v({2, 2}, {1, 0, 0, 1});
        D t({2, 2}, {matched, unmatched, unmatched, matched});
        return sigmoid_contrastive_loss(v, t, params, MatchMatrix::diagonal(2)).item();
    };
    CHECK(loss_at(0.6, 0.1) < loss_at(0.5, 0.1));
    CHECK(loss_at(0.5, 0.2) > loss_at(0.5, 0.1));
}

TEST_CASE("overflow safety at |logits| up to 1e4") {
    ParamStore<double> ps(12);
    D log_scale = ps.create("ls", {1}, {std::log(1e4)});
    D bias = ps.create("b", {1}, {0.0});
    VLParams<double> params;
    params.log_scale = log_scale;
    params.bias = bias;
    D v = ps.create("v", {2, 2}, {1, 0, 0, 1});
    D t({2, 2}, {1, 0, 0, 1});
    D loss = sigmoid_contrastive_loss(v, t, params, MatchMatrix::diagonal(2));
    CHECK(std::isfinite(loss.item()));
    auto gm = backward(loss);
    for (int64_t i = 0; i < 4; ++i) CHECK(std::isfinite(gm.at("v").at(i)));
}

TEST_CASE("empty batch and mismatched dims are rejected") {
    ParamStore<double> ps(13);
    auto params = fresh_params(ps);
    D v({0, 4}, {});
    D t({1, 4}, {1, 0, 0, 0});
    MatchMatrix m = MatchMatrix::diagonal(0);
    CHECK_THROWS_AS(sigmoid_contrastive_loss(v, t, params, m), std::invalid_argument);

    D v2({1, 3}, {1, 0, 0});
    CHECK_THROWS_WITH_AS(
        sigmoid_contrastive_loss(v2, t, params, MatchMatrix::diagonal(1)),
        doctest::Contains("[1,3]"), std::invalid_argument);
}

TEST_CASE("gather: identity for one worker, worker order for several") {
    D a = random_rows(2, 3, 21);
    D b = random_rows(2, 3, 22);
    D solo = gather_text_embeddings<double>({a});
    CHECK(solo.node() == a.node());  // no copy, gradients unchanged

    D both = gather_text_embeddings<double>({a, b});
    CHECK(both.shape() == Shape{4, 3});
    for (int i = 0; i < 6; ++i) {
        CHECK(both.at(i) == a.at(i));
        CHECK(both.at(6 + i) == b.at(i));
    }
}

TEST_CASE("gathered loss equals the single-worker loss with identical gradients") {
    ParamStore<double> ps(23);
    auto params = fresh_params(ps);
    std::mt19937_64 rng(23);
    std::normal_distribution<double> dist(0, 1);
    auto mk = [&](const std::string& name, int rows) {
        std::vector<double> v(static_cast<size_t>(rows) * 3);
        for (auto& x : v) x = dist(rng);
        return ps.create(name, {rows, 3}, std::move(v));
    };
    D v = mk("imgs", 4);
    D t1 = mk("t1", 2), t2 = mk("t2", 2);

    D gathered = gather_text_embeddings<double>({t1, t2});
    D l_shard = sigmoid_contrastive_loss(v, gathered, params, MatchMatrix::diagonal(4));
    auto g_shard = backward(l_shard);

    std::vector<double> pre(t1.value().begin(), t1.value().end());
    pre.insert(pre.end(), t2.value().begin(), t2.value().end());
    D t_cat = ps.create("t_cat", {4, 3}, std::move(pre));
    D l_cat = sigmoid_contrastive_loss(v, t_cat, params, MatchMatrix::diagonal(4));
    auto g_cat = backward(l_cat);

    CHECK(l_shard.item() == doctest::Approx(l_cat.item()).epsilon(1e-12));
    for (int i = 0; i < 6; ++i) {
        CHECK(g_shard.at("t1").at(i) == doctest::Approx(g_cat.at("t_cat").at(i)).epsilon(1e-9));
        CHECK(g_shard.at("t2").at(i) == doctest::Approx(g_cat.at("t_cat").at(6 + i)).epsilon(1e-9));
    }
}

TEST_CASE("ragged gather shards are rejected") {
    D a = random_rows(2, 3, 31);
    D b = random_rows(2, 4, 32);
    CHECK_THROWS_AS(gather_text_embeddings<double>({a, b}), std::invalid_argument);
}

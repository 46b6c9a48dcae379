#include <doctest.h>

#include <fstream>
#include <map>
#include <random>
#include <set>

#include "mtvl/data.hpp"

using namespace mtvl;

namespace {

EncoderConfig tiny_enc() {
    EncoderConfig cfg;
    cfg.layers = 2;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.tap_layers = {1, 2};
    return cfg;
}

}  // namespace

TEST_CASE("vocabulary round-trips and rejects out-of-vocab words") {
    const auto& v = Vocabulary::standard();
    TokenSequence t = v.encode("a photo of a red circle");
    CHECK(v.decode(t) == "a photo of a red circle");
    CHECK_THROWS_AS(v.encode("a photo of a dragon"), std::invalid_argument);
}

TEST_CASE("generator is deterministic per (seed, index)") {
    auto catalog = default_class_catalog();
    Sample a = generate_sample(0, 7, catalog);
    Sample b = generate_sample(0, 7, catalog);
    CHECK(a == b);
    Sample c = generate_sample(1, 7, catalog);
    CHECK_FALSE(a == c);
}

TEST_CASE("region boxes tightly wrap the rasterized shape") {
    // Single-shape samples so the raster mask is recoverable from the depth
    // map: shape pixels sit strictly below the background band.
    auto catalog = default_class_catalog();
    GenConfig single{32, 1, 1};
    for (uint64_t i = 0; i < 20; ++i) {
        Sample s = generate_sample(3, i, catalog, single);
        REQUIRE(s.regions.size() == 1);
        int minx = 32, miny = 32, maxx = -1, maxy = -1;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                if (s.depth[static_cast<size_t>(y * 32 + x)] < 0.84f) {
                    minx = std::min(minx, x);
                    maxx = std::max(maxx, x);
                    miny = std::min(miny, y);
                    maxy = std::max(maxy, y);
                }
        REQUIRE(maxx >= 0);
        const RegionBox& b = s.regions[0].box;
        CHECK(b.x0 == doctest::Approx(minx / 32.0));
        CHECK(b.x1 == doctest::Approx((maxx + 1) / 32.0));
        CHECK(b.y0 == doctest::Approx(miny / 32.0));
        CHECK(b.y1 == doctest::Approx((maxy + 1) / 32.0));
    }
}

TEST_CASE("shape depths are strictly nearer than the background everywhere") {
    auto catalog = default_class_catalog();
    for (uint64_t i = 0; i < 20; ++i) {
        Sample s = generate_sample(4, i, catalog);
        for (float d : s.depth) {
            bool background = d >= 0.8499f && d <= 0.9501f;
            bool shape = d >= 0.1999f && d <= 0.8001f;
            CHECK((background || shape));
        }
    }
}

TEST_CASE("captions contain every region entity's tokens") {
    auto catalog = default_class_catalog();
    for (uint64_t i = 0; i < 30; ++i) {
        Sample s = generate_sample(5, i, catalog);
        std::set<int> caption_tokens(s.caption.ids.begin(), s.caption.ids.end());
        for (const auto& r : s.regions)
            for (int t : r.text.ids) CHECK(caption_tokens.count(t) == 1);
    }
}

TEST_CASE("sample serialization round-trips exactly") {
    auto catalog = default_class_catalog();
    Sample s = generate_sample(6, 0, catalog);
    CHECK(deserialize_sample(serialize_sample(s)) == s);
}

TEST_CASE("shard round-trip is byte-exact and corruption is detected") {
    auto catalog = default_class_catalog();
    auto samples = generate_dataset(7, 5, catalog);
    std::string path = "shard_test.bin";
    write_shard(path, samples);
    auto loaded = read_shard(path);
    REQUIRE(loaded.size() == samples.size());
    for (size_t i = 0; i < samples.size(); ++i) CHECK(loaded[i] == samples[i]);

    // Flip one payload byte; the checksum must catch it.
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    char last;
    f.seekg(-1, std::ios::end);
    f.get(last);
    f.seekp(-1, std::ios::end);
    f.put(static_cast<char>(last ^ 0x01));
    f.close();
    CHECK_THROWS_WITH_AS(read_shard(path), doctest::Contains("checksum"), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("dataset directory round-trip via the manifest") {
    auto catalog = default_class_catalog();
    auto samples = generate_dataset(8, 7, catalog);
    std::string dir = "dataset_test_dir";
    write_dataset(dir, samples, 8, /*shard_size=*/3);  // forces multiple shards
    auto loaded = load_dataset(dir);
    REQUIRE(loaded.size() == samples.size());
    for (size_t i = 0; i < samples.size(); ++i) CHECK(loaded[i] == samples[i]);
    std::filesystem::remove_all(dir);
}

TEST_CASE("filter rules: drop, aspect-preserving resize, keep") {
    FilterResult drop = filter_sample(100, 300, 224, 1024);
    CHECK(drop.action == FilterAction::Drop);

    FilterResult rs = filter_sample(512, 2048, 224, 1024);
    CHECK(rs.action == FilterAction::Resize);
    CHECK(rs.height == 256);
    CHECK(rs.width == 1024);

    FilterResult keep = filter_sample(300, 300, 224, 1024);
    CHECK(keep.action == FilterAction::Keep);

    CHECK_THROWS_AS(filter_sample(0, 10), std::invalid_argument);
}

TEST_CASE("make_views: exact mask ratio and reproducibility") {
    auto catalog = default_class_catalog();
    Sample s = generate_sample(9, 0, catalog);
    EncoderConfig enc = tiny_enc();

    std::mt19937_64 rng1(42), rng2(42);
    auto v1 = make_views<double>(s, rng1, enc, 3, 0.5);
    auto v2 = make_views<double>(s, rng2, enc, 3, 0.5);

    CHECK(v1.mask.popcount() == 8);  // N = 16 patches, ratio 0.5
    CHECK(v1.mask.mask == v2.mask.mask);
    CHECK(v1.global_image.shape() == Shape{32, 32, 3});
    CHECK(v1.global_depth.shape() == Shape{32, 32});
    REQUIRE(v1.local_crops.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(v1.local_crops[i].shape() == Shape{16, 16, 3});
        for (int64_t j = 0; j < v1.local_crops[i].size(); ++j)
            CHECK(v1.local_crops[i].at(j) == v2.local_crops[i].at(j));
    }
    for (int64_t j = 0; j < v1.global_image.size(); ++j)
        CHECK(v1.global_image.at(j) == v2.global_image.at(j));
}

TEST_CASE("make_views: local windows never exceed the global window area") {
    auto catalog = default_class_catalog();
    Sample s = generate_sample(10, 1, catalog);
    EncoderConfig enc = tiny_enc();
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 25; ++trial) {
        auto v = make_views<double>(s, rng, enc, 6, 0.5);
        for (const auto& w : v.local_windows) CHECK(w.area() <= v.global_window.area());
    }
}

TEST_CASE("make_views: depth and regions ride the same crop window") {
    auto catalog = default_class_catalog();
    Sample s = generate_sample(11, 2, catalog);
    EncoderConfig enc = tiny_enc();
    std::mt19937_64 rng(13);
    auto v = make_views<double>(s, rng, enc, 2, 0.5);

    // Depth stays within the source range (bilinear convexity).
    float lo = 1e9f, hi = -1e9f;
    for (float d : s.depth) {
        lo = std::min(lo, d);
        hi = std::max(hi, d);
    }
    for (int64_t i = 0; i < v.global_depth.size(); ++i) {
        CHECK(v.global_depth.at(i) >= lo - 1e-6);
        CHECK(v.global_depth.at(i) <= hi + 1e-6);
    }
    // Surviving regions are valid crop-space boxes with their text intact.
    for (const auto& r : v.regions) {
        CHECK(r.box.valid());
        CHECK(!r.text.ids.empty());
    }
}

TEST_CASE("make_views rejects undersized images") {
    Sample s;
    s.height = s.width = 16;
    s.image.assign(16 * 16 * 3, 100);
    s.depth.assign(16 * 16, 0.5f);
    EncoderConfig enc = tiny_enc();
    std::mt19937_64 rng(0);
    CHECK_THROWS_AS(make_views<double>(s, rng, enc, 2, 0.5), std::invalid_argument);
}

TEST_CASE("epoch plan: single worker covers the epoch once in seeded order") {
    auto plan = plan_epoch(10, 3, 1, 5, 0);
    std::vector<int> seen;
    for (const auto& step : plan)
        for (const auto& batch : step) seen.insert(seen.end(), batch.begin(), batch.end());
    CHECK(seen == epoch_order(10, 5, 0));
    std::sort(seen.begin(), seen.end());
    CHECK(seen == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});

    auto plan2 = plan_epoch(10, 3, 1, 5, 0);
    CHECK(plan.size() == plan2.size());
    CHECK(plan[0][0] == plan2[0][0]);
}

TEST_CASE("epoch plan: worker partitions are disjoint with complete union") {
    for (int workers : {1, 2, 4}) {
        auto plan = plan_epoch(10, 2, workers, 3, 1);
        std::multiset<int> all;
        for (const auto& step : plan) {
            std::set<int> step_seen;
            for (const auto& batch : step)
                for (int idx : batch) {
                    CHECK(step_seen.insert(idx).second);  // disjoint within the step
                    all.insert(idx);
                }
        }
        std::multiset<int> expected;
        for (int i = 0; i < 10; ++i) expected.insert(i);
        CHECK(all == expected);
    }
}

TEST_CASE("epoch plan: oversized batches are rejected") {
    CHECK_THROWS_AS(plan_epoch(4, 3, 2, 0, 0), std::invalid_argument);
}

TEST_CASE("different epochs reshuffle, same epoch repeats") {
    CHECK(epoch_order(20, 1, 0) == epoch_order(20, 1, 0));
    CHECK(epoch_order(20, 1, 0) != epoch_order(20, 1, 1));
    CHECK(epoch_order(20, 1, 0) != epoch_order(20, 2, 0));
}

TEST_CASE("image and depth tensors reflect the quantized storage") {
    auto catalog = default_class_catalog();
    Sample s = generate_sample(12, 0, catalog);
    auto img = image_tensor<double>(s);
    CHECK(img.shape() == Shape{32, 32, 3});
    CHECK(img.at(0) == doctest::Approx(s.image[0] / 255.0));
    auto dep = depth_tensor<double>(s);
    CHECK(dep.shape() == Shape{32, 32});
    CHECK(dep.at(5) == doctest::Approx(static_cast<double>(s.depth[5])));
}

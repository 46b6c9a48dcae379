#pragma once

// Synthetic "shapes world" corpus: fully-labeled sample schema, deterministic
// generator, shard storage, filtering, and view/mask augmentation.

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_map>

#include "mtvl/objective_dense.hpp"

namespace mtvl {

inline constexpr int kGeneratorVersion = 1;

// ---------------------------------------------------------------------------
// vocabulary and class catalog
// ---------------------------------------------------------------------------

// Fixed whitespace vocabulary over the caption template grammar; this is a
// closed world, unknown words are rejected at encode time.
class Vocabulary {
  public:
    static const Vocabulary& standard() {
        static const Vocabulary v({"a", "photo", "of", "and", "red", "green", "blue", "yellow",
                                   "magenta", "circle", "square", "triangle"});
        return v;
    }

    explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
        for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
    }

    int size() const { return static_cast<int>(words_.size()); }

    int id(const std::string& word) const {
        auto it = index_.find(word);
        require(it != index_.end(), "Vocabulary: out-of-vocab word '" + word + "'");
        return it->second;
    }

    TokenSequence encode(const std::string& text) const {
        TokenSequence seq;
        std::istringstream is(text);
        std::string w;
        while (is >> w) seq.ids.push_back(id(w));
        require(!seq.ids.empty(), "Vocabulary: empty text");
        return seq;
    }

    std::string decode(const TokenSequence& seq) const {
        std::string out;
        for (int t : seq.ids) {
            require(t >= 0 && t < size(), "Vocabulary: token id out of range");
            if (!out.empty()) out += ' ';
            out += words_[static_cast<size_t>(t)];
        }
        return out;
    }

  private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

enum class ShapeKind : uint8_t { Circle = 0, Square = 1, Triangle = 2 };

struct ClassSpec {
    std::string color;
    ShapeKind kind;
    uint8_t rgb[3];

    std::string shape_name() const {
        switch (kind) {
            case ShapeKind::Circle: return "circle";
            case ShapeKind::Square: return "square";
            default: return "triangle";
        }
    }
    std::string name() const { return color + " " + shape_name(); }
};

inline std::vector<ClassSpec> default_class_catalog() {
    return {
        {"red", ShapeKind::Circle, {230, 50, 50}},
        {"green", ShapeKind::Square, {50, 200, 70}},
        {"blue", ShapeKind::Triangle, {50, 90, 230}},
        {"yellow", ShapeKind::Circle, {235, 220, 60}},
        {"magenta", ShapeKind::Square, {220, 60, 220}},
    };
}

// ---------------------------------------------------------------------------
// sample schema
// ---------------------------------------------------------------------------

struct Region {
    RegionBox box;
    TokenSequence text;

    bool operator==(const Region& o) const {
        return box.x0 == o.box.x0 && box.y0 == o.box.y0 && box.x1 == o.box.x1 &&
               box.y1 == o.box.y1 && text == o.text;
    }
};

// One fully-labeled record: image, caption, grounded regions, relative depth.
// Images are stored quantized (k/255); depth is stored at full precision.
struct Sample {
    int height = 0, width = 0;
    std::vector<uint8_t> image;  // H*W*3, row-major RGB
    TokenSequence caption;
    std::vector<Region> regions;  // at most 4
    std::vector<float> depth;     // H*W, [0,1], smaller = nearer
    int class_id = -1;            // catalog class of the nearest shape

    void validate() const {
        require(height > 0 && width > 0, "Sample: empty dims");
        require(image.size() == static_cast<size_t>(height) * width * 3, "Sample: image size mismatch");
        require(depth.size() == static_cast<size_t>(height) * width, "Sample: depth size mismatch");
        require(!caption.ids.empty(), "Sample: caption missing");
        require(!regions.empty() && regions.size() <= 4, "Sample: region count out of range");
        float lo = depth[0], hi = depth[0];
        for (float d : depth) {
            lo = std::min(lo, d);
            hi = std::max(hi, d);
        }
        require(hi > lo, "Sample: depth map is constant");
    }

    bool operator==(const Sample& o) const {
        return height == o.height && width == o.width && image == o.image && caption == o.caption &&
               regions == o.regions && depth == o.depth && class_id == o.class_id;
    }
};

template <typename T>
Tensor<T> image_tensor(const Sample& s) {
    std::vector<T> v(s.image.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(s.image[i]) / T(255);
    return Tensor<T>({s.height, s.width, 3}, std::move(v));
}

template <typename T>
Tensor<T> depth_tensor(const Sample& s) {
    std::vector<T> v(s.depth.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(s.depth[i]);
    return Tensor<T>({s.height, s.width}, std::move(v));
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

struct GenConfig {
    int image_size = 32;
    int min_shapes = 1;
    int max_shapes = 3;
};

namespace detail {

struct DrawnShape {
    ClassSpec cls;
    int class_id;
    double cx, cy, r;  // pixel coordinates
    float depth;

    bool covers(int x, int y) const {
        double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        switch (cls.kind) {
            case ShapeKind::Circle:
                return dx * dx + dy * dy <= r * r;
            case ShapeKind::Square:
                return std::abs(dx) <= r && std::abs(dy) <= r;
            default: {  // upward-pointing triangle
                if (dy < -r || dy > r) return false;
                double half = (dy + r) / 2.0;
                return std::abs(dx) <= half;
            }
        }
    }
};

}  // namespace detail

// Deterministic per (seed, index); repeated calls yield identical bytes.
inline Sample generate_sample(uint64_t seed, uint64_t index, const std::vector<ClassSpec>& catalog,
                              const GenConfig& cfg = {}) {
    require(catalog.size() >= 2, "generate_sample: catalog too small");
    require(cfg.min_shapes >= 1 && cfg.max_shapes >= cfg.min_shapes && cfg.max_shapes <= 3,
            "generate_sample: shape count range invalid");
    const int s = cfg.image_size;
    std::mt19937_64 rng(mix_seed(seed, index));
    auto uniform = [&](double a, double b) {
        return std::uniform_real_distribution<double>(a, b)(rng);
    };

    const int n_shapes =
        std::uniform_int_distribution<int>(cfg.min_shapes, cfg.max_shapes)(rng);
    std::vector<detail::DrawnShape> shapes;
    for (int i = 0; i < n_shapes; ++i) {
        detail::DrawnShape sh;
        int cid = std::uniform_int_distribution<int>(0, static_cast<int>(catalog.size()) - 1)(rng);
        sh.cls = catalog[static_cast<size_t>(cid)];
        sh.class_id = cid;
        sh.r = uniform(s * 0.12, s * 0.22);
        // Rejection-sample the center so no shape can hide another: every
        // captioned shape must stay visible through occlusion.
        for (int attempt = 0;; ++attempt) {
            sh.cx = uniform(sh.r + 1.0, s - sh.r - 1.0);
            sh.cy = uniform(sh.r + 1.0, s - sh.r - 1.0);
            bool clear = true;
            for (const auto& prev : shapes) {
                double dx = sh.cx - prev.cx, dy = sh.cy - prev.cy;
                if (std::sqrt(dx * dx + dy * dy) < 0.7 * (sh.r + prev.r)) clear = false;
            }
            if (clear || attempt >= 50) break;
        }
        // Depth layers: shapes live in [0.2, 0.8], strictly nearer than the
        // background band [0.85, 0.95]; spread layers apart to keep ordering
        // unambiguous after interpolation.
        sh.depth = static_cast<float>(0.2 + 0.6 * (i + uniform(0.05, 0.95)) / n_shapes);
        shapes.push_back(sh);
    }
    // Paint far-to-near so nearer shapes occlude.
    std::sort(shapes.begin(), shapes.end(),
              [](const auto& a, const auto& b) { return a.depth > b.depth; });

    Sample out;
    out.height = out.width = s;
    out.image.resize(static_cast<size_t>(s) * s * 3);
    out.depth.resize(static_cast<size_t>(s) * s);

    // Background: vertical gray gradient with a small per-sample tint.
    const double tint[3] = {uniform(-0.05, 0.05), uniform(-0.05, 0.05), uniform(-0.05, 0.05)};
    for (int y = 0; y < s; ++y) {
        double level = 0.35 + 0.25 * static_cast<double>(y) / (s - 1);
        for (int x = 0; x < s; ++x) {
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(level + tint[c], 0.0, 1.0);
                out.image[(static_cast<size_t>(y) * s + x) * 3 + static_cast<size_t>(c)] =
                    static_cast<uint8_t>(std::lround(v * 255.0));
            }
            out.depth[static_cast<size_t>(y) * s + x] =
                static_cast<float>(0.85 + 0.1 * static_cast<double>(y) / (s - 1));
        }
    }

    for (const auto& sh : shapes) {
        int minx = s, miny = s, maxx = -1, maxy = -1;
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                if (!sh.covers(x, y)) continue;
                minx = std::min(minx, x);
                maxx = std::max(maxx, x);
                miny = std::min(miny, y);
                maxy = std::max(maxy, y);
                size_t pix = static_cast<size_t>(y) * s + x;
                // Atmospheric shading: farther shapes render dimmer, so the
                // depth ordering named by the caption is visible in the image.
                double shade = 1.05 - 0.9 * static_cast<double>(sh.depth);
                for (int c = 0; c < 3; ++c)
                    out.image[pix * 3 + static_cast<size_t>(c)] = static_cast<uint8_t>(
                        std::lround(std::clamp(shade * sh.cls.rgb[c], 0.0, 255.0)));
                out.depth[pix] = sh.depth;
            }
        require(maxx >= minx && maxy >= miny, "generate_sample: shape rasterized to nothing");
    }

    // Caption and regions follow near-to-far order; bounding boxes are taken
    // from each shape's own raster mask (tight by construction).
    std::sort(shapes.begin(), shapes.end(),
              [](const auto& a, const auto& b) { return a.depth < b.depth; });
    const auto& vocab = Vocabulary::standard();
    std::string caption = "a photo of";
    for (size_t i = 0; i < shapes.size(); ++i) {
        const auto& sh = shapes[i];
        caption += (i ? " and a " : " a ") + sh.cls.name();
        int minx = s, miny = s, maxx = -1, maxy = -1;
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                if (sh.covers(x, y)) {
                    minx = std::min(minx, x);
                    maxx = std::max(maxx, x);
                    miny = std::min(miny, y);
                    maxy = std::max(maxy, y);
                }
        Region reg;
        reg.box = {static_cast<double>(minx) / s, static_cast<double>(miny) / s,
                   static_cast<double>(maxx + 1) / s, static_cast<double>(maxy + 1) / s};
        reg.text = vocab.encode(sh.cls.name());
        out.regions.push_back(reg);
    }
    out.caption = vocab.encode(caption);
    out.class_id = shapes.front().class_id;
    out.validate();
    return out;
}

inline std::vector<Sample> generate_dataset(uint64_t seed, int64_t n,
                                            const std::vector<ClassSpec>& catalog,
                                            const GenConfig& cfg = {}) {
    require(n >= 1, "generate_dataset: n must be >= 1");
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        out.push_back(generate_sample(seed, static_cast<uint64_t>(i), catalog, cfg));
    return out;
}

// ---------------------------------------------------------------------------
// shard storage
// ---------------------------------------------------------------------------

inline constexpr char kShardMagic[8] = {'M', 'T', 'V', 'L', 'S', 'H', 'R', 'D'};
inline constexpr uint32_t kShardVersion = 1;

namespace detail {

inline uint64_t fnv1a(const uint8_t* data, size_t n) {
    uint64_t h = 1469598103934665603ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 1099511628211ULL;
    }
    return h;
}

template <typename V>
void put_pod(std::vector<uint8_t>& buf, const V& v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    buf.insert(buf.end(), p, p + sizeof(V));
}

template <typename V>
V get_pod(const std::vector<uint8_t>& buf, size_t& pos) {
    V v;
    require(pos + sizeof(V) <= buf.size(), "shard: truncated payload");
    std::memcpy(&v, buf.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
}

inline void put_tokens(std::vector<uint8_t>& buf, const TokenSequence& t) {
    put_pod(buf, static_cast<uint32_t>(t.ids.size()));
    for (int id : t.ids) put_pod(buf, static_cast<int32_t>(id));
}

inline TokenSequence get_tokens(const std::vector<uint8_t>& buf, size_t& pos) {
    TokenSequence t;
    uint32_t n = get_pod<uint32_t>(buf, pos);
    for (uint32_t i = 0; i < n; ++i) t.ids.push_back(get_pod<int32_t>(buf, pos));
    return t;
}

}  // namespace detail

inline std::vector<uint8_t> serialize_sample(const Sample& s) {
    std::vector<uint8_t> buf;
    detail::put_pod(buf, static_cast<int32_t>(s.height));
    detail::put_pod(buf, static_cast<int32_t>(s.width));
    detail::put_pod(buf, static_cast<int32_t>(s.class_id));
    buf.insert(buf.end(), s.image.begin(), s.image.end());
    detail::put_tokens(buf, s.caption);
    detail::put_pod(buf, static_cast<uint32_t>(s.regions.size()));
    for (const auto& r : s.regions) {
        detail::put_pod(buf, r.box.x0);
        detail::put_pod(buf, r.box.y0);
        detail::put_pod(buf, r.box.x1);
        detail::put_pod(buf, r.box.y1);
        detail::put_tokens(buf, r.text);
    }
    for (float d : s.depth) detail::put_pod(buf, d);
    return buf;
}

inline Sample deserialize_sample(const std::vector<uint8_t>& buf) {
    size_t pos = 0;
    Sample s;
    s.height = detail::get_pod<int32_t>(buf, pos);
    s.width = detail::get_pod<int32_t>(buf, pos);
    s.class_id = detail::get_pod<int32_t>(buf, pos);
    size_t npix = static_cast<size_t>(s.height) * s.width;
    require(pos + npix * 3 <= buf.size(), "shard: truncated image");
    s.image.assign(buf.begin() + static_cast<ptrdiff_t>(pos),
                   buf.begin() + static_cast<ptrdiff_t>(pos + npix * 3));
    pos += npix * 3;
    s.caption = detail::get_tokens(buf, pos);
    uint32_t nr = detail::get_pod<uint32_t>(buf, pos);
    for (uint32_t i = 0; i < nr; ++i) {
        Region r;
        r.box.x0 = detail::get_pod<double>(buf, pos);
        r.box.y0 = detail::get_pod<double>(buf, pos);
        r.box.x1 = detail::get_pod<double>(buf, pos);
        r.box.y1 = detail::get_pod<double>(buf, pos);
        r.text = detail::get_tokens(buf, pos);
        s.regions.push_back(std::move(r));
    }
    s.depth.resize(npix);
    for (auto& d : s.depth) d = detail::get_pod<float>(buf, pos);
    require(pos == buf.size(), "shard: trailing bytes in sample record");
    return s;
}

inline void write_shard(const std::string& path, const std::vector<Sample>& samples) {
    require(!samples.empty(), "write_shard: empty shard");
    std::vector<uint8_t> payload;
    std::vector<uint64_t> offsets;
    for (const auto& s : samples) {
        offsets.push_back(payload.size());
        auto rec = serialize_sample(s);
        detail::put_pod(payload, static_cast<uint32_t>(rec.size()));
        payload.insert(payload.end(), rec.begin(), rec.end());
    }
    uint64_t checksum = detail::fnv1a(payload.data(), payload.size());

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_shard: cannot open " + path);
    f.write(kShardMagic, 8);
    uint32_t ver = kShardVersion;
    f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    uint64_t count = samples.size();
    f.write(reinterpret_cast<const char*>(&count), sizeof(count));
    f.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    f.write(reinterpret_cast<const char*>(offsets.data()),
            static_cast<std::streamsize>(offsets.size() * sizeof(uint64_t)));
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
    if (!f) throw std::runtime_error("write_shard: write failed for " + path);
}

inline std::vector<Sample> read_shard(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_shard: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kShardMagic, 8) != 0)
        throw std::runtime_error("read_shard: bad magic in " + path);
    uint32_t ver = 0;
    f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    if (ver != kShardVersion) throw std::runtime_error("read_shard: unsupported version");
    uint64_t count = 0, checksum = 0;
    f.read(reinterpret_cast<char*>(&count), sizeof(count));
    f.read(reinterpret_cast<char*>(&checksum), sizeof(checksum));
    std::vector<uint64_t> offsets(count);
    f.read(reinterpret_cast<char*>(offsets.data()),
           static_cast<std::streamsize>(count * sizeof(uint64_t)));
    std::vector<uint8_t> payload{std::istreambuf_iterator<char>(f),
                                 std::istreambuf_iterator<char>()};
    if (detail::fnv1a(payload.data(), payload.size()) != checksum)
        throw std::runtime_error("read_shard: checksum mismatch in " + path + " (corrupted shard)");
    for (size_t i = 1; i < offsets.size(); ++i)
        if (offsets[i] <= offsets[i - 1])
            throw std::runtime_error("read_shard: offsets not strictly increasing in " + path);

    std::vector<Sample> out;
    for (uint64_t i = 0; i < count; ++i) {
        size_t pos = offsets[i];
        uint32_t len = detail::get_pod<uint32_t>(payload, pos);
        require(pos + len <= payload.size(), "read_shard: record overruns payload");
        std::vector<uint8_t> rec(payload.begin() + static_cast<ptrdiff_t>(pos),
                                 payload.begin() + static_cast<ptrdiff_t>(pos + len));
        out.push_back(deserialize_sample(rec));
    }
    return out;
}

// Writes shards of at most shard_size samples plus a human-readable manifest.
inline std::string write_dataset(const std::string& dir, const std::vector<Sample>& samples,
                                 uint64_t seed, int64_t shard_size = 2048) {
    require(!samples.empty(), "write_dataset: no samples");
    require(shard_size >= 1, "write_dataset: shard_size must be >= 1");
    std::filesystem::create_directories(dir);
    std::vector<std::pair<std::string, size_t>> shards;
    for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(shard_size)) {
        size_t end = std::min(samples.size(), start + static_cast<size_t>(shard_size));
        std::string name = "shard_" + std::to_string(shards.size()) + ".bin";
        write_shard(dir + "/" + name, {samples.begin() + static_cast<ptrdiff_t>(start),
                                       samples.begin() + static_cast<ptrdiff_t>(end)});
        shards.emplace_back(name, end - start);
    }
    std::string manifest_path = dir + "/manifest.txt";
    std::ofstream m(manifest_path, std::ios::trunc);
    if (!m) throw std::runtime_error("write_dataset: cannot open " + manifest_path);
    m << "generator_version = " << kGeneratorVersion << "\n";
    m << "seed = " << seed << "\n";
    m << "total_samples = " << samples.size() << "\n";
    m << "shard_count = " << shards.size() << "\n";
    for (const auto& [name, count] : shards) m << "shard " << name << " = " << count << "\n";
    return manifest_path;
}

inline std::vector<Sample> load_dataset(const std::string& dir) {
    std::ifstream m(dir + "/manifest.txt");
    if (!m) throw std::runtime_error("load_dataset: cannot open " + dir + "/manifest.txt");
    std::vector<Sample> out;
    std::string line;
    while (std::getline(m, line)) {
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key != "shard") continue;
        std::string name, eq;
        size_t count;
        is >> name >> eq >> count;
        auto samples = read_shard(dir + "/" + name);
        require(samples.size() == count, "load_dataset: shard count mismatch for " + name);
        out.insert(out.end(), samples.begin(), samples.end());
    }
    require(!out.empty(), "load_dataset: no shards listed in manifest");
    return out;
}

// ---------------------------------------------------------------------------
// filtering
// ---------------------------------------------------------------------------

enum class FilterAction { Keep, Resize, Drop };

struct FilterResult {
    FilterAction action;
    int height, width;  // post-action dims (unchanged for Keep/Drop)
};

inline FilterResult filter_sample(int height, int width, int min_side = 32, int max_side = 128) {
    require(height > 0 && width > 0, "filter_sample: dims must be positive");
    if (std::min(height, width) < min_side) return {FilterAction::Drop, height, width};
    int long_side = std::max(height, width);
    if (long_side > max_side) {
        double scale = static_cast<double>(max_side) / long_side;
        int h = static_cast<int>(std::lround(height * scale));
        int w = static_cast<int>(std::lround(width * scale));
        return {FilterAction::Resize, h, w};
    }
    return {FilterAction::Keep, height, width};
}

// ---------------------------------------------------------------------------
// views
// ---------------------------------------------------------------------------

struct CropWindow {
    double x0 = 0, y0 = 0, side = 0;  // source-pixel coordinates

    double area() const { return side * side; }
};

template <typename T>
struct ViewSet {
    Tensor<T> global_image;             // [G, G, 3]
    Tensor<T> global_depth;             // [G, G], transformed with the crop
    std::vector<Region> regions;        // boxes re-expressed in crop coordinates
    std::vector<Tensor<T>> local_crops;  // M images [L, L, 3]
    MaskPattern mask;                   // over global-crop patches
    CropWindow global_window;
    std::vector<CropWindow> local_windows;
};

namespace detail {

// Bilinear resample of a crop window [x0, y0, side] to dst x dst; channels
// interleaved (ch = 3 for images, 1 for depth).
template <typename T>
std::vector<T> resample_crop(const std::vector<T>& src, int H, int W, int ch, double x0, double y0,
                             double side, int dst) {
    std::vector<T> out(static_cast<size_t>(dst) * dst * static_cast<size_t>(ch));
    for (int i = 0; i < dst; ++i)
        for (int j = 0; j < dst; ++j) {
            // Sample positions spread over the window, half-pixel aligned.
            double sy = y0 + (i + 0.5) * side / dst - 0.5;
            double sx = x0 + (j + 0.5) * side / dst - 0.5;
            sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
            sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
            int yl = static_cast<int>(sy), xl = static_cast<int>(sx);
            int yh = std::min(yl + 1, H - 1), xh = std::min(xl + 1, W - 1);
            double wy = sy - yl, wx = sx - xl;
            for (int c = 0; c < ch; ++c) {
                auto px = [&](int y, int x) {
                    return static_cast<double>(
                        src[(static_cast<size_t>(y) * W + static_cast<size_t>(x)) * ch +
                            static_cast<size_t>(c)]);
                };
                double v = (1 - wy) * ((1 - wx) * px(yl, xl) + wx * px(yl, xh)) +
                           wy * ((1 - wx) * px(yh, xl) + wx * px(yh, xh));
                out[(static_cast<size_t>(i) * dst + static_cast<size_t>(j)) * ch +
                    static_cast<size_t>(c)] = static_cast<T>(v);
            }
        }
    return out;
}

}  // namespace detail

// One global random-resized crop (with depth and boxes transformed through the
// same window), M local crops, and an exact-ratio mask over global patches.
// Every random draw comes from the supplied rng.
template <typename T>
ViewSet<T> make_views(const Sample& sample, std::mt19937_64& rng, const EncoderConfig& enc,
                      int local_crop_count = 6, double mask_ratio = 0.5) {
    require(sample.height >= enc.image_size && sample.width >= enc.image_size,
            "make_views: image smaller than the global crop size");
    const int H = sample.height, W = sample.width;
    auto uniform = [&](double a, double b) {
        return std::uniform_real_distribution<double>(a, b)(rng);
    };

    std::vector<T> img(sample.image.size());
    for (size_t i = 0; i < img.size(); ++i) img[i] = static_cast<T>(sample.image[i]) / T(255);
    std::vector<T> dep(sample.depth.size());
    for (size_t i = 0; i < dep.size(); ++i) dep[i] = static_cast<T>(sample.depth[i]);

    ViewSet<T> out;

    // Global crop: square window covering 60-100% of the short-side area.
    const int short_side = std::min(H, W);
    double gfrac = std::sqrt(uniform(0.6, 1.0));
    double gside = gfrac * short_side;
    double gx0 = uniform(0.0, W - gside);
    double gy0 = uniform(0.0, H - gside);
    out.global_image = Tensor<T>({enc.image_size, enc.image_size, 3},
                                 detail::resample_crop<T>(img, H, W, 3, gx0, gy0, gside,
                                                          enc.image_size));
    out.global_depth = Tensor<T>({enc.image_size, enc.image_size},
                                 detail::resample_crop<T>(dep, H, W, 1, gx0, gy0, gside,
                                                          enc.image_size));
    out.global_window = {gx0, gy0, gside};

    // Regions re-expressed in crop coordinates; boxes that collapse below one
    // patch in either dimension are dropped.
    const double min_extent = static_cast<double>(enc.patch_size) / enc.image_size;
    for (const auto& r : sample.regions) {
        RegionBox b;
        b.x0 = std::clamp((r.box.x0 * W - gx0) / gside, 0.0, 1.0);
        b.x1 = std::clamp((r.box.x1 * W - gx0) / gside, 0.0, 1.0);
        b.y0 = std::clamp((r.box.y0 * H - gy0) / gside, 0.0, 1.0);
        b.y1 = std::clamp((r.box.y1 * H - gy0) / gside, 0.0, 1.0);
        if (b.x1 - b.x0 < min_extent || b.y1 - b.y0 < min_extent) continue;
        out.regions.push_back({b, r.text});
    }

    // Local crops: 15-40% of the short-side area, independent windows.
    for (int m = 0; m < local_crop_count; ++m) {
        double lfrac = std::sqrt(uniform(0.15, 0.4));
        double lside = lfrac * short_side;
        double lx0 = uniform(0.0, W - lside);
        double ly0 = uniform(0.0, H - lside);
        out.local_crops.push_back(
            Tensor<T>({enc.local_size, enc.local_size, 3},
                      detail::resample_crop<T>(img, H, W, 3, lx0, ly0, lside, enc.local_size)));
        out.local_windows.push_back({lx0, ly0, lside});
    }

    // Mask: exactly round(ratio * N) patches.
    const int n = enc.num_patches();
    const int k = static_cast<int>(std::lround(mask_ratio * n));
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    out.mask.mask.assign(static_cast<size_t>(n), 0);
    for (int i = 0; i < k; ++i) out.mask.mask[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
    out.mask.ratio = mask_ratio;
    out.mask.validate();
    return out;
}

// ---------------------------------------------------------------------------
// epoch iteration
// ---------------------------------------------------------------------------

// One optimizer step's worth of sample indices, pre-split per worker in
// iterator order. The final step of an epoch may be partial.
using StepBatches = std::vector<std::vector<int>>;

inline std::vector<int> epoch_order(int n, uint64_t seed, int64_t epoch) {
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

// Deterministic epoch plan: shuffle by (seed, epoch), then cut consecutive
// global batches of worker_count * batch_per_worker samples, splitting each
// contiguously across workers. The multiset union over all workers and steps
// is exactly the epoch.
inline std::vector<StepBatches> plan_epoch(int n, int batch_per_worker, int worker_count,
                                           uint64_t seed, int64_t epoch) {
    require(n >= 1, "plan_epoch: empty dataset");
    require(batch_per_worker >= 1 && worker_count >= 1, "plan_epoch: bad batch/worker config");
    require(batch_per_worker * worker_count <= n,
            "plan_epoch: batch size exceeds the dataset (" +
                std::to_string(batch_per_worker * worker_count) + " > " + std::to_string(n) + ")");
    std::vector<int> order = epoch_order(n, seed, epoch);
    const int global = batch_per_worker * worker_count;
    std::vector<StepBatches> steps;
    for (int start = 0; start < n; start += global) {
        int m = std::min(global, n - start);
        StepBatches sb(static_cast<size_t>(worker_count));
        for (int w = 0; w < worker_count; ++w) {
            int a = start + static_cast<int>(static_cast<int64_t>(w) * m / worker_count);
            int b = start + static_cast<int>(static_cast<int64_t>(w + 1) * m / worker_count);
            sb[static_cast<size_t>(w)].assign(order.begin() + a, order.begin() + b);
        }
        steps.push_back(std::move(sb));
    }
    return steps;
}

}  // namespace mtvl

#pragma once

// Evaluation probes (zero-shot classification, retrieval, depth probe), the
// task-expansion / synergy analytics, and the ablation harness.

#include <array>
#include <optional>

#include "mtvl/trainer.hpp"

namespace mtvl {

struct EvalResult {
    std::string metric;  // zeroshot_acc | recall_i2t | recall_t2i | depth_rmse
    double value = 0;
    std::string dataset_id, checkpoint_id;
    uint64_t seed = 0;

    void validate() const {
        require(metric == "zeroshot_acc" || metric == "recall_i2t" || metric == "recall_t2i" ||
                    metric == "depth_rmse",
                "EvalResult: unknown metric '" + metric + "'");
        require(std::isfinite(value), "EvalResult: non-finite value");
    }

    std::string line() const {
        std::ostringstream os;
        os << std::setprecision(17);
        os << "metric=" << metric << " value=" << value << " dataset=" << dataset_id
           << " checkpoint=" << checkpoint_id << " seed=" << seed;
        return os.str();
    }
};

// ---------------------------------------------------------------------------
// embedding helpers (value-level; evaluation builds no gradient graphs worth
// keeping, so results are plain vectors)
// ---------------------------------------------------------------------------

namespace detail {

inline void l2_normalize(std::vector<double>& v) {
    double sq = 0;
    for (double x : v) sq += x * x;
    double n = std::sqrt(std::max(sq, 1e-24));
    for (double& x : v) x /= n;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail

template <typename T>
std::vector<double> image_embedding(const Model<T>& model, const Sample& s) {
    require(s.height == model.cfg.enc.image_size && s.width == model.cfg.enc.image_size,
            "image_embedding: sample size does not match the encoder input size");
    EncoderOutput<T> enc = model.vit.encode(image_tensor<T>(s));
    Tensor<T> v = model.pool(enc.normed);
    std::vector<double> out(v.value().begin(), v.value().end());
    detail::l2_normalize(out);
    return out;
}

template <typename T>
std::vector<double> text_embedding(const Model<T>& model, const TokenSequence& tokens) {
    Tensor<T> t = model.txt(tokens);
    return {t.value().begin(), t.value().end()};  // already unit norm
}

// ---------------------------------------------------------------------------
// zero-shot classification
// ---------------------------------------------------------------------------

// Argmax with the fixed tie rule: lowest index wins.
inline int argmax_lowest(const std::vector<double>& scores) {
    require(!scores.empty(), "argmax_lowest: empty scores");
    int best = 0;
    for (int i = 1; i < static_cast<int>(scores.size()); ++i)
        if (scores[static_cast<size_t>(i)] > scores[static_cast<size_t>(best)]) best = i;
    return best;
}

// Class embeddings: average each class's prompt embeddings, then renormalize.
template <typename T>
std::vector<std::vector<double>> class_prompt_embeddings(
    const Model<T>& model, const std::vector<std::vector<TokenSequence>>& prompts_per_class) {
    require(!prompts_per_class.empty(), "zero_shot_classify: need at least one class");
    std::vector<std::vector<double>> out;
    for (const auto& prompts : prompts_per_class) {
        require(!prompts.empty(), "zero_shot_classify: class with no prompts");
        std::vector<double> acc(static_cast<size_t>(model.cfg.enc.width), 0.0);
        for (const auto& p : prompts) {
            auto e = text_embedding(model, p);
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += e[i];
        }
        for (double& x : acc) x /= static_cast<double>(prompts.size());
        detail::l2_normalize(acc);
        out.push_back(std::move(acc));
    }
    return out;
}

template <typename T>
double zero_shot_classify(const Model<T>& model,
                          const std::vector<std::vector<TokenSequence>>& prompts_per_class,
                          const std::vector<Sample>& eval_set) {
    require(!eval_set.empty(), "zero_shot_classify: empty eval set rejected");
    auto classes = class_prompt_embeddings(model, prompts_per_class);
    int correct = 0;
    for (const auto& s : eval_set) {
        require(s.class_id >= 0 && s.class_id < static_cast<int>(classes.size()),
                "zero_shot_classify: sample class id outside the prompt set");
        auto v = image_embedding(model, s);
        std::vector<double> sims;
        for (const auto& c : classes) sims.push_back(detail::dot(v, c));
        if (argmax_lowest(sims) == s.class_id) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(eval_set.size());
}

// Standard prompt set for a class catalog: the bare name plus one template.
inline std::vector<std::vector<TokenSequence>> default_prompts(
    const std::vector<ClassSpec>& catalog) {
    const auto& vocab = Vocabulary::standard();
    std::vector<std::vector<TokenSequence>> out;
    for (const auto& c : catalog)
        out.push_back({vocab.encode(c.name()), vocab.encode("a photo of a " + c.name())});
    return out;
}

// ---------------------------------------------------------------------------
// retrieval
// ---------------------------------------------------------------------------

struct RetrievalResult {
    double recall_i2t = 0, recall_t2i = 0;
    bool duplicate_texts = false;  // pool repeats a caption; equality credit applies
};

// Cosine top-1 matching over pre-computed unit embeddings. Identical texts
// are one retrieval target: when the pool repeats a caption, retrieving any
// copy of the right caption (or any image paired with it) counts as a hit,
// which keeps the ground truth well-defined.
inline RetrievalResult retrieval_recall_at_1(const std::vector<std::vector<double>>& img,
                                             const std::vector<std::vector<double>>& txt) {
    require(img.size() == txt.size(), "retrieval: unpaired sets");
    require(img.size() >= 2, "retrieval: need at least two pairs");
    const int n = static_cast<int>(img.size());
    RetrievalResult out;
    std::vector<int> group(static_cast<size_t>(n), -1);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < i; ++j)
            if (txt[static_cast<size_t>(i)] == txt[static_cast<size_t>(j)]) {
                group[static_cast<size_t>(i)] = group[static_cast<size_t>(j)];
                out.duplicate_texts = true;
                break;
            }
        if (group[static_cast<size_t>(i)] < 0) group[static_cast<size_t>(i)] = i;
    }
    int hit_i2t = 0, hit_t2i = 0;
    for (int i = 0; i < n; ++i) {
        std::vector<double> row_i2t, row_t2i;
        for (int j = 0; j < n; ++j) {
            row_i2t.push_back(detail::dot(img[static_cast<size_t>(i)], txt[static_cast<size_t>(j)]));
            row_t2i.push_back(detail::dot(txt[static_cast<size_t>(i)], img[static_cast<size_t>(j)]));
        }
        if (group[static_cast<size_t>(argmax_lowest(row_i2t))] == group[static_cast<size_t>(i)])
            ++hit_i2t;
        if (group[static_cast<size_t>(argmax_lowest(row_t2i))] == group[static_cast<size_t>(i)])
            ++hit_t2i;
    }
    out.recall_i2t = static_cast<double>(hit_i2t) / n;
    out.recall_t2i = static_cast<double>(hit_t2i) / n;
    return out;
}

template <typename T>
RetrievalResult retrieval_recall_at_1(const Model<T>& model, const std::vector<Sample>& pairs) {
    std::vector<std::vector<double>> img, txt;
    for (const auto& s : pairs) {
        img.push_back(image_embedding(model, s));
        txt.push_back(text_embedding(model, s.caption));
    }
    return retrieval_recall_at_1(img, txt);
}

// ---------------------------------------------------------------------------
// depth probe
// ---------------------------------------------------------------------------

namespace detail {

// Solves A x = b by Gaussian elimination with partial pivoting; A is n x n.
inline std::vector<double> solve_linear(std::vector<double> A, std::vector<double> b) {
    const int n = static_cast<int>(b.size());
    for (int k = 0; k < n; ++k) {
        int piv = k;
        for (int i = k + 1; i < n; ++i)
            if (std::abs(A[static_cast<size_t>(i) * n + k]) >
                std::abs(A[static_cast<size_t>(piv) * n + k]))
                piv = i;
        if (piv != k) {
            for (int j = 0; j < n; ++j)
                std::swap(A[static_cast<size_t>(k) * n + j], A[static_cast<size_t>(piv) * n + j]);
            std::swap(b[static_cast<size_t>(k)], b[static_cast<size_t>(piv)]);
        }
        double d = A[static_cast<size_t>(k) * n + k];
        require(std::abs(d) > 1e-12, "solve_linear: singular system");
        for (int i = k + 1; i < n; ++i) {
            double f = A[static_cast<size_t>(i) * n + k] / d;
            if (f == 0.0) continue;
            for (int j = k; j < n; ++j)
                A[static_cast<size_t>(i) * n + j] -= f * A[static_cast<size_t>(k) * n + j];
            b[static_cast<size_t>(i)] -= f * b[static_cast<size_t>(k)];
        }
    }
    std::vector<double> x(static_cast<size_t>(n), 0.0);
    for (int i = n - 1; i >= 0; --i) {
        double s = b[static_cast<size_t>(i)];
        for (int j = i + 1; j < n; ++j) s -= A[static_cast<size_t>(i) * n + j] * x[static_cast<size_t>(j)];
        x[static_cast<size_t>(i)] = s / A[static_cast<size_t>(i) * n + i];
    }
    return x;
}

// Per-patch probe features on the frozen encoder: the global embedding
// concatenated to each patch token, plus a bias term. Targets are per-patch
// mean depths.
template <typename T>
void probe_features(const Model<T>& model, const std::vector<Sample>& samples,
                    std::vector<std::vector<double>>& X, std::vector<double>& y) {
    const auto& enc = model.cfg.enc;
    const int g = enc.grid(), p = enc.patch_size, d = enc.width;
    for (const auto& s : samples) {
        require(s.height == enc.image_size && s.width == enc.image_size,
                "depth_probe: sample size mismatch");
        EncoderOutput<T> out = model.vit.encode(image_tensor<T>(s));
        Tensor<T> pooled = model.pool(out.normed);
        std::vector<double> v(pooled.value().begin(), pooled.value().end());
        l2_normalize(v);
        auto z = out.normed.value();
        for (int pi = 0; pi < g; ++pi)
            for (int pj = 0; pj < g; ++pj) {
                int patch = pi * g + pj;
                std::vector<double> f;
                f.reserve(static_cast<size_t>(2 * d + 1));
                f.insert(f.end(), v.begin(), v.end());
                for (int c = 0; c < d; ++c)
                    f.push_back(static_cast<double>(z[static_cast<size_t>(patch) * d + c]));
                f.push_back(1.0);
                X.push_back(std::move(f));

                double t = 0;
                for (int i = 0; i < p; ++i)
                    for (int j = 0; j < p; ++j)
                        t += s.depth[static_cast<size_t>((pi * p + i) * s.width + pj * p + j)];
                y.push_back(t / (p * p));
            }
    }
}

}  // namespace detail

// Ridge-regression probe on frozen features; returns RMSE on the eval split.
template <typename T>
double depth_probe_rmse(const Model<T>& model, const std::vector<Sample>& train_set,
                        const std::vector<Sample>& eval_set, double ridge = 1e-3) {
    require(!train_set.empty() && !eval_set.empty(), "depth_probe: empty split");
    std::vector<std::vector<double>> Xtr, Xev;
    std::vector<double> ytr, yev;
    detail::probe_features(model, train_set, Xtr, ytr);
    detail::probe_features(model, eval_set, Xev, yev);

    const int dim = static_cast<int>(Xtr.front().size());
    std::vector<double> xtx(static_cast<size_t>(dim) * dim, 0.0), xty(static_cast<size_t>(dim), 0.0);
    for (size_t r = 0; r < Xtr.size(); ++r) {
        const auto& f = Xtr[r];
        for (int i = 0; i < dim; ++i) {
            xty[static_cast<size_t>(i)] += f[static_cast<size_t>(i)] * ytr[r];
            for (int j = i; j < dim; ++j)
                xtx[static_cast<size_t>(i) * dim + j] += f[static_cast<size_t>(i)] * f[static_cast<size_t>(j)];
        }
    }
    for (int i = 0; i < dim; ++i) {
        xtx[static_cast<size_t>(i) * dim + i] += ridge;
        for (int j = 0; j < i; ++j)
            xtx[static_cast<size_t>(i) * dim + j] = xtx[static_cast<size_t>(j) * dim + i];
    }
    std::vector<double> w = detail::solve_linear(std::move(xtx), std::move(xty));

    double sq = 0;
    for (size_t r = 0; r < Xev.size(); ++r) {
        double pred = detail::dot(Xev[r], w);
        double e = pred - yev[r];
        sq += e * e;
    }
    double rmse = std::sqrt(sq / static_cast<double>(Xev.size()));
    require(std::isfinite(rmse), "depth_probe: probe diverged");
    return rmse;
}

// RMSE of the constant-mean predictor on the eval split: the standard
// deviation of its targets.
template <typename T>
double depth_baseline_rmse(const Model<T>& model, const std::vector<Sample>& eval_set) {
    std::vector<std::vector<double>> X;
    std::vector<double> y;
    detail::probe_features(model, eval_set, X, y);
    double mean = 0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(y.size());
    double sq = 0;
    for (double v : y) sq += (v - mean) * (v - mean);
    return std::sqrt(sq / static_cast<double>(y.size()));
}

// ---------------------------------------------------------------------------
// synergy and the marginal-gain table
// ---------------------------------------------------------------------------

// 100 * (dAB - max(dA, dB)) / max(dA, dB); undefined when the denominator is
// zero (reported as nullopt).
inline std::optional<double> synergy(double dA, double dB, double dAB) {
    double m = std::max(dA, dB);
    if (m == 0.0) return std::nullopt;
    return 100.0 * (dAB - m) / m;
}

struct AblationGrid {
    std::vector<std::string> row_labels;            // expansion path order
    std::vector<std::string> metrics;               // column names
    std::vector<bool> lower_is_better;              // per metric (RMSE-like)
    std::vector<std::vector<double>> values;        // [rows][metrics]
    std::vector<std::vector<double>> increments;    // [rows-1][metrics], raw signed
    std::vector<double> delta;                      // [metrics], telescoped total

    // A signed increment counts as an improvement according to the metric's
    // orientation.
    bool is_improvement(size_t metric, double increment) const {
        return lower_is_better[metric] ? increment < 0 : increment > 0;
    }
};

inline AblationGrid marginal_gain_table(std::vector<std::string> row_labels,
                                        std::vector<std::string> metrics,
                                        std::vector<std::vector<double>> values,
                                        std::vector<bool> lower_is_better = {}) {
    require(!row_labels.empty() && row_labels.size() == values.size(),
            "marginal_gain_table: row/label mismatch");
    for (const auto& row : values)
        require(row.size() == metrics.size(), "marginal_gain_table: ragged rows");
    if (lower_is_better.empty()) lower_is_better.assign(metrics.size(), false);
    require(lower_is_better.size() == metrics.size(), "marginal_gain_table: orientation mismatch");

    AblationGrid g;
    g.row_labels = std::move(row_labels);
    g.metrics = std::move(metrics);
    g.lower_is_better = lower_is_better;
    g.values = std::move(values);
    for (size_t r = 1; r < g.values.size(); ++r) {
        std::vector<double> inc;
        for (size_t m = 0; m < g.metrics.size(); ++m)
            inc.push_back(g.values[r][m] - g.values[r - 1][m]);
        g.increments.push_back(std::move(inc));
    }
    // Delta accumulates the increments so the telescoping identity holds
    // bit-exactly, independent of floating-point association.
    g.delta.assign(g.metrics.size(), 0.0);
    for (const auto& inc : g.increments)
        for (size_t m = 0; m < g.metrics.size(); ++m) g.delta[m] += inc[m];
    return g;
}

inline std::string render_grid(const AblationGrid& g) {
    std::ostringstream os;
    os << std::setprecision(6);
    os << "tasks";
    for (const auto& m : g.metrics) os << "\t" << m;
    os << "\n";
    for (size_t r = 0; r < g.values.size(); ++r) {
        os << g.row_labels[r];
        for (size_t m = 0; m < g.metrics.size(); ++m) {
            os << "\t" << g.values[r][m];
            if (r > 0) {
                double inc = g.increments[r - 1][m];
                os << " (" << (inc >= 0 ? "+" : "") << inc << ")";
            }
        }
        os << "\n";
    }
    os << "delta";
    for (double d : g.delta) os << "\t" << (d >= 0 ? "+" : "") << d;
    os << "\n";
    return os.str();
}

struct SynergyEntry {
    std::string pair;    // e.g. "ssl+ground"
    std::string metric;  // gain-oriented metric name
    double dA = 0, dB = 0, dAB = 0;
    std::optional<double> percent;
};

inline std::string render_synergy(const std::vector<SynergyEntry>& table) {
    std::ostringstream os;
    os << std::setprecision(6);
    os << "pair\tmetric\tdA\tdB\tdAB\tsynergy\n";
    for (const auto& e : table) {
        os << e.pair << "\t" << e.metric << "\t" << e.dA << "\t" << e.dB << "\t" << e.dAB << "\t";
        if (e.percent) os << *e.percent;
        else os << "undefined";
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// ablation harness
// ---------------------------------------------------------------------------

struct AblationData {
    std::vector<Sample> train;
    std::vector<Sample> eval_class;    // single-shape images for zero-shot
    std::vector<Sample> eval_pairs;    // fresh pairs for retrieval (captions may repeat)
    std::vector<Sample> probe_train;   // depth probe fit split
    std::vector<Sample> probe_eval;    // depth probe test split
    std::vector<ClassSpec> catalog;
};

inline AblationData make_ablation_data(uint64_t seed, int train_n, int eval_n = 100) {
    AblationData d;
    d.catalog = default_class_catalog();
    d.train = generate_dataset(seed, train_n, d.catalog);
    GenConfig single{32, 1, 1};
    d.eval_class = generate_dataset(mix_seed(seed, 1001), eval_n, d.catalog, single);
    d.eval_pairs = generate_dataset(mix_seed(seed, 1002), eval_n, d.catalog);
    d.probe_train = generate_dataset(mix_seed(seed, 1003), eval_n, d.catalog);
    d.probe_eval = generate_dataset(mix_seed(seed, 1004), eval_n, d.catalog);
    return d;
}

template <typename T>
std::map<std::string, double> evaluate_model(const Model<T>& model, const AblationData& data) {
    std::map<std::string, double> m;
    m["zeroshot_acc"] = zero_shot_classify(model, default_prompts(data.catalog), data.eval_class);
    RetrievalResult r = retrieval_recall_at_1(model, data.eval_pairs);
    m["recall_i2t"] = r.recall_i2t;
    m["recall_t2i"] = r.recall_t2i;
    m["depth_rmse"] = depth_probe_rmse(model, data.probe_train, data.probe_eval);
    return m;
}

struct AblationRun {
    std::string label;
    TaskFlags tasks;
    std::map<std::string, double> metrics;
};

struct AblationResult {
    AblationGrid grid;                 // the expansion path
    std::vector<SynergyEntry> synergy_table;
    std::vector<AblationRun> runs;     // all trained subsets
};

// Trains every required subset (the expansion path plus the pairwise grid
// over the VL baseline), evaluates each, and derives both tables. All runs
// share the seed, data, and config except the task flags.
template <typename T>
AblationResult run_ablation(const TrainConfig& base, const AblationData& data,
                            const std::function<void(const std::string&)>& progress = {}) {
    static const std::vector<std::pair<std::string, TaskFlags>> kSubsets = {
        {"vl", {true, false, false, false}},
        {"vl+ssl", {true, true, false, false}},
        {"vl+ground", {true, false, true, false}},
        {"vl+depth", {true, false, false, true}},
        {"vl+ssl+ground", {true, true, true, false}},
        {"vl+ssl+depth", {true, true, false, true}},
        {"vl+ground+depth", {true, false, true, true}},
        {"vl+ssl+ground+depth", {true, true, true, true}},
    };

    AblationResult out;
    for (const auto& [label, tasks] : kSubsets) {
        if (progress) progress("training " + label);
        TrainConfig cfg = base;
        cfg.tasks = tasks;
        Trainer<T> trainer(cfg, data.train);
        trainer.run();
        AblationRun run{label, tasks, evaluate_model(trainer.model(), data)};
        out.runs.push_back(std::move(run));
    }
    auto metrics_of = [&](const std::string& label) -> const std::map<std::string, double>& {
        for (const auto& r : out.runs)
            if (r.label == label) return r.metrics;
        fail("run_ablation: missing run " + label);
    };

    const std::vector<std::string> metric_names = {"zeroshot_acc", "recall_i2t", "recall_t2i",
                                                   "depth_rmse"};
    const std::vector<bool> lower = {false, false, false, true};
    std::vector<std::string> path = {"vl", "vl+ssl", "vl+ssl+ground", "vl+ssl+ground+depth"};
    std::vector<std::vector<double>> rows;
    for (const auto& label : path) {
        std::vector<double> row;
        for (const auto& m : metric_names) row.push_back(metrics_of(label).at(m));
        rows.push_back(std::move(row));
    }
    out.grid = marginal_gain_table(path, metric_names, rows, lower);

    // Pairwise synergy over the VL baseline; gains are oriented so that
    // improvement is positive regardless of the metric direction.
    const auto& base_m = metrics_of("vl");
    auto gain = [&](const std::map<std::string, double>& m, const std::string& metric, bool low) {
        return low ? base_m.at(metric) - m.at(metric) : m.at(metric) - base_m.at(metric);
    };
    static const std::vector<std::array<std::string, 3>> kPairs = {
        {"ssl+ground", "vl+ssl", "vl+ground"},
        {"ssl+depth", "vl+ssl", "vl+depth"},
        {"ground+depth", "vl+ground", "vl+depth"},
    };
    static const std::map<std::string, std::string> kCombined = {
        {"ssl+ground", "vl+ssl+ground"},
        {"ssl+depth", "vl+ssl+depth"},
        {"ground+depth", "vl+ground+depth"},
    };
    for (const auto& [pair, runA, runB] : kPairs) {
        for (size_t mi = 0; mi < metric_names.size(); ++mi) {
            SynergyEntry e;
            e.pair = pair;
            e.metric = metric_names[mi];
            e.dA = gain(metrics_of(runA), e.metric, lower[mi]);
            e.dB = gain(metrics_of(runB), e.metric, lower[mi]);
            e.dAB = gain(metrics_of(kCombined.at(pair)), e.metric, lower[mi]);
            e.percent = synergy(e.dA, e.dB, e.dAB);
            out.synergy_table.push_back(std::move(e));
        }
    }
    return out;
}

}  // namespace mtvl

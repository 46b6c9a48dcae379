// Command-line surface: gen-data / train / eval / ablate / report.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mtvl/analysis.hpp"

namespace fs = std::filesystem;
using namespace mtvl;

namespace {

std::string one_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << content;
    if (!f) throw std::runtime_error("write failed for " + path);
}

struct CommonFlags {
    std::string config, out;
    uint64_t seed = 0;
    std::string tasks;
    int workers = 0;  // 0 = not set
};

// Flags first, then the config file on top; the file wins, with a warning for
// every flag the user actually passed that it overrides.
TrainConfig resolve_train_config(const CommonFlags& common, const TrainConfig& flag_cfg,
                                 const std::map<std::string, const char*>& flag_names,
                                 const CLI::App* cmd) {
    TrainConfig cfg = flag_cfg;
    if (!common.config.empty()) {
        std::ifstream in(common.config);
        if (!in) throw std::runtime_error("cannot open config file " + common.config);
        auto kv = parse_ini(in);
        auto applied = apply_train_config(kv, cfg);
        for (const auto& key : applied) {
            auto it = flag_names.find(key);
            if (it == flag_names.end()) continue;
            const CLI::Option* opt = cmd->get_option_no_throw(it->second);
            if (opt && opt->count() > 0)
                std::cerr << "warning: config file value for " << key << " overrides " << it->second
                          << "\n";
        }
    }
    return cfg;
}

int cmd_gen_data(const std::string& out, uint64_t seed, int count, int min_shapes, int max_shapes,
                 int shard_size) {
    GenConfig gc;
    gc.min_shapes = min_shapes;
    gc.max_shapes = max_shapes;
    auto samples = generate_dataset(seed, count, default_class_catalog(), gc);
    std::string manifest = write_dataset(out, samples, seed, shard_size);
    std::cout << "wrote " << samples.size() << " samples to " << out << " (manifest " << manifest
              << ")\n";
    return 0;
}

template <typename T>
int run_train(const TrainConfig& cfg, const std::string& data_dir, const std::string& out,
              const std::string& resume) {
    auto samples = load_dataset(data_dir);
    fs::create_directories(out);
    {
        std::ofstream c(out + "/config.ini", std::ios::trunc);
        write_train_config(c, cfg);
    }
    Trainer<T> trainer(cfg, std::move(samples));
    bool resumed = !resume.empty();
    if (resumed) trainer.load(resume);
    std::ofstream log(out + "/metrics.log", resumed ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open " + out + "/metrics.log");
    trainer.run([&](const LossReport& r) {
        log << r.line() << "\n";
        log.flush();
    });
    trainer.save(out + "/checkpoint.bin");
    std::cout << "trained " << trainer.step() << " steps; checkpoint " << out
              << "/checkpoint.bin metrics " << out << "/metrics.log\n";
    return 0;
}

template <typename T>
int run_eval(const TrainConfig& cfg, const std::string& checkpoint, const std::string& out,
             uint64_t eval_seed, int eval_n) {
    Model<T> model(cfg.model, cfg.seed);
    Checkpoint<T> ckpt = load_checkpoint<T>(checkpoint);
    restore_params(model.ps, ckpt);

    AblationData data = make_ablation_data(eval_seed, /*train_n=*/1, eval_n);
    auto metrics = evaluate_model(model, data);

    std::string lines;
    for (const auto& [name, value] : metrics) {
        EvalResult r{name, value, "synthetic-seed" + std::to_string(eval_seed),
                     fs::path(checkpoint).filename().string(), eval_seed};
        r.validate();
        lines += r.line() + "\n";
    }
    std::cout << lines;
    if (!out.empty()) {
        fs::create_directories(out);
        write_text(out + "/eval.log", lines);
    }
    return 0;
}

template <typename T>
int run_ablate(const TrainConfig& base, const std::string& out, uint64_t data_seed, int train_n,
               int eval_n) {
    AblationData data = make_ablation_data(data_seed, train_n, eval_n);
    AblationResult result =
        run_ablation<T>(base, data, [](const std::string& msg) { std::cerr << msg << "\n"; });

    std::string runs;
    for (const auto& r : result.runs) {
        runs += r.label;
        for (const auto& [name, value] : r.metrics) {
            std::ostringstream os;
            os << std::setprecision(17) << " " << name << "=" << value;
            runs += os.str();
        }
        runs += "\n";
    }
    fs::create_directories(out);
    write_text(out + "/ablation_grid.tsv", render_grid(result.grid));
    write_text(out + "/synergy.tsv", render_synergy(result.synergy_table));
    write_text(out + "/runs.log", runs);
    std::cout << render_grid(result.grid) << "\n" << render_synergy(result.synergy_table);
    return 0;
}

int cmd_report(const std::string& dir) {
    bool found = false;
    auto dump = [&](const std::string& path, const std::string& title, bool tail_only) {
        std::ifstream f(path);
        if (!f) return;
        found = true;
        std::cout << "== " << title << " (" << path << ")\n";
        if (tail_only) {
            std::string line, last;
            size_t n = 0;
            while (std::getline(f, line)) {
                last = line;
                ++n;
            }
            std::cout << n << " records, last: " << last << "\n";
        } else {
            std::cout << f.rdbuf();
        }
        std::cout << "\n";
    };
    dump(dir + "/metrics.log", "training metrics", true);
    dump(dir + "/eval.log", "evaluation", false);
    dump(dir + "/ablation_grid.tsv", "task expansion", false);
    dump(dir + "/synergy.tsv", "pairwise synergy", false);
    if (!found) throw std::runtime_error("no reportable files under " + dir);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-task visual pretraining toolkit"};
    app.require_subcommand(1);

    CommonFlags common;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic shard directory");
    std::string gen_out;
    uint64_t gen_seed = 0;
    int gen_count = 1000, gen_min = 1, gen_max = 3, gen_shard = 2048;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--count", gen_count, "number of samples")->check(CLI::PositiveNumber);
    gen->add_option("--min-shapes", gen_min)->check(CLI::Range(1, 3));
    gen->add_option("--max-shapes", gen_max)->check(CLI::Range(1, 3));
    gen->add_option("--shard-size", gen_shard)->check(CLI::PositiveNumber);

    // shared train-like options
    TrainConfig flag_cfg;
    std::string data_dir, resume, checkpoint;
    uint64_t eval_seed = 0;
    int eval_n = 100, train_n = 512;

    auto add_train_flags = [&](CLI::App* cmd) {
        cmd->add_option("--config", common.config, "INI config file (wins over flags)");
        cmd->add_option("--seed", flag_cfg.seed, "training seed");
        cmd->add_option("--tasks", common.tasks, "comma list from vl,ssl,ground,depth");
        cmd->add_option("--workers", flag_cfg.workers, "simulated worker count")
            ->check(CLI::PositiveNumber);
        cmd->add_option("--steps", flag_cfg.steps, "optimizer steps")->check(CLI::PositiveNumber);
        cmd->add_option("--batch", flag_cfg.batch_per_worker, "batch per worker")
            ->check(CLI::PositiveNumber);
        cmd->add_option("--lr", flag_cfg.lr, "peak learning rate");
        cmd->add_option("--precision", flag_cfg.precision, "f32 or f64");
    };

    auto* train = app.add_subcommand("train", "train on a generated dataset");
    add_train_flags(train);
    train->add_option("--data", data_dir, "dataset directory from gen-data")->required();
    train->add_option("--out", common.out, "output directory")->required();
    train->add_option("--resume", resume, "checkpoint to resume from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on fresh synthetic splits");
    eval->add_option("--config", common.config, "resolved config written by train")->required();
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--out", common.out, "output directory for eval.log");
    eval->add_option("--seed", eval_seed, "evaluation data seed");
    eval->add_option("--eval-n", eval_n, "samples per evaluation split")
        ->check(CLI::PositiveNumber);

    auto* ablate = app.add_subcommand("ablate", "train and evaluate all task subsets");
    add_train_flags(ablate);
    ablate->add_option("--out", common.out, "output directory")->required();
    ablate->add_option("--data-seed", eval_seed, "ablation data seed");
    ablate->add_option("--train-n", train_n, "training samples")->check(CLI::PositiveNumber);
    ablate->add_option("--eval-n", eval_n, "samples per evaluation split")
        ->check(CLI::PositiveNumber);

    auto* report = app.add_subcommand("report", "print the artifacts of earlier runs");
    report->add_option("--out", common.out, "directory holding metrics/eval/ablation files")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_data(gen_out, gen_seed, gen_count, gen_min, gen_max, gen_shard);
        }

        const std::map<std::string, const char*> flag_names = {
            {"run.seed", "--seed"},           {"tasks.enabled", "--tasks"},
            {"run.workers", "--workers"},     {"run.steps", "--steps"},
            {"run.batch_per_worker", "--batch"}, {"optim.lr", "--lr"},
            {"run.precision", "--precision"},
        };
        if (!common.tasks.empty()) flag_cfg.tasks = TaskFlags::parse(common.tasks);

        if (train->parsed()) {
            TrainConfig cfg = resolve_train_config(common, flag_cfg, flag_names, train);
            cfg.validate();
            return cfg.precision == "f64" ? run_train<double>(cfg, data_dir, common.out, resume)
                                          : run_train<float>(cfg, data_dir, common.out, resume);
        }
        if (eval->parsed()) {
            TrainConfig cfg = resolve_train_config(common, flag_cfg, flag_names, eval);
            cfg.validate();
            return cfg.precision == "f64"
                       ? run_eval<double>(cfg, checkpoint, common.out, eval_seed, eval_n)
                       : run_eval<float>(cfg, checkpoint, common.out, eval_seed, eval_n);
        }
        if (ablate->parsed()) {
            TrainConfig cfg = resolve_train_config(common, flag_cfg, flag_names, ablate);
            cfg.validate();
            return cfg.precision == "f64"
                       ? run_ablate<double>(cfg, common.out, eval_seed, train_n, eval_n)
                       : run_ablate<float>(cfg, common.out, eval_seed, train_n, eval_n);
        }
        if (report->parsed()) return cmd_report(common.out);
        throw std::runtime_error("no subcommand selected");
    } catch (const std::exception& e) {
        std::cerr << "error: " << one_line(e.what()) << "\n";
        return 1;
    }
}

#include "mfi/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <vector>

#include "mfi/config.hpp"
#include "mfi/error.hpp"
#include "mfi/pipeline.hpp"

namespace mfi {

namespace {

namespace pl = mfi::pipeline;
namespace fs = std::filesystem;

constexpr std::array<std::string_view, 8> kCommands{"train-teacher", "compress",        "assemble-meta", "finetune-meta",
                                                    "incubate",      "finetune-global", "eval",          "count-params"};

struct Options {
    std::string command;
    std::string config;
    std::optional<int> stage;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string checkpoint;
    std::vector<std::string> sets;
};

struct Session {
    Options opts;
    RunConfig cfg;
    std::ostream& out;
    std::ostream& err;

    fs::path dir() const { return cfg.out; }
    fs::path manifest_path() const { return dir() / "manifest.txt"; }

    resnet::ResNetConfig backbone() const {
        auto b = resnet::ResNetConfig::by_name(cfg.backbone, cfg.classes, cfg.width);
        b.zero_init_residual = cfg.zero_init_residual;
        return b;
    }

    std::int64_t hidden() const {
        if (cfg.hidden > 0) return cfg.hidden;
        const auto b = backbone();
        return pl::calibrate_hidden(b, cfg.embed_dim, pl::meta_budget(b));
    }

    pl::TrainHyper hyper(const PhaseConfig& phase) const {
        return {phase.epochs, phase.lr, cfg.weight_decay, cfg.batch_size, cfg.label_smoothing, cfg.seed};
    }

    pl::Context context(MetricsLog* metrics) const {
        pl::Context ctx = pl::make_context(cfg);
        ctx.metrics = metrics;
        ctx.log = [this](const std::string& line) { err << line << std::endl; };
        return ctx;
    }

    fs::path require(const pl::Manifest& m, const std::string& phase) const {
        auto p = m.find(phase);
        if (!p) {
            throw ConfigError("no '" + phase + "' entry in " + manifest_path().string() + "; run the earlier phase first");
        }
        return *p;
    }

    void publish(pl::Manifest& m, const std::string& phase, const Checkpoint& ckpt, const std::string& file) const {
        const fs::path p = dir() / file;
        ckpt.save(p);
        m.record(phase, p);
        m.save(manifest_path());
        out << phase << ": wrote " << p.string() << "\n";
    }
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(precision) << v;
    return s.str();
}

std::string millions(std::int64_t n) { return fmt(static_cast<double>(n) / 1e6, 2) + "M"; }

void print_breakdown(std::ostream& out, const std::string& label, const pl::ParamBreakdown& c) {
    out << std::left << std::setw(8) << label << " stem " << c.stem;
    for (int l = 0; l < 4; ++l) out << "  stage" << (l + 1) << " " << c.stage[l] << " (" << millions(c.stage[l]) << ")";
    out << "  head " << c.head << "  total " << c.total() << " (" << millions(c.total()) << ")\n";
}

void log_eval(Checkpoint& c, const std::string& prefix, const pl::EvalResult& r) {
    c.log[prefix + "_accuracy"] = fmt(r.accuracy, 6);
    c.log[prefix + "_loss"] = fmt(r.loss, 6);
}

void check_freeze(const pl::FinetuneRun& r, const std::string& phase) {
    if (r.frozen_hash_before != r.frozen_hash_after) throw Error(phase + ": frozen parameters changed during training");
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_count_params(Session& s) {
    const auto b = s.backbone();
    const std::int64_t h = s.hidden();
    const std::int64_t image = s.cfg.dataset.image_size;
    const auto teacher = resnet::count_params(b);
    const pl::ParamBreakdown t{teacher.stem, teacher.stage, teacher.head};
    const auto meta = pl::meta_param_counts(b, h, s.cfg.embed_dim, image);
    const auto hybrid = pl::hybrid_param_counts(b, h, s.cfg.embed_dim, image);
    s.out << "backbone " << b.name << "  classes " << b.classes << "  width " << b.width_multiplier << "  hidden " << h
          << "  embed_dim " << s.cfg.embed_dim << "\n";
    print_breakdown(s.out, "teacher", t);
    print_breakdown(s.out, "meta", meta);
    print_breakdown(s.out, "hybrid", hybrid);
    const double reduction = 1.0 - static_cast<double>(hybrid.total()) / static_cast<double>(t.total());
    s.out << "reduction " << fmt(100.0 * reduction, 1) << "%\n";
    return kExitOk;
}

int cmd_train_teacher(Session& s) {
    fs::create_directories(s.dir());
    MetricsLog metrics(s.dir() / "metrics.csv");
    const auto ctx = s.context(&metrics);
    auto run = pl::train_teacher(s.backbone(), ctx, s.hyper(s.cfg.teacher));
    auto m = pl::Manifest::load(s.manifest_path());

    Checkpoint best = pl::teacher_checkpoint(run.best);
    best.log["best_val_accuracy"] = fmt(run.best_val_accuracy, 6);
    log_eval(best, "test", pl::evaluate(run.best, ctx.splits.test, ctx));
    s.publish(m, "teacher", best, "teacher.ckpt");
    Checkpoint last = pl::teacher_checkpoint(run.last);
    s.publish(m, "teacher_last", last, "teacher_last.ckpt");
    s.out << "teacher test accuracy " << best.log["test_accuracy"] << "\n";
    return kExitOk;
}

int cmd_compress(Session& s) {
    fs::create_directories(s.dir());
    auto m = pl::Manifest::load(s.manifest_path());
    const fs::path tpath = s.opts.checkpoint.empty() ? s.require(m, "teacher") : fs::path(s.opts.checkpoint);
    auto teacher = pl::teacher_from_checkpoint(Checkpoint::load(tpath, "teacher"));
    MetricsLog metrics(s.dir() / "metrics.csv");
    const auto ctx = s.context(&metrics);

    pl::MeanFlowHyper hp;
    hp.train = s.hyper(s.cfg.meanflow);
    hp.mode = s.cfg.jvp_mode;
    hp.time = s.cfg.time;
    hp.hidden = s.hidden();
    hp.embed_dim = s.cfg.embed_dim;

    std::vector<int> stages{1, 2, 3, 4};
    if (s.opts.stage) stages = {*s.opts.stage};
    for (int l : stages) {
        if (l < 1 || l > 4) throw ConfigError("compress: --stage must be in [1, 4]");
        auto run = pl::train_stage_meanflow(teacher, l, ctx, hp);
        Checkpoint c = pl::module_checkpoint(run.module, teacher.config, ctx.splits.train.image_size());
        c.log["mse_before"] = fmt(run.mse_before, 8);
        c.log["mse_aligned"] = fmt(run.mse_aligned, 8);
        c.log["mse_after"] = fmt(run.mse_after, 8);
        c.log["jvp_mode"] = std::string(meanflow::to_string(hp.mode));
        if (!run.epoch_loss.empty()) c.log["final_loss"] = fmt(run.epoch_loss.back(), 8);
        s.publish(m, "meanflow.stage" + std::to_string(l), c, "meanflow_stage" + std::to_string(l) + ".ckpt");
        s.out << "stage " << l << " mapping mse " << c.log["mse_before"] << " -> " << c.log["mse_aligned"] << " (aligned) -> "
              << c.log["mse_after"] << "\n";
    }
    return kExitOk;
}

int cmd_assemble_meta(Session& s) {
    auto m = pl::Manifest::load(s.manifest_path());
    auto teacher = pl::teacher_from_checkpoint(Checkpoint::load(s.require(m, "teacher"), "teacher"));
    std::array<meanflow::MeanFlowModule, 4> modules;
    for (int l = 1; l <= 4; ++l) {
        const auto phase = "meanflow.stage" + std::to_string(l);
        modules[static_cast<std::size_t>(l - 1)] = pl::module_from_checkpoint(Checkpoint::load(s.require(m, phase), "meanflow"));
    }
    auto meta = pl::assemble_meta(teacher, std::move(modules), s.cfg.dataset.image_size);
    Checkpoint c = pl::staged_checkpoint(meta);
    s.publish(m, "meta.assembled", c, "meta_assembled.ckpt");
    print_breakdown(s.out, "meta", pl::count_params(meta));
    return kExitOk;
}

int cmd_finetune_meta(Session& s) {
    auto m = pl::Manifest::load(s.manifest_path());
    const auto meta = pl::staged_from_checkpoint(Checkpoint::load(s.require(m, "meta.assembled"), "meta"));
    MetricsLog metrics(s.dir() / "metrics.csv");
    const auto ctx = s.context(&metrics);
    auto r = pl::finetune_meta(meta, ctx, s.hyper(s.cfg.meta));
    check_freeze(r, "finetune-meta");
    Checkpoint c = pl::staged_checkpoint(r.run.best);
    log_eval(c, "test_before", r.test_before);
    log_eval(c, "test", r.test_after);
    c.log["best_val_accuracy"] = fmt(r.run.best_val_accuracy, 6);
    s.publish(m, "meta", c, "meta.ckpt");
    s.out << "meta test accuracy " << c.log["test_before_accuracy"] << " -> " << c.log["test_accuracy"] << "\n";
    return kExitOk;
}

int cmd_incubate(Session& s) {
    if (!s.opts.stage) throw ConfigError("incubate: --stage is required");
    const int l = *s.opts.stage;
    if (l == 4) throw ConfigError("incubate: stage 4 is never incubated; it stays a MeanFlow module");
    if (l < 1 || l > 3) throw ConfigError("incubate: --stage must be 1, 2 or 3");
    auto m = pl::Manifest::load(s.manifest_path());
    const auto meta = pl::staged_from_checkpoint(Checkpoint::load(s.require(m, "meta"), "meta"));
    const auto teacher = pl::teacher_from_checkpoint(Checkpoint::load(s.require(m, "teacher"), "teacher"));
    MetricsLog metrics(s.dir() / "metrics.csv");
    const auto ctx = s.context(&metrics);
    auto r = pl::incubate_stage(meta, teacher, l, ctx, s.hyper(s.cfg.incubate));
    if (r.frozen_hash_before != r.frozen_hash_after) throw Error("incubate: frozen parameters changed during training");
    Checkpoint c = pl::stage_checkpoint(r.stage, l, meta.backbone);
    if (!r.log.empty()) c.log["final_loss"] = fmt(r.log.back().loss, 8);
    s.publish(m, "incubate.stage" + std::to_string(l), c, "incubated_stage" + std::to_string(l) + ".ckpt");
    return kExitOk;
}

int cmd_finetune_global(Session& s) {
    auto m = pl::Manifest::load(s.manifest_path());
    const auto meta = pl::staged_from_checkpoint(Checkpoint::load(s.require(m, "meta"), "meta"));
    std::array<resnet::Stage, 3> stages;
    for (int l = 1; l <= 3; ++l) {
        const auto phase = "incubate.stage" + std::to_string(l);
        stages[static_cast<std::size_t>(l - 1)] = pl::stage_from_checkpoint(Checkpoint::load(s.require(m, phase), "stage"), l);
    }
    const auto hybrid = pl::assemble_hybrid(meta, std::move(stages));
    MetricsLog metrics(s.dir() / "metrics.csv");
    const auto ctx = s.context(&metrics);
    auto r = pl::finetune_global(hybrid, ctx, s.hyper(s.cfg.global));
    check_freeze(r, "finetune-global");
    Checkpoint best = pl::staged_checkpoint(r.run.best);
    log_eval(best, "test_before", r.test_before);
    log_eval(best, "test", r.test_after);
    best.log["best_val_accuracy"] = fmt(r.run.best_val_accuracy, 6);
    s.publish(m, "hybrid", best, "hybrid.ckpt");
    Checkpoint last = pl::staged_checkpoint(r.run.last);
    s.publish(m, "hybrid_last", last, "hybrid_last.ckpt");
    s.out << "hybrid test accuracy " << best.log["test_before_accuracy"] << " -> " << best.log["test_accuracy"] << "\n";
    return kExitOk;
}

int cmd_eval(Session& s) {
    fs::path path = s.opts.checkpoint;
    if (path.empty()) {
        const auto m = pl::Manifest::load(s.manifest_path());
        for (const char* phase : {"hybrid", "meta", "teacher"}) {
            if (auto p = m.find(phase)) {
                path = *p;
                break;
            }
        }
        if (path.empty()) throw ConfigError("eval: no --checkpoint given and the manifest lists no model");
    }
    const Checkpoint c = Checkpoint::load(path);
    const auto ctx = s.context(nullptr);
    std::ostringstream report;
    report << "checkpoint = " << path.string() << "\nkind = " << c.kind << "\n";
    const auto emit = [&](auto& model, const pl::ParamBreakdown& counts) {
        for (const auto& [name, split] :
             {std::pair<const char*, const data::Dataset*>{"val", &ctx.splits.val}, {"test", &ctx.splits.test}}) {
            if (split->size() == 0) continue;
            const auto r = pl::evaluate(model, *split, ctx, s.cfg.label_smoothing);
            report << name << "_accuracy = " << fmt(r.accuracy, 6) << "\n"
                   << name << "_loss = " << fmt(r.loss, 6) << "\n"
                   << name << "_samples = " << r.samples << "\n";
        }
        report << "params_stem = " << counts.stem << "\n";
        for (int l = 0; l < 4; ++l) report << "params_stage" << (l + 1) << " = " << counts.stage[l] << "\n";
        report << "params_head = " << counts.head << "\nparams_total = " << counts.total() << "\n";
    };
    if (c.kind == "teacher") {
        auto model = pl::teacher_from_checkpoint(c);
        emit(model, pl::count_params(model));
    } else if (c.kind == "meta" || c.kind == "hybrid") {
        auto model = pl::staged_from_checkpoint(c);
        emit(model, pl::count_params(model));
    } else {
        throw ConfigError("eval: a '" + c.kind + "' checkpoint is not a classifier");
    }
    fs::create_directories(s.dir());
    const fs::path report_path = s.dir() / "eval_report.txt";
    std::ofstream(report_path) << report.str();
    s.out << report.str();
    return kExitOk;
}

RunConfig load_config(const Options& o) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::from_file(o.config);
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o.seed) cfg.seed = *o.seed;
    if (!o.out.empty()) cfg.out = o.out;
    return cfg;
}

int run(const Options& o, std::ostream& out, std::ostream& err) {
    Session s{o, load_config(o), out, err};
    if (o.stage && o.command != "incubate" && o.command != "compress") {
        throw ConfigError(o.command + ": --stage applies to incubate and compress only");
    }
    if (o.command == "count-params") return cmd_count_params(s);
    if (o.command == "train-teacher") return cmd_train_teacher(s);
    if (o.command == "compress") return cmd_compress(s);
    if (o.command == "assemble-meta") return cmd_assemble_meta(s);
    if (o.command == "finetune-meta") return cmd_finetune_meta(s);
    if (o.command == "incubate") return cmd_incubate(s);
    if (o.command == "finetune-global") return cmd_finetune_global(s);
    return cmd_eval(s);
}

}  // namespace

std::string cli_usage() {
    return "usage: mfi <command> [--config PATH] [--stage N] [--seed U64] [--out DIR] [--checkpoint PATH]\n"
           "           [--set key=value ...]\n"
           "\n"
           "commands:\n"
           "  train-teacher     train the residual teacher\n"
           "  compress          fit MeanFlow modules to the teacher (all stages, or --stage N)\n"
           "  assemble-meta     cascade the four modules into the meta model\n"
           "  finetune-meta     train velocity nets and head of the meta model\n"
           "  incubate          train teacher stage N (1-3) inside the meta model\n"
           "  finetune-global   assemble the hybrid and fine-tune everything\n"
           "  eval              evaluate a checkpoint and write eval_report.txt\n"
           "  count-params      print per-stage parameter counts\n"
           "\n"
           "exit status: 0 success, 1 configuration or usage error, 2 numerical failure\n";
}

int cli_dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
    if (args.empty() || std::find(kCommands.begin(), kCommands.end(), args[0]) == kCommands.end()) {
        if (!args.empty() && args[0] != "--help" && args[0] != "-h") err << "unknown command '" << args[0] << "'\n";
        err << cli_usage();
        return args.empty() || (args[0] != "--help" && args[0] != "-h") ? kExitConfig : kExitOk;
    }
    Options o;
    o.command = args[0];
    CLI::App app{"mfi " + o.command};
    app.add_option("--config", o.config, "run configuration file");
    app.add_option("--stage", o.stage, "stage index");
    app.add_option("--seed", o.seed, "seed override");
    app.add_option("--out", o.out, "output directory");
    app.add_option("--checkpoint", o.checkpoint, "checkpoint to read");
    app.add_option("--set", o.sets, "config override key=value");
    try {
        std::vector<std::string> rest(args.begin() + 1, args.end());
        std::reverse(rest.begin(), rest.end());
        app.parse(rest);
    } catch (const CLI::CallForHelp&) {
        out << cli_usage();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << o.command << ": " << e.what() << "\n" << cli_usage();
        return kExitConfig;
    }
    try {
        return run(o, out, err);
    } catch (const NumericalError& e) {
        err << o.command << ": numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const ConfigError& e) {
        err << o.command << ": config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << o.command << ": error: " << e.what() << "\n";
        return kExitConfig;
    }
}

int cli_dispatch(int argc, const char* const* argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return cli_dispatch(args, std::cout, std::cerr);
}

}  // namespace mfi

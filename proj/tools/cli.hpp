#pragma once

#include <binspot/binspot.hpp>

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace binspot::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2 };

/// Optional overrides applied on top of a base ModelConfig.
struct ModelOverrides {
    std::optional<std::size_t> blocks, backbone, hidden, head_channels, n1, n2, s1, s2;
    std::vector<std::size_t> deltas;
    bool single_scale = false;
    bool ste = false;

    void attach(CLI::App* app) {
        app->add_option("--blocks", blocks, "Number of FSMN blocks");
        app->add_option("--deltas", deltas, "Thinnable intervals, e.g. --deltas 1 2 4");
        app->add_option("--backbone", backbone, "Backbone (memory) width");
        app->add_option("--hidden", hidden, "Hidden width of each block");
        app->add_option("--head-channels", head_channels, "Channels of the convolutional head");
        app->add_option("--n1", n1, "Memory look-back order");
        app->add_option("--n2", n2, "Memory lookahead order");
        app->add_option("--s1", s1, "Memory look-back stride");
        app->add_option("--s2", s2, "Memory lookahead stride");
        app->add_flag("--single-scale", single_scale, "Disable the second activation scale");
        app->add_flag("--ste", ste, "Plain straight-through sign (no learnable threshold or ratio)");
    }

    void apply(ModelConfig& c) const {
        if (blocks) c.num_blocks = *blocks;
        if (!deltas.empty()) c.delta_set = deltas;
        if (backbone) c.backbone_dim = *backbone;
        if (hidden) c.hidden_dim = *hidden;
        if (head_channels) c.head_channels = *head_channels;
        if (n1) c.memory.n1 = *n1;
        if (n2) c.memory.n2 = *n2;
        if (s1) c.memory.s1 = *s1;
        if (s2) c.memory.s2 = *s2;
        if (single_scale) c.dual_scale = false;
        if (ste) c.learnable_lpb = false;
    }
};

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw Error("write to '" + path + "' failed");
}

/// Writes CSV text to `path`, or to `out` when path is empty.
inline void emit(const std::string& path, const std::string& text, std::ostream& out) {
    if (path.empty()) {
        out << text;
    } else {
        write_text(path, text);
    }
}

inline void print_accuracy(std::ostream& out, const std::string& split, std::size_t delta, Real acc) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f\n", split.c_str(), delta, acc);
    out << buf;
}

/// Entry point shared by the binary and the tests. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Binarized FSMN keyword spotting: training, evaluation, kernels and analysis", "binspot"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    // gen-data
    std::uint64_t seed = 42;
    std::string out_path;
    std::size_t classes = 4, per_class = 200, time_steps = 32, freq_bins = 40;
    Real noise = 0.3;
    std::string split = "eval";
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic band-pattern feature file");
    gen->add_option("--seed", seed, "Random seed")->capture_default_str();
    gen->add_option("--out", out_path, "Output feature file")->required();
    gen->add_option("--classes", classes, "Number of classes")->capture_default_str()->check(CLI::PositiveNumber);
    gen->add_option("--per-class", per_class, "Examples per class")->capture_default_str()->check(CLI::PositiveNumber);
    gen->add_option("--time", time_steps, "Frames per example")->capture_default_str()->check(CLI::PositiveNumber);
    gen->add_option("--freq", freq_bins, "Frequency bins")->capture_default_str()->check(CLI::PositiveNumber);
    gen->add_option("--noise", noise, "Noise standard deviation")->capture_default_str()->check(CLI::NonNegativeNumber);

    // train
    TrainConfig tc;
    ModelOverrides mo;
    std::string features, val_path, teacher_in, teacher_out, metrics_path;
    bool toy = false;
    std::optional<std::size_t> teacher_epochs;
    auto* tr = app.add_subcommand("train", "Train the binarized student by distillation from a float teacher");
    auto* opt_features = tr->add_option("--features", features, "Training feature file")->check(CLI::ExistingFile);
    auto* opt_toy = tr->add_flag("--toy", toy, "Train on generated toy data (held-out split uses another seed)");
    opt_features->excludes(opt_toy);
    tr->add_option("--val", val_path, "Held-out feature file")->check(CLI::ExistingFile);
    tr->add_option("--teacher", teacher_in, "Pre-trained teacher checkpoint (trained first when absent)")
        ->check(CLI::ExistingFile);
    tr->add_option("--teacher-out", teacher_out, "Where to save a freshly trained teacher");
    tr->add_option("--teacher-epochs", teacher_epochs, "Teacher epochs (default: --epochs)");
    tr->add_option("--out", out_path, "Student checkpoint to write")->required();
    tr->add_option("--metrics", metrics_path, "Per-step metrics CSV");
    tr->add_option("--epochs", tc.epochs, "Training epochs")->capture_default_str();
    tr->add_option("--lr", tc.base_lr, "Base learning rate")->capture_default_str();
    tr->add_option("--momentum", tc.momentum, "SGD momentum")->capture_default_str();
    tr->add_option("--gamma", tc.gamma, "Distillation weight")->capture_default_str();
    tr->add_option("--batch", tc.batch_size, "Mini-batch size")->capture_default_str();
    tr->add_option("--seed", tc.seed, "Random seed")->capture_default_str();
    mo.attach(tr);

    // eval
    std::string checkpoint;
    std::optional<std::size_t> delta;
    auto* ev = app.add_subcommand("eval", "Report accuracy of a checkpoint on a feature file");
    ev->add_option("--checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--features", features, "Feature file")->required()->check(CLI::ExistingFile);
    ev->add_option("--delta", delta, "Only this variant (default: every variant)");
    ev->add_option("--split", split, "Label for the split column")->capture_default_str();

    // bench
    std::vector<std::string> sizes{"256x4096x256"};
    std::size_t repeats = 5;
    auto* be = app.add_subcommand("bench", "Time float GEMM against the reference and blocked binary kernels");
    be->add_option("--sizes", sizes, "GEMM sizes as MxNxK")->capture_default_str();
    be->add_option("--repeats", repeats, "Timed repetitions per kernel")->capture_default_str()->check(
        CLI::PositiveNumber);
    be->add_option("--seed", seed, "Random seed")->capture_default_str();
    be->add_option("--out", out_path, "CSV output (default: stdout)");

    // flops
    std::string mode = "dual_scale";
    std::size_t flops_delta = 1;
    auto* fl = app.add_subcommand("flops", "Per-layer FLOPs under the binarization convention");
    fl->add_option("--mode", mode, "full, single_scale or dual_scale")
        ->capture_default_str()
        ->check(CLI::IsMember({"full", "single_scale", "dual_scale"}));
    fl->add_option("--delta", flops_delta, "Thinnable variant")->capture_default_str();
    fl->add_option("--checkpoint", checkpoint, "Take the model config from a checkpoint")->check(CLI::ExistingFile);
    fl->add_option("--out", out_path, "CSV output (default: stdout)");
    ModelOverrides flops_mo;
    flops_mo.attach(fl);

    // analyze-freq
    std::string qerr_path;
    std::size_t samples = 32, freq_delta = 1;
    auto* af = app.add_subcommand("analyze-freq", "Relative wavelet energy per block and activation quantization error");
    af->add_option("--checkpoint", checkpoint, "Student checkpoint")->required()->check(CLI::ExistingFile);
    af->add_option("--teacher", teacher_in, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
    af->add_option("--features", features, "Feature file")->required()->check(CLI::ExistingFile);
    af->add_option("--delta", freq_delta, "Thinnable variant")->capture_default_str();
    af->add_option("--samples", samples, "Examples to probe")->capture_default_str()->check(CLI::PositiveNumber);
    af->add_option("--out", out_path, "Frequency CSV (default: stdout)");
    af->add_option("--qerr", qerr_path, "Also write the quantization-error CSV here");

    // export
    auto* ex = app.add_subcommand("export", "Convert a binarized checkpoint into a packed inference bundle");
    ex->add_option("--checkpoint", checkpoint, "Student checkpoint")->required()->check(CLI::ExistingFile);
    ex->add_option("--out", out_path, "Bundle file to write")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kValidation;
    }

    try {
        if (*gen) {
            save_features(out_path, gen_toy_dataset(seed, classes, per_class, time_steps, freq_bins, noise));
            return kOk;
        }
        if (*tr) {
            if (features.empty() && !toy) throw InvalidArgument("train needs --features or --toy");
            tc.validate();
            FeatureDataset train_set, val_set;
            if (toy) {
                train_set = gen_toy_dataset(tc.seed);
                val_set = gen_toy_dataset(tc.seed + 1000, 4, 50);
                val_set.split = "val";
            } else {
                train_set = load_features(features);
                if (!val_path.empty()) {
                    val_set = load_features(val_path);
                    val_set.split = "val";
                }
            }
            ModelConfig mc;
            mc.time_steps = train_set.time_steps;
            mc.freq_bins = train_set.freq_bins;
            mc.num_classes = train_set.num_classes;
            mo.apply(mc);
            mc.validate();
            if (val_set.size() > 0 && (val_set.time_steps != mc.time_steps || val_set.freq_bins != mc.freq_bins ||
                                       val_set.num_classes != mc.num_classes))
                throw InvalidArgument("held-out features do not match the training features");

            DtaModel teacher;
            if (!teacher_in.empty()) {
                teacher = load_checkpoint(teacher_in).model;
                const ModelConfig& t = teacher.config();
                if (t.binarized || t.num_blocks != mc.num_blocks || t.backbone_dim != mc.backbone_dim ||
                    t.time_steps != mc.time_steps || t.freq_bins != mc.freq_bins)
                    throw InvalidArgument("teacher checkpoint does not match the student topology");
            } else {
                TrainConfig ttc = tc;
                if (teacher_epochs) ttc.epochs = *teacher_epochs;
                teacher = pretrain_teacher(mc, train_set, ttc);
                if (!teacher_out.empty()) save_checkpoint(teacher_out, teacher, ttc.epochs);
            }

            DtaModel student(mc, tc.seed);
            std::ostringstream metrics;
            const TrainResult res = train(student, &teacher, train_set, tc, metrics_path.empty() ? nullptr : &metrics);
            if (!metrics_path.empty()) write_text(metrics_path, metrics.str());
            save_checkpoint(out_path, student, tc.epochs, res.steps);
            out << "split,delta,accuracy\n";
            for (std::size_t d : mc.delta_set) print_accuracy(out, "train", d, evaluate(student, train_set, d));
            if (val_set.size() > 0)
                for (std::size_t d : mc.delta_set) print_accuracy(out, "val", d, evaluate(student, val_set, d));
            return kOk;
        }
        if (*ev) {
            const Checkpoint ck = load_checkpoint(checkpoint);
            const FeatureDataset ds = load_features(features);
            const ModelConfig& mc = ck.model.config();
            if (ds.time_steps != mc.time_steps || ds.freq_bins != mc.freq_bins || ds.num_classes != mc.num_classes)
                throw InvalidArgument("feature file does not match the checkpoint's input shape or classes");
            std::vector<std::size_t> ds_list = mc.delta_set;
            if (delta) {
                if (!mc.has_delta(*delta))
                    throw InvalidArgument("delta " + std::to_string(*delta) + " is not in the checkpoint's delta set");
                ds_list = {*delta};
            }
            out << "split,delta,accuracy\n";
            for (std::size_t d : ds_list) print_accuracy(out, split, d, evaluate(ck.model, ds, d));
            return kOk;
        }
        if (*be) {
            std::vector<GemmSize> gs;
            for (const auto& s : sizes) gs.push_back(parse_gemm_size(s));
            std::ostringstream csv;
            write_bench_csv(csv, bench_kernel(gs, repeats, seed));
            emit(out_path, csv.str(), out);
            return kOk;
        }
        if (*fl) {
            ModelConfig mc;
            if (!checkpoint.empty()) mc = load_checkpoint(checkpoint).model.config();
            flops_mo.apply(mc);
            std::ostringstream csv;
            write_flops_csv(csv, flops_report(mc, parse_flops_mode(mode), flops_delta));
            emit(out_path, csv.str(), out);
            return kOk;
        }
        if (*af) {
            const Checkpoint st = load_checkpoint(checkpoint);
            const Checkpoint te = load_checkpoint(teacher_in);
            const FeatureDataset ds = load_features(features);
            const ModelConfig& mc = st.model.config();
            if (ds.time_steps != mc.time_steps || ds.freq_bins != mc.freq_bins)
                throw InvalidArgument("feature file does not match the checkpoint's input shape");
            if (te.model.config().num_blocks != mc.num_blocks || te.model.config().backbone_dim != mc.backbone_dim)
                throw InvalidArgument("teacher checkpoint does not match the student topology");
            if (!mc.has_delta(freq_delta))
                throw InvalidArgument("delta " + std::to_string(freq_delta) + " is not in the checkpoint's delta set");
            std::vector<std::size_t> idx(std::min(samples, ds.size()));
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            const Tensor x = ds.batch(idx);
            std::ostringstream csv;
            write_freq_csv(csv, freq_energy_report(st.model, te.model, x, freq_delta));
            emit(out_path, csv.str(), out);
            if (!qerr_path.empty()) {
                std::ostringstream q;
                write_qerr_csv(q, quant_error_report(st.model, x, freq_delta));
                write_text(qerr_path, q.str());
            }
            return kOk;
        }
        if (*ex) {
            const Checkpoint ck = load_checkpoint(checkpoint);
            if (!ck.model.config().binarized) throw InvalidArgument("only binarized checkpoints can be exported");
            save_bundle(out_path, PackedModel(ck.model));
            return kOk;
        }
    } catch (const InvalidArgument& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kValidation;
}

}  // namespace binspot::cli

// SPDX-License-Identifier: Apache-2.0
// mhome command-line driver: describe, synth, train, eval, gradcheck, bench.
//
// Exit codes: 0 success, 1 invalid input (bad flags, config, shapes, missing
// files), 2 runtime failure (numerical error, failed gradient check).

#include "run_config.hpp"

#include <mhome/harness.hpp>
#include <mhome/io.hpp>
#include <mhome/parallel.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace mhome;
using mhome::cli::RunConfig;

namespace {

constexpr int kExitInvalid = 1;
constexpr int kExitRuntime = 2;

/// Thrown for a failed check whose details were already printed.
struct RuntimeFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GlobalFlags {
    std::optional<int> threads;
    std::optional<std::string> precision;
    std::optional<std::uint64_t> seed;
};

RunConfig base_config(const std::string& config_path, const GlobalFlags& g)
{
    RunConfig rc = config_path.empty() ? RunConfig{} : cli::load_run_config(config_path);
    cli::apply_env_overrides(rc);
    if (g.threads)
        rc.threads = *g.threads;
    if (g.precision)
        rc.precision = *g.precision;
    if (g.seed)
        rc.seed = *g.seed;
    return rc;
}

void write_file(const fs::path& p, const std::string& text)
{
    if (p.has_parent_path())
        fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f)
        throw IoError("cannot write " + p.string());
    f << text;
}

// --- describe --------------------------------------------------------------

struct DescribeArgs {
    std::string config, preset;
    std::vector<std::size_t> input;
    bool json = false;
};

void run_describe(const DescribeArgs& a, const GlobalFlags& g)
{
    RunConfig rc = base_config(a.config, g);
    if (!a.preset.empty())
        rc.network = preset_by_name(a.preset);
    rc.network.validate();
    if (a.json) {
        std::cout << config_to_json(rc.network).dump(2) << "\n";
        return;
    }
    Dims3 in{128, 128, 128};
    if (!a.input.empty()) {
        if (a.input.size() != 3)
            throw ConfigError("--input takes three extents D H W");
        in = {a.input[0], a.input[1], a.input[2]};
    }
    std::cout << describe(rc.network, in);
}

// --- synth -----------------------------------------------------------------

struct SynthArgs {
    std::string config, out;
    std::optional<std::size_t> count, classes;
    std::vector<std::size_t> size;
};

void run_synth(const SynthArgs& a, const GlobalFlags& g)
{
    RunConfig rc = base_config(a.config, g);
    if (a.count)
        rc.synth.count = *a.count;
    if (a.classes)
        rc.synth.classes = *a.classes;
    if (!a.size.empty()) {
        if (a.size.size() != 3)
            throw ConfigError("--size takes three extents D H W");
        rc.synth.dims = {a.size[0], a.size[1], a.size[2]};
    }
    rc.finalize();
    const auto data = synth_volumes(rc.synth);
    write_dataset(a.out, data);
    std::cout << "wrote " << data.size() << " cases to " << a.out << "\n";
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
    std::string config, preset, norm, data, out;
    std::optional<std::size_t> steps, batch, epochs, checkpoint_every, stem;
    std::optional<double> lr;
    bool quiet = false;
};

std::vector<VolumeSample> load_training_data(const RunConfig& rc)
{
    if (!rc.data_dir) {
        auto s = rc.synth;
        s.classes = rc.network.classes;
        return synth_volumes(s);
    }
    std::vector<VolumeSample> data;
    for (auto& [id, s] : read_dataset(*rc.data_dir))
        data.push_back(std::move(s));
    return data;
}

template <typename T>
void train_impl(const RunConfig& rc, bool quiet)
{
    const auto data = load_training_data(rc);
    for (const auto& s : data)
        rc.network.validate_input({1, rc.network.in_channels, s.dims()[0], s.dims()[1], s.dims()[2]});
    Rng rng(rc.seed);
    MambaHoMENet<T> net(rc.network, rng);
    fs::create_directories(rc.output_dir);
    const json extra{{"seed", rc.seed}, {"precision", rc.precision}};
    const std::size_t total = rc.train.total_steps(data.size());
    const std::size_t log_every = std::max<std::size_t>(1, total / 20);
    const auto t0 = std::chrono::steady_clock::now();
    History hist = train_loop(net, data, rc.train, [&](const StepRecord& r) {
        if (!quiet && (r.step % log_every == 0 || r.step + 1 == total))
            std::fprintf(stderr, "step %zu/%zu lr %.3g loss %.5f train_mDSC %.4f\n", r.step + 1, total, r.lr, r.loss,
                         r.train_mdsc);
        if (rc.checkpoint_every && (r.step + 1) % rc.checkpoint_every == 0 && r.step + 1 < total)
            save_checkpoint(rc.output_dir / ("model_step" + std::to_string(r.step + 1)), net.parameters(),
                            rc.network, extra);
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_checkpoint(rc.output_dir / "model", net.parameters(), rc.network, extra);
    write_file(rc.output_dir / "history.csv", history_csv(hist));
    std::printf("trained %zu steps in %.1f s: final loss %.5f, train mDSC %.4f\n", hist.size(), secs,
                hist.back().loss, hist.back().train_mdsc);
    std::printf("checkpoint %s, history %s\n", (rc.output_dir / "model").string().c_str(),
                (rc.output_dir / "history.csv").string().c_str());
}

void run_train(const TrainArgs& a, const GlobalFlags& g)
{
    RunConfig rc = base_config(a.config, g);
    if (!a.preset.empty())
        rc.network = preset_by_name(a.preset);
    if (a.stem)
        rc.network.stem_channels = *a.stem;
    if (!a.norm.empty())
        rc.network.norm = parse_norm_kind(a.norm);
    if (!a.data.empty())
        rc.data_dir = a.data;
    if (!a.out.empty())
        rc.output_dir = a.out;
    if (a.steps)
        rc.train.max_steps = *a.steps;
    if (a.batch)
        rc.train.batch_size = *a.batch;
    if (a.epochs)
        rc.train.epochs = *a.epochs;
    if (a.lr)
        rc.train.lr = *a.lr;
    if (a.checkpoint_every)
        rc.checkpoint_every = *a.checkpoint_every;
    rc.finalize();
    set_num_threads(rc.threads);
    if (rc.precision == "f64")
        train_impl<double>(rc, a.quiet);
    else
        train_impl<float>(rc, a.quiet);
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, predictions, data, out;
    std::optional<std::size_t> classes;
};

template <typename T>
std::vector<LabelVolume> predict(const Checkpoint& ck, const NetworkConfig& cfg,
                                 const std::vector<std::pair<std::string, VolumeSample>>& cases)
{
    Rng rng(0);
    MambaHoMENet<T> net(cfg, rng);
    auto params = net.parameters();
    restore_parameters(params, ck);
    NoGradGuard ng;
    std::vector<LabelVolume> out;
    for (const auto& [id, s] : cases) {
        cfg.validate_input({1, cfg.in_channels, s.dims()[0], s.dims()[1], s.dims()[2]});
        auto pred = argmax_labels(net(stack_images<T>({&s})));
        out.push_back(std::move(pred.front()));
    }
    return out;
}

void run_eval(const EvalArgs& a, const GlobalFlags& g)
{
    RunConfig rc = base_config("", g);
    set_num_threads(rc.threads);
    const auto cases = read_dataset(a.data);
    std::vector<LabelVolume> preds;
    std::size_t classes = 0;
    if (!a.checkpoint.empty()) {
        if (!fs::exists(manifest_path(a.checkpoint)))
            throw IoError("checkpoint " + manifest_path(a.checkpoint).string() + " does not exist");
        const Checkpoint ck = load_checkpoint(a.checkpoint);
        const auto cfg = ck.config();
        if (!cfg)
            throw IoError("checkpoint " + a.checkpoint + " carries no network config");
        classes = cfg->classes;
        const std::string prec = g.precision.value_or(ck.manifest.value("precision", std::string("f32")));
        preds = prec == "f64" ? predict<double>(ck, *cfg, cases) : predict<float>(ck, *cfg, cases);
    } else {
        for (const auto& [id, s] : cases) {
            auto [lab, hdr] = read_labels(fs::path(a.predictions) / (id + "_label"));
            if (lab.dims != s.label.dims)
                throw ShapeError(id + ": prediction extents differ from ground truth");
            preds.push_back(std::move(lab));
        }
        if (a.classes) {
            classes = *a.classes;
        } else {
            for (const auto& [id, s] : cases)
                for (auto l : s.label.labels)
                    classes = std::max<std::size_t>(classes, std::size_t(l) + 1);
            classes = std::max<std::size_t>(classes, 2);
        }
    }
    std::vector<CaseMetric> rows;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto r = evaluate_case(cases[i].first, preds[i], cases[i].second.label, classes, cases[i].second.spacing);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    const json summary = metrics_summary(rows);
    if (!a.out.empty()) {
        write_file(fs::path(a.out) / "metrics.csv", metrics_csv(rows));
        write_file(fs::path(a.out) / "summary.json", summary.dump(2) + "\n");
        if (!a.checkpoint.empty())
            for (std::size_t i = 0; i < cases.size(); ++i)
                write_labels(fs::path(a.out) / (cases[i].first + "_label"), preds[i],
                             sidecar_spacing(cases[i].second.spacing));
    }
    std::cout << metrics_csv(rows) << summary.dump(2) << "\n";
}

// --- gradcheck -------------------------------------------------------------

struct GradcheckArgs {
    std::vector<std::string> modules;
    std::string inject_fault;
    double tolerance = 1e-4;
};

void run_gradcheck(const GradcheckArgs& a, const GlobalFlags& g)
{
    RunConfig rc = base_config("", g);
    set_num_threads(rc.threads);
    GradcheckOptions opt;
    opt.seed = rc.seed;
    opt.tolerance = a.tolerance;
    if (!a.inject_fault.empty())
        opt.inject_fault = a.inject_fault;
    const auto mods = a.modules.empty() ? gradcheck_modules() : a.modules;
    std::vector<std::string> failed;
    std::printf("%-18s %-12s %-8s %s\n", "module", "max_rel_err", "checked", "result");
    for (const auto& m : mods) {
        const auto r = gradcheck_module(m, opt);
        std::printf("%-18s %-12.3e %-8zu %s\n", r.module.c_str(), r.max_rel_err, r.checked, r.pass ? "PASS" : "FAIL");
        if (!r.pass)
            failed.push_back(r.module);
    }
    if (!failed.empty()) {
        std::string list;
        for (const auto& f : failed)
            list += (list.empty() ? "" : ", ") + f;
        throw RuntimeFailure("gradient check failed for module(s): " + list);
    }
}

// --- bench -----------------------------------------------------------------

struct BenchArgs {
    std::vector<std::size_t> n;
    std::optional<std::size_t> repeats, global_max_n;
    bool no_network = false;
    std::string norm, csv;
};

void run_bench_cmd(const BenchArgs& a, const GlobalFlags& g)
{
    RunConfig rc = base_config("", g);
    rc.finalize();
    set_num_threads(rc.threads);
    BenchOptions opt;
    opt.seed = rc.seed;
    if (!a.n.empty())
        opt.n_values = a.n;
    if (a.repeats)
        opt.repeats = *a.repeats;
    if (a.global_max_n)
        opt.global_max_n = *a.global_max_n;
    opt.network = !a.no_network;
    if (!a.norm.empty())
        opt.norm = parse_norm_kind(a.norm);
    const auto res = rc.precision == "f64" ? run_bench<double>(opt) : run_bench<float>(opt);
    const std::string csv = bench_csv(res);
    if (a.csv.empty())
        std::cout << csv;
    else
        write_file(a.csv, csv);
    std::printf("routing log-log slope %.3f\n", res.routing_slope);
    if (res.network_slope)
        std::printf("network log-log slope %.3f\n", *res.network_slope);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Mamba-HoME 3-D segmentation toolkit"};
    app.require_subcommand(1);
    GlobalFlags g;
    app.add_option("--threads", g.threads, "worker threads (overrides MHOME_THREADS)")->check(CLI::PositiveNumber);
    app.add_option("--precision", g.precision, "floating point precision")->check(CLI::IsMember({"f32", "f64"}));
    app.add_option("--seed", g.seed, "run seed (overrides MHOME_SEED)");

    DescribeArgs da;
    auto* describe_cmd = app.add_subcommand("describe", "print the stage schedule and parameter count");
    describe_cmd->add_option("--config", da.config, "YAML run config")->check(CLI::ExistingFile);
    describe_cmd->add_option("--preset", da.preset, "network preset")->check(CLI::IsMember({"desk", "full", "tiny"}));
    describe_cmd->add_option("--input", da.input, "input extents D H W (default 128 128 128)")->expected(3);
    describe_cmd->add_flag("--json", da.json, "print the resolved network config as JSON");

    SynthArgs sa;
    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic labelled dataset");
    synth_cmd->add_option("--config", sa.config, "YAML run config")->check(CLI::ExistingFile);
    synth_cmd->add_option("--out", sa.out, "output directory")->required();
    synth_cmd->add_option("--count", sa.count, "number of cases");
    synth_cmd->add_option("--classes", sa.classes, "classes including background");
    synth_cmd->add_option("--size", sa.size, "extents D H W")->expected(3);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a network and write a checkpoint");
    train_cmd->add_option("--config", ta.config, "YAML run config")->check(CLI::ExistingFile);
    train_cmd->add_option("--preset", ta.preset, "network preset")->check(CLI::IsMember({"desk", "full", "tiny"}));
    train_cmd->add_option("--stem", ta.stem, "override the stem width");
    train_cmd->add_option("--norm", ta.norm, "block normalization")->check(CLI::IsMember({"dyt", "ln"}));
    train_cmd->add_option("--data", ta.data, "dataset directory (default: synthetic volumes)");
    train_cmd->add_option("--out", ta.out, "output directory");
    train_cmd->add_option("--steps", ta.steps, "optimizer steps (overrides epochs)");
    train_cmd->add_option("--epochs", ta.epochs, "epochs");
    train_cmd->add_option("--batch", ta.batch, "batch size");
    train_cmd->add_option("--lr", ta.lr, "peak learning rate");
    train_cmd->add_option("--checkpoint-every", ta.checkpoint_every, "also checkpoint every N steps");
    train_cmd->add_flag("--quiet", ta.quiet, "suppress per-step progress");

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "per-case DSC and HD95 on a labelled dataset");
    auto* ck_opt = eval_cmd->add_option("--checkpoint", ea.checkpoint, "checkpoint stem (<stem>.json + <stem>.bin)");
    auto* pred_opt = eval_cmd->add_option("--predictions", ea.predictions,
                                          "directory of <case>_label volumes to score instead of a model");
    ck_opt->excludes(pred_opt);
    eval_cmd->add_option("--data", ea.data, "ground-truth dataset directory")->required();
    eval_cmd->add_option("--out", ea.out, "write metrics.csv and summary.json here");
    eval_cmd->add_option("--classes", ea.classes, "class count for --predictions (default: from labels)");

    GradcheckArgs ga;
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    grad_cmd->add_option("--module", ga.modules, "module(s) to check (default: all)");
    grad_cmd->add_option("--inject-fault", ga.inject_fault, "corrupt this module's analytic gradient");
    grad_cmd->add_option("--tolerance", ga.tolerance, "max relative error");

    BenchArgs ba;
    auto* bench_cmd = app.add_subcommand("bench", "routing and network scaling sweep");
    bench_cmd->add_option("--n", ba.n, "stage-1 token counts (default 2^10..2^16)");
    bench_cmd->add_option("--repeats", ba.repeats, "timing repeats (minimum is reported)");
    bench_cmd->add_option("--global-max-n", ba.global_max_n, "largest N timed with global routing");
    bench_cmd->add_flag("--no-network", ba.no_network, "skip the whole-network timings");
    bench_cmd->add_option("--norm", ba.norm, "block normalization")->check(CLI::IsMember({"dyt", "ln"}));
    bench_cmd->add_option("--csv", ba.csv, "write the CSV here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitInvalid;
    }

    try {
        if (*describe_cmd)
            run_describe(da, g);
        else if (*synth_cmd)
            run_synth(sa, g);
        else if (*train_cmd)
            run_train(ta, g);
        else if (*eval_cmd) {
            if (ea.checkpoint.empty() && ea.predictions.empty())
                throw ConfigError("eval needs --checkpoint or --predictions");
            run_eval(ea, g);
        } else if (*grad_cmd)
            run_gradcheck(ga, g);
        else if (*bench_cmd)
            run_bench_cmd(ba, g);
    } catch (const RuntimeFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitInvalid;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}

// SPDX-License-Identifier: Apache-2.0
// Runs the mhome binary end to end and checks exit codes and outputs.
#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <mhome/io.hpp>

#include "run_config.hpp"

using namespace mhome;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

const fs::path& work_dir()
{
    static const fs::path d = [] {
        auto p = fs::temp_directory_path() / "mhome_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return d;
}

Run run(const std::string& args, const std::string& env = "")
{
    const auto log = work_dir() / "last_output.txt";
    const std::string cmd = env + " " + std::string(MHOME_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    r.out = ss.str();
    return r;
}

fs::path write_text(const std::string& name, const std::string& text)
{
    const auto p = work_dir() / name;
    std::ofstream(p) << text;
    return p;
}

bool contains(const std::string& s, const std::string& what) { return s.find(what) != std::string::npos; }

} // namespace

TEST(Cli, DescribeEchoesFullSchedule)
{
    const auto r = run("describe --preset full");
    ASSERT_EQ(r.code, 0) << r.out;
    for (const char* want : {"E=[4,8,12,16]", "E2=[8,16,24,32]", "K=[2048,1024,512,256]", "S=4", "stem=48"})
        EXPECT_TRUE(contains(r.out, want)) << want << "\n" << r.out;
}

TEST(Cli, DescribeJsonMatchesPreset)
{
    const auto r = run("describe --preset tiny --json");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(json::parse(r.out), config_to_json(tiny_preset()));
}

TEST(Cli, GradcheckPassesAndInjectedFaultFails)
{
    auto ok = run("gradcheck --module home --module gsc");
    EXPECT_EQ(ok.code, 0) << ok.out;
    auto bad = run("gradcheck --module home --module gsc --inject-fault gsc");
    EXPECT_EQ(bad.code, 2) << bad.out;
    EXPECT_TRUE(contains(bad.out, "failed for module(s): gsc")) << bad.out;
}

TEST(Cli, ValidationErrorsExitWithOne)
{
    EXPECT_EQ(run("no-such-command").code, 1);
    EXPECT_EQ(run("gradcheck --module nope").code, 1);
    EXPECT_EQ(run("describe --precision f16").code, 1);
    const auto yaml = write_text("unknown_key.yaml", "train:\n  lr: 0.001\n  momentum: 0.9\n");
    const auto r = run("train --config " + yaml.string());
    EXPECT_EQ(r.code, 1);
    EXPECT_TRUE(contains(r.out, "unknown key 'momentum'")) << r.out;
    EXPECT_EQ(run("describe", "MHOME_SEED=abc").code, 1);
}

TEST(Cli, EvalOfGroundTruthAgainstItselfIsPerfect)
{
    const auto ds = work_dir() / "gt";
    ASSERT_EQ(run("synth --out " + ds.string() + " --count 2 --size 8 8 8").code, 0);
    const auto out = work_dir() / "gt_eval";
    const auto r = run("eval --predictions " + ds.string() + " --data " + ds.string() + " --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    std::ifstream f(out / "summary.json");
    const json s = json::parse(f);
    EXPECT_EQ(s.at("mdsc").get<double>(), 1.0);
    for (const auto& [c, v] : s.at("classes").items()) {
        EXPECT_EQ(v.at("mean_hd95").get<double>(), 0.0) << c;
        EXPECT_EQ(v.at("hd95_undefined").get<int>(), 0) << c;
    }
}

TEST(Cli, MissingCheckpointIsAClearError)
{
    const auto ds = work_dir() / "gt_missing";
    ASSERT_EQ(run("synth --out " + ds.string() + " --count 1 --size 8 8 8").code, 0);
    const auto r = run("eval --checkpoint " + (work_dir() / "nope").string() + " --data " + ds.string());
    EXPECT_EQ(r.code, 1);
    EXPECT_TRUE(contains(r.out, "does not exist")) << r.out;
}

TEST(Cli, TrainWritesCheckpointsAndEvalLoadsThem)
{
    const auto ds = work_dir() / "train_ds";
    ASSERT_EQ(run("synth --out " + ds.string() + " --count 2 --classes 2 --size 8 8 8").code, 0);
    const auto yaml = write_text("train.yaml", "seed: 3\nnetwork:\n  preset: tiny\ntrain:\n  lr: 0.01\n"
                                               "  max_steps: 4\n  checkpoint_every: 2\noutput:\n  dir: " +
                                                   (work_dir() / "run").string() + "\n");
    const auto r = run("train --quiet --config " + yaml.string() + " --data " + ds.string());
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_TRUE(fs::exists(work_dir() / "run" / "model.json"));
    EXPECT_TRUE(fs::exists(work_dir() / "run" / "model_step2.bin"));
    std::ifstream h(work_dir() / "run" / "history.csv");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(h, line))
        ++lines;
    EXPECT_EQ(lines, 5u);
    const auto ck = load_checkpoint(work_dir() / "run" / "model");
    EXPECT_EQ(ck.manifest.at("seed"), 3);

    const auto e = run("eval --checkpoint " + (work_dir() / "run" / "model").string() + " --data " + ds.string() +
                       " --out " + (work_dir() / "run_eval").string());
    ASSERT_EQ(e.code, 0) << e.out;
    EXPECT_TRUE(fs::exists(work_dir() / "run_eval" / "metrics.csv"));
    EXPECT_TRUE(fs::exists(work_dir() / "run_eval" / "case0_label.vol"));
}

TEST(Cli, BenchWritesCsv)
{
    const auto csv = work_dir() / "bench.csv";
    const auto r = run("bench --n 512 1024 --repeats 1 --global-max-n 512 --csv " + csv.string());
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_TRUE(contains(r.out, "routing log-log slope"));
    EXPECT_TRUE(fs::exists(csv));
}

TEST(RunConfig, ParsesSectionsAndPresetOverrides)
{
    const auto rc = cli::parse_run_config(YAML::Load("seed: 7\nprecision: f64\nnetwork:\n  preset: full\n"
                                                     "  norm: ln\n  stem_channels: 24\ntrain:\n  batch_size: 4\n"
                                                     "data:\n  synth: {count: 2, size: [16, 16, 32]}\n"));
    EXPECT_EQ(rc.seed, 7u);
    EXPECT_EQ(rc.precision, "f64");
    EXPECT_EQ(rc.network.name, "full");
    EXPECT_EQ(rc.network.norm, NormKind::LayerNorm);
    EXPECT_EQ(rc.network.stem_channels, 24u);
    EXPECT_EQ(rc.network.group_sizes, full_preset().group_sizes);
    EXPECT_EQ(rc.train.batch_size, 4u);
    EXPECT_EQ(rc.synth.dims, (Dims3{16, 16, 32}));
    EXPECT_FALSE(rc.data_dir.has_value());
}

TEST(RunConfig, RejectsUnknownKeysAndBadTypes)
{
    EXPECT_THROW(cli::parse_run_config(YAML::Load("sed: 1\n")), ConfigError);
    EXPECT_THROW(cli::parse_run_config(YAML::Load("data:\n  synth:\n    noise: 0.1\n")), ConfigError);
    EXPECT_THROW(cli::parse_run_config(YAML::Load("train:\n  lr: fast\n")), ConfigError);
    EXPECT_THROW(cli::parse_run_config(YAML::Load("network:\n  preset: huge\n")), ConfigError);
    EXPECT_THROW(cli::parse_run_config(YAML::Load("network:\n  norm: batch\n")), ConfigError);
    auto rc = cli::parse_run_config(YAML::Load("precision: f16\n"));
    EXPECT_THROW(rc.finalize(), ConfigError);
}

TEST(RunConfig, EnvironmentOverridesSeedAndThreads)
{
    ::setenv("MHOME_SEED", "42", 1);
    ::setenv("MHOME_THREADS", "3", 1);
    auto rc = cli::parse_run_config(YAML::Load("seed: 1\nthreads: 1\n"));
    cli::apply_env_overrides(rc);
    ::unsetenv("MHOME_SEED");
    ::unsetenv("MHOME_THREADS");
    EXPECT_EQ(rc.seed, 42u);
    EXPECT_EQ(rc.threads, 3);
    rc.finalize();
    EXPECT_EQ(rc.train.seed, 42u);
    EXPECT_EQ(rc.synth.seed, 42u);
}

// SPDX-License-Identifier: Apache-2.0
// YAML run configuration for the mhome CLI.
//
// Layout (every section and key optional; unknown keys are rejected):
//
//   seed: 0
//   threads: 1
//   precision: f32            # f32 | f64
//   network:
//     preset: desk            # desk | full | tiny, applied before the overrides below
//     classes: 3
//     stem_channels: 8
//     layers: [1, 1, 1, 1]
//     ...
//   train:
//     lr: 1.0e-4
//     weight_decay: 1.0e-5
//     batch_size: 2
//     epochs: 1
//     max_steps: 0
//     cosine: true
//     checkpoint_every: 0
//   data:
//     dir: path/to/dataset    # omit to train on synthetic volumes
//     synth: {count: 4, size: [16, 16, 16], classes: 3, seed: 0}
//   output:
//     dir: run
//
// Environment overrides applied after the file: MHOME_SEED, MHOME_THREADS.
#pragma once

#include <mhome/errors.hpp>
#include <mhome/network.hpp>
#include <mhome/train.hpp>

#include <yaml-cpp/yaml.h>

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>
#include <string>

namespace mhome::cli {

struct RunConfig {
    std::uint64_t seed = 0;
    int threads = 1;
    std::string precision = "f32";
    NetworkConfig network = desk_preset();
    TrainConfig train;
    std::size_t checkpoint_every = 0;
    std::optional<std::filesystem::path> data_dir;
    SynthConfig synth;
    bool synth_seed_set = false;
    std::filesystem::path output_dir = "run";

    /// Propagates the run seed to the parts that did not set their own.
    void finalize()
    {
        train.seed = seed;
        if (!synth_seed_set)
            synth.seed = seed;
        if (precision != "f32" && precision != "f64")
            throw ConfigError("precision must be f32 or f64, got '" + precision + "'");
        if (threads < 1)
            throw ConfigError("threads must be >= 1");
        network.validate();
        train.validate();
    }
};

namespace detail {

inline void check_keys(const YAML::Node& n, const std::set<std::string>& allowed, const std::string& where)
{
    if (!n.IsMap())
        throw ConfigError(where + " must be a mapping");
    for (const auto& kv : n) {
        const auto key = kv.first.as<std::string>();
        if (!allowed.count(key)) {
            std::string list;
            for (const auto& a : allowed)
                list += (list.empty() ? "" : ", ") + a;
            throw ConfigError("unknown key '" + key + "' in " + where + " (line " +
                              std::to_string(kv.first.Mark().line + 1) + "); allowed: " + list);
        }
    }
}

template <typename V>
void read_into(const YAML::Node& n, const char* key, V& out, const std::string& where)
{
    if (!n[key])
        return;
    try {
        out = n[key].as<V>();
    } catch (const YAML::Exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

} // namespace detail

inline void apply_env_overrides(RunConfig& rc)
{
    auto parse = [](const char* name, const char* v) {
        char* end = nullptr;
        const long long x = std::strtoll(v, &end, 10);
        if (end == v || *end != '\0' || x < 0)
            throw ConfigError(std::string(name) + " must be a non-negative integer, got '" + v + "'");
        return x;
    };
    if (const char* s = std::getenv("MHOME_SEED"))
        rc.seed = static_cast<std::uint64_t>(parse("MHOME_SEED", s));
    if (const char* t = std::getenv("MHOME_THREADS"))
        rc.threads = static_cast<int>(parse("MHOME_THREADS", t));
}

inline RunConfig parse_run_config(const YAML::Node& root)
{
    using detail::read_into;
    RunConfig rc;
    if (!root || root.IsNull())
        return rc;
    detail::check_keys(root, {"seed", "threads", "precision", "network", "train", "data", "output"}, "config");
    read_into(root, "seed", rc.seed, "config");
    read_into(root, "threads", rc.threads, "config");
    read_into(root, "precision", rc.precision, "config");

    if (const auto n = root["network"]) {
        detail::check_keys(n,
                           {"preset", "in_channels", "classes", "stem_channels", "stages", "layers", "experts",
                            "experts2", "group_sizes", "slots", "ffn_ratio", "rho", "norm", "decoder_norm",
                            "state_dim", "expand", "scan_block"},
                           "network");
        std::string preset = "desk";
        read_into(n, "preset", preset, "network");
        auto& c = rc.network;
        c = preset_by_name(preset);
        read_into(n, "in_channels", c.in_channels, "network");
        read_into(n, "classes", c.classes, "network");
        read_into(n, "stem_channels", c.stem_channels, "network");
        read_into(n, "stages", c.stages, "network");
        read_into(n, "layers", c.layers, "network");
        read_into(n, "experts", c.experts, "network");
        read_into(n, "experts2", c.experts2, "network");
        read_into(n, "group_sizes", c.group_sizes, "network");
        read_into(n, "slots", c.slots, "network");
        read_into(n, "ffn_ratio", c.ffn_ratio, "network");
        read_into(n, "rho", c.rho, "network");
        read_into(n, "state_dim", c.state_dim, "network");
        read_into(n, "expand", c.expand, "network");
        read_into(n, "scan_block", c.scan_block, "network");
        std::string norm;
        read_into(n, "norm", norm, "network");
        if (!norm.empty())
            c.norm = parse_norm_kind(norm);
        norm.clear();
        read_into(n, "decoder_norm", norm, "network");
        if (!norm.empty())
            c.decoder_norm = parse_norm_kind(norm);
    }

    if (const auto t = root["train"]) {
        detail::check_keys(t, {"lr", "weight_decay", "batch_size", "epochs", "max_steps", "cosine", "checkpoint_every"},
                           "train");
        read_into(t, "lr", rc.train.lr, "train");
        read_into(t, "weight_decay", rc.train.weight_decay, "train");
        read_into(t, "batch_size", rc.train.batch_size, "train");
        read_into(t, "epochs", rc.train.epochs, "train");
        read_into(t, "max_steps", rc.train.max_steps, "train");
        read_into(t, "cosine", rc.train.cosine, "train");
        read_into(t, "checkpoint_every", rc.checkpoint_every, "train");
    }

    if (const auto d = root["data"]) {
        detail::check_keys(d, {"dir", "synth"}, "data");
        if (d["dir"]) {
            std::string dir;
            read_into(d, "dir", dir, "data");
            rc.data_dir = dir;
        }
        if (const auto s = d["synth"]) {
            detail::check_keys(s, {"count", "size", "classes", "seed"}, "data.synth");
            read_into(s, "count", rc.synth.count, "data.synth");
            read_into(s, "size", rc.synth.dims, "data.synth");
            read_into(s, "classes", rc.synth.classes, "data.synth");
            if (s["seed"]) {
                read_into(s, "seed", rc.synth.seed, "data.synth");
                rc.synth_seed_set = true;
            }
        }
    }

    if (const auto o = root["output"]) {
        detail::check_keys(o, {"dir"}, "output");
        std::string dir;
        read_into(o, "dir", dir, "output");
        if (!dir.empty())
            rc.output_dir = dir;
    }
    return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path))
        throw ConfigError("config file " + path.string() + " does not exist");
    try {
        return parse_run_config(YAML::LoadFile(path.string()));
    } catch (const YAML::Exception& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
}

} // namespace mhome::cli

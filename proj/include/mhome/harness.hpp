// SPDX-License-Identifier: Apache-2.0
//
// Verification and benchmarking drivers shared by the CLI and the acceptance
// suite: per-module finite-difference gradient checks and the token-count
// scaling sweep.

#pragma once

#include <chrono>
#include <cstdio>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "network.hpp"
#include "train.hpp"

namespace mhome {

// --- gradient checks -------------------------------------------------------

struct GradcheckResult {
    std::string module;
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    bool pass = false;
};

struct GradcheckOptions {
    double h = 1e-5;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
    std::optional<std::string> inject_fault; ///< module whose analytic gradient is corrupted
    std::size_t network_samples = 50;
};

namespace detail {

inline double fd_rel_err(double analytic, double numeric)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-4});
}

/// Backward once, then compare selected elements against central differences.
/// `picks` lists (leaf, element) pairs; empty means every element.
inline GradcheckResult fd_check(const std::string& module, const std::function<Tensor<double>()>& loss,
                                ParamList<double> leaves, const GradcheckOptions& opt,
                                std::vector<std::pair<std::size_t, std::size_t>> picks = {})
{
    for (auto& p : leaves)
        p.tensor.zero_grad();
    backward(loss());
    std::vector<std::vector<double>> analytic;
    for (const auto& p : leaves) {
        auto g = p.tensor.grad();
        analytic.emplace_back(g.begin(), g.end());
        analytic.back().resize(p.tensor.numel(), 0.0);
    }
    if (opt.inject_fault && *opt.inject_fault == module && !analytic.empty() && !analytic[0].empty())
        analytic[0][0] += 1.0 + std::abs(analytic[0][0]);
    if (picks.empty())
        for (std::size_t k = 0; k < leaves.size(); ++k)
            for (std::size_t i = 0; i < leaves[k].tensor.numel(); ++i)
                picks.emplace_back(k, i);
    if (opt.inject_fault && *opt.inject_fault == module && picks.front() != std::pair<std::size_t, std::size_t>{0, 0})
        picks.insert(picks.begin(), {0, 0});

    GradcheckResult r;
    r.module = module;
    NoGradGuard ng;
    for (auto [k, i] : picks) {
        auto d = leaves[k].tensor.mutable_data();
        const double saved = d[i];
        d[i] = saved + opt.h;
        const double up = loss().item();
        d[i] = saved - opt.h;
        const double down = loss().item();
        d[i] = saved;
        r.max_rel_err = std::max(r.max_rel_err, fd_rel_err(analytic[k][i], (up - down) / (2 * opt.h)));
        ++r.checked;
    }
    r.pass = r.max_rel_err < opt.tolerance;
    return r;
}

inline Tensor<double> uniform_tensor(Shape s, Rng& rng, double lo, double hi, bool requires_grad)
{
    auto t = Tensor<double>::zeros(std::move(s), requires_grad);
    rng.fill_uniform(t.mutable_data(), lo, hi);
    t.refresh_finite();
    return t;
}

/// sum(f * probe) with a fixed random probe matching f's shape.
inline std::function<Tensor<double>()> probed(std::function<Tensor<double>()> f, Rng& rng)
{
    Shape s;
    {
        NoGradGuard ng;
        s = f().shape();
    }
    auto probe = uniform_tensor(s, rng, -1.0, 1.0, false);
    return [f = std::move(f), probe] { return sum(mul(f(), probe)); };
}

} // namespace detail

inline std::vector<std::string> gradcheck_modules()
{
    return {"linear", "conv3d", "conv_transpose3d", "dyt", "layernorm", "expert_ffn", "selective_scan",
            "mamba",  "home",   "gsc",              "block_dyt", "block_ln", "network", "dice_ce_loss"};
}

/// Runs the finite-difference suite of one module at a tiny size (f64).
inline GradcheckResult gradcheck_module(const std::string& module, const GradcheckOptions& opt = {})
{
    using detail::fd_check;
    using detail::probed;
    using detail::uniform_tensor;
    using D = double;
    Rng rng(opt.seed + 1000);
    auto input = [&](Shape s) { return uniform_tensor(std::move(s), rng, -1.0, 1.0, true); };

    auto block_cfg = [](NormKind norm) {
        BlockConfig b;
        b.channels = 2;
        b.norm = norm;
        b.state_dim = 2;
        b.scan_block = 3;
        b.home.group_size = 3;
        b.home.experts = 2;
        b.home.experts2 = 3;
        b.home.slots = 2;
        b.home.dim = 2;
        return b;
    };

    if (module == "linear") {
        Linear<D> m(3, 2, rng);
        auto x = input({2, 3});
        ParamList<D> ps{{"x", x}};
        m.collect(ps, "linear");
        return fd_check(module, probed([&] { return m(x); }, rng), ps, opt);
    }
    if (module == "conv3d") {
        Conv3d<D> m(2, 2, 3, 1, 1, rng);
        auto x = input({1, 2, 3, 2, 3});
        ParamList<D> ps{{"x", x}};
        m.collect(ps, "conv");
        return fd_check(module, probed([&] { return m(x); }, rng), ps, opt);
    }
    if (module == "conv_transpose3d") {
        ConvTranspose3d<D> m(2, 2, 2, 2, rng);
        auto x = input({1, 2, 2, 1, 2});
        ParamList<D> ps{{"x", x}};
        m.collect(ps, "up");
        return fd_check(module, probed([&] { return m(x); }, rng), ps, opt);
    }
    if (module == "dyt" || module == "layernorm") {
        ChannelNorm<D> m(module == "dyt" ? NormKind::DyT : NormKind::LayerNorm, 3);
        ParamList<D> ps;
        m.collect(ps, "norm");
        for (auto& p : ps) { // move off the identity init so every term matters
            rng.fill_uniform(p.tensor.mutable_data(), 0.3, 1.2);
            p.tensor.refresh_finite();
        }
        auto x = uniform_tensor({2, 3, 2}, rng, -2.0, 2.0, true);
        ps.push_back({"x", x});
        return fd_check(module, probed([&] { return m(x, 1); }, rng), ps, opt);
    }
    if (module == "expert_ffn") {
        ExpertFFN<D> m(3, 2, rng);
        auto x = input({2, 3});
        ParamList<D> ps{{"x", x}};
        m.collect(ps, "ffn");
        return fd_check(module, probed([&] { return m(x); }, rng), ps, opt);
    }
    if (module == "selective_scan") {
        auto delta = uniform_tensor({1, 6, 2}, rng, 0.1, 1.0, true);
        auto rate = uniform_tensor({2, 3}, rng, 0.2, 1.5, true);
        auto b = input({1, 6, 3}), c = input({1, 6, 3}), x = input({1, 6, 2}), dskip = input({2});
        ParamList<D> ps{{"delta", delta}, {"rate", rate}, {"b", b}, {"c", c}, {"x", x}, {"d", dskip}};
        ScanOptions so;
        so.block = 4;
        auto f = [=] { return selective_scan(discretize(delta, rate), b, c, x, dskip, so); };
        return fd_check(module, probed(f, rng), ps, opt);
    }
    if (module == "mamba") {
        MambaLayer<D> m(SSMConfig{2, 2, 1, 3}, rng);
        auto x = input({1, 5, 2});
        ParamList<D> ps{{"x", x}};
        m.collect(ps, "mamba");
        return fd_check(module, probed([&] { return m(x); }, rng), ps, opt);
    }
    if (module == "home") {
        HoMEStageConfig hc;
        hc.group_size = 3;
        hc.experts = 2;
        hc.experts2 = 3;
        hc.slots = 2;
        hc.dim = 3;
        HoMELayer<D> m(hc, rng);
        auto x = input({2, 5, 3});
        ParamList<D> ps{{"x", x}};
        m.collect(ps, "home");
        return fd_check(module, probed([&] { return m(x); }, rng), ps, opt);
    }
    if (module == "gsc") {
        GatedSpatialConv<D> m(2, rng);
        auto x = input({1, 2, 3, 2, 2});
        ParamList<D> ps{{"x", x}};
        m.collect(ps, "gsc");
        return fd_check(module, probed([&] { return m(x); }, rng), ps, opt);
    }
    if (module == "block_dyt" || module == "block_ln") {
        MambaHoMEBlock<D> m(block_cfg(module == "block_dyt" ? NormKind::DyT : NormKind::LayerNorm), rng);
        auto x = input({1, 2, 2, 2, 2});
        ParamList<D> ps{{"x", x}};
        m.collect(ps, "block");
        return fd_check(module, probed([&] { return m(x); }, rng), ps, opt);
    }
    if (module == "network") {
        MambaHoMENet<D> net(tiny_preset(), rng);
        auto x = uniform_tensor({1, 1, 8, 8, 8}, rng, 0.0, 1.0, false);
        auto ps = net.parameters();
        const std::size_t total = count_elements(ps);
        std::vector<std::pair<std::size_t, std::size_t>> picks;
        for (std::size_t s = 0; s < opt.network_samples; ++s) {
            std::size_t flat = rng.index(total), k = 0;
            while (flat >= ps[k].tensor.numel())
                flat -= ps[k++].tensor.numel();
            picks.emplace_back(k, flat);
        }
        return fd_check(module, probed([&] { return net(x); }, rng), ps, opt, picks);
    }
    if (module == "dice_ce_loss") {
        auto z = uniform_tensor({1, 2, 4, 4, 4}, rng, -2.0, 2.0, true);
        std::vector<std::uint8_t> l(64);
        for (auto& v : l)
            v = std::uint8_t(rng.index(2));
        LabelVolume y({4, 4, 4}, l);
        return fd_check(module, [&] { return dice_ce_loss(z, {&y}); }, {{"logits", z}}, opt);
    }
    throw ConfigError("unknown gradcheck module '" + module + "'");
}

// --- scaling benchmark -----------------------------------------------------

struct BenchOptions {
    std::vector<std::size_t> n_values{1u << 10, 1u << 11, 1u << 12, 1u << 13, 1u << 14, 1u << 15, 1u << 16};
    std::size_t repeats = 3;
    std::size_t global_max_n = 1u << 13;
    bool network = true;
    NormKind norm = NormKind::DyT;
    std::uint64_t seed = 0;
};

struct BenchRow {
    std::size_t n = 0;
    std::size_t k = 0, e = 0, s = 0;
    double wall_ms = 0.0;             ///< full HoME layer forward
    double est_flops = 0.0;           ///< HoME layer forward estimate
    double assign_ms = 0.0;           ///< grouped slot assignment only
    double assign_flops = 0.0;
    std::optional<double> global_assign_ms;
    double global_assign_flops = 0.0;
    std::optional<double> network_ms; ///< full network forward at N stage-1 tokens
};

struct BenchResult {
    std::vector<BenchRow> rows;
    double routing_slope = 0.0;
    std::optional<double> network_slope;
};

/// Forward multiply-add estimate (x2) of one HoME layer on N tokens.
inline double home_forward_flops(const HoMEStageConfig& c, std::size_t n)
{
    const double d = double(c.dim), M = double(c.slot_count()), r = double(c.ffn_ratio);
    const double G = double((n + c.group_size - 1) / c.group_size);
    const double ffn = 4.0 * r * d * d; // two matmuls per position
    return grouped_assignment_flops(n, c.experts, c.slots, c.dim) + G * M * double(c.experts) * ffn +
           G * M * double(c.experts2) * ffn + 2.0 * double(n) * M * d;
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y)
{
    if (x.size() != y.size() || x.size() < 2)
        throw ContractError("loglog_slope needs at least two points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= double(x.size());
    my /= double(x.size());
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    }
    return sxy / sxx;
}

/// Desk stage-1 HoME configuration used by the routing sweep.
inline HoMEStageConfig bench_home_config() { return desk_preset().home_stage(0); }

/// Input extents whose stage-1 token count is n (n must be 2^k with k >= 9).
inline Dims3 bench_extents(std::size_t n)
{
    if (n < 512 || (n & (n - 1)) != 0)
        throw ConfigError("bench N must be a power of two >= 512, got " + std::to_string(n));
    Dims3 d{16, 16, 16};
    for (std::size_t i = 0, m = n / 512; m > 1; m /= 2, ++i)
        d[i % 3] *= 2;
    return d;
}

/// Minimum wall time in ms of `f` over `repeats` runs.
inline double time_min_ms(const std::function<void()>& f, std::size_t repeats)
{
    double best = 1e300;
    for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    return best;
}

/// Slot assignment of one group of all N tokens against the bank tiled G times.
template <typename T>
SlotAssignment<T> global_slot_assign(const Tensor<T>& x, const SlotEmbeddings<T>& bank, std::size_t groups)
{
    std::vector<Tensor<T>> tiles(groups, bank.embeddings);
    SlotEmbeddings<T> wide(concat<T>(tiles, 1));
    return slot_assign(group_and_pad(x, std::nullopt, x.dim(1)), wide);
}

template <typename T = float>
BenchResult run_bench(const BenchOptions& opt)
{
    BenchResult res;
    Rng rng(opt.seed + 2000);
    const auto hc = bench_home_config();
    HoMELayer<T> layer(hc, rng);
    std::optional<MambaHoMENet<T>> net;
    if (opt.network) {
        auto cfg = desk_preset();
        cfg.norm = opt.norm;
        net.emplace(cfg, rng);
    }
    NoGradGuard ng;
    std::vector<double> ns, routing_ms, net_ms;
    for (std::size_t n : opt.n_values) {
        BenchRow row;
        row.n = n;
        row.k = hc.group_size;
        row.e = hc.experts;
        row.s = hc.slots;
        auto x = Tensor<T>::zeros({1, n, hc.dim});
        rng.fill_uniform(x.mutable_data(), -1.0, 1.0);
        x.refresh_finite();
        row.wall_ms = time_min_ms([&] { (void)layer(x); }, opt.repeats);
        row.est_flops = home_forward_flops(hc, n);
        row.assign_ms =
            time_min_ms([&] { (void)slot_assign(group_and_pad(x, std::nullopt, hc.group_size), layer.slots); },
                        opt.repeats);
        row.assign_flops = grouped_assignment_flops(n, hc.experts, hc.slots, hc.dim);
        row.global_assign_flops = global_assignment_flops(n, hc.group_size, hc.experts, hc.slots, hc.dim);
        if (n <= opt.global_max_n) {
            const std::size_t groups = (n + hc.group_size - 1) / hc.group_size;
            row.global_assign_ms =
                time_min_ms([&] { (void)global_slot_assign(x, layer.slots, groups); }, opt.repeats);
        }
        if (net) {
            const auto d = bench_extents(n);
            auto v = Tensor<T>::zeros({1, 1, d[0], d[1], d[2]});
            rng.fill_uniform(v.mutable_data(), 0.0, 1.0);
            v.refresh_finite();
            row.network_ms = time_min_ms([&] { (void)(*net)(v); }, opt.repeats);
            net_ms.push_back(*row.network_ms);
        }
        ns.push_back(double(n));
        routing_ms.push_back(row.wall_ms);
        res.rows.push_back(row);
    }
    if (ns.size() >= 2) {
        res.routing_slope = loglog_slope(ns, routing_ms);
        if (net)
            res.network_slope = loglog_slope(ns, net_ms);
    }
    return res;
}

inline std::string bench_csv(const BenchResult& r)
{
    std::ostringstream os;
    os.precision(8);
    os << "N,K,E,S,wall_ms,est_FLOPs,assign_ms,assign_FLOPs,global_assign_ms,global_assign_FLOPs,network_ms\n";
    for (const auto& row : r.rows) {
        os << row.n << ',' << row.k << ',' << row.e << ',' << row.s << ',' << row.wall_ms << ',' << row.est_flops
           << ',' << row.assign_ms << ',' << row.assign_flops << ',';
        if (row.global_assign_ms)
            os << *row.global_assign_ms;
        os << ',' << row.global_assign_flops << ',';
        if (row.network_ms)
            os << *row.network_ms;
        os << '\n';
    }
    return os.str();
}

// --- schedule description --------------------------------------------------

namespace detail {

inline std::string list_str(const std::vector<std::size_t>& v)
{
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i)
        s += (i ? "," : "") + std::to_string(v[i]);
    return s + "]";
}

} // namespace detail

/// Human-readable schedule table plus one-line echoes of every per-stage list.
/// `input` gives the (D, H, W) extents used for the per-stage token counts.
inline std::string describe(const NetworkConfig& cfg, const Dims3& input)
{
    cfg.validate();
    cfg.validate_input({1, cfg.in_channels, input[0], input[1], input[2]});
    std::ostringstream os;
    os << "network '" << cfg.name << "': " << cfg.stages << " stages, stem " << cfg.stem_channels << ", classes "
       << cfg.classes << ", norm " << to_string(cfg.norm) << " (decoder " << to_string(cfg.decoder_norm) << ")\n";
    os << "input " << input[0] << "x" << input[1] << "x" << input[2] << "\n\n";
    os << "stage  C     extent        N        L  E   E2  K      S  G        params\n";
    for (std::size_t i = 0; i < cfg.stages; ++i) {
        const std::size_t f = std::size_t{2} << i;
        const Dims3 e{input[0] / f, input[1] / f, input[2] / f};
        const std::size_t n = e[0] * e[1] * e[2];
        const auto h = cfg.home_stage(i);
        char line[160];
        std::snprintf(line, sizeof line, "%-6zu %-5zu %-13s %-8zu %-2zu %-3zu %-3zu %-6zu %-2zu %-8zu %zu\n", i + 1,
                      h.dim,
                      (std::to_string(e[0]) + "x" + std::to_string(e[1]) + "x" + std::to_string(e[2])).c_str(), n,
                      cfg.layers[i], h.experts, h.experts2, h.group_size, h.slots, (n + h.group_size - 1) / h.group_size,
                      MambaHoMEBlock<double>::parameter_count(cfg.block(i)));
        os << line;
    }
    os << "\n";
    os << "stem=" << cfg.stem_channels << "\n";
    os << "C=" << detail::list_str(cfg.channels()) << "\n";
    os << "L=" << detail::list_str(cfg.layers) << "\n";
    os << "E=" << detail::list_str(cfg.experts) << "\n";
    os << "E2=" << detail::list_str(cfg.experts2) << "\n";
    os << "K=" << detail::list_str(cfg.group_sizes) << "\n";
    os << "S=" << cfg.slots << "\n";
    os << "parameters=" << MambaHoMENet<double>::parameter_count(cfg) << "\n";
    return os.str();
}

} // namespace mhome

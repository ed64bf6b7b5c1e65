// SPDX-License-Identifier: Apache-2.0
//
// Hierarchical soft mixture-of-experts layer.
//
//   1. Tokens (B, N, d) are cut into G = ceil(N/K) contiguous groups of K tokens
//      (zero padded, padding masked). Each token gets a softmax over the
//      M = E*S expert slots of a shared slot bank; slots are the dispatch-weighted
//      sums of their group's tokens.
//   2. Level 1: per group, a router on the slot mean mixes all E experts densely.
//   3. Level 2: the G*M slots form one sequence; a per-slot router mixes 2E
//      experts densely.
//   4. Tokens are rebuilt as convex combinations of their group's slot outputs,
//      reusing the dispatch weights, and padding is dropped.

#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "nn.hpp"

namespace mhome {

struct HoMEStageConfig {
    std::size_t stage = 1;       ///< 1-based encoder stage index
    std::size_t group_size = 4;  ///< K: tokens per group
    std::size_t experts = 2;     ///< E: level-1 experts
    std::size_t experts2 = 4;    ///< E2: level-2 experts
    std::size_t slots = 1;       ///< S: slots per expert
    std::size_t dim = 4;         ///< d: token width
    std::size_t ffn_ratio = 2;   ///< expert hidden width = ffn_ratio * d
    double rho = 0.5;            ///< group-size decay between stages

    std::size_t slot_count() const { return experts * slots; }

    void validate() const
    {
        auto need = [](bool ok, const std::string& what) {
            if (!ok)
                throw ConfigError("HoME stage config: " + what);
        };
        need(stage >= 1, "stage index is 1-based");
        need(group_size >= 1, "group size K must be >= 1");
        need(experts >= 1 && experts2 >= 1, "expert counts must be >= 1");
        need(slots >= 1, "slots per expert must be >= 1");
        need(dim >= 1, "feature dim must be >= 1");
        need(ffn_ratio >= 1, "ffn ratio must be >= 1");
        need(rho > 0.0 && rho < 1.0, "rho must lie in (0, 1)");
    }
};

/// K_t = K_1 * rho^(t-1) for t = 1..stages, rounded to the nearest integer.
inline std::vector<std::size_t> group_size_schedule(std::size_t k1, double rho, std::size_t stages)
{
    if (!(rho > 0.0 && rho < 1.0))
        throw ConfigError("group-size ratio rho must lie in (0, 1)");
    std::vector<std::size_t> ks;
    for (std::size_t t = 0; t < stages; ++t) {
        const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(k1) * std::pow(rho, double(t))));
        if (k == 0)
            throw ConfigError("group-size schedule reaches zero at stage " + std::to_string(t + 1));
        ks.push_back(k);
    }
    return ks;
}

/// Expert counts strictly increase and group sizes strictly decrease with depth.
inline void validate_schedule(const std::vector<HoMEStageConfig>& stages)
{
    for (std::size_t i = 0; i < stages.size(); ++i) {
        stages[i].validate();
        if (i == 0)
            continue;
        if (stages[i].experts <= stages[i - 1].experts)
            throw ConfigError("expert counts must increase with stage depth (E_" + std::to_string(i) + "=" +
                              std::to_string(stages[i - 1].experts) + ", E_" + std::to_string(i + 1) + "=" +
                              std::to_string(stages[i].experts) + ")");
        if (stages[i].group_size >= stages[i - 1].group_size)
            throw ConfigError("group sizes must decrease with stage depth (K_" + std::to_string(i) + "=" +
                              std::to_string(stages[i - 1].group_size) + ", K_" + std::to_string(i + 1) + "=" +
                              std::to_string(stages[i].group_size) + ")");
    }
}

/// Tokens cut into groups: tokens (B, G, K, d) plus the padded validity mask (B * G * K).
template <typename T>
struct GroupedTokens {
    Tensor<T> tokens;
    std::vector<std::uint8_t> valid;
    std::size_t length = 0; ///< original N
    std::size_t groups = 0;
    std::size_t group_size = 0;
};

/// Token validity flags in (b, n) order; an absent mask means every token is valid.
using TokenMask = std::optional<std::vector<std::uint8_t>>;

template <typename T>
GroupedTokens<T> group_and_pad(const Tensor<T>& x, const TokenMask& mask, std::size_t group_size)
{
    if (x.rank() != 3)
        throw ShapeError("group_and_pad: expected (B, N, d), got " + to_string(x.shape()));
    if (group_size == 0)
        throw ConfigError("group_and_pad: group size must be >= 1");
    const std::size_t B = x.dim(0), N = x.dim(1), d = x.dim(2);
    if (N == 0)
        throw ShapeError("group_and_pad: empty token sequence");
    if (mask && mask->size() != B * N)
        throw ShapeError("group_and_pad: mask has " + std::to_string(mask->size()) + " entries for " +
                         std::to_string(B * N) + " tokens");
    const std::size_t G = (N + group_size - 1) / group_size;
    const std::size_t padded = G * group_size;
    GroupedTokens<T> out;
    out.length = N;
    out.groups = G;
    out.group_size = group_size;
    out.valid.assign(B * padded, 0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
            out.valid[b * padded + n] = mask ? ((*mask)[b * N + n] ? 1 : 0) : 1;
    auto padded_x = padded == N ? x : pad_zeros(x, 1, 0, padded - N);
    out.tokens = reshape(padded_x, {B, G, group_size, d});
    return out;
}

/// Inverse of group_and_pad on the token axis: (B, G, K, d) -> (B, N, d).
template <typename T>
Tensor<T> ungroup(const Tensor<T>& grouped, std::size_t length)
{
    if (grouped.rank() != 4)
        throw ShapeError("ungroup: expected (B, G, K, d), got " + to_string(grouped.shape()));
    const std::size_t B = grouped.dim(0), padded = grouped.dim(1) * grouped.dim(2), d = grouped.dim(3);
    if (length > padded || length + grouped.dim(2) <= padded)
        throw ShapeError("ungroup: length " + std::to_string(length) + " inconsistent with grouped shape " +
                         to_string(grouped.shape()));
    auto flat = reshape(grouped, {B, padded, d});
    return length == padded ? flat : slice(flat, 1, 0, length);
}

/// Learnable slot bank (E, S, d), shared by every group and batch element of a stage.
template <typename T>
struct SlotEmbeddings {
    SlotEmbeddings() = default;
    SlotEmbeddings(std::size_t experts, std::size_t slots, std::size_t d, Rng& rng)
        : embeddings(make_param<T>({experts, slots, d}, rng, 1.0 / std::sqrt(static_cast<double>(d))))
    {
    }
    explicit SlotEmbeddings(Tensor<T> e) : embeddings(std::move(e)) {}

    std::size_t experts() const { return embeddings.dim(0); }
    std::size_t slots() const { return embeddings.dim(1); }
    std::size_t dim() const { return embeddings.dim(2); }

    Tensor<T> embeddings;
};

template <typename T>
struct SlotAssignment {
    Tensor<T> slots;    ///< (B, G, E, S, d)
    Tensor<T> dispatch; ///< A: (B, G, K, M), rows sum to 1 for valid tokens, 0 for masked ones
};

template <typename T>
SlotAssignment<T> slot_assign(const GroupedTokens<T>& grouped, const SlotEmbeddings<T>& bank)
{
    const auto& xs = grouped.tokens.shape();
    const std::size_t B = xs[0], G = xs[1], K = xs[2], d = xs[3];
    const std::size_t E = bank.experts(), S = bank.slots(), M = E * S;
    if (bank.dim() != d)
        throw ShapeError("slot_assign: slot width " + std::to_string(bank.dim()) + " vs token width " +
                         std::to_string(d));
    // m = e * S + s
    auto keys = transpose(reshape(bank.embeddings, {M, d}), 0, 1);
    auto logits = matmul(grouped.tokens, keys);
    auto masked = mask_rows(logits, grouped.valid, -std::numeric_limits<T>::infinity());
    auto dispatch = softmax(masked, 3, DegenerateSlice::Zero);
    auto slots = matmul(transpose(dispatch, 2, 3), grouped.tokens);
    return {reshape(slots, {B, G, E, S, d}), dispatch};
}

/// Level 1: one router decision per group from the slot mean; all experts run.
/// slots (B, G, M, d) -> (B, G, M, d).
template <typename T>
Tensor<T> level1_route(const Tensor<T>& slots, const RouterMLP<T>& router, const std::vector<ExpertFFN<T>>& experts)
{
    if (slots.rank() != 4)
        throw ShapeError("level1_route: expected (B, G, M, d), got " + to_string(slots.shape()));
    if (router.experts() != experts.size())
        throw ShapeError("level1_route: router width " + std::to_string(router.experts()) + " vs " +
                         std::to_string(experts.size()) + " experts");
    auto gates = softmax(router.logits(reduce_mean(slots, 2)), 2);
    std::vector<Tensor<T>> outs;
    outs.reserve(experts.size());
    for (const auto& f : experts)
        outs.push_back(f(slots));
    return mix_experts(gates, outs);
}

/// Level 2: per-position router over the flattened slot sequence; all experts run.
/// seq (B, G*M, d) -> (B, G*M, d).
template <typename T>
Tensor<T> level2_route(const Tensor<T>& seq, const RouterMLP<T>& router, const std::vector<ExpertFFN<T>>& experts)
{
    if (seq.rank() != 3)
        throw ShapeError("level2_route: expected (B, G*M, d), got " + to_string(seq.shape()));
    if (router.experts() != experts.size())
        throw ShapeError("level2_route: router width " + std::to_string(router.experts()) + " vs " +
                         std::to_string(experts.size()) + " experts");
    auto gates = softmax(router.logits(seq), 2);
    std::vector<Tensor<T>> outs;
    outs.reserve(experts.size());
    for (const auto& f : experts)
        outs.push_back(f(seq));
    return mix_experts(gates, outs);
}

/// Rebuilds tokens from slot outputs with the dispatch weights and drops padding.
/// slot_out (B, G, M, d), dispatch (B, G, K, M) -> (B, N, d).
template <typename T>
Tensor<T> combine(const Tensor<T>& slot_out, const Tensor<T>& dispatch, std::size_t length)
{
    if (slot_out.rank() != 4 || dispatch.rank() != 4 || slot_out.dim(0) != dispatch.dim(0) ||
        slot_out.dim(1) != dispatch.dim(1) || slot_out.dim(2) != dispatch.dim(3))
        throw ShapeError("combine: slot outputs " + to_string(slot_out.shape()) + " vs dispatch " +
                         to_string(dispatch.shape()));
    return ungroup(matmul(dispatch, slot_out), length);
}

/// Intermediate tensors of one HoME forward, for inspection.
template <typename T>
struct HoMETrace {
    GroupedTokens<T> grouped;
    SlotAssignment<T> assignment;
    Tensor<T> level1;
    Tensor<T> level2;
    Tensor<T> output;
};

template <typename T>
class HoMELayer {
public:
    HoMELayer() = default;
    HoMELayer(const HoMEStageConfig& cfg, Rng& rng) : cfg_(cfg)
    {
        cfg.validate();
        slots = SlotEmbeddings<T>(cfg.experts, cfg.slots, cfg.dim, rng);
        router1 = RouterMLP<T>(cfg.dim, cfg.experts, rng);
        for (std::size_t e = 0; e < cfg.experts; ++e)
            experts1.emplace_back(cfg.dim, cfg.ffn_ratio, rng);
        router2 = RouterMLP<T>(cfg.dim, cfg.experts2, rng);
        for (std::size_t e = 0; e < cfg.experts2; ++e)
            experts2.emplace_back(cfg.dim, cfg.ffn_ratio, rng);
    }

    HoMETrace<T> trace(const Tensor<T>& x, const TokenMask& mask = std::nullopt) const
    {
        if (x.rank() != 3 || x.dim(2) != cfg_.dim)
            throw ShapeError("home_forward: expected (B, N, " + std::to_string(cfg_.dim) + "), got " +
                             to_string(x.shape()));
        HoMETrace<T> t;
        t.grouped = group_and_pad(x, mask, cfg_.group_size);
        t.assignment = slot_assign(t.grouped, slots);
        const std::size_t B = x.dim(0), G = t.grouped.groups, M = cfg_.slot_count(), d = cfg_.dim;
        t.level1 = level1_route(reshape(t.assignment.slots, {B, G, M, d}), router1, experts1);
        t.level2 = level2_route(reshape(t.level1, {B, G * M, d}), router2, experts2);
        t.output = combine(reshape(t.level2, {B, G, M, d}), t.assignment.dispatch, t.grouped.length);
        return t;
    }

    Tensor<T> operator()(const Tensor<T>& x, const TokenMask& mask = std::nullopt) const
    {
        return trace(x, mask).output;
    }

    const HoMEStageConfig& config() const { return cfg_; }

    void collect(ParamList<T>& out, const std::string& prefix) const
    {
        out.push_back({join_name(prefix, "slots"), slots.embeddings});
        router1.collect(out, join_name(prefix, "router1"));
        for (std::size_t e = 0; e < experts1.size(); ++e)
            experts1[e].collect(out, join_name(prefix, "experts1." + std::to_string(e)));
        router2.collect(out, join_name(prefix, "router2"));
        for (std::size_t e = 0; e < experts2.size(); ++e)
            experts2[e].collect(out, join_name(prefix, "experts2." + std::to_string(e)));
    }

    static std::size_t parameter_count(const HoMEStageConfig& c)
    {
        return c.experts * c.slots * c.dim + RouterMLP<T>::parameter_count(c.dim, c.experts) +
               c.experts * ExpertFFN<T>::parameter_count(c.dim, c.ffn_ratio) +
               RouterMLP<T>::parameter_count(c.dim, c.experts2) +
               c.experts2 * ExpertFFN<T>::parameter_count(c.dim, c.ffn_ratio);
    }

    SlotEmbeddings<T> slots;
    RouterMLP<T> router1;
    std::vector<ExpertFFN<T>> experts1;
    RouterMLP<T> router2;
    std::vector<ExpertFFN<T>> experts2;

private:
    HoMEStageConfig cfg_;
};

/// Multiply-add count (x2) of slot assignment: logits plus slot aggregation over
/// the valid tokens, each token seeing the M slots of its own group.
inline double grouped_assignment_flops(std::size_t n, std::size_t experts, std::size_t slots, std::size_t d)
{
    return 4.0 * double(n) * double(experts * slots) * double(d);
}

/// The same cost when one global group must serve all G*M slots.
inline double global_assignment_flops(std::size_t n, std::size_t k, std::size_t experts, std::size_t slots,
                                      std::size_t d)
{
    const std::size_t groups = (n + k - 1) / k;
    return 4.0 * double(n) * double(groups * experts * slots) * double(d);
}

} // namespace mhome

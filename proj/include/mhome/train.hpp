// SPDX-License-Identifier: Apache-2.0
//
// Training pieces: Dice + cross-entropy loss, AdamW with decoupled weight
// decay, cosine learning-rate schedule, synthetic volumes, and the loop.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "metrics.hpp"
#include "network.hpp"

namespace mhome {

/// One image/label pair; the image is single-channel, intensities in [0, 1].
struct VolumeSample {
    std::vector<float> image;
    LabelVolume label;
    std::array<double, 3> spacing{1.0, 1.0, 1.0}; ///< mm per raster axis (D, H, W)

    const Dims3& dims() const { return label.dims; }
};

/// Constant (B, classes, D, H, W) indicator of the target labels.
template <typename T>
Tensor<T> one_hot(const std::vector<const LabelVolume*>& targets, std::size_t classes)
{
    if (targets.empty())
        throw ContractError("one_hot of an empty batch");
    const Dims3 d = targets[0]->dims;
    const std::size_t V = d[0] * d[1] * d[2], B = targets.size();
    std::vector<T> v(B * classes * V, T(0));
    for (std::size_t b = 0; b < B; ++b) {
        if (targets[b]->dims != d)
            throw ShapeError("one_hot: label volumes in a batch must share extents");
        for (std::size_t i = 0; i < V; ++i) {
            const std::size_t c = targets[b]->labels[i];
            if (c >= classes)
                throw ContractError("label " + std::to_string(c) + " out of range for " + std::to_string(classes) +
                                    " classes");
            v[(b * classes + c) * V + i] = T(1);
        }
    }
    return Tensor<T>({B, classes, d[0], d[1], d[2]}, std::move(v));
}

/// Soft Dice loss over all classes (batch-pooled, eps 1e-5 in the denominator)
/// plus mean voxelwise cross-entropy.
template <typename T>
Tensor<T> dice_ce_loss(const Tensor<T>& logits, const std::vector<const LabelVolume*>& targets)
{
    if (logits.rank() != 5 || logits.dim(0) != targets.size())
        throw ShapeError("dice_ce_loss: logits " + to_string(logits.shape()) + " for " +
                         std::to_string(targets.size()) + " targets");
    const std::size_t B = logits.dim(0), C = logits.dim(1), V = logits.dim(2) * logits.dim(3) * logits.dim(4);
    for (const auto* t : targets)
        if (Shape{t->dims[0], t->dims[1], t->dims[2]} != Shape(logits.shape().begin() + 2, logits.shape().end()))
            throw ShapeError("dice_ce_loss: label extents differ from logits " + to_string(logits.shape()));
    const auto onehot = one_hot<T>(targets, C);

    // per-class sums over batch and voxels: (B, C, V) -> (C, B*V) -> (C)
    auto per_class = [&](const Tensor<T>& x) {
        return reduce_sum(reshape(permute(reshape(x, {B, C, V}), {1, 0, 2}), {C, B * V}), 1);
    };
    auto probs = softmax(logits, 1);
    auto inter = per_class(mul(probs, onehot));
    auto denom = add_scalar(add(per_class(probs), per_class(onehot)), T(1e-5));
    auto dice = div(scale(inter, T(2)), denom);
    auto dice_loss = add_scalar(scale(mean(dice), T(-1)), T(1));

    auto ce = scale(sum(mul(log_softmax(logits, 1), onehot)), T(-1) / T(B * V));
    return add(dice_loss, ce);
}

/// lr0 * (1 + cos(pi t / t_max)) / 2.
inline double cosine_lr(std::size_t t, std::size_t t_max, double lr0)
{
    if (t_max == 0)
        return lr0;
    if (t > t_max)
        throw ContractError("cosine_lr: step " + std::to_string(t) + " beyond schedule length " +
                            std::to_string(t_max));
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * double(t) / double(t_max)));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

/// AdamW with bias-corrected moments and decoupled weight decay.
template <typename T>
class AdamW {
public:
    AdamW(ParamList<T> params, AdamWConfig cfg = {}) : params_(std::move(params)), cfg_(cfg)
    {
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor.numel(), 0.0);
            v_.emplace_back(p.tensor.numel(), 0.0);
        }
    }

    /// Applies one update with the given learning rate using the gradients
    /// currently stored on the parameters (missing gradients count as zero).
    void step(double lr)
    {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k].tensor;
            auto g = p.grad();
            auto w = p.mutable_data();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g.empty() ? 0.0 : double(g[i]);
                double wi = double(w[i]);
                wi -= lr * cfg_.weight_decay * wi;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                wi -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
                w[i] = static_cast<T>(wi);
            }
            p.refresh_finite();
        }
    }

    void zero_grad()
    {
        for (auto& p : params_)
            p.tensor.zero_grad();
    }

    std::size_t steps_taken() const { return t_; }
    const ParamList<T>& params() const { return params_; }

private:
    ParamList<T> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

struct SynthConfig {
    std::size_t count = 4;
    Dims3 dims{16, 16, 16};
    std::size_t classes = 3;
    double min_foreground = 0.05;
    double max_foreground = 0.40;
    double noise_sigma = 0.05;
    std::uint64_t seed = 0;
};

/// Background plus one ellipsoid or box per foreground class, class-specific
/// intensity, additive Gaussian noise clipped to [0, 1]. Draws are rejected
/// until the total foreground fraction lies in the configured band and every
/// foreground class is present.
inline std::vector<VolumeSample> synth_volumes(const SynthConfig& cfg)
{
    if (cfg.classes < 2)
        throw ConfigError("synth_volumes needs at least 2 classes");
    if (!(cfg.min_foreground >= 0.0 && cfg.min_foreground < cfg.max_foreground && cfg.max_foreground <= 1.0))
        throw ConfigError("synth_volumes: foreground band must satisfy 0 <= min < max <= 1");
    const std::size_t D = cfg.dims[0], H = cfg.dims[1], W = cfg.dims[2], V = D * H * W;
    if (V == 0)
        throw ConfigError("synth_volumes: empty extents");
    Rng rng(cfg.seed);
    std::vector<VolumeSample> out;
    for (std::size_t s = 0; s < cfg.count; ++s) {
        std::vector<std::uint8_t> lab;
        for (int attempt = 0;; ++attempt) {
            if (attempt == 1000)
                throw ConfigError("synth_volumes: could not meet the foreground band after 1000 draws");
            lab.assign(V, 0);
            for (std::size_t c = 1; c < cfg.classes; ++c) {
                const bool box = rng.index(2) == 1;
                const double cz = rng.uniform(0.25, 0.75) * D, cy = rng.uniform(0.25, 0.75) * H,
                             cx = rng.uniform(0.25, 0.75) * W;
                const double rz = rng.uniform(0.12, 0.3) * D, ry = rng.uniform(0.12, 0.3) * H,
                             rx = rng.uniform(0.12, 0.3) * W;
                for (std::size_t z = 0; z < D; ++z)
                    for (std::size_t y = 0; y < H; ++y)
                        for (std::size_t x = 0; x < W; ++x) {
                            const double dz = (double(z) + 0.5 - cz) / rz, dy = (double(y) + 0.5 - cy) / ry,
                                         dx = (double(x) + 0.5 - cx) / rx;
                            const bool in = box ? (std::abs(dz) <= 1 && std::abs(dy) <= 1 && std::abs(dx) <= 1)
                                                : (dz * dz + dy * dy + dx * dx <= 1);
                            if (in)
                                lab[(z * H + y) * W + x] = std::uint8_t(c);
                        }
            }
            std::vector<std::size_t> counts(cfg.classes, 0);
            for (auto l : lab)
                ++counts[l];
            const double fg = double(V - counts[0]) / double(V);
            const bool all_present = std::all_of(counts.begin() + 1, counts.end(), [](auto n) { return n > 0; });
            if (all_present && fg >= cfg.min_foreground && fg <= cfg.max_foreground)
                break;
        }
        VolumeSample vs;
        vs.label = LabelVolume(cfg.dims, lab);
        vs.image.resize(V);
        for (std::size_t i = 0; i < V; ++i) {
            const double base = 0.15 + 0.7 * double(lab[i]) / double(cfg.classes - 1);
            vs.image[i] = float(std::clamp(base + rng.normal(0.0, cfg.noise_sigma), 0.0, 1.0));
        }
        out.push_back(std::move(vs));
    }
    return out;
}

/// Stacks samples into a (B, 1, D, H, W) input tensor.
template <typename T>
Tensor<T> stack_images(const std::vector<const VolumeSample*>& batch)
{
    if (batch.empty())
        throw ContractError("empty batch");
    const Dims3 d = batch[0]->dims();
    const std::size_t V = d[0] * d[1] * d[2];
    std::vector<T> v;
    v.reserve(batch.size() * V);
    for (const auto* s : batch) {
        if (s->dims() != d)
            throw ShapeError("samples in a batch must share extents");
        v.insert(v.end(), s->image.begin(), s->image.end());
    }
    return Tensor<T>({batch.size(), 1, d[0], d[1], d[2]}, std::move(v));
}

/// Per-voxel argmax over the class axis of (B, C, D, H, W) logits.
template <typename T>
std::vector<LabelVolume> argmax_labels(const Tensor<T>& logits)
{
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    const Dims3 d{logits.dim(2), logits.dim(3), logits.dim(4)};
    const std::size_t V = d[0] * d[1] * d[2];
    std::vector<LabelVolume> out;
    const auto& v = logits.values();
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<std::uint8_t> l(V, 0);
        for (std::size_t i = 0; i < V; ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (v[(b * C + c) * V + i] > v[(b * C + best) * V + i])
                    best = c;
            l[i] = std::uint8_t(best);
        }
        out.emplace_back(d, std::move(l));
    }
    return out;
}

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 1e-5;
    std::size_t batch_size = 2;
    std::size_t epochs = 1;
    std::size_t max_steps = 0; ///< 0: epochs * ceil(samples / batch)
    bool cosine = true;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (!(lr >= 0.0) || !std::isfinite(lr))
            throw ConfigError("learning rate must be finite and >= 0");
        if (!(weight_decay >= 0.0))
            throw ConfigError("weight decay must be >= 0");
        if (batch_size == 0)
            throw ConfigError("batch size must be >= 1");
        if (epochs == 0 && max_steps == 0)
            throw ConfigError("epochs must be >= 1");
    }

    std::size_t total_steps(std::size_t samples) const
    {
        if (max_steps)
            return max_steps;
        return epochs * ((samples + batch_size - 1) / batch_size);
    }
};

struct StepRecord {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double train_mdsc = 0.0;
};

using History = std::vector<StepRecord>;

/// Runs optimizer steps over shuffled mini-batches. `on_step` (optional) sees
/// every record after its update, e.g. for periodic checkpoints.
template <typename T>
History train_loop(MambaHoMENet<T>& net, const std::vector<VolumeSample>& data, const TrainConfig& cfg,
                   const std::function<void(const StepRecord&)>& on_step = {})
{
    cfg.validate();
    if (data.empty())
        throw ConfigError("training set is empty");
    const std::size_t classes = net.config().classes;
    AdamW<T> opt(net.parameters(), AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = data.size();
    const std::size_t steps = cfg.total_steps(data.size());
    History hist;
    for (std::size_t step = 0; step < steps; ++step) {
        std::vector<const VolumeSample*> batch;
        std::vector<const LabelVolume*> labels;
        while (batch.size() < std::min(cfg.batch_size, data.size())) {
            if (cursor == data.size()) {
                std::shuffle(order.begin(), order.end(), rng.engine());
                cursor = 0;
            }
            batch.push_back(&data[order[cursor++]]);
            labels.push_back(&batch.back()->label);
        }
        const double lr = cfg.cosine ? cosine_lr(step, steps, cfg.lr) : cfg.lr;
        StepRecord rec;
        rec.step = step;
        rec.lr = lr;
        try {
            opt.zero_grad();
            auto logits = net(stack_images<T>(batch));
            auto loss = dice_ce_loss(logits, labels);
            rec.loss = double(loss.item());
            if (!std::isfinite(rec.loss))
                throw NumericalError("loss is " + std::to_string(rec.loss));
            const auto pred = argmax_labels(logits);
            for (std::size_t b = 0; b < pred.size(); ++b)
                rec.train_mdsc += mdsc(pred[b], *labels[b], classes) / double(pred.size());
            backward(loss);
            opt.step(lr);
        } catch (const NumericalError& e) {
            throw NumericalError("training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        hist.push_back(rec);
        if (on_step)
            on_step(rec);
    }
    return hist;
}

/// Names of parameters whose gradient is absent or identically zero.
template <typename T>
std::vector<std::string> parameters_without_gradient(const ParamList<T>& ps)
{
    std::vector<std::string> dead;
    for (const auto& p : ps) {
        const auto g = p.tensor.grad();
        if (g.empty() || std::all_of(g.begin(), g.end(), [](T v) { return v == T(0); }))
            dead.push_back(p.name);
    }
    return dead;
}

} // namespace mhome

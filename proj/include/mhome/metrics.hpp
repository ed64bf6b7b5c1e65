// SPDX-License-Identifier: Apache-2.0
//
// Segmentation metrics: Dice (per class and mean), HD95 over 6-connected
// surfaces, detection sensitivity/specificity, and parameter counting.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "errors.hpp"
#include "nn.hpp"

namespace mhome {

using Dims3 = std::array<std::size_t, 3>;

/// Integer class ids on a (D, H, W) raster.
struct LabelVolume {
    Dims3 dims{0, 0, 0};
    std::vector<std::uint8_t> labels;

    LabelVolume() = default;
    LabelVolume(Dims3 d, std::vector<std::uint8_t> l) : dims(d), labels(std::move(l))
    {
        if (labels.size() != dims[0] * dims[1] * dims[2])
            throw ShapeError("label volume " + std::to_string(dims[0]) + "x" + std::to_string(dims[1]) + "x" +
                             std::to_string(dims[2]) + " needs " + std::to_string(dims[0] * dims[1] * dims[2]) +
                             " labels, got " + std::to_string(labels.size()));
    }

    std::size_t size() const { return labels.size(); }

    std::vector<std::uint8_t> mask(std::size_t c) const
    {
        std::vector<std::uint8_t> m(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i)
            m[i] = labels[i] == c;
        return m;
    }
};

/// HD95 of two empty-vs-nonempty structures is undefined; callers pick a sentinel.
class EmptyStructureError : public MetricError {
public:
    using MetricError::MetricError;
};

namespace detail {

inline void require_same_dims(const LabelVolume& a, const LabelVolume& b, const char* what)
{
    if (a.dims != b.dims)
        throw ShapeError(std::string(what) + ": prediction and ground truth extents differ");
}

} // namespace detail

/// 2|P and G| / (|P| + |G|) for class c; 1.0 when both are empty.
inline double dsc(const LabelVolume& pred, const LabelVolume& gt, std::size_t c)
{
    detail::require_same_dims(pred, gt, "dsc");
    std::size_t inter = 0, p = 0, g = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool pi = pred.labels[i] == c, gi = gt.labels[i] == c;
        p += pi;
        g += gi;
        inter += pi && gi;
    }
    if (p + g == 0)
        return 1.0;
    return 2.0 * double(inter) / double(p + g);
}

/// Mean per-class Dice over classes [first, classes), first = 1 unless background is included.
inline double mdsc(const LabelVolume& pred, const LabelVolume& gt, std::size_t classes,
                   bool include_background = false)
{
    const std::size_t first = include_background ? 0 : 1;
    if (classes <= first)
        throw MetricError("mdsc needs at least one class to average");
    double s = 0.0;
    for (std::size_t c = first; c < classes; ++c)
        s += dsc(pred, gt, c);
    return s / double(classes - first);
}

/// Voxels of the mask with at least one 6-neighbour outside it; the volume
/// border counts as outside.
inline std::vector<std::uint8_t> surface_voxels(const std::vector<std::uint8_t>& mask, const Dims3& dims)
{
    const std::size_t D = dims[0], H = dims[1], W = dims[2];
    std::vector<std::uint8_t> s(mask.size(), 0);
    auto at = [&](std::size_t z, std::size_t y, std::size_t x) { return (z * H + y) * W + x; };
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                if (!mask[at(z, y, x)])
                    continue;
                const bool edge = z == 0 || y == 0 || x == 0 || z + 1 == D || y + 1 == H || x + 1 == W;
                s[at(z, y, x)] = edge || !mask[at(z - 1, y, x)] || !mask[at(z + 1, y, x)] || !mask[at(z, y - 1, x)] ||
                                 !mask[at(z, y + 1, x)] || !mask[at(z, y, x - 1)] || !mask[at(z, y, x + 1)];
            }
    return s;
}

namespace detail {

/// In-place 1D lower envelope: f[q] <- min_p w*(q-p)^2 + f[p] over finite f[p].
inline void edt_1d(std::vector<double>& f, double w, std::vector<std::size_t>& v, std::vector<double>& z)
{
    const std::size_t n = f.size();
    const double inf = std::numeric_limits<double>::infinity();
    v.clear();
    z.clear();
    for (std::size_t q = 0; q < n; ++q) {
        if (f[q] == inf)
            continue;
        const double fq = f[q] + w * double(q) * double(q);
        while (!v.empty()) {
            const std::size_t p = v.back();
            const double s = (fq - (f[p] + w * double(p) * double(p))) / (2.0 * w * (double(q) - double(p)));
            if (s <= z.back()) {
                v.pop_back();
                z.pop_back();
            } else {
                v.push_back(q);
                z.push_back(s);
                break;
            }
        }
        if (v.empty()) {
            v.push_back(q);
            z.push_back(-inf);
        }
    }
    if (v.empty())
        return;
    std::vector<double> out(n);
    std::size_t k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (k + 1 < v.size() && z[k + 1] < double(q))
            ++k;
        const double dq = double(q) - double(v[k]);
        out[q] = w * dq * dq + f[v[k]];
    }
    f.swap(out);
}

} // namespace detail

/// Exact squared Euclidean distance (in mm^2) from every voxel to the nearest
/// seed voxel, by separable lower envelopes along W, H, then D.
inline std::vector<double> squared_edt(const std::vector<std::uint8_t>& seeds, const Dims3& dims,
                                       const std::array<double, 3>& spacing)
{
    const std::size_t D = dims[0], H = dims[1], W = dims[2];
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> f(seeds.size());
    for (std::size_t i = 0; i < seeds.size(); ++i)
        f[i] = seeds[i] ? 0.0 : inf;
    std::vector<std::size_t> v;
    std::vector<double> z, line;
    auto pass = [&](std::size_t len, std::size_t stride, std::size_t count, auto base_of, double w) {
        line.resize(len);
        for (std::size_t c = 0; c < count; ++c) {
            const std::size_t b = base_of(c);
            for (std::size_t i = 0; i < len; ++i)
                line[i] = f[b + i * stride];
            detail::edt_1d(line, w, v, z);
            for (std::size_t i = 0; i < len; ++i)
                f[b + i * stride] = line[i];
        }
    };
    pass(W, 1, D * H, [&](std::size_t c) { return c * W; }, spacing[2] * spacing[2]);
    pass(H, W, D * W, [&](std::size_t c) { return (c / W) * H * W + c % W; }, spacing[1] * spacing[1]);
    pass(D, H * W, H * W, [&](std::size_t c) { return c; }, spacing[0] * spacing[0]);
    return f;
}

/// Index of the nearest-rank 95th percentile in a sorted list of n values: ceil(0.95 n) - 1.
inline std::size_t nearest_rank_95(std::size_t n) { return (95 * n + 99) / 100 - 1; }

/// 95th-percentile symmetric surface distance in mm. `spacing` is per raster
/// axis (D, H, W). Both masks must be nonempty.
inline double hd95(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, const Dims3& dims,
                   const std::array<double, 3>& spacing = {1.0, 1.0, 1.0})
{
    if (pred.size() != gt.size() || pred.size() != dims[0] * dims[1] * dims[2])
        throw ShapeError("hd95: mask sizes do not match the volume extents");
    const bool pe = std::none_of(pred.begin(), pred.end(), [](auto v) { return v != 0; });
    const bool ge = std::none_of(gt.begin(), gt.end(), [](auto v) { return v != 0; });
    if (pe || ge)
        throw EmptyStructureError(std::string("hd95 undefined: ") + (pe ? "prediction" : "ground truth") +
                                  (pe && ge ? " and ground truth are" : " is") + " empty");
    const auto sp = surface_voxels(pred, dims), sg = surface_voxels(gt, dims);
    const auto to_g = squared_edt(sg, dims, spacing), to_p = squared_edt(sp, dims, spacing);
    std::vector<double> d;
    for (std::size_t i = 0; i < sp.size(); ++i) {
        if (sp[i])
            d.push_back(std::sqrt(to_g[i]));
        if (sg[i])
            d.push_back(std::sqrt(to_p[i]));
    }
    const std::size_t k = nearest_rank_95(d.size());
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    return d[k];
}

inline double hd95(const LabelVolume& pred, const LabelVolume& gt, std::size_t c,
                   const std::array<double, 3>& spacing = {1.0, 1.0, 1.0})
{
    detail::require_same_dims(pred, gt, "hd95");
    return hd95(pred.mask(c), gt.mask(c), pred.dims, spacing);
}

/// Case-level detection outcome.
enum class Outcome { TP, FP, FN, TN };

inline Outcome classify_case(bool predicted_positive, bool actually_positive)
{
    if (predicted_positive)
        return actually_positive ? Outcome::TP : Outcome::FP;
    return actually_positive ? Outcome::FN : Outcome::TN;
}

struct SensSpec {
    double sensitivity = 0.0;
    double specificity = 0.0;
};

/// TP/(TP+FN) and TN/(TN+FP) over a list of case outcomes.
inline SensSpec sensitivity_specificity(const std::vector<Outcome>& cases)
{
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (auto o : cases) {
        tp += o == Outcome::TP;
        fp += o == Outcome::FP;
        fn += o == Outcome::FN;
        tn += o == Outcome::TN;
    }
    if (tp + fn == 0)
        throw MetricError("sensitivity undefined: no positive cases (TP + FN = 0)");
    if (tn + fp == 0)
        throw MetricError("specificity undefined: no negative cases (TN + FP = 0)");
    return {double(tp) / double(tp + fn), double(tn) / double(tn + fp)};
}

/// Sum of element counts over every parameter a module registers via collect().
template <typename T, typename Module>
std::size_t count_parameters(const Module& m)
{
    ParamList<T> ps;
    m.collect(ps, "");
    return count_elements(ps);
}

} // namespace mhome

// SPDX-License-Identifier: Apache-2.0
//
// File formats.
//
//   checkpoint: <stem>.json manifest {format, version, dtype, config, tensors:
//               [{name, shape, dtype, offset, bytes}]} + <stem>.bin flat
//               little-endian payload.
//   volume:     <stem>.vol raw little-endian raster in (D, H, W) order +
//               <stem>.json sidecar {dims: [D, H, W], spacing_mm: [x, y, z],
//               dtype: "f32" | "u8"}.
//   reports:    training history CSV, per-case metric CSV and a JSON summary.

#pragma once

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metrics.hpp"
#include "network.hpp"
#include "train.hpp"

namespace mhome {

using json = nlohmann::json;

namespace detail {

template <typename U>
U to_little_endian(U v)
{
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(U)];
        std::memcpy(b, &v, sizeof(U));
        for (std::size_t i = 0; i < sizeof(U) / 2; ++i)
            std::swap(b[i], b[sizeof(U) - 1 - i]);
        std::memcpy(&v, b, sizeof(U));
    }
    return v;
}

template <typename U>
void write_raw(std::ostream& os, const U* data, std::size_t n)
{
    for (std::size_t i = 0; i < n; ++i) {
        const U v = to_little_endian(data[i]);
        os.write(reinterpret_cast<const char*>(&v), sizeof(U));
    }
}

template <typename U>
std::vector<U> read_raw(std::istream& is, std::size_t n, const std::string& what)
{
    std::vector<U> out(n);
    is.read(reinterpret_cast<char*>(out.data()), std::streamsize(n * sizeof(U)));
    if (std::size_t(is.gcount()) != n * sizeof(U))
        throw IoError(what + ": payload truncated (expected " + std::to_string(n * sizeof(U)) + " bytes)");
    for (auto& v : out)
        v = to_little_endian(v);
    return out;
}

inline json read_json_file(const std::filesystem::path& p)
{
    std::ifstream is(p);
    if (!is)
        throw IoError("cannot open " + p.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw IoError("malformed JSON in " + p.string() + ": " + e.what());
    }
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text)
{
    if (p.has_parent_path())
        std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p);
    if (!os)
        throw IoError("cannot write " + p.string());
    os << text;
}

template <typename T>
constexpr const char* dtype_name()
{
    return sizeof(T) == 4 ? "f32" : "f64";
}

} // namespace detail

inline json config_to_json(const NetworkConfig& c)
{
    return json{{"name", c.name},           {"in_channels", c.in_channels},
                {"classes", c.classes},     {"stem_channels", c.stem_channels},
                {"stages", c.stages},       {"layers", c.layers},
                {"experts", c.experts},     {"experts2", c.experts2},
                {"group_sizes", c.group_sizes}, {"slots", c.slots},
                {"ffn_ratio", c.ffn_ratio}, {"rho", c.rho},
                {"norm", to_string(c.norm)}, {"decoder_norm", to_string(c.decoder_norm)},
                {"state_dim", c.state_dim}, {"expand", c.expand},
                {"scan_block", c.scan_block}};
}

inline NetworkConfig config_from_json(const json& j)
{
    NetworkConfig c;
    try {
        c.name = j.at("name").get<std::string>();
        c.in_channels = j.at("in_channels").get<std::size_t>();
        c.classes = j.at("classes").get<std::size_t>();
        c.stem_channels = j.at("stem_channels").get<std::size_t>();
        c.stages = j.at("stages").get<std::size_t>();
        c.layers = j.at("layers").get<std::vector<std::size_t>>();
        c.experts = j.at("experts").get<std::vector<std::size_t>>();
        c.experts2 = j.at("experts2").get<std::vector<std::size_t>>();
        c.group_sizes = j.at("group_sizes").get<std::vector<std::size_t>>();
        c.slots = j.at("slots").get<std::size_t>();
        c.ffn_ratio = j.at("ffn_ratio").get<std::size_t>();
        c.rho = j.at("rho").get<double>();
        c.norm = parse_norm_kind(j.at("norm").get<std::string>());
        c.decoder_norm = parse_norm_kind(j.at("decoder_norm").get<std::string>());
        c.state_dim = j.at("state_dim").get<std::size_t>();
        c.expand = j.at("expand").get<std::size_t>();
        c.scan_block = j.at("scan_block").get<std::size_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("network config in checkpoint: ") + e.what());
    }
    c.validate();
    return c;
}

// --- checkpoints -----------------------------------------------------------

struct StoredTensor {
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    json manifest;
    std::map<std::string, StoredTensor> tensors;

    /// Network config stored alongside the weights, if any.
    std::optional<NetworkConfig> config() const
    {
        if (!manifest.contains("config") || manifest["config"].is_null())
            return std::nullopt;
        return config_from_json(manifest["config"]);
    }
};

inline std::filesystem::path manifest_path(const std::filesystem::path& stem)
{
    return std::filesystem::path(stem.string() + ".json");
}

inline std::filesystem::path payload_path(const std::filesystem::path& stem)
{
    return std::filesystem::path(stem.string() + ".bin");
}

/// Writes <stem>.json and <stem>.bin. `extra` is merged into the manifest.
template <typename T>
void save_checkpoint(const std::filesystem::path& stem, const ParamList<T>& params,
                     const std::optional<NetworkConfig>& cfg = std::nullopt, const json& extra = json::object())
{
    if (stem.has_parent_path())
        std::filesystem::create_directories(stem.parent_path());
    json entries = json::array();
    std::ofstream bin(payload_path(stem), std::ios::binary);
    if (!bin)
        throw IoError("cannot write " + payload_path(stem).string());
    std::size_t offset = 0;
    for (const auto& p : params) {
        const auto& v = p.tensor.values();
        detail::write_raw(bin, v.data(), v.size());
        entries.push_back({{"name", p.name},
                           {"shape", p.tensor.shape()},
                           {"dtype", detail::dtype_name<T>()},
                           {"offset", offset},
                           {"bytes", v.size() * sizeof(T)}});
        offset += v.size() * sizeof(T);
    }
    if (!bin)
        throw IoError("write failed for " + payload_path(stem).string());
    json m{{"format", "mhome-checkpoint"},
           {"version", 1},
           {"payload", payload_path(stem).filename().string()},
           {"payload_bytes", offset},
           {"dtype", detail::dtype_name<T>()},
           {"tensors", entries},
           {"config", cfg ? config_to_json(*cfg) : json(nullptr)}};
    for (auto it = extra.begin(); it != extra.end(); ++it)
        m[it.key()] = it.value();
    detail::write_text_file(manifest_path(stem), m.dump(2));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& stem)
{
    Checkpoint ck;
    ck.manifest = detail::read_json_file(manifest_path(stem));
    if (ck.manifest.value("format", "") != "mhome-checkpoint")
        throw IoError(manifest_path(stem).string() + " is not a checkpoint manifest");
    const auto bin_path = stem.has_parent_path()
                              ? stem.parent_path() / ck.manifest.at("payload").get<std::string>()
                              : std::filesystem::path(ck.manifest.at("payload").get<std::string>());
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin)
        throw IoError("cannot open checkpoint payload " + bin_path.string());
    for (const auto& e : ck.manifest.at("tensors")) {
        StoredTensor t;
        t.shape = e.at("shape").get<Shape>();
        const std::size_t n = numel(t.shape);
        const std::string dtype = e.at("dtype").get<std::string>();
        bin.seekg(std::streamoff(e.at("offset").get<std::size_t>()));
        const std::string what = "tensor '" + e.at("name").get<std::string>() + "'";
        if (dtype == "f32") {
            for (float v : detail::read_raw<float>(bin, n, what))
                t.values.push_back(v);
        } else if (dtype == "f64") {
            t.values = detail::read_raw<double>(bin, n, what);
        } else {
            throw IoError(what + ": unsupported dtype " + dtype);
        }
        ck.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
    }
    return ck;
}

/// Copies stored values into `params`; every name must be present with the same shape.
template <typename T>
void restore_parameters(ParamList<T>& params, const Checkpoint& ck)
{
    if (ck.tensors.size() != params.size())
        throw IoError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model has " +
                      std::to_string(params.size()));
    for (auto& p : params) {
        auto it = ck.tensors.find(p.name);
        if (it == ck.tensors.end())
            throw IoError("checkpoint is missing parameter '" + p.name + "'");
        if (it->second.shape != p.tensor.shape())
            throw IoError("parameter '" + p.name + "' has shape " + to_string(p.tensor.shape()) +
                          " but the checkpoint stores " + to_string(it->second.shape));
        auto d = p.tensor.mutable_data();
        for (std::size_t i = 0; i < d.size(); ++i)
            d[i] = static_cast<T>(it->second.values[i]);
        p.tensor.refresh_finite();
    }
}

// --- volumes ---------------------------------------------------------------

/// Raster spacing (D, H, W) from sidecar spacing [x, y, z].
inline std::array<double, 3> raster_spacing(const std::array<double, 3>& xyz) { return {xyz[2], xyz[1], xyz[0]}; }

inline std::array<double, 3> sidecar_spacing(const std::array<double, 3>& dhw) { return {dhw[2], dhw[1], dhw[0]}; }

struct VolumeHeader {
    Dims3 dims{0, 0, 0};
    std::array<double, 3> spacing_xyz{1.0, 1.0, 1.0};
    std::string dtype;
};

inline std::filesystem::path volume_path(const std::filesystem::path& stem)
{
    return std::filesystem::path(stem.string() + ".vol");
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& stem)
{
    return std::filesystem::path(stem.string() + ".json");
}

namespace detail {

inline void write_sidecar(const std::filesystem::path& stem, const VolumeHeader& h)
{
    json j{{"dims", h.dims}, {"spacing_mm", h.spacing_xyz}, {"dtype", h.dtype}};
    write_text_file(sidecar_path(stem), j.dump(2));
}

inline VolumeHeader read_sidecar(const std::filesystem::path& stem, const std::string& expected_dtype)
{
    const json j = read_json_file(sidecar_path(stem));
    VolumeHeader h;
    try {
        h.dims = j.at("dims").get<Dims3>();
        h.spacing_xyz = j.at("spacing_mm").get<std::array<double, 3>>();
        h.dtype = j.at("dtype").get<std::string>();
    } catch (const json::exception& e) {
        throw IoError("sidecar " + sidecar_path(stem).string() + ": " + e.what());
    }
    if (h.dtype != expected_dtype)
        throw IoError(sidecar_path(stem).string() + ": dtype " + h.dtype + ", expected " + expected_dtype);
    for (double s : h.spacing_xyz)
        if (!(s > 0.0) || !std::isfinite(s))
            throw IoError(sidecar_path(stem).string() + ": spacing must be positive and finite");
    return h;
}

template <typename U>
std::vector<U> read_volume_payload(const std::filesystem::path& stem, const VolumeHeader& h)
{
    const std::size_t n = h.dims[0] * h.dims[1] * h.dims[2];
    std::ifstream is(volume_path(stem), std::ios::binary);
    if (!is)
        throw IoError("cannot open " + volume_path(stem).string());
    auto v = read_raw<U>(is, n, volume_path(stem).string());
    if (is.peek() != std::char_traits<char>::eof())
        throw IoError(volume_path(stem).string() + " is longer than its sidecar dims imply");
    return v;
}

} // namespace detail

inline void write_image(const std::filesystem::path& stem, const std::vector<float>& image, const Dims3& dims,
                        const std::array<double, 3>& spacing_xyz = {1.0, 1.0, 1.0})
{
    if (image.size() != dims[0] * dims[1] * dims[2])
        throw ShapeError("write_image: " + std::to_string(image.size()) + " values for the given dims");
    detail::write_sidecar(stem, {dims, spacing_xyz, "f32"});
    std::ofstream os(volume_path(stem), std::ios::binary);
    detail::write_raw(os, image.data(), image.size());
    if (!os)
        throw IoError("write failed for " + volume_path(stem).string());
}

inline void write_labels(const std::filesystem::path& stem, const LabelVolume& labels,
                         const std::array<double, 3>& spacing_xyz = {1.0, 1.0, 1.0})
{
    detail::write_sidecar(stem, {labels.dims, spacing_xyz, "u8"});
    std::ofstream os(volume_path(stem), std::ios::binary);
    detail::write_raw(os, labels.labels.data(), labels.labels.size());
    if (!os)
        throw IoError("write failed for " + volume_path(stem).string());
}

inline std::pair<std::vector<float>, VolumeHeader> read_image(const std::filesystem::path& stem)
{
    auto h = detail::read_sidecar(stem, "f32");
    auto v = detail::read_volume_payload<float>(stem, h);
    for (float x : v)
        if (!std::isfinite(x))
            throw IoError(volume_path(stem).string() + " contains non-finite intensities");
    return {std::move(v), h};
}

inline std::pair<LabelVolume, VolumeHeader> read_labels(const std::filesystem::path& stem)
{
    auto h = detail::read_sidecar(stem, "u8");
    return {LabelVolume(h.dims, detail::read_volume_payload<std::uint8_t>(stem, h)), h};
}

/// Writes <dir>/<id>_image.{vol,json} and <dir>/<id>_label.{vol,json} per sample.
inline void write_dataset(const std::filesystem::path& dir, const std::vector<VolumeSample>& data)
{
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::string id = "case" + std::to_string(i);
        write_image(dir / (id + "_image"), data[i].image, data[i].dims(), sidecar_spacing(data[i].spacing));
        write_labels(dir / (id + "_label"), data[i].label, sidecar_spacing(data[i].spacing));
    }
}

/// Reads every <id>_image / <id>_label pair in `dir`, sorted by id.
inline std::vector<std::pair<std::string, VolumeSample>> read_dataset(const std::filesystem::path& dir)
{
    if (!std::filesystem::is_directory(dir))
        throw IoError("dataset directory " + dir.string() + " does not exist");
    std::vector<std::string> ids;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        const std::string f = e.path().filename().string();
        const std::string suffix = "_image.vol";
        if (f.size() > suffix.size() && f.compare(f.size() - suffix.size(), suffix.size(), suffix) == 0)
            ids.push_back(f.substr(0, f.size() - suffix.size()));
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty())
        throw IoError("no *_image.vol files in " + dir.string());
    std::vector<std::pair<std::string, VolumeSample>> out;
    for (const auto& id : ids) {
        auto [img, ih] = read_image(dir / (id + "_image"));
        auto [lab, lh] = read_labels(dir / (id + "_label"));
        if (ih.dims != lh.dims)
            throw IoError(id + ": image and label extents differ");
        VolumeSample s;
        s.image = std::move(img);
        s.label = std::move(lab);
        s.spacing = raster_spacing(ih.spacing_xyz);
        out.emplace_back(id, std::move(s));
    }
    return out;
}

// --- reports ---------------------------------------------------------------

inline std::string history_csv(const History& h)
{
    std::ostringstream os;
    os.precision(10);
    os << "step,lr,loss,train_mdsc\n";
    for (const auto& r : h)
        os << r.step << ',' << r.lr << ',' << r.loss << ',' << r.train_mdsc << '\n';
    return os.str();
}

struct CaseMetric {
    std::string case_id;
    std::size_t cls = 0;
    double dsc = 0.0;
    std::optional<double> hd95; ///< empty when one side of the class is empty
};

/// HD95 with the report sentinel: both empty -> 0, one side empty -> undefined.
inline std::optional<double> hd95_reported(const LabelVolume& pred, const LabelVolume& gt, std::size_t c,
                                           const std::array<double, 3>& spacing)
{
    try {
        return hd95(pred, gt, c, spacing);
    } catch (const EmptyStructureError&) {
        const auto pm = pred.mask(c), gm = gt.mask(c);
        const bool pe = std::none_of(pm.begin(), pm.end(), [](auto v) { return v != 0; });
        const bool ge = std::none_of(gm.begin(), gm.end(), [](auto v) { return v != 0; });
        if (pe && ge)
            return 0.0;
        return std::nullopt;
    }
}

/// Per-class DSC and HD95 for foreground classes 1..classes-1.
inline std::vector<CaseMetric> evaluate_case(const std::string& id, const LabelVolume& pred, const LabelVolume& gt,
                                             std::size_t classes, const std::array<double, 3>& spacing)
{
    std::vector<CaseMetric> rows;
    for (std::size_t c = 1; c < classes; ++c)
        rows.push_back({id, c, dsc(pred, gt, c), hd95_reported(pred, gt, c, spacing)});
    return rows;
}

inline std::string metrics_csv(const std::vector<CaseMetric>& rows)
{
    std::ostringstream os;
    os.precision(10);
    os << "case_id,class,dsc,hd95\n";
    for (const auto& r : rows) {
        os << r.case_id << ',' << r.cls << ',' << r.dsc << ',';
        if (r.hd95)
            os << *r.hd95;
        os << '\n';
    }
    return os.str();
}

inline json metrics_summary(const std::vector<CaseMetric>& rows)
{
    std::map<std::size_t, std::vector<const CaseMetric*>> by_class;
    std::set<std::string> cases;
    for (const auto& r : rows) {
        by_class[r.cls].push_back(&r);
        cases.insert(r.case_id);
    }
    json per = json::object();
    double mdsc_sum = 0.0;
    for (const auto& [c, rs] : by_class) {
        double d = 0.0, h = 0.0;
        std::size_t hn = 0, undefined = 0;
        for (const auto* r : rs) {
            d += r->dsc;
            if (r->hd95) {
                h += *r->hd95;
                ++hn;
            } else {
                ++undefined;
            }
        }
        d /= double(rs.size());
        mdsc_sum += d;
        per[std::to_string(c)] = {{"mean_dsc", d},
                                  {"mean_hd95", hn ? json(h / double(hn)) : json(nullptr)},
                                  {"hd95_undefined", undefined}};
    }
    return {{"cases", cases.size()},
            {"classes", per},
            {"mdsc", by_class.empty() ? json(nullptr) : json(mdsc_sum / double(by_class.size()))}};
}

} // namespace mhome

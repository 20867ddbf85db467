/*
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "dataset.hpp"
#include "error.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace probe {

struct CorruptionSpec
{
    double        sigma = 0.25;
    std::uint64_t seed  = 0;
    bool          clip  = false; // clamp the corrupted image to [0,1]

    void validate() const
    {
        if (!(sigma >= 0.0) || !std::isfinite(sigma))
            throw InvalidArgument("corruption sigma must be a finite value >= 0");
    }
};

/// Standard normal noise shaped like the image, drawn in CHW order from the
/// stream of (seed, image_id).
inline Tensor3 noise_field(std::uint64_t seed, const std::string &image_id, int channels, Size2 size)
{
    Tensor3 z(channels, size.height, size.width);
    Rng     rng(stream_seed(seed, image_id));
    for (float &v : z.data)
        v = static_cast<float>(rng.normal());
    return z;
}

namespace detail {

inline void check_mask(const Image &image, const Grid &mask, const std::string &image_id)
{
    if (image.spatial() != mask.size2())
        throw InvalidArgument("mask of image '" + image_id + "' is " + std::to_string(mask.height) + "x"
                              + std::to_string(mask.width) + ", image is " + std::to_string(image.height) + "x"
                              + std::to_string(image.width));
}

} // namespace detail

/// x + sigma * (z * m), the mask broadcast over channels. Unclipped unless
/// spec.clip is set.
inline Image corrupt(const Image &image, const std::string &image_id, const Grid &mask, const CorruptionSpec &spec)
{
    spec.validate();
    detail::check_mask(image, mask, image_id);
    Image out = image;
    if (spec.sigma == 0.0)
        return out;
    const Tensor3     z     = noise_field(spec.seed, image_id, image.channels, image.spatial());
    const std::size_t plane = image.plane_size();
    for (int c = 0; c < image.channels; ++c)
        for (std::size_t p = 0; p < plane; ++p)
        {
            const float m = mask.data[p];
            if (m == 0.0f)
                continue;
            const std::size_t n = static_cast<std::size_t>(c) * plane + p;
            out.data[n] += static_cast<float>(spec.sigma * (static_cast<double>(z.data[n]) * m));
            if (spec.clip)
                out.data[n] = std::clamp(out.data[n], 0.0f, 1.0f);
        }
    return out;
}

inline Image corrupt(const Image &image, const SoftMask &mask, const CorruptionSpec &spec)
{
    return corrupt(image, mask.source_image, mask.values, spec);
}

/// One image and the mask its noise is confined to.
struct NoiseTarget
{
    std::string image_id;
    Grid        mask;
    int         channels = 3;
};

/// ||z * m||_2 for one target, in double precision.
inline double unit_perturbation_norm(const NoiseTarget &t, std::uint64_t seed)
{
    const Tensor3     z     = noise_field(seed, t.image_id, t.channels, t.mask.size2());
    const std::size_t plane = t.mask.data.size();
    double            acc   = 0.0;
    for (int c = 0; c < t.channels; ++c)
        for (std::size_t p = 0; p < plane; ++p)
        {
            const double v = static_cast<double>(z.data[static_cast<std::size_t>(c) * plane + p]) * t.mask.data[p];
            acc += v * v;
        }
    return std::sqrt(acc);
}

/// Mean over targets of ||sigma (z * m)||_2 using the seeded per-image noise.
inline double mean_l2_perturbation(const std::vector<NoiseTarget> &targets, double sigma, std::uint64_t seed)
{
    if (targets.empty())
        throw EmptySubsetError("mean_l2_perturbation: no images");
    CorruptionSpec{sigma, seed}.validate();
    double acc = 0.0;
    for (const auto &t : targets)
        acc += unit_perturbation_norm(t, seed);
    return sigma * (acc / static_cast<double>(targets.size()));
}

inline std::vector<NoiseTarget> noise_targets(const FeatureSubset &subset, const MaskStore &store, int channels = 3)
{
    std::vector<NoiseTarget> out;
    for (const auto &m : subset.members)
        out.push_back({m.image_id, store.get(subset.feature_index, m.image_id).values, channels});
    return out;
}

inline std::vector<double> default_sigma_grid()
{
    std::vector<double> g;
    for (int n = 0; n <= 6; ++n)
        g.push_back(0.30 + 0.05 * n);
    return g;
}

struct UnmatchedError : Error
{
    UnmatchedError(double low_mean, double high_mean)
        : Error("unmatched", "no grid sigma brings the low subset's mean l2 (" + std::to_string(low_mean)
                                 + " at the largest sigma) up to the high subset's " + std::to_string(high_mean))
        , low_mean(low_mean)
        , high_mean(high_mean)
    {
    }

    double low_mean;
    double high_mean;
};

/// Smallest grid sigma at which the low subset's mean l2 perturbation reaches
/// the high subset's mean at base_sigma.
inline double match_l2_sigma(const std::vector<NoiseTarget> &low, const std::vector<NoiseTarget> &high,
                             std::uint64_t seed, double base_sigma = 0.25,
                             std::vector<double> grid = default_sigma_grid())
{
    if (grid.empty())
        throw InvalidArgument("match_l2_sigma: empty sigma grid");
    std::sort(grid.begin(), grid.end());
    const double target = mean_l2_perturbation(high, base_sigma, seed);
    double       reached = 0.0;
    for (double s : grid)
    {
        reached = mean_l2_perturbation(low, s, seed);
        if (reached >= target)
            return s;
    }
    throw UnmatchedError(reached, target);
}

/// Returns the canonical-space pixels of an image.
using ImageSource = std::function<Image(const std::string &image_id)>;

struct DropResult
{
    double standard  = 0.0;
    double corrupted = 0.0;
    double drop      = 0.0; // corrupted - standard
    int    count     = 0;
};

/// Accuracy on D(i, j) before and after corrupting each image with its own
/// mask of feature j.
inline DropResult feature_drop(const ModelBundle &model, const FeatureSubset &subset, const MaskStore &store,
                               const ImageSource &images, const CorruptionSpec &spec)
{
    if (subset.members.empty())
        throw EmptySubsetError("feature_drop: empty subset D(" + std::to_string(subset.class_index) + ", "
                               + std::to_string(subset.feature_index) + ")");
    int clean = 0, noisy = 0;
    for (const auto &m : subset.members)
    {
        const Image x = images(m.image_id);
        clean += classify(model, x) == subset.class_index ? 1 : 0;
        const Image xc = corrupt(x, m.image_id, store.get(subset.feature_index, m.image_id).values, spec);
        noisy += classify(model, xc) == subset.class_index ? 1 : 0;
    }
    DropResult r;
    r.count     = static_cast<int>(subset.members.size());
    r.standard  = static_cast<double>(clean) / r.count;
    r.corrupted = static_cast<double>(noisy) / r.count;
    r.drop      = r.corrupted - r.standard;
    return r;
}

/// Fraction of union images still classified as the union's class after
/// corrupting them with their combined mask.
inline double class_accuracy_under_corruption(const ModelBundle &model, const ClassUnion &u, const ImageSource &images,
                                              const CorruptionSpec &spec)
{
    if (u.empty())
        throw EmptySubsetError("class " + std::to_string(u.class_index) + " has an empty " + to_string(u.kind)
                               + " union");
    int correct = 0;
    for (const auto &id : u.image_ids)
    {
        const Image x = corrupt(images(id), id, u.masks.at(id).values, spec);
        correct += classify(model, x) == u.class_index ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(u.image_ids.size());
}

// ---------------------------------------------------------------------------
// Sweep and report

struct ClassUnions
{
    int                       class_index = 0;
    std::optional<ClassUnion> spurious; // DS(i) with masks s
    std::optional<ClassUnion> causal;   // DC(i) with masks c
};

struct FeatureInput
{
    const FeatureSubset *subset = nullptr;
    std::string          verdict; // "causal" or "spurious"
};

struct ClassCurve
{
    int                 class_index = 0;
    std::optional<int>  spurious_size;
    std::optional<int>  causal_size;
    double              standard_spurious_union = 0.0; // clean accuracy on DS(i)
    double              standard_causal_union   = 0.0; // clean accuracy on DC(i)
    std::vector<double> causal_accuracy;   // acc^(C)(i) per sigma, corrupting s on DS(i)
    std::vector<double> spurious_accuracy; // acc^(S)(i) per sigma, corrupting c on DC(i)
};

struct FeatureCurve
{
    int                 class_index = 0;
    int                 feature     = 0;
    std::string         verdict;
    double              standard = 0.0;
    std::vector<double> drop;    // per sigma
    std::vector<double> mean_l2; // per sigma
};

struct EvaluationReport
{
    std::string                model;
    std::uint64_t              seed = 0;
    bool                       clip = false;
    std::vector<double>        sigmas;
    std::vector<ClassCurve>    classes;
    std::vector<FeatureCurve>  features;
    std::vector<double>        causal_accuracy;   // mean over classes with DS(i)
    std::vector<double>        spurious_accuracy; // mean over classes with DC(i)
    double                     standard_spurious_union = 0.0;
    double                     standard_causal_union   = 0.0;
    std::vector<std::string>   skipped;

    const ClassCurve *find_class(int i) const
    {
        for (const auto &c : classes)
            if (c.class_index == i)
                return &c;
        return nullptr;
    }
};

inline EvaluationReport sigma_sweep(const ModelBundle &model, const std::vector<ClassUnions> &unions,
                                    const std::vector<FeatureInput> &features, const MaskStore &store,
                                    const ImageSource &images, std::vector<double> sigmas, std::uint64_t seed,
                                    bool clip = false)
{
    if (sigmas.empty())
        throw InvalidArgument("sigma_sweep: empty sigma grid");
    for (double s : sigmas)
        CorruptionSpec{s, seed}.validate();

    EvaluationReport r;
    r.model  = model.identifier();
    r.seed   = seed;
    r.clip   = clip;
    r.sigmas = sigmas;

    const std::size_t S = sigmas.size();
    std::vector<double> c_sum(S, 0.0), s_sum(S, 0.0);
    double              c_std = 0.0, s_std = 0.0;
    int                 c_n = 0, s_n = 0;
    for (const auto &cu : unions)
    {
        ClassCurve curve;
        curve.class_index = cu.class_index;
        auto run          = [&](const std::optional<ClassUnion> &u, std::optional<int> &size, double &standard,
                       double &std_sum, std::vector<double> &acc, std::vector<double> &sum, int &n,
                       const char *what) {
            if (!u || u->empty())
            {
                r.skipped.push_back("class " + std::to_string(cu.class_index) + ": empty " + what + " union");
                return;
            }
            size     = static_cast<int>(u->image_ids.size());
            standard = class_accuracy_under_corruption(model, *u, images, {0.0, seed, clip});
            std_sum += standard;
            for (std::size_t k = 0; k < S; ++k)
            {
                acc.push_back(class_accuracy_under_corruption(model, *u, images, {sigmas[k], seed, clip}));
                sum[k] += acc.back();
            }
            ++n;
        };
        run(cu.spurious, curve.spurious_size, curve.standard_spurious_union, c_std, curve.causal_accuracy, c_sum, c_n,
            "spurious");
        run(cu.causal, curve.causal_size, curve.standard_causal_union, s_std, curve.spurious_accuracy, s_sum, s_n,
            "causal");
        r.classes.push_back(std::move(curve));
    }
    for (std::size_t k = 0; k < S && c_n; ++k)
        r.causal_accuracy.push_back(c_sum[k] / c_n);
    for (std::size_t k = 0; k < S && s_n; ++k)
        r.spurious_accuracy.push_back(s_sum[k] / s_n);
    r.standard_spurious_union = c_n ? c_std / c_n : 0.0;
    r.standard_causal_union   = s_n ? s_std / s_n : 0.0;

    for (const auto &f : features)
    {
        FeatureCurve fc;
        fc.class_index = f.subset->class_index;
        fc.feature     = f.subset->feature_index;
        fc.verdict     = f.verdict;
        if (f.subset->members.empty())
        {
            r.skipped.push_back("feature " + std::to_string(fc.feature) + " of class "
                                + std::to_string(fc.class_index) + ": empty subset");
            continue;
        }
        const auto targets = noise_targets(*f.subset, store, model.channels());
        for (std::size_t k = 0; k < S; ++k)
        {
            DropResult d = feature_drop(model, *f.subset, store, images, {sigmas[k], seed, clip});
            fc.standard  = d.standard;
            fc.drop.push_back(d.drop);
            fc.mean_l2.push_back(mean_l2_perturbation(targets, sigmas[k], seed));
        }
        r.features.push_back(std::move(fc));
    }
    return r;
}

inline nlohmann::json to_json(const EvaluationReport &r)
{
    nlohmann::json j;
    j["format"]            = "probe-evaluation/1";
    j["model"]             = r.model;
    j["seed"]              = r.seed;
    j["clip"]              = r.clip;
    j["sigmas"]            = r.sigmas;
    j["standard_accuracy"] = {{"spurious_union", r.standard_spurious_union},
                              {"causal_union", r.standard_causal_union}};
    j["causal_accuracy"]   = r.causal_accuracy;
    j["spurious_accuracy"] = r.spurious_accuracy;
    j["skipped"]           = r.skipped;
    j["classes"]           = nlohmann::json::array();
    for (const auto &c : r.classes)
    {
        nlohmann::json cj = {{"class", c.class_index},
                             {"standard_accuracy",
                              {{"spurious_union", c.standard_spurious_union}, {"causal_union", c.standard_causal_union}}},
                             {"causal_accuracy", c.causal_accuracy},
                             {"spurious_accuracy", c.spurious_accuracy}};
        cj["spurious_union_size"] = c.spurious_size ? nlohmann::json(*c.spurious_size) : nlohmann::json();
        cj["causal_union_size"]   = c.causal_size ? nlohmann::json(*c.causal_size) : nlohmann::json();
        j["classes"].push_back(std::move(cj));
    }
    j["features"] = nlohmann::json::array();
    for (const auto &f : r.features)
        j["features"].push_back({{"class", f.class_index},
                                 {"feature", f.feature},
                                 {"verdict", f.verdict},
                                 {"standard_accuracy", f.standard},
                                 {"drop", f.drop},
                                 {"mean_l2", f.mean_l2}});
    return j;
}

// ---------------------------------------------------------------------------
// SVG plots

struct PlotSeries
{
    std::string         label;
    std::string         colour;
    std::vector<double> y;
};

inline std::string line_plot_svg(const std::string &title, const std::string &y_label, const std::vector<double> &x,
                                 const std::vector<PlotSeries> &series, double y_min, double y_max)
{
    const double W = 520, H = 360, L = 60, R = 150, T = 40, B = 50;
    const double x_min = x.empty() ? 0.0 : *std::min_element(x.begin(), x.end());
    double       x_max = x.empty() ? 1.0 : *std::max_element(x.begin(), x.end());
    if (!(x_max > x_min))
        x_max = x_min + 1.0;
    if (!(y_max > y_min))
        y_max = y_min + 1.0;
    auto px = [&](double v) { return L + (v - x_min) / (x_max - x_min) * (W - L - R); };
    auto py = [&](double v) { return H - B - (v - y_min) / (y_max - y_min) * (H - T - B); };

    std::string svg;
    char        buf[256];
    auto        add = [&](const char *fmt, auto... args) {
        std::snprintf(buf, sizeof buf, fmt, args...);
        svg += buf;
    };
    add("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" "
        "font-size=\"12\">\n",
        W, H);
    add("<rect width=\"%.0f\" height=\"%.0f\" fill=\"white\"/>\n", W, H);
    svg += "<text x=\"" + std::to_string(static_cast<int>(L)) + "\" y=\"24\" font-size=\"14\">" + title + "</text>\n";
    add("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", L, H - B, W - R, H - B);
    add("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", L, T, L, H - B);
    for (int t = 0; t <= 4; ++t)
    {
        const double v = y_min + (y_max - y_min) * t / 4.0;
        add("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.2f</text>\n", L - 6, py(v) + 4, v);
    }
    for (double v : x)
        add("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%.2f</text>\n", px(v), H - B + 16, v);
    add("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">sigma</text>\n", (L + W - R) / 2, H - 12);
    svg += "<text x=\"14\" y=\"" + std::to_string(static_cast<int>((T + H - B) / 2)) + "\" transform=\"rotate(-90 14 "
           + std::to_string(static_cast<int>((T + H - B) / 2)) + ")\" text-anchor=\"middle\">" + y_label
           + "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s)
    {
        const auto &ser = series[s];
        svg += "<polyline fill=\"none\" stroke=\"" + ser.colour + "\" stroke-width=\"2\" points=\"";
        for (std::size_t k = 0; k < ser.y.size() && k < x.size(); ++k)
            add("%s%.1f,%.1f", k ? " " : "", px(x[k]), py(ser.y[k]));
        svg += "\"/>\n";
        add("<rect x=\"%.1f\" y=\"%.1f\" width=\"12\" height=\"4\" fill=\"%s\"/>\n", W - R + 12, T + 18.0 * s + 4,
            ser.colour.c_str());
        svg += "<text x=\"" + std::to_string(static_cast<int>(W - R + 30)) + "\" y=\""
               + std::to_string(static_cast<int>(T + 18.0 * s + 10)) + "\">" + ser.label + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

inline const char *series_colour(std::size_t n)
{
    static constexpr const char *palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                              "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    return palette[n % std::size(palette)];
}

/// drop_vs_sigma.svg and causal_accuracy_vs_sigma.svg under `dir`.
inline std::vector<std::filesystem::path> write_report_plots(const EvaluationReport &r,
                                                             const std::filesystem::path &dir)
{
    std::filesystem::create_directories(dir);
    auto drops = [&](const std::vector<double> &acc, double standard) {
        std::vector<double> d;
        for (double a : acc)
            d.push_back(a - standard);
        return d;
    };
    std::vector<PlotSeries> agg;
    if (!r.causal_accuracy.empty())
        agg.push_back({"spurious regions", series_colour(1), drops(r.causal_accuracy, r.standard_spurious_union)});
    if (!r.spurious_accuracy.empty())
        agg.push_back({"causal regions", series_colour(0), drops(r.spurious_accuracy, r.standard_causal_union)});
    const auto drop_path = dir / "drop_vs_sigma.svg";
    write_file_bytes(drop_path, line_plot_svg(r.model + ": accuracy drop", "drop", r.sigmas, agg, -1.0, 0.0));

    std::vector<PlotSeries> per_class;
    for (const auto &c : r.classes)
        if (!c.causal_accuracy.empty())
            per_class.push_back({"class " + std::to_string(c.class_index), series_colour(per_class.size()),
                                 c.causal_accuracy});
    const auto acc_path = dir / "causal_accuracy_vs_sigma.svg";
    write_file_bytes(acc_path,
                     line_plot_svg(r.model + ": causal accuracy", "accuracy", r.sigmas, per_class, 0.0, 1.0));
    return {drop_path, acc_path};
}

} // namespace probe

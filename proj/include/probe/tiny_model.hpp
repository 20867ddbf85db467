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

#include "model.hpp"
#include "rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <vector>

namespace probe {

/// 3x3 convolution, padding 1, with optional stride. Weights are
/// (out, in, 3, 3) row-major.
struct Conv3x3
{
    int                in      = 0;
    int                out     = 0;
    int                stride  = 1;
    std::vector<float> weights;
    std::vector<float> bias;

    Conv3x3() = default;

    Conv3x3(int in_channels, int out_channels, int stride_)
        : in(in_channels)
        , out(out_channels)
        , stride(stride_)
        , weights(static_cast<std::size_t>(out_channels) * in_channels * 9, 0.0f)
        , bias(static_cast<std::size_t>(out_channels), 0.0f)
    {
    }

    int out_extent(int extent) const noexcept { return (extent - 1) / stride + 1; }

    float w(int o, int i, int ky, int kx) const noexcept
    {
        return weights[((static_cast<std::size_t>(o) * in + i) * 3 + ky) * 3 + kx];
    }

    Tensor3 forward(const Tensor3 &x) const
    {
        const int oh = out_extent(x.height);
        const int ow = out_extent(x.width);
        Tensor3   y(out, oh, ow);
        for (int o = 0; o < out; ++o)
        {
            std::fill(y.plane(o).begin(), y.plane(o).end(), bias[o]);
            for (int i = 0; i < in; ++i)
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                    {
                        const float k = w(o, i, ky, kx);
                        for (int yy = 0; yy < oh; ++yy)
                        {
                            const int iy = yy * stride + ky - 1;
                            if (iy < 0 || iy >= x.height)
                                continue;
                            const float *src = &x.data[(static_cast<std::size_t>(i) * x.height + iy) * x.width];
                            float       *dst = &y.data[(static_cast<std::size_t>(o) * oh + yy) * ow];
                            for (int xx = 0; xx < ow; ++xx)
                            {
                                const int ix = xx * stride + kx - 1;
                                if (ix >= 0 && ix < x.width)
                                    dst[xx] += k * src[ix];
                            }
                        }
                    }
        }
        return y;
    }

    /// Accumulates parameter gradients (when non-null) and returns dL/dx.
    Tensor3 backward(const Tensor3 &x, const Tensor3 &grad_out, std::vector<float> *grad_w,
                     std::vector<float> *grad_b) const
    {
        const int oh = grad_out.height;
        const int ow = grad_out.width;
        Tensor3   gx(in, x.height, x.width);
        for (int o = 0; o < out; ++o)
        {
            if (grad_b)
            {
                double acc = 0.0;
                for (float g : grad_out.plane(o))
                    acc += g;
                (*grad_b)[o] += static_cast<float>(acc);
            }
            for (int i = 0; i < in; ++i)
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                    {
                        const float k    = w(o, i, ky, kx);
                        double      dacc = 0.0;
                        for (int yy = 0; yy < oh; ++yy)
                        {
                            const int iy = yy * stride + ky - 1;
                            if (iy < 0 || iy >= x.height)
                                continue;
                            const float *src = &x.data[(static_cast<std::size_t>(i) * x.height + iy) * x.width];
                            float       *dst = &gx.data[(static_cast<std::size_t>(i) * x.height + iy) * x.width];
                            const float *g   = &grad_out.data[(static_cast<std::size_t>(o) * oh + yy) * ow];
                            for (int xx = 0; xx < ow; ++xx)
                            {
                                const int ix = xx * stride + kx - 1;
                                if (ix >= 0 && ix < x.width)
                                {
                                    dst[ix] += k * g[xx];
                                    dacc += static_cast<double>(src[ix]) * g[xx];
                                }
                            }
                        }
                        if (grad_w)
                            (*grad_w)[((static_cast<std::size_t>(o) * in + i) * 3 + ky) * 3 + kx] +=
                                static_cast<float>(dacc);
                    }
        }
        return gx;
    }
};

struct TinyNetConfig
{
    int                input_channels = 3;
    Size2              input_size{32, 32};
    std::array<int, 3> widths{12, 24, 32}; // last entry is F
    std::array<int, 3> strides{1, 2, 2};
    int                num_classes = 8;
};

struct TrainConfig
{
    int           epochs       = 12;
    int           batch_size   = 16;
    float         learning_rate = 0.05f;
    float         momentum     = 0.9f;
    float         weight_decay = 1e-4f;
    bool          cosine_decay = true; // anneal the learning rate to zero over the run
    std::uint64_t seed         = 0;
};

/// Three ReLU convolutions, global average pooling and a linear head.
/// Deterministic initialisation and training; provides input gradients.
class TinyConvNet : public Classifier
{
public:
    explicit TinyConvNet(TinyNetConfig config = {})
        : config_(config)
    {
        int in = config_.input_channels;
        for (int l = 0; l < 3; ++l)
        {
            if (config_.widths[l] <= 0 || config_.strides[l] <= 0)
                throw InvalidArgument("tiny net: widths and strides must be positive");
            layers_[l] = Conv3x3(in, config_.widths[l], config_.strides[l]);
            in         = config_.widths[l];
        }
        head_w_.assign(static_cast<std::size_t>(config_.num_classes) * feature_count(), 0.0f);
        head_b_.assign(static_cast<std::size_t>(config_.num_classes), 0.0f);
    }

    /// He-uniform conv weights and a small uniform head, drawn from `seed`.
    void initialize(std::uint64_t seed)
    {
        Rng rng(seed);
        for (auto &layer : layers_)
        {
            const double bound = std::sqrt(6.0 / (layer.in * 9.0));
            for (float &v : layer.weights)
                v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
            std::fill(layer.bias.begin(), layer.bias.end(), 0.0f);
        }
        const double bound = std::sqrt(1.0 / feature_count());
        for (float &v : head_w_)
            v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
        std::fill(head_b_.begin(), head_b_.end(), 0.0f);
    }

    /// Head row i is the i-th standard basis vector (requires C <= F).
    void set_identity_head()
    {
        if (config_.num_classes > feature_count())
            throw InvalidArgument("identity head needs num_classes <= feature_count");
        std::fill(head_w_.begin(), head_w_.end(), 0.0f);
        for (int i = 0; i < config_.num_classes; ++i)
            head_w_[static_cast<std::size_t>(i) * feature_count() + i] = 1.0f;
        std::fill(head_b_.begin(), head_b_.end(), 0.0f);
    }

    const TinyNetConfig &config() const noexcept { return config_; }
    const Conv3x3       &layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
    Conv3x3             &layer(int l) { return layers_.at(static_cast<std::size_t>(l)); }
    std::vector<float>  &head_w() noexcept { return head_w_; }
    std::vector<float>  &head_b() noexcept { return head_b_; }

    int   input_channels() const override { return config_.input_channels; }
    Size2 input_size() const override { return config_.input_size; }
    int   feature_count() const override { return config_.widths[2]; }
    int   class_count() const override { return config_.num_classes; }
    bool  has_gradients() const override { return true; }

    std::span<const float> head_weights() const override { return head_w_; }
    std::span<const float> head_bias() const override { return head_b_; }

    FeatureMaps feature_maps(const Image &normalized) const override
    {
        Tensor3 x = normalized;
        for (const auto &layer : layers_)
        {
            x = layer.forward(x);
            relu(x);
        }
        return x;
    }

    Image backward_maps(const Image &normalized, const FeatureMaps &seed) const override
    {
        Trace t = trace(normalized);
        if (!seed.same_shape(t.post[2]))
            throw InvalidArgument("backward seed does not match the feature maps");
        return backprop(t, seed, nullptr);
    }

    /// Mini-batch SGD with momentum on softmax cross-entropy. `images` are
    /// already normalised. Returns the mean training loss of each epoch.
    std::vector<double> train(std::span<const Image> images, std::span<const int> labels, const TrainConfig &cfg)
    {
        if (images.size() != labels.size() || images.empty())
            throw InvalidArgument("train: images and labels must be nonempty and equal length");
        if (cfg.batch_size <= 0 || cfg.epochs < 0)
            throw InvalidArgument("train: batch_size must be positive and epochs non-negative");

        Gradients velocity = zero_gradients();
        Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
        std::vector<std::size_t> order(images.size());
        std::vector<double>      losses;
        const std::size_t        batch   = static_cast<std::size_t>(cfg.batch_size);
        const std::size_t        batches = (images.size() + batch - 1) / batch;
        const double             total   = static_cast<double>(batches) * cfg.epochs;
        std::size_t              t       = 0;

        for (int epoch = 0; epoch < cfg.epochs; ++epoch)
        {
            std::iota(order.begin(), order.end(), std::size_t{0});
            for (std::size_t k = order.size(); k > 1; --k)
                std::swap(order[k - 1], order[rng.below(k)]);

            double epoch_loss = 0.0;
            for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size))
            {
                const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
                Gradients         grad = zero_gradients();
                for (std::size_t n = start; n < stop; ++n)
                    epoch_loss += accumulate(images[order[n]], labels[order[n]], grad);

                const float scale = 1.0f / static_cast<float>(stop - start);
                float       lr    = cfg.learning_rate;
                if (cfg.cosine_decay)
                    lr = static_cast<float>(cfg.learning_rate * 0.5
                                            * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / total)));
                apply(grad, velocity, scale, lr, cfg);
                ++t;
            }
            losses.push_back(epoch_loss / static_cast<double>(images.size()));
        }
        return losses;
    }

    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["format"]         = "probe-tiny-net/1";
        j["input_channels"] = config_.input_channels;
        j["input_size"]     = {config_.input_size.height, config_.input_size.width};
        j["widths"]         = config_.widths;
        j["strides"]        = config_.strides;
        j["num_classes"]    = config_.num_classes;
        for (int l = 0; l < 3; ++l)
        {
            j["layers"][l]["weights"] = layers_[l].weights;
            j["layers"][l]["bias"]    = layers_[l].bias;
        }
        j["head"]["weights"] = head_w_;
        j["head"]["bias"]    = head_b_;
        return j;
    }

    static TinyConvNet from_json(const nlohmann::json &j)
    {
        if (j.value("format", "") != "probe-tiny-net/1")
            throw InvalidArgument("not a tiny-net weights document");
        TinyNetConfig cfg;
        cfg.input_channels = j.at("input_channels").get<int>();
        cfg.input_size     = {j.at("input_size").at(0).get<int>(), j.at("input_size").at(1).get<int>()};
        cfg.widths         = j.at("widths").get<std::array<int, 3>>();
        cfg.strides        = j.at("strides").get<std::array<int, 3>>();
        cfg.num_classes    = j.at("num_classes").get<int>();
        TinyConvNet net(cfg);
        for (int l = 0; l < 3; ++l)
        {
            auto w = j.at("layers").at(l).at("weights").get<std::vector<float>>();
            auto b = j.at("layers").at(l).at("bias").get<std::vector<float>>();
            if (w.size() != net.layers_[l].weights.size() || b.size() != net.layers_[l].bias.size())
                throw InvalidArgument("tiny-net weights: layer " + std::to_string(l) + " has the wrong size");
            net.layers_[l].weights = std::move(w);
            net.layers_[l].bias    = std::move(b);
        }
        auto hw = j.at("head").at("weights").get<std::vector<float>>();
        auto hb = j.at("head").at("bias").get<std::vector<float>>();
        if (hw.size() != net.head_w_.size() || hb.size() != net.head_b_.size())
            throw InvalidArgument("tiny-net weights: head has the wrong size");
        net.head_w_ = std::move(hw);
        net.head_b_ = std::move(hb);
        return net;
    }

private:
    struct Trace
    {
        std::array<Tensor3, 4> input; // input to each layer; input[3] unused
        std::array<Tensor3, 3> post;  // after ReLU
    };

    struct Gradients
    {
        std::array<std::vector<float>, 3> w;
        std::array<std::vector<float>, 3> b;
        std::vector<float>                head_w;
        std::vector<float>                head_b;
    };

    static void relu(Tensor3 &x) noexcept
    {
        for (float &v : x.data)
            v = v > 0.0f ? v : 0.0f;
    }

    Trace trace(const Image &normalized) const
    {
        Trace t;
        t.input[0] = normalized;
        for (int l = 0; l < 3; ++l)
        {
            t.post[l] = layers_[l].forward(t.input[l]);
            relu(t.post[l]);
            if (l < 2)
                t.input[l + 1] = t.post[l];
        }
        return t;
    }

    Tensor3 backprop(const Trace &t, Tensor3 grad, Gradients *g) const
    {
        for (int l = 2; l >= 0; --l)
        {
            const Tensor3 &post = t.post[l];
            for (std::size_t n = 0; n < grad.data.size(); ++n)
                if (!(post.data[n] > 0.0f))
                    grad.data[n] = 0.0f;
            grad = layers_[l].backward(t.input[l], grad, g ? &g->w[l] : nullptr, g ? &g->b[l] : nullptr);
        }
        return grad;
    }

    Gradients zero_gradients() const
    {
        Gradients g;
        for (int l = 0; l < 3; ++l)
        {
            g.w[l].assign(layers_[l].weights.size(), 0.0f);
            g.b[l].assign(layers_[l].bias.size(), 0.0f);
        }
        g.head_w.assign(head_w_.size(), 0.0f);
        g.head_b.assign(head_b_.size(), 0.0f);
        return g;
    }

    double accumulate(const Image &x, int label, Gradients &g) const
    {
        Trace                t    = trace(x);
        const FeatureMaps   &maps = t.post[2];
        std::vector<float>   fv   = global_average_pool(maps);
        const int            F    = feature_count();
        const int            C    = class_count();
        std::vector<double>  logits(static_cast<std::size_t>(C));
        for (int i = 0; i < C; ++i)
        {
            double acc = head_b_[i];
            for (int j = 0; j < F; ++j)
                acc += static_cast<double>(head_w_[static_cast<std::size_t>(i) * F + j]) * fv[j];
            logits[i] = acc;
        }
        const double        top = *std::max_element(logits.begin(), logits.end());
        std::vector<double> p(logits.size());
        double              z = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i)
            z += (p[i] = std::exp(logits[i] - top));
        for (double &v : p)
            v /= z;
        const double loss = -std::log(std::max(p[static_cast<std::size_t>(label)], 1e-12));

        std::vector<float> dfv(static_cast<std::size_t>(F), 0.0f);
        for (int i = 0; i < C; ++i)
        {
            const float dl = static_cast<float>(p[i] - (i == label ? 1.0 : 0.0));
            g.head_b[i] += dl;
            for (int j = 0; j < F; ++j)
            {
                g.head_w[static_cast<std::size_t>(i) * F + j] += dl * fv[j];
                dfv[j] += dl * head_w_[static_cast<std::size_t>(i) * F + j];
            }
        }
        FeatureMaps seed(maps.channels, maps.height, maps.width);
        const float inv = 1.0f / static_cast<float>(maps.plane_size());
        for (int j = 0; j < F; ++j)
            std::fill(seed.plane(j).begin(), seed.plane(j).end(), dfv[j] * inv);
        backprop(t, std::move(seed), &g);
        return loss;
    }

    static void step(std::vector<float> &param, const std::vector<float> &grad, std::vector<float> &vel, float scale,
                     float lr, const TrainConfig &cfg, bool decay)
    {
        for (std::size_t n = 0; n < param.size(); ++n)
        {
            float gn = grad[n] * scale + (decay ? cfg.weight_decay * param[n] : 0.0f);
            vel[n]   = cfg.momentum * vel[n] + gn;
            param[n] -= lr * vel[n];
        }
    }

    void apply(const Gradients &g, Gradients &v, float scale, float lr, const TrainConfig &cfg)
    {
        for (int l = 0; l < 3; ++l)
        {
            step(layers_[l].weights, g.w[l], v.w[l], scale, lr, cfg, true);
            step(layers_[l].bias, g.b[l], v.b[l], scale, lr, cfg, false);
        }
        step(head_w_, g.head_w, v.head_w, scale, lr, cfg, true);
        step(head_b_, g.head_b, v.head_b, scale, lr, cfg, false);
    }

    TinyNetConfig          config_;
    std::array<Conv3x3, 3> layers_;
    std::vector<float>     head_w_;
    std::vector<float>     head_b_;
};

/// Per-pixel linear features: maps[j, y, x] = bias[j] + sum_c mix[j, c] x[c, y, x].
/// The pooled feature is linear in the image, so its gradient is a closed form.
class LinearReferenceNet : public Classifier
{
public:
    LinearReferenceNet(int channels, Size2 size, std::vector<float> mix, std::vector<float> bias,
                       std::vector<float> head_w, std::vector<float> head_b)
        : channels_(channels)
        , size_(size)
        , mix_(std::move(mix))
        , bias_(std::move(bias))
        , head_w_(std::move(head_w))
        , head_b_(std::move(head_b))
    {
        if (bias_.empty() || mix_.size() != bias_.size() * static_cast<std::size_t>(channels_))
            throw InvalidArgument("linear reference net: mix must be (F, channels)");
        if (head_b_.empty() || head_w_.size() != head_b_.size() * bias_.size())
            throw InvalidArgument("linear reference net: head must be (C, F)");
    }

    int   input_channels() const override { return channels_; }
    Size2 input_size() const override { return size_; }
    int   feature_count() const override { return static_cast<int>(bias_.size()); }
    int   class_count() const override { return static_cast<int>(head_b_.size()); }
    bool  has_gradients() const override { return true; }

    std::span<const float> head_weights() const override { return head_w_; }
    std::span<const float> head_bias() const override { return head_b_; }
    float                  mix(int j, int c) const { return mix_[static_cast<std::size_t>(j) * channels_ + c]; }

    FeatureMaps feature_maps(const Image &x) const override
    {
        FeatureMaps out(feature_count(), x.height, x.width);
        for (int j = 0; j < feature_count(); ++j)
        {
            auto dst = out.plane(j);
            std::fill(dst.begin(), dst.end(), bias_[j]);
            for (int c = 0; c < channels_; ++c)
            {
                auto        src = x.plane(c);
                const float k   = mix(j, c);
                for (std::size_t p = 0; p < dst.size(); ++p)
                    dst[p] += k * src[p];
            }
        }
        return out;
    }

    Image backward_maps(const Image &x, const FeatureMaps &seed) const override
    {
        Image g(channels_, x.height, x.width);
        for (int j = 0; j < feature_count(); ++j)
            for (int c = 0; c < channels_; ++c)
            {
                auto        src = seed.plane(j);
                auto        dst = g.plane(c);
                const float k   = mix(j, c);
                for (std::size_t p = 0; p < dst.size(); ++p)
                    dst[p] += k * src[p];
            }
        return g;
    }

private:
    int                channels_;
    Size2              size_;
    std::vector<float> mix_;
    std::vector<float> bias_;
    std::vector<float> head_w_;
    std::vector<float> head_b_;
};

} // namespace probe

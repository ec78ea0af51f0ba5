#include "pbnn/network.hpp"

#include <algorithm>
#include <limits>
#include <random>
#include <stdexcept>

namespace pbnn {

std::size_t Network::head_layer() const {
    for (std::size_t i = layers.size(); i-- > 0;)
        if (layers[i].hosts_dendrites()) return i;
    throw std::logic_error("network has no dendrite-hosting layers");
}

bool Network::has_dendrites() const {
    for (const auto& l : layers)
        for (const auto& u : l.dendrites)
            if (!u.empty()) return true;
    return false;
}

Network build_network(const std::vector<std::size_t>& input_shape,
                      const std::vector<LayerSpec>& specs) {
    Network net;
    net.input_shape = input_shape;
    std::vector<std::size_t> cur = input_shape;
    for (const auto& spec : specs) {
        Layer layer;
        layer.spec = spec;
        layer.in_shape = cur;
        switch (spec.kind) {
            case LayerKind::Dense: {
                if (cur.size() != 1)
                    throw std::invalid_argument("dense layer needs 1-D input, got " +
                                                shape_str(cur));
                if (spec.out_width == 0) throw std::invalid_argument("dense out_width 0");
                layer.weights = Tensor({spec.out_width, cur[0]});
                layer.bias = Tensor({spec.out_width});
                layer.out_shape = {spec.out_width};
                break;
            }
            case LayerKind::Conv2d: {
                if (cur.size() != 3)
                    throw std::invalid_argument("conv2d needs [C,H,W] input, got " +
                                                shape_str(cur));
                if (spec.kernel_h == 0 || spec.kernel_w == 0 || spec.stride == 0)
                    throw std::invalid_argument("conv2d kernel/stride must be >= 1");
                std::size_t h = cur[1] + 2 * spec.padding;
                std::size_t w = cur[2] + 2 * spec.padding;
                if (spec.kernel_h > h || spec.kernel_w > w)
                    throw std::invalid_argument("conv2d kernel larger than padded input");
                std::size_t oh = (h - spec.kernel_h) / spec.stride + 1;
                std::size_t ow = (w - spec.kernel_w) / spec.stride + 1;
                layer.weights = Tensor({spec.out_channels, cur[0], spec.kernel_h, spec.kernel_w});
                layer.bias = Tensor({spec.out_channels});
                layer.out_shape = {spec.out_channels, oh, ow};
                break;
            }
            case LayerKind::MaxPool2d: {
                if (cur.size() != 3)
                    throw std::invalid_argument("maxpool2d needs [C,H,W] input");
                if (spec.pool_k == 0 || spec.pool_k > cur[1] || spec.pool_k > cur[2])
                    throw std::invalid_argument("maxpool2d window invalid for input " +
                                                shape_str(cur));
                layer.out_shape = {cur[0], cur[1] / spec.pool_k, cur[2] / spec.pool_k};
                break;
            }
            case LayerKind::Dropout: {
                if (spec.drop_rate < 0.0 || spec.drop_rate >= 1.0)
                    throw std::invalid_argument("dropout rate must be in [0,1)");
                layer.out_shape = cur;
                break;
            }
            case LayerKind::Flatten: {
                layer.out_shape = {Tensor::count(cur)};
                break;
            }
        }
        if (layer.hosts_dendrites()) layer.dendrites.resize(layer.unit_count());
        cur = layer.out_shape;
        net.layers.push_back(std::move(layer));
    }
    if (net.layers.empty()) throw std::invalid_argument("network needs at least one layer");
    return net;
}

void init_params(Network& net, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& layer : net.layers) {
        if (!layer.hosts_dendrites()) continue;
        double bound = 1.0 / std::sqrt(static_cast<double>(layer.unit_fan_in()));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& w : layer.weights.data) w = dist(rng);
        layer.bias.fill(0.0);
    }
}

Tensor conv2d_eval(const Tensor& input, const Tensor& kernel, double bias,
                   std::size_t stride, std::size_t padding) {
    if (input.shape.size() != 3 || kernel.shape.size() != 3)
        throw std::invalid_argument("conv2d_eval expects [C,H,W] input and kernel");
    if (input.shape[0] != kernel.shape[0])
        throw std::invalid_argument("conv2d_eval channel mismatch");
    if (stride == 0) throw std::invalid_argument("conv2d_eval stride must be >= 1");
    std::size_t c = input.shape[0], h = input.shape[1], w = input.shape[2];
    std::size_t kh = kernel.shape[1], kw = kernel.shape[2];
    if (kh > h + 2 * padding || kw > w + 2 * padding)
        throw std::invalid_argument("conv2d_eval kernel larger than padded input");
    std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    std::size_t ow = (w + 2 * padding - kw) / stride + 1;
    Tensor out({oh, ow});
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            double acc = bias;
            for (std::size_t ic = 0; ic < c; ++ic)
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                            static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        acc += input.data[(ic * h + iy) * w + ix] *
                               kernel.data[(ic * kh + ky) * kw + kx];
                    }
                }
            out.at2(oy, ox) = acc;
        }
    }
    return out;
}

namespace {

// Cross-correlate one multi-channel plane of a batched tensor with a kernel,
// accumulating into out (shape [oh,ow] slice at out_base).
void conv_accumulate(const double* in, std::size_t c, std::size_t h, std::size_t w,
                     const double* kernel, std::size_t kh, std::size_t kw,
                     std::size_t stride, std::size_t padding, double* out,
                     std::size_t oh, std::size_t ow) {
    for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
            double acc = 0.0;
            for (std::size_t ic = 0; ic < c; ++ic)
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                            static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        acc += in[(ic * h + iy) * w + ix] * kernel[(ic * kh + ky) * kw + kx];
                    }
                }
            out[oy * ow + ox] += acc;
        }
}

}  // namespace

Tensor forward(const Network& net, const Tensor& batch, RunMode mode,
               std::uint64_t rng_seed, ForwardCache* cache,
               const ForwardCache* frozen_dendrites) {
    if (batch.shape.empty() || batch.shape.size() != net.input_shape.size() + 1)
        throw std::invalid_argument("batch rank does not match network input");
    for (std::size_t i = 0; i < net.input_shape.size(); ++i)
        if (batch.shape[i + 1] != net.input_shape[i])
            throw std::invalid_argument("batch shape " + shape_str(batch.shape) +
                                        " does not match network input " +
                                        shape_str(net.input_shape));
    std::size_t n = batch.shape[0];

    ForwardCache local;
    ForwardCache& fc = cache ? *cache : local;
    fc.batch = n;
    fc.input = batch;
    fc.layers.assign(net.layers.size(), LayerCache{});

    std::mt19937_64 rng(rng_seed);
    const Tensor* cur = &fc.input;

    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const Layer& layer = net.layers[li];
        LayerCache& lc = fc.layers[li];
        std::vector<std::size_t> out_shape = layer.out_shape;
        out_shape.insert(out_shape.begin(), n);

        switch (layer.spec.kind) {
            case LayerKind::Dense: {
                std::size_t in_w = layer.in_shape[0], out_w = layer.spec.out_width;
                lc.pre = Tensor(out_shape);
                lc.post = Tensor(out_shape);
                lc.dendrite_pre.resize(out_w);
                lc.dendrite_post.resize(out_w);
                for (std::size_t u = 0; u < out_w; ++u) {
                    const auto& dends = layer.dendrites[u];
                    lc.dendrite_pre[u].assign(dends.size(), Tensor({n}));
                    lc.dendrite_post[u].assign(dends.size(), Tensor({n}));
                }
                for (std::size_t b = 0; b < n; ++b) {
                    const double* x = cur->data.data() + b * in_w;
                    for (std::size_t u = 0; u < out_w; ++u) {
                        const double* wrow = layer.weights.data.data() + u * in_w;
                        double acc = layer.bias[u];
                        for (std::size_t j = 0; j < in_w; ++j) acc += wrow[j] * x[j];
                        const auto& dends = layer.dendrites[u];
                        for (std::size_t d = 0; d < dends.size(); ++d) {
                            double dpre, dpost;
                            if (frozen_dendrites) {
                                dpre = frozen_dendrites->layers[li].dendrite_pre[u][d][b];
                                dpost = frozen_dendrites->layers[li].dendrite_post[u][d][b];
                            } else {
                                const DendriteNode& dn = dends[d];
                                dpre = dn.bias;
                                for (std::size_t j = 0; j < in_w; ++j)
                                    dpre += dn.input_weights[j] * x[j];
                                for (std::size_t s = 0; s < dn.sibling_weights.size(); ++s)
                                    dpre += dn.sibling_weights[s] * lc.dendrite_post[u][s][b];
                                dpost = activate(dn.activation, dpre);
                            }
                            lc.dendrite_pre[u][d][b] = dpre;
                            lc.dendrite_post[u][d][b] = dpost;
                            acc += dends[d].output_weight * dpost;
                        }
                        lc.pre.data[b * out_w + u] = acc;
                        lc.post.data[b * out_w + u] = activate(layer.spec.activation, acc);
                    }
                }
                break;
            }
            case LayerKind::Conv2d: {
                std::size_t c = layer.in_shape[0], h = layer.in_shape[1], w = layer.in_shape[2];
                std::size_t oc = layer.spec.out_channels;
                std::size_t kh = layer.spec.kernel_h, kw = layer.spec.kernel_w;
                std::size_t oh = layer.out_shape[1], ow = layer.out_shape[2];
                std::size_t plane = oh * ow;
                lc.pre = Tensor(out_shape);
                lc.post = Tensor(out_shape);
                lc.dendrite_pre.resize(oc);
                lc.dendrite_post.resize(oc);
                for (std::size_t u = 0; u < oc; ++u) {
                    const auto& dends = layer.dendrites[u];
                    lc.dendrite_pre[u].assign(dends.size(), Tensor({n, oh, ow}));
                    lc.dendrite_post[u].assign(dends.size(), Tensor({n, oh, ow}));
                }
                for (std::size_t b = 0; b < n; ++b) {
                    const double* in = cur->data.data() + b * c * h * w;
                    for (std::size_t u = 0; u < oc; ++u) {
                        double* pre = lc.pre.data.data() + (b * oc + u) * plane;
                        for (std::size_t p = 0; p < plane; ++p) pre[p] = layer.bias[u];
                        conv_accumulate(in, c, h, w,
                                        layer.weights.data.data() + u * c * kh * kw, kh, kw,
                                        layer.spec.stride, layer.spec.padding, pre, oh, ow);
                        const auto& dends = layer.dendrites[u];
                        for (std::size_t d = 0; d < dends.size(); ++d) {
                            double* dpre = lc.dendrite_pre[u][d].data.data() + b * plane;
                            double* dpost = lc.dendrite_post[u][d].data.data() + b * plane;
                            if (frozen_dendrites) {
                                const auto& f = frozen_dendrites->layers[li];
                                std::copy_n(f.dendrite_pre[u][d].data.data() + b * plane, plane, dpre);
                                std::copy_n(f.dendrite_post[u][d].data.data() + b * plane, plane, dpost);
                            } else {
                                const DendriteNode& dn = dends[d];
                                for (std::size_t p = 0; p < plane; ++p) dpre[p] = dn.bias;
                                conv_accumulate(in, c, h, w, dn.input_weights.data.data(),
                                                kh, kw, layer.spec.stride, layer.spec.padding,
                                                dpre, oh, ow);
                                for (std::size_t s = 0; s < dn.sibling_weights.size(); ++s) {
                                    const double* sib =
                                        lc.dendrite_post[u][s].data.data() + b * plane;
                                    for (std::size_t p = 0; p < plane; ++p)
                                        dpre[p] += dn.sibling_weights[s] * sib[p];
                                }
                                for (std::size_t p = 0; p < plane; ++p)
                                    dpost[p] = activate(dn.activation, dpre[p]);
                            }
                            for (std::size_t p = 0; p < plane; ++p)
                                pre[p] += dends[d].output_weight * dpost[p];
                        }
                        double* post = lc.post.data.data() + (b * oc + u) * plane;
                        for (std::size_t p = 0; p < plane; ++p)
                            post[p] = activate(layer.spec.activation, pre[p]);
                    }
                }
                break;
            }
            case LayerKind::MaxPool2d: {
                std::size_t c = layer.in_shape[0], h = layer.in_shape[1], w = layer.in_shape[2];
                std::size_t k = layer.spec.pool_k;
                std::size_t oh = layer.out_shape[1], ow = layer.out_shape[2];
                lc.post = Tensor(out_shape);
                lc.pool_argmax.resize(lc.post.size());
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t oy = 0; oy < oh; ++oy)
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                double best = -std::numeric_limits<double>::infinity();
                                std::size_t best_idx = 0;
                                for (std::size_t ky = 0; ky < k; ++ky)
                                    for (std::size_t kx = 0; kx < k; ++kx) {
                                        std::size_t idx =
                                            ((b * c + ch) * h + oy * k + ky) * w + ox * k + kx;
                                        if (cur->data[idx] > best) {
                                            best = cur->data[idx];
                                            best_idx = idx;
                                        }
                                    }
                                std::size_t o = ((b * c + ch) * oh + oy) * ow + ox;
                                lc.post.data[o] = best;
                                lc.pool_argmax[o] = best_idx;
                            }
                break;
            }
            case LayerKind::Dropout: {
                lc.post = *cur;
                lc.post.shape = out_shape;
                if (mode == RunMode::Train && layer.spec.drop_rate > 0.0) {
                    double keep = 1.0 - layer.spec.drop_rate;
                    std::uniform_real_distribution<double> u01(0.0, 1.0);
                    lc.dropout_mask = Tensor(out_shape);
                    for (std::size_t i = 0; i < lc.post.size(); ++i) {
                        double m = u01(rng) < keep ? 1.0 / keep : 0.0;
                        lc.dropout_mask[i] = m;
                        lc.post[i] *= m;
                    }
                }
                break;
            }
            case LayerKind::Flatten: {
                lc.post = *cur;
                lc.post.shape = out_shape;
                break;
            }
        }
        cur = &lc.post;
    }

    if (!cur->all_finite())
        throw std::runtime_error("forward pass produced non-finite values");
    return *cur;
}

ParamCount param_count(const Network& net) {
    ParamCount pc;
    for (const auto& layer : net.layers) {
        pc.neuron_params += layer.weights.size() + layer.bias.size();
        for (const auto& unit : layer.dendrites)
            for (const auto& dn : unit) {
                pc.dendrite_params +=
                    dn.input_weights.size() + dn.sibling_weights.size() + 1;
                pc.dendrite_output_weights += 1;
                if (dn.has_bias) {
                    pc.dendrite_params += 1;
                    pc.dendrite_biases += 1;
                }
            }
    }
    return pc;
}

}  // namespace pbnn

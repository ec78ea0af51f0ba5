#include "pbnn/grad.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pbnn {

namespace {

const Tensor& layer_input(const ForwardCache& cache, std::size_t li) {
    return li == 0 ? cache.input : cache.layers[li - 1].post;
}

// Accumulate kernel gradient and input gradient for one conv delta plane.
void conv_backward_plane(const double* in, std::size_t c, std::size_t h, std::size_t w,
                         const double* kernel, std::size_t kh, std::size_t kw,
                         std::size_t stride, std::size_t padding, const double* delta,
                         std::size_t oh, std::size_t ow, double* kernel_grad,
                         double* in_grad) {
    for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
            double d = delta[oy * ow + ox];
            if (d == 0.0) continue;
            for (std::size_t ic = 0; ic < c; ++ic)
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                            static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        std::size_t ii = (ic * h + iy) * w + ix;
                        std::size_t ki = (ic * kh + ky) * kw + kx;
                        if (kernel_grad) kernel_grad[ki] += d * in[ii];
                        if (in_grad) in_grad[ii] += d * kernel[ki];
                    }
                }
        }
}

}  // namespace

GradBuffer backprop(const Network& net, const ForwardCache& cache,
                    const Tensor& output_grad, BackpropMode mode) {
    if (cache.layers.size() != net.layers.size())
        throw std::invalid_argument("cache does not match network");
    if (!same_shape(output_grad, cache.output()))
        throw std::invalid_argument("output_grad shape mismatch");
    if (mode == BackpropMode::Standard && net.has_dendrites())
        throw std::invalid_argument("backprop_standard requires a dendrite-free network");

    std::size_t n = cache.batch;
    GradBuffer gb;
    gb.layers.resize(net.layers.size());
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const Layer& layer = net.layers[li];
        LayerGrad& lg = gb.layers[li];
        if (layer.hosts_dendrites()) {
            lg.weights = Tensor(layer.weights.shape);
            lg.bias = Tensor(layer.bias.shape);
            lg.dendrites.resize(layer.dendrites.size());
            for (std::size_t u = 0; u < layer.dendrites.size(); ++u) {
                lg.dendrites[u].resize(layer.dendrites[u].size());
                if (mode == BackpropMode::GdDendrites)
                    for (std::size_t d = 0; d < layer.dendrites[u].size(); ++d) {
                        const DendriteNode& dn = layer.dendrites[u][d];
                        if (dn.input_frozen) continue;
                        DendriteGrad& dg = lg.dendrites[u][d];
                        dg.has_input_grads = true;
                        dg.input_weights = Tensor(dn.input_weights.shape);
                        dg.sibling_weights.assign(dn.sibling_weights.size(), 0.0);
                    }
            }
        }
    }

    Tensor grad_out = output_grad;  // dL/d(post) of the current layer
    for (std::size_t li = net.layers.size(); li-- > 0;) {
        const Layer& layer = net.layers[li];
        const LayerCache& lc = cache.layers[li];
        LayerGrad& lg = gb.layers[li];
        const Tensor& input = layer_input(cache, li);
        std::vector<std::size_t> in_shape = layer.in_shape;
        in_shape.insert(in_shape.begin(), n);
        Tensor grad_in(in_shape);

        switch (layer.spec.kind) {
            case LayerKind::Dense: {
                std::size_t in_w = layer.in_shape[0], out_w = layer.spec.out_width;
                lg.delta = Tensor(lc.pre.shape);
                for (std::size_t b = 0; b < n; ++b) {
                    const double* x = input.data.data() + b * in_w;
                    double* gi = grad_in.data.data() + b * in_w;
                    for (std::size_t u = 0; u < out_w; ++u) {
                        double delta = activate_grad(layer.spec.activation,
                                                     lc.pre.data[b * out_w + u]) *
                                       grad_out.data[b * out_w + u];
                        lg.delta.data[b * out_w + u] = delta;
                        lg.bias[u] += delta;
                        double* wg = lg.weights.data.data() + u * in_w;
                        const double* wrow = layer.weights.data.data() + u * in_w;
                        for (std::size_t j = 0; j < in_w; ++j) {
                            wg[j] += delta * x[j];
                            gi[j] += wrow[j] * delta;
                        }
                        const auto& dends = layer.dendrites[u];
                        std::size_t nd = dends.size();
                        if (nd == 0) continue;
                        for (std::size_t d = 0; d < nd; ++d)
                            lg.dendrites[u][d].output_weight +=
                                delta * lc.dendrite_post[u][d][b];
                        if (mode == BackpropMode::CcNoPerforation) {
                            // Deltas flow through dendrites as ordinary edges;
                            // later siblings feed back into earlier ones.
                            std::vector<double> ddelta(nd, 0.0);
                            for (std::size_t d = nd; d-- > 0;) {
                                double acc = dends[d].output_weight * delta;
                                for (std::size_t m = d + 1; m < nd; ++m)
                                    acc += dends[m].sibling_weights[d] * ddelta[m];
                                ddelta[d] = activate_grad(dends[d].activation,
                                                          lc.dendrite_pre[u][d][b]) *
                                            acc;
                                const Tensor& iw = dends[d].input_weights;
                                for (std::size_t j = 0; j < in_w; ++j)
                                    gi[j] += iw[j] * ddelta[d];
                            }
                        } else if (mode == BackpropMode::GdDendrites) {
                            // One backward step into each dendrite subtree only.
                            for (std::size_t d = 0; d < nd; ++d) {
                                DendriteGrad& dg = lg.dendrites[u][d];
                                if (!dg.has_input_grads) continue;
                                double ddelta = activate_grad(dends[d].activation,
                                                              lc.dendrite_pre[u][d][b]) *
                                                dends[d].output_weight * delta;
                                for (std::size_t j = 0; j < in_w; ++j)
                                    dg.input_weights[j] += ddelta * x[j];
                                for (std::size_t s = 0; s < dg.sibling_weights.size(); ++s)
                                    dg.sibling_weights[s] +=
                                        ddelta * lc.dendrite_post[u][s][b];
                                if (dends[d].has_bias) dg.bias += ddelta;
                            }
                        }
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
                std::size_t stride = layer.spec.stride, padding = layer.spec.padding;
                lg.delta = Tensor(lc.pre.shape);
                for (std::size_t b = 0; b < n; ++b) {
                    const double* in = input.data.data() + b * c * h * w;
                    double* gi = grad_in.data.data() + b * c * h * w;
                    for (std::size_t u = 0; u < oc; ++u) {
                        double* delta = lg.delta.data.data() + (b * oc + u) * plane;
                        const double* pre = lc.pre.data.data() + (b * oc + u) * plane;
                        const double* go = grad_out.data.data() + (b * oc + u) * plane;
                        for (std::size_t p = 0; p < plane; ++p) {
                            delta[p] = activate_grad(layer.spec.activation, pre[p]) * go[p];
                            lg.bias[u] += delta[p];
                        }
                        conv_backward_plane(in, c, h, w,
                                            layer.weights.data.data() + u * c * kh * kw,
                                            kh, kw, stride, padding, delta, oh, ow,
                                            lg.weights.data.data() + u * c * kh * kw, gi);
                        const auto& dends = layer.dendrites[u];
                        std::size_t nd = dends.size();
                        if (nd == 0) continue;
                        for (std::size_t d = 0; d < nd; ++d) {
                            const double* dpost = lc.dendrite_post[u][d].data.data() + b * plane;
                            double acc = 0.0;
                            for (std::size_t p = 0; p < plane; ++p) acc += delta[p] * dpost[p];
                            lg.dendrites[u][d].output_weight += acc;
                        }
                        if (mode == BackpropMode::CcNoPerforation) {
                            std::vector<Tensor> ddelta(nd, Tensor({oh, ow}));
                            for (std::size_t d = nd; d-- > 0;) {
                                const double* dpre = lc.dendrite_pre[u][d].data.data() + b * plane;
                                for (std::size_t p = 0; p < plane; ++p) {
                                    double acc = dends[d].output_weight * delta[p];
                                    for (std::size_t m = d + 1; m < nd; ++m)
                                        acc += dends[m].sibling_weights[d] * ddelta[m][p];
                                    ddelta[d][p] =
                                        activate_grad(dends[d].activation, dpre[p]) * acc;
                                }
                                conv_backward_plane(in, c, h, w,
                                                    dends[d].input_weights.data.data(), kh,
                                                    kw, stride, padding,
                                                    ddelta[d].data.data(), oh, ow, nullptr,
                                                    gi);
                            }
                        } else if (mode == BackpropMode::GdDendrites) {
                            Tensor ddelta({oh, ow});
                            for (std::size_t d = 0; d < nd; ++d) {
                                DendriteGrad& dg = lg.dendrites[u][d];
                                if (!dg.has_input_grads) continue;
                                const double* dpre = lc.dendrite_pre[u][d].data.data() + b * plane;
                                for (std::size_t p = 0; p < plane; ++p)
                                    ddelta[p] = activate_grad(dends[d].activation, dpre[p]) *
                                                dends[d].output_weight * delta[p];
                                conv_backward_plane(in, c, h, w,
                                                    dends[d].input_weights.data.data(), kh,
                                                    kw, stride, padding, ddelta.data.data(),
                                                    oh, ow, dg.input_weights.data.data(),
                                                    nullptr);
                                for (std::size_t s = 0; s < dg.sibling_weights.size(); ++s) {
                                    const double* sib =
                                        lc.dendrite_post[u][s].data.data() + b * plane;
                                    double acc = 0.0;
                                    for (std::size_t p = 0; p < plane; ++p)
                                        acc += ddelta[p] * sib[p];
                                    dg.sibling_weights[s] += acc;
                                }
                                if (dends[d].has_bias)
                                    for (std::size_t p = 0; p < plane; ++p)
                                        dg.bias += ddelta[p];
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::MaxPool2d: {
                for (std::size_t o = 0; o < grad_out.size(); ++o)
                    grad_in.data[lc.pool_argmax[o]] += grad_out.data[o];
                break;
            }
            case LayerKind::Dropout: {
                if (lc.dropout_mask.size() == grad_out.size())
                    for (std::size_t i = 0; i < grad_out.size(); ++i)
                        grad_in.data[i] = grad_out.data[i] * lc.dropout_mask[i];
                else
                    grad_in.data = grad_out.data;
                break;
            }
            case LayerKind::Flatten: {
                grad_in.data = grad_out.data;
                break;
            }
        }
        grad_out = std::move(grad_in);
    }
    return gb;
}

LossResult loss_and_grad(const LossTarget& target, const Tensor& outputs) {
    if (outputs.shape.size() != 2)
        throw std::invalid_argument("loss expects [batch, out] outputs");
    std::size_t n = outputs.shape[0], k = outputs.shape[1];
    LossResult res;
    res.output_grad = Tensor(outputs.shape);
    if (target.kind == LossKind::CrossEntropySoftmax) {
        if (target.labels.size() != n)
            throw std::invalid_argument("label count does not match batch");
        for (std::size_t b = 0; b < n; ++b) {
            const double* o = outputs.data.data() + b * k;
            double mx = *std::max_element(o, o + k);
            double z = 0.0;
            for (std::size_t j = 0; j < k; ++j) z += std::exp(o[j] - mx);
            int y = target.labels[b];
            if (y < 0 || static_cast<std::size_t>(y) >= k)
                throw std::invalid_argument("label out of range");
            res.value += -(o[y] - mx - std::log(z));
            for (std::size_t j = 0; j < k; ++j) {
                double p = std::exp(o[j] - mx) / z;
                res.output_grad.data[b * k + j] =
                    (p - (static_cast<std::size_t>(y) == j ? 1.0 : 0.0)) /
                    static_cast<double>(n);
            }
        }
        res.value /= static_cast<double>(n);
    } else {
        if (!same_shape(target.targets, outputs))
            throw std::invalid_argument("mse targets shape mismatch");
        for (std::size_t i = 0; i < outputs.size(); ++i) {
            double e = outputs.data[i] - target.targets.data[i];
            res.value += e * e;
            res.output_grad.data[i] = 2.0 * e / static_cast<double>(n);
        }
        res.value /= static_cast<double>(n);
    }
    if (!std::isfinite(res.value))
        throw std::runtime_error("non-finite loss value");
    return res;
}

double loss_value(const LossTarget& target, const Tensor& outputs) {
    return loss_and_grad(target, outputs).value;
}

double finite_diff_check(const Network& net, const LossTarget& target,
                         const Tensor& batch, bool detach_dendrites, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("finite_diff_check eps must be > 0");

    ForwardCache base;
    Tensor out = forward(net, batch, RunMode::Eval, 0, &base);
    LossResult lr = loss_and_grad(target, out);
    BackpropMode mode =
        detach_dendrites ? BackpropMode::Perforated : BackpropMode::Standard;
    GradBuffer gb = backprop(net, base, lr.output_grad, mode);

    Network work = net;
    const ForwardCache* frozen = detach_dendrites ? &base : nullptr;
    auto loss_at = [&]() {
        Tensor o = forward(work, batch, RunMode::Eval, 0, nullptr, frozen);
        return loss_value(target, o);
    };
    double max_rel = 0.0;
    auto check = [&](double& param, double analytic) {
        double orig = param;
        param = orig + eps;
        double lp = loss_at();
        param = orig - eps;
        double lm = loss_at();
        param = orig;
        double numeric = (lp - lm) / (2.0 * eps);
        double rel = std::abs(analytic - numeric) /
                     std::max({std::abs(analytic), std::abs(numeric), 1.0});
        max_rel = std::max(max_rel, rel);
    };
    for (std::size_t li = 0; li < work.layers.size(); ++li) {
        Layer& layer = work.layers[li];
        if (!layer.hosts_dendrites()) continue;
        for (std::size_t i = 0; i < layer.weights.size(); ++i)
            check(layer.weights.data[i], gb.layers[li].weights[i]);
        for (std::size_t i = 0; i < layer.bias.size(); ++i)
            check(layer.bias.data[i], gb.layers[li].bias[i]);
        for (std::size_t u = 0; u < layer.dendrites.size(); ++u)
            for (std::size_t d = 0; d < layer.dendrites[u].size(); ++d)
                check(layer.dendrites[u][d].output_weight,
                      gb.layers[li].dendrites[u][d].output_weight);
    }
    return max_rel;
}

}  // namespace pbnn

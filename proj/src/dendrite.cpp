#include "pbnn/dendrite.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "pbnn/data.hpp"

namespace pbnn {

namespace {

double pearson_from_sums(double sx, double sy, double sxx, double syy, double sxy,
                         std::size_t n) {
    if (n < 2) return 0.0;
    double nn = double(n);
    double vx = nn * sxx - sx * sx;
    double vy = nn * syy - sy * sy;
    if (vx <= 0.0 || vy <= 0.0) return 0.0;
    return (nn * sxy - sx * sy) / std::sqrt(vx * vy);
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / double(v.size());
}

// im2col: patches of a batched [n,c,h,w] tensor for one conv layer, rows
// ordered (sample, oy, ox) to line up with flattened delta planes.
Tensor conv_patches(const Tensor& input, const Layer& layer) {
    std::size_t n = input.shape[0];
    std::size_t c = layer.in_shape[0], h = layer.in_shape[1], w = layer.in_shape[2];
    std::size_t kh = layer.spec.kernel_h, kw = layer.spec.kernel_w;
    std::size_t oh = layer.out_shape[1], ow = layer.out_shape[2];
    std::size_t stride = layer.spec.stride, padding = layer.spec.padding;
    Tensor out({n * oh * ow, c * kh * kw});
    std::size_t row = 0;
    for (std::size_t b = 0; b < n; ++b) {
        const double* in = input.data.data() + b * c * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox, ++row) {
                double* dst = out.data.data() + row * c * kh * kw;
                for (std::size_t ic = 0; ic < c; ++ic)
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) -
                                                std::ptrdiff_t(padding);
                            std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) -
                                                std::ptrdiff_t(padding);
                            double v = 0.0;
                            if (iy >= 0 && iy < std::ptrdiff_t(h) && ix >= 0 &&
                                ix < std::ptrdiff_t(w))
                                v = in[(ic * h + iy) * w + ix];
                            *dst++ = v;
                        }
            }
    }
    return out;
}

}  // namespace

double CandidateState::epoch_correlation() const {
    return std::abs(pearson_from_sums(sx, sy, sxx, syy, sxy, n_epoch));
}

double correlation_score(const std::vector<double>& activations,
                         const std::vector<double>& deltas) {
    if (activations.size() != deltas.size() || activations.size() < 2)
        throw std::invalid_argument("correlation_score needs >= 2 paired samples");
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < activations.size(); ++i) {
        sx += activations[i];
        sy += deltas[i];
        sxx += activations[i] * activations[i];
        syy += deltas[i] * deltas[i];
        sxy += activations[i] * deltas[i];
    }
    return std::abs(pearson_from_sums(sx, sy, sxx, syy, sxy, activations.size()));
}

void update_running_averages(CandidateState& state,
                             const std::vector<double>& batch_activations,
                             const std::vector<double>& batch_deltas, double beta) {
    if (batch_activations.empty() || batch_activations.size() != batch_deltas.size())
        throw std::invalid_argument("update_running_averages needs a nonempty batch");
    double gm = mean(batch_activations);
    double dm = mean(batch_deltas);
    double cp = 0.0;
    for (std::size_t i = 0; i < batch_activations.size(); ++i)
        cp += (batch_activations[i] - gm) * (batch_deltas[i] - dm);
    cp /= double(batch_activations.size());
    if (!state.averages_init) {
        state.g_bar = gm;
        state.delta_bar = dm;
        state.corr_run = cp;
        state.averages_init = true;
    } else {
        state.g_bar = beta * state.g_bar + (1.0 - beta) * gm;
        state.delta_bar = beta * state.delta_bar + (1.0 - beta) * dm;
        state.corr_run = beta * state.corr_run + (1.0 - beta) * cp;
    }
    state.sigma = state.corr_run < 0.0 ? -1.0 : 1.0;
}

CandidatePool spawn_candidates(const Network& net, std::size_t pool_size,
                               std::uint64_t seed, HostFilter filter,
                               const CandidateSettings& settings) {
    if (pool_size < 1) throw std::invalid_argument("pool_size must be >= 1");
    std::size_t head = net.head_layer();
    CandidatePool pool;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const Layer& layer = net.layers[li];
        if (!layer.hosts_dendrites()) continue;
        if (filter == HostFilter::HeadOnly && li != head) continue;
        if (filter == HostFilter::BackboneOnly && li == head) continue;
        for (std::size_t u = 0; u < layer.unit_count(); ++u) {
            NeuronCandidates nc;
            nc.layer = li;
            nc.unit = u;
            std::size_t siblings = layer.dendrites[u].size();
            std::size_t fan_in = layer.unit_fan_in() + siblings;
            double bound = 1.0 / std::sqrt(double(fan_in));
            Activation act =
                settings.activation ? *settings.activation : layer.spec.activation;
            std::vector<std::size_t> wshape(layer.weights.shape.begin() + 1,
                                            layer.weights.shape.end());
            for (std::size_t c = 0; c < pool_size; ++c) {
                std::mt19937_64 rng(mix_seed(seed, li, u, c));
                std::uniform_real_distribution<double> dist(-bound, bound);
                CandidateState cs;
                cs.activation = act;
                cs.has_bias = settings.dendrite_bias;
                cs.input_weights = Tensor(wshape);
                for (auto& w : cs.input_weights.data) w = dist(rng);
                cs.sibling_weights.resize(siblings);
                for (auto& w : cs.sibling_weights) w = dist(rng);
                nc.candidates.push_back(std::move(cs));
            }
            pool.neurons.push_back(std::move(nc));
        }
    }
    if (pool.neurons.empty())
        throw std::invalid_argument("no dendrite-hosting neurons match the filter");
    return pool;
}

void candidate_batch_step(std::vector<CandidateState>& candidates,
                          const Tensor& inputs,
                          const std::vector<std::vector<double>>& sibling_posts,
                          const std::vector<double>& deltas,
                          const std::vector<double>& host_outs,
                          const CandidateSettings& settings) {
    std::size_t m = inputs.shape[0];
    std::size_t fan_in = inputs.shape[1];
    if (m == 0 || deltas.size() != m)
        throw std::invalid_argument("candidate batch size mismatch");

    std::vector<double> pre(m), post(m), gprime(m);
    for (auto& cand : candidates) {
        for (std::size_t s = 0; s < m; ++s) {
            const double* x = inputs.data.data() + s * fan_in;
            double acc = cand.bias;
            for (std::size_t j = 0; j < fan_in; ++j) acc += cand.input_weights[j] * x[j];
            for (std::size_t sb = 0; sb < cand.sibling_weights.size(); ++sb)
                acc += cand.sibling_weights[sb] * sibling_posts[sb][s];
            pre[s] = acc;
            post[s] = activate(cand.activation, acc);
            gprime[s] = activate_grad(cand.activation, acc);
        }

        update_running_averages(cand, post, deltas, settings.beta);
        if (settings.sigma_source == SigmaSource::Output) {
            double om = mean(host_outs);
            double gm = mean(post);
            double cp = 0.0;
            for (std::size_t s = 0; s < m; ++s)
                cp += (post[s] - gm) * (host_outs[s] - om);
            cp /= double(m);
            if (cand.n_epoch == 0 && cand.corr_run_out == 0.0 && cand.out_bar == 0.0) {
                cand.out_bar = om;
                cand.corr_run_out = cp;
            } else {
                cand.out_bar = settings.beta * cand.out_bar + (1.0 - settings.beta) * om;
                cand.corr_run_out =
                    settings.beta * cand.corr_run_out + (1.0 - settings.beta) * cp;
            }
            cand.sigma = cand.corr_run_out < 0.0 ? -1.0 : 1.0;
        }

        // Eq. 3.4 ascent step on the correlation objective.
        std::vector<double> wgrad(fan_in, 0.0);
        std::vector<double> sgrad(cand.sibling_weights.size(), 0.0);
        double bgrad = 0.0;
        for (std::size_t s = 0; s < m; ++s) {
            double coef = cand.sigma * (deltas[s] - cand.delta_bar) * gprime[s];
            const double* x = inputs.data.data() + s * fan_in;
            for (std::size_t j = 0; j < fan_in; ++j) wgrad[j] += coef * x[j];
            for (std::size_t sb = 0; sb < sgrad.size(); ++sb)
                sgrad[sb] += coef * sibling_posts[sb][s];
            bgrad += coef;
        }
        double scale = settings.learning_rate / double(m);
        for (std::size_t j = 0; j < fan_in; ++j)
            cand.input_weights[j] += scale * wgrad[j];
        for (std::size_t sb = 0; sb < sgrad.size(); ++sb)
            cand.sibling_weights[sb] += scale * sgrad[sb];
        if (cand.has_bias) cand.bias += scale * bgrad;

        for (std::size_t s = 0; s < m; ++s) cand.accumulate(post[s], deltas[s]);
    }
}

CandidateTrainResult train_candidates(CandidatePool& pool, const Network& net,
                                      const Tensor& inputs, const LossTarget& target,
                                      const CandidateSettings& settings,
                                      std::uint64_t seed) {
    std::size_t n = inputs.shape.empty() ? 0 : inputs.shape[0];
    if (n == 0) throw std::invalid_argument("train_candidates: empty dataset");

    CandidateTrainResult result;
    result.scores.resize(pool.neurons.size());
    for (std::size_t i = 0; i < pool.neurons.size(); ++i)
        result.scores[i].resize(pool.neurons[i].candidates.size());

    std::vector<std::vector<int>> since(pool.neurons.size());
    for (std::size_t i = 0; i < pool.neurons.size(); ++i)
        since[i].assign(pool.neurons[i].candidates.size(), 0);

    for (int epoch = 0; epoch < settings.max_epochs; ++epoch) {
        for (auto& nc : pool.neurons)
            for (auto& c : nc.candidates) c.reset_epoch_stats();

        double loss_sum = 0.0;
        std::size_t correct = 0;
        auto order = batches(n, settings.batch_size, mix_seed(seed, 0x6261u, epoch));
        std::size_t bi = 0;
        for (const auto& idx : order) {
            std::size_t row = inputs.size() / inputs.shape[0];
            std::vector<std::size_t> bshape = inputs.shape;
            bshape[0] = idx.size();
            Tensor bx(bshape);
            for (std::size_t i = 0; i < idx.size(); ++i)
                std::copy_n(inputs.data.data() + idx[i] * row, row,
                            bx.data.data() + i * row);
            LossTarget bt;
            bt.kind = target.kind;
            if (target.kind == LossKind::CrossEntropySoftmax) {
                for (auto i : idx) bt.labels.push_back(target.labels.at(i));
            } else {
                std::size_t k = target.targets.shape[1];
                bt.targets = Tensor({idx.size(), k});
                for (std::size_t i = 0; i < idx.size(); ++i)
                    std::copy_n(target.targets.data.data() + idx[i] * k, k,
                                bt.targets.data.data() + i * k);
            }

            ForwardCache cache;
            Tensor out = forward(net, bx, settings.forward_mode,
                                 mix_seed(seed, 0x6677u, epoch, bi), &cache);
            LossResult lr = loss_and_grad(bt, out);
            loss_sum += lr.value * double(idx.size());
            if (bt.kind == LossKind::CrossEntropySoftmax) {
                std::size_t k = out.shape[1];
                for (std::size_t b = 0; b < idx.size(); ++b) {
                    const double* o = out.data.data() + b * k;
                    std::size_t arg = std::max_element(o, o + k) - o;
                    if (int(arg) == bt.labels[b]) ++correct;
                }
            }
            GradBuffer gb = backprop(net, cache, lr.output_grad, settings.delta_mode);

            // Shared per-layer patch matrices for conv hosts.
            std::vector<Tensor> patches(net.layers.size());
            for (auto& nc : pool.neurons) {
                const Layer& layer = net.layers[nc.layer];
                const Tensor& lin =
                    nc.layer == 0 ? cache.input : cache.layers[nc.layer - 1].post;
                std::size_t m = idx.size();
                if (layer.spec.kind == LayerKind::Dense) {
                    std::size_t in_w = layer.in_shape[0], out_w = layer.spec.out_width;
                    std::vector<double> deltas(m), houts(m);
                    for (std::size_t b = 0; b < m; ++b) {
                        deltas[b] = gb.layers[nc.layer].delta.data[b * out_w + nc.unit];
                        houts[b] = cache.layers[nc.layer].post.data[b * out_w + nc.unit];
                    }
                    std::vector<std::vector<double>> sib;
                    for (const auto& t : cache.layers[nc.layer].dendrite_post[nc.unit])
                        sib.push_back(t.data);
                    Tensor view({m, in_w}, std::vector<double>(
                                               lin.data.begin(),
                                               lin.data.begin() + m * in_w));
                    candidate_batch_step(nc.candidates, view, sib, deltas, houts,
                                         settings);
                } else {
                    if (patches[nc.layer].size() == 0)
                        patches[nc.layer] = conv_patches(lin, layer);
                    std::size_t oc = layer.spec.out_channels;
                    std::size_t plane = layer.out_shape[1] * layer.out_shape[2];
                    std::vector<double> deltas(m * plane), houts(m * plane);
                    for (std::size_t b = 0; b < m; ++b)
                        for (std::size_t p = 0; p < plane; ++p) {
                            deltas[b * plane + p] =
                                gb.layers[nc.layer]
                                    .delta.data[(b * oc + nc.unit) * plane + p];
                            houts[b * plane + p] =
                                cache.layers[nc.layer]
                                    .post.data[(b * oc + nc.unit) * plane + p];
                        }
                    std::vector<std::vector<double>> sib;
                    for (const auto& t : cache.layers[nc.layer].dendrite_post[nc.unit])
                        sib.push_back(t.data);
                    candidate_batch_step(nc.candidates, patches[nc.layer], sib, deltas,
                                         houts, settings);
                }
            }
            ++bi;
        }

        result.epoch_loss.push_back(loss_sum / double(n));
        result.epoch_accuracy.push_back(
            target.kind == LossKind::CrossEntropySoftmax ? double(correct) / double(n)
                                                         : 0.0);
        result.epochs = epoch + 1;

        bool any_improving = false;
        for (std::size_t i = 0; i < pool.neurons.size(); ++i)
            for (std::size_t c = 0; c < pool.neurons[i].candidates.size(); ++c) {
                CandidateState& cs = pool.neurons[i].candidates[c];
                cs.correlation_score = cs.epoch_correlation();
                result.scores[i][c].push_back(cs.correlation_score);
                if (cs.correlation_score > cs.best_score + settings.improve_eps) {
                    cs.best_score = cs.correlation_score;
                    cs.best_score_epoch = epoch;
                    since[i][c] = 0;
                } else {
                    ++since[i][c];
                }
                if (since[i][c] < settings.patience) any_improving = true;
            }
        if (!any_improving) break;
    }
    return result;
}

std::vector<PromotionRecord> promote_best(CandidatePool& pool, Network& net,
                                          int birth_cycle, OutputInit output_init,
                                          std::uint64_t seed, bool freeze_inputs) {
    std::vector<PromotionRecord> report;
    for (auto& nc : pool.neurons) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < nc.candidates.size(); ++c)
            if (nc.candidates[c].correlation_score >
                nc.candidates[best].correlation_score)
                best = c;
        CandidateState& cs = nc.candidates[best];

        DendriteNode dn;
        dn.input_weights = std::move(cs.input_weights);
        dn.sibling_weights = std::move(cs.sibling_weights);
        dn.bias = cs.bias;
        dn.has_bias = cs.has_bias;
        dn.activation = cs.activation;
        dn.birth_cycle = birth_cycle;
        dn.input_frozen = freeze_inputs;
        if (output_init == OutputInit::Random) {
            std::mt19937_64 rng(mix_seed(seed, nc.layer, nc.unit, 0x6f77u));
            std::uniform_real_distribution<double> dist(-0.1, 0.1);
            dn.output_weight = dist(rng);
        } else {
            dn.output_weight = 0.0;
        }
        net.layers[nc.layer].dendrites[nc.unit].push_back(std::move(dn));

        report.push_back({nc.layer, nc.unit, best, cs.correlation_score});
    }
    pool.neurons.clear();
    return report;
}

}  // namespace pbnn

#include "pbnn/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace pbnn {

using ordered_json = nlohmann::ordered_json;

std::string ablation_name(AblationMode m) {
    switch (m) {
        case AblationMode::FullPb: return "full_pb";
        case AblationMode::OnlyHead: return "only_head";
        case AblationMode::OnlyBackbone: return "only_backbone";
        case AblationMode::CcNoPerforation: return "cc_no_perforation";
        case AblationMode::GdDendrites: return "gd_dendrites";
        case AblationMode::BaselineNoDendrites: return "baseline_no_dendrites";
    }
    return "full_pb";
}

AblationMode ablation_from_name(const std::string& s) {
    if (s == "full_pb") return AblationMode::FullPb;
    if (s == "only_head") return AblationMode::OnlyHead;
    if (s == "only_backbone") return AblationMode::OnlyBackbone;
    if (s == "cc_no_perforation") return AblationMode::CcNoPerforation;
    if (s == "gd_dendrites") return AblationMode::GdDendrites;
    if (s == "baseline_no_dendrites") return AblationMode::BaselineNoDendrites;
    throw std::invalid_argument("unknown ablation_mode: " + s);
}

Optimizer::Optimizer(const OptimizerSettings& settings, std::size_t param_count)
    : settings_(settings) {
    if (settings.kind == OptimizerSettings::Kind::Adam) {
        m_.assign(param_count, 0.0);
        v_.assign(param_count, 0.0);
    } else if (settings.momentum != 0.0) {
        m_.assign(param_count, 0.0);
    }
}

void Optimizer::step(const std::vector<double*>& params,
                     const std::vector<double>& grads) {
    if (params.size() != grads.size())
        throw std::invalid_argument("optimizer param/grad count mismatch");
    if (settings_.kind == OptimizerSettings::Kind::Adam) {
        ++t_;
        double bc1 = 1.0 - std::pow(settings_.beta1, double(t_));
        double bc2 = 1.0 - std::pow(settings_.beta2, double(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = settings_.beta1 * m_[i] + (1.0 - settings_.beta1) * grads[i];
            v_[i] = settings_.beta2 * v_[i] + (1.0 - settings_.beta2) * grads[i] * grads[i];
            *params[i] -= settings_.learning_rate * (m_[i] / bc1) /
                          (std::sqrt(v_[i] / bc2) + settings_.eps);
        }
    } else {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!m_.empty()) {
                m_[i] = settings_.momentum * m_[i] + grads[i];
                *params[i] -= settings_.learning_rate * m_[i];
            } else {
                *params[i] -= settings_.learning_rate * grads[i];
            }
        }
    }
}

std::vector<double> Optimizer::flat_state() const {
    std::vector<double> out;
    out.push_back(double(t_));
    out.insert(out.end(), m_.begin(), m_.end());
    out.insert(out.end(), v_.begin(), v_.end());
    return out;
}

namespace {

std::vector<double*> trainable_params(Network& net) {
    std::vector<double*> out;
    for (auto& layer : net.layers) {
        for (auto& w : layer.weights.data) out.push_back(&w);
        for (auto& b : layer.bias.data) out.push_back(&b);
        for (auto& unit : layer.dendrites)
            for (auto& dn : unit) {
                out.push_back(&dn.output_weight);
                if (!dn.input_frozen) {
                    for (auto& w : dn.input_weights.data) out.push_back(&w);
                    for (auto& w : dn.sibling_weights) out.push_back(&w);
                    if (dn.has_bias) out.push_back(&dn.bias);
                }
            }
    }
    return out;
}

std::vector<double> collect_grads(const Network& net, const GradBuffer& gb) {
    std::vector<double> out;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const Layer& layer = net.layers[li];
        const LayerGrad& lg = gb.layers[li];
        out.insert(out.end(), lg.weights.data.begin(), lg.weights.data.end());
        out.insert(out.end(), lg.bias.data.begin(), lg.bias.data.end());
        for (std::size_t u = 0; u < layer.dendrites.size(); ++u)
            for (std::size_t d = 0; d < layer.dendrites[u].size(); ++d) {
                const DendriteNode& dn = layer.dendrites[u][d];
                const DendriteGrad& dg = lg.dendrites[u][d];
                out.push_back(dg.output_weight);
                if (!dn.input_frozen) {
                    if (dg.has_input_grads) {
                        out.insert(out.end(), dg.input_weights.data.begin(),
                                   dg.input_weights.data.end());
                        out.insert(out.end(), dg.sibling_weights.begin(),
                                   dg.sibling_weights.end());
                        if (dn.has_bias) out.push_back(dg.bias);
                    } else {
                        std::size_t k = dn.input_weights.size() +
                                        dn.sibling_weights.size() +
                                        (dn.has_bias ? 1 : 0);
                        out.insert(out.end(), k, 0.0);
                    }
                }
            }
    }
    return out;
}

double binary_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        double avg = (double(i) + double(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
        i = j + 1;
    }
    double pos_rank_sum = 0.0;
    std::size_t npos = 0;
    for (std::size_t k = 0; k < n; ++k)
        if (labels[k] == 1) {
            pos_rank_sum += rank[k];
            ++npos;
        }
    std::size_t nneg = n - npos;
    if (npos == 0 || nneg == 0) return 0.0;
    return (pos_rank_sum - double(npos) * (double(npos) + 1.0) / 2.0) /
           (double(npos) * double(nneg));
}

std::string metrics_path(const ExperimentConfig& config) {
    return config.run_dir + "/metrics.jsonl";
}

void emit_epoch_metrics(const ExperimentConfig& config, int cycle, const char* kind,
                        int epoch, double train, double val, double test, double loss,
                        double seconds, const ordered_json& extra = {}) {
    if (config.run_dir.empty()) return;
    ordered_json rec;
    rec["timestamp"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(
            std::chrono::system_clock::now().time_since_epoch())
            .count();
    rec["experiment"] = config.experiment_id;
    rec["cycle"] = cycle;
    rec["kind"] = kind;
    rec["epoch"] = epoch;
    rec["train"] = train;
    rec["val"] = val;
    if (std::isfinite(test)) rec["test"] = test;
    rec["loss"] = loss;
    rec["seconds"] = seconds;
    if (!extra.is_null() && !extra.empty())
        for (auto& [k, v] : extra.items()) rec[k] = v;
    append_metrics(metrics_path(config), rec.dump());
}

std::string store_checkpoint(const ExperimentConfig& config, const Network& net,
                             const std::vector<double>& opt_state, int cycle_index) {
    Checkpoint ck;
    ck.net = net;
    ck.optimizer_state = opt_state;
    ck.rng_state = "seed:" + std::to_string(config.seed) +
                   ";cycle:" + std::to_string(cycle_index);
    ck.cycle_index = cycle_index;
    if (!config.run_dir.empty())
        return save_checkpoint(ck, config.run_dir + "/checkpoints");
    auto bytes = checkpoint_bytes(ck);
    return std::string(bytes.end() - 64, bytes.end());
}

}  // namespace

LossTarget make_target(LossKind loss, const std::vector<int>& labels,
                       std::size_t out_width) {
    LossTarget t;
    t.kind = loss;
    if (loss == LossKind::CrossEntropySoftmax) {
        t.labels = labels;
    } else {
        t.targets = Tensor({labels.size(), out_width});
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (out_width == 1)
                t.targets.data[i] = double(labels[i]);
            else
                t.targets.data[i * out_width + std::size_t(labels[i])] = 1.0;
        }
    }
    return t;
}

double evaluate_score(const Network& net, const Dataset& ds, LossKind loss,
                      Metric metric, std::size_t batch_size) {
    std::size_t n = ds.size();
    if (n == 0) throw std::invalid_argument("evaluate_score: empty dataset");
    std::size_t k = net.output_width();
    std::size_t correct = 0;
    std::vector<double> auc_scores;
    for (const auto& idx : batches(n, batch_size, std::nullopt)) {
        Tensor bx = gather_inputs(ds, idx);
        Tensor out = forward(net, bx, RunMode::Eval, 0);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const double* o = out.data.data() + b * k;
            if (metric == Metric::Accuracy) {
                int pred;
                if (k == 1)
                    pred = o[0] > 0.5 ? 1 : 0;
                else
                    pred = int(std::max_element(o, o + k) - o);
                if (pred == ds.labels[idx[b]]) ++correct;
            } else {
                auc_scores.push_back(k == 1 ? o[0] : o[1] - o[0]);
            }
        }
    }
    (void)loss;
    if (metric == Metric::Accuracy) return double(correct) / double(n);
    return binary_auc(auc_scores, ds.labels);
}

BackpropMode backprop_mode_for(AblationMode ablation, bool has_dendrites) {
    if (!has_dendrites) return BackpropMode::Standard;
    switch (ablation) {
        case AblationMode::CcNoPerforation: return BackpropMode::CcNoPerforation;
        case AblationMode::GdDendrites: return BackpropMode::GdDendrites;
        default: return BackpropMode::Perforated;
    }
}

HostFilter host_filter_for(AblationMode ablation) {
    switch (ablation) {
        case AblationMode::OnlyHead: return HostFilter::HeadOnly;
        case AblationMode::OnlyBackbone: return HostFilter::BackboneOnly;
        default: return HostFilter::All;
    }
}

CycleRecord run_neuron_cycle(Network& net, const Splits& splits,
                             const ExperimentConfig& config, int cycle_index) {
    if (splits.train.size() == 0 || splits.val.size() == 0)
        throw std::invalid_argument("run_neuron_cycle: empty split");
    if (config.patience < 1) throw std::invalid_argument("patience must be >= 1");

    auto cycle_start = std::chrono::steady_clock::now();
    std::string frozen_before = dendrite_input_digest(net);

    auto params = trainable_params(net);
    Optimizer opt(config.optimizer, params.size());
    BackpropMode mode = backprop_mode_for(config.ablation, net.has_dendrites());

    CycleRecord rec;
    rec.cycle_index = cycle_index;
    rec.kind = CycleRecord::Kind::Neuron;

    Network best_net = net;
    double best_val = -std::numeric_limits<double>::infinity();
    int best_epoch = -1, since = 0;
    std::size_t n = splits.train.size();
    std::size_t out_w = net.output_width();

    int epoch_limit = config.fixed_epochs > 0
                          ? config.fixed_epochs
                          : config.max_epochs_per_cycle;
    bool stream_train_acc = config.loss == LossKind::CrossEntropySoftmax &&
                            config.metric == Metric::Accuracy;

    for (int epoch = 0; epoch < epoch_limit; ++epoch) {
        auto epoch_start = std::chrono::steady_clock::now();
        double loss_sum = 0.0;
        std::size_t correct = 0;
        auto order =
            batches(n, config.batch_size,
                    mix_seed(config.seed, 0x7368u, std::uint64_t(cycle_index), epoch));
        std::size_t bi = 0;
        for (const auto& idx : order) {
            Tensor bx = gather_inputs(splits.train, idx);
            std::vector<int> blabels;
            blabels.reserve(idx.size());
            for (auto i : idx) blabels.push_back(splits.train.labels[i]);
            LossTarget bt = make_target(config.loss, blabels, out_w);

            ForwardCache cache;
            Tensor out;
            try {
                out = forward(net, bx, RunMode::Train,
                              mix_seed(config.seed, std::uint64_t(cycle_index), epoch, bi),
                              &cache);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("cycle " + std::to_string(cycle_index) +
                                         " epoch " + std::to_string(epoch) + ": " +
                                         e.what());
            }
            LossResult lr = loss_and_grad(bt, out);
            loss_sum += lr.value * double(idx.size());
            if (stream_train_acc)
                for (std::size_t b = 0; b < idx.size(); ++b) {
                    const double* o = out.data.data() + b * out_w;
                    if (int(std::max_element(o, o + out_w) - o) == blabels[b]) ++correct;
                }
            GradBuffer gb = backprop(net, cache, lr.output_grad, mode);
            opt.step(params, collect_grads(net, gb));
            ++bi;
        }

        double train_score = stream_train_acc
                                 ? double(correct) / double(n)
                                 : evaluate_score(net, splits.train, config.loss,
                                                  config.metric);
        double val_score = evaluate_score(net, splits.val, config.loss, config.metric);
        double test_score = std::numeric_limits<double>::quiet_NaN();
        if (config.eval_test_each_epoch && splits.test.size() > 0)
            test_score = evaluate_score(net, splits.test, config.loss, config.metric);

        rec.train_scores.push_back(train_score);
        rec.val_scores.push_back(val_score);
        rec.test_scores.push_back(test_score);

        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                    epoch_start)
                          .count();
        emit_epoch_metrics(config, cycle_index, "neuron", epoch, train_score, val_score,
                           test_score, loss_sum / double(n), secs);

        if (val_score > best_val) {
            best_val = val_score;
            best_epoch = epoch;
            best_net = net;
            since = 0;
        } else {
            ++since;
        }
        if (config.fixed_epochs == 0 && since >= config.patience) break;
    }

    net = best_net;
    rec.best_val_epoch = best_epoch;
    rec.cycle_val_score = best_val;
    if (config.eval_test_each_epoch && splits.test.size() > 0)
        rec.cycle_test_score = rec.test_scores[std::size_t(best_epoch)];
    else if (splits.test.size() > 0)
        rec.cycle_test_score = evaluate_score(net, splits.test, config.loss, config.metric);

    if (dendrite_input_digest(net) != frozen_before)
        throw std::logic_error("dendrite input weights changed during a neuron cycle");

    rec.checkpoint_id = store_checkpoint(config, net, opt.flat_state(), cycle_index);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                cycle_start)
                      .count();
    return rec;
}

DendriteCycleResult run_dendrite_cycle(Network& net, const Splits& splits,
                                       const ExperimentConfig& config,
                                       int cycle_index) {
    if (config.ablation == AblationMode::BaselineNoDendrites)
        throw std::invalid_argument(
            "baseline_no_dendrites permits no dendrite cycles");
    if (splits.train.size() == 0)
        throw std::invalid_argument("run_dendrite_cycle: empty training split");

    auto cycle_start = std::chrono::steady_clock::now();
    std::string neurons_before = neuron_params_digest(net);

    DendriteCycleResult result;
    CycleRecord& rec = result.record;
    rec.cycle_index = cycle_index;
    rec.kind = CycleRecord::Kind::Dendrite;

    // Model output is unchanged while candidates train: val/test flatline.
    double flat_val = evaluate_score(net, splits.val, config.loss, config.metric);
    double flat_test = std::numeric_limits<double>::quiet_NaN();
    if (splits.test.size() > 0)
        flat_test = evaluate_score(net, splits.test, config.loss, config.metric);

    HostFilter filter = host_filter_for(config.ablation);
    CandidateSettings cs = config.candidate;
    cs.delta_mode = backprop_mode_for(config.ablation, net.has_dendrites());
    if (cs.delta_mode == BackpropMode::Standard) cs.delta_mode = BackpropMode::Perforated;
    if (cs.delta_mode == BackpropMode::GdDendrites) cs.delta_mode = BackpropMode::Perforated;

    std::uint64_t spawn_seed = mix_seed(config.seed, 0x7370u, std::uint64_t(cycle_index));
    int birth_cycle = cycle_index;

    if (config.ablation == AblationMode::GdDendrites) {
        // No correlation training: random dendrites whose input weights stay
        // trainable under gradient descent in later neuron cycles.
        CandidatePool pool = spawn_candidates(net, 1, spawn_seed, filter, cs);
        result.promotions = promote_best(pool, net, birth_cycle,
                                         config.dendrite_output_init, spawn_seed,
                                         /*freeze_inputs=*/false);
        rec.train_scores.push_back(
            evaluate_score(net, splits.train, config.loss, config.metric));
        rec.val_scores.push_back(flat_val);
        rec.test_scores.push_back(flat_test);
        emit_epoch_metrics(config, cycle_index, "dendrite", 0, rec.train_scores[0],
                           flat_val, flat_test, 0.0, 0.0);
    } else {
        CandidatePool pool =
            spawn_candidates(net, cs.pool_size, spawn_seed, filter, cs);
        LossTarget full =
            make_target(config.loss, splits.train.labels, net.output_width());
        CandidateTrainResult tr =
            train_candidates(pool, net, splits.train.inputs, full, cs,
                             mix_seed(config.seed, 0x6374u, std::uint64_t(cycle_index)));
        result.candidate_scores = tr.scores;
        for (int e = 0; e < tr.epochs; ++e) {
            rec.train_scores.push_back(config.loss == LossKind::CrossEntropySoftmax
                                           ? tr.epoch_accuracy[std::size_t(e)]
                                           : rec.train_scores.empty()
                                                 ? evaluate_score(net, splits.train,
                                                                  config.loss,
                                                                  config.metric)
                                                 : rec.train_scores.back());
            rec.val_scores.push_back(flat_val);
            rec.test_scores.push_back(flat_test);
            ordered_json extra;
            extra["candidate_scores"] = ordered_json::array();
            for (const auto& per_neuron : tr.scores) {
                ordered_json row = ordered_json::array();
                for (const auto& per_cand : per_neuron)
                    row.push_back(std::size_t(e) < per_cand.size()
                                      ? per_cand[std::size_t(e)]
                                      : per_cand.back());
                extra["candidate_scores"].push_back(row);
            }
            emit_epoch_metrics(config, cycle_index, "dendrite", e,
                               rec.train_scores.back(), flat_val, flat_test,
                               tr.epoch_loss[std::size_t(e)], 0.0, extra);
        }
        result.promotions = promote_best(pool, net, birth_cycle,
                                         config.dendrite_output_init, spawn_seed,
                                         /*freeze_inputs=*/true);
    }

    rec.best_val_epoch = 0;
    rec.cycle_val_score = flat_val;
    rec.cycle_test_score = flat_test;

    if (neuron_params_digest(net) != neurons_before)
        throw std::logic_error("neuron parameters changed during a dendrite cycle");

    rec.checkpoint_id = store_checkpoint(config, net, {}, cycle_index);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                cycle_start)
                      .count();
    return result;
}

ExperimentReport run_experiment(const ExperimentConfig& config, const Splits& splits) {
    if (!config.run_dir.empty()) std::filesystem::create_directories(config.run_dir);

    Network net = build_network(config.input_shape, config.architecture);
    init_params(net, mix_seed(config.seed, 0x696eu));

    ExperimentReport report;
    CycleRecord first = run_neuron_cycle(net, splits, config, 0);
    report.cycles.push_back(first);
    report.first_cycle_test = first.cycle_test_score;
    report.final_checkpoint_id = first.checkpoint_id;
    report.final_val_score = first.cycle_val_score;

    double prev_val = first.cycle_val_score;
    Network retained = net;

    if (config.ablation != AblationMode::BaselineNoDendrites) {
        for (int round = 0; round < config.max_dendrite_rounds; ++round) {
            int dc_index = int(report.cycles.size());
            DendriteCycleResult dc = run_dendrite_cycle(net, splits, config, dc_index);
            report.cycles.push_back(dc.record);
            CycleRecord nc =
                run_neuron_cycle(net, splits, config, int(report.cycles.size()));
            report.cycles.push_back(nc);
            if (nc.cycle_val_score > prev_val) {
                prev_val = nc.cycle_val_score;
                retained = net;
                report.final_checkpoint_id = nc.checkpoint_id;
                report.final_val_score = nc.cycle_val_score;
                report.dendrites_added += 1;
            } else {
                // The new dendrites overfit: discard them and keep the prior best.
                net = retained;
                break;
            }
        }
    }

    auto [max_val_test, err_red] = experiment_score(report.cycles);
    report.max_val_test = max_val_test;
    report.error_reduction_pct = err_red;
    return report;
}

std::pair<double, double> experiment_score(const std::vector<CycleRecord>& records) {
    if (records.empty())
        throw std::invalid_argument("experiment_score needs >= 1 cycle record");
    double best_val = -std::numeric_limits<double>::infinity();
    double best_test = std::numeric_limits<double>::quiet_NaN();
    for (const auto& rec : records)
        for (std::size_t e = 0; e < rec.val_scores.size(); ++e)
            if (rec.val_scores[e] > best_val) {
                best_val = rec.val_scores[e];
                best_test = std::isfinite(rec.test_scores[e])
                                ? rec.test_scores[e]
                                : (int(e) == rec.best_val_epoch ? rec.cycle_test_score
                                                                : rec.test_scores[e]);
            }
    double first_test = records.front().cycle_test_score;
    double first_err = 1.0 - first_test;
    double final_err = 1.0 - best_test;
    double err_red = first_err > 0.0 ? 100.0 * (first_err - final_err) / first_err : 0.0;
    return {best_test, err_red};
}

std::string report_to_json(const ExperimentReport& report, bool include_timing) {
    ordered_json j;
    j["first_cycle_test"] = report.first_cycle_test;
    j["max_val_test"] = report.max_val_test;
    j["error_reduction_pct"] = report.error_reduction_pct;
    j["dendrites_added"] = report.dendrites_added;
    j["final_val_score"] = report.final_val_score;
    j["final_checkpoint_id"] = report.final_checkpoint_id;
    j["cycles"] = ordered_json::array();
    for (const auto& rec : report.cycles) {
        ordered_json c;
        c["cycle_index"] = rec.cycle_index;
        c["kind"] = rec.kind == CycleRecord::Kind::Neuron ? "neuron" : "dendrite";
        c["epochs"] = rec.val_scores.size();
        c["best_val_epoch"] = rec.best_val_epoch;
        c["cycle_val_score"] = rec.cycle_val_score;
        c["cycle_test_score"] = rec.cycle_test_score;
        c["checkpoint_id"] = rec.checkpoint_id;
        c["train_scores"] = rec.train_scores;
        c["val_scores"] = rec.val_scores;
        ordered_json tests = ordered_json::array();
        for (double t : rec.test_scores)
            tests.push_back(std::isfinite(t) ? ordered_json(t) : ordered_json(nullptr));
        c["test_scores"] = tests;
        if (include_timing) c["seconds"] = rec.seconds;
        j["cycles"].push_back(c);
    }
    return j.dump(2);
}

Quartiles nearest_rank_quartiles(std::vector<double> values) {
    if (values.empty())
        throw std::invalid_argument("quartiles need at least one value");
    std::sort(values.begin(), values.end());
    auto at = [&](double p) {
        std::size_t rank = std::size_t(std::ceil(p * double(values.size())));
        return values[std::max<std::size_t>(rank, 1) - 1];
    };
    return {values.front(), at(0.25), at(0.75), values.back()};
}

}  // namespace pbnn

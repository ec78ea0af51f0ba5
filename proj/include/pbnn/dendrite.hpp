#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "pbnn/grad.hpp"
#include "pbnn/network.hpp"

namespace pbnn {

// A trainable dendrite-in-waiting plus its correlation bookkeeping.
struct CandidateState {
    Tensor input_weights;  // trial weights, shaped like the host unit's
    std::vector<double> sibling_weights;
    double bias = 0.0;
    bool has_bias = false;
    Activation activation = Activation::Identity;

    // running averages (exponential, decay beta; seeded with the first batch)
    double g_bar = 0.0;      // running mean of g(in_k)
    double delta_bar = 0.0;  // running mean of the host's delta
    double corr_run = 0.0;   // running centered-product estimate (drives sigma)
    double out_bar = 0.0;      // running mean of the host output (sigma_source=output)
    double corr_run_out = 0.0;
    bool averages_init = false;
    double sigma = 1.0;  // sign of the running correlation, sign(0) = +1

    // per-epoch Pearson accumulators over (candidate post, host delta)
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    std::size_t n_epoch = 0;

    double correlation_score = 0.0;
    double best_score = -std::numeric_limits<double>::infinity();
    int best_score_epoch = -1;

    void reset_epoch_stats() { sx = sy = sxx = syy = sxy = 0.0; n_epoch = 0; }
    void accumulate(double post, double delta) {
        sx += post;
        sy += delta;
        sxx += post * post;
        syy += delta * delta;
        sxy += post * delta;
        ++n_epoch;
    }
    // |Pearson r| of the accumulated epoch stream; 0 on zero variance.
    double epoch_correlation() const;
};

struct NeuronCandidates {
    std::size_t layer = 0, unit = 0;
    std::vector<CandidateState> candidates;
};

struct CandidatePool {
    std::vector<NeuronCandidates> neurons;
};

enum class SigmaSource { Error, Output };
enum class HostFilter { All, HeadOnly, BackboneOnly };

struct CandidateSettings {
    std::size_t pool_size = 4;
    double learning_rate = 0.01;
    double beta = 0.99;  // running-average decay
    int patience = 5;
    double improve_eps = 1e-4;
    int max_epochs = 200;
    std::size_t batch_size = 32;
    bool dendrite_bias = false;
    // nullopt = use the host layer's activation
    std::optional<Activation> activation;
    SigmaSource sigma_source = SigmaSource::Error;
    BackpropMode delta_mode = BackpropMode::Perforated;
    RunMode forward_mode = RunMode::Train;
};

// Eq-level primitives.
inline double dendrite_delta(double g_in_k, double g_bar, double delta_i,
                             double delta_bar) {
    return (g_in_k - g_bar) * (delta_i - delta_bar);
}
inline double dendrite_weight_grad(double sigma, double delta_i, double delta_bar,
                                   double g_prime_in_k, double presyn_activation) {
    return sigma * (delta_i - delta_bar) * g_prime_in_k * presyn_activation;
}

// |Pearson correlation|, 0 if either stream has zero variance.
double correlation_score(const std::vector<double>& activations,
                         const std::vector<double>& deltas);

// EMA update of g_bar / delta_bar / corr_run and the sigma recomputation.
// beta = 0 degenerates to "last batch mean"; the first call seeds the
// averages with the batch means.
void update_running_averages(CandidateState& state,
                             const std::vector<double>& batch_activations,
                             const std::vector<double>& batch_deltas, double beta);

CandidatePool spawn_candidates(const Network& net, std::size_t pool_size,
                               std::uint64_t seed, HostFilter filter = HostFilter::All,
                               const CandidateSettings& settings = {});

// One ascent pass of a batch through one neuron's candidates. inputs is
// [m, fan_in] (dense rows or im2col-style patches), sibling_posts[s] the
// matching activations of existing sibling dendrites, deltas/host_outs the
// host neuron's per-sample backpropagated error and output.
void candidate_batch_step(std::vector<CandidateState>& candidates,
                          const Tensor& inputs,
                          const std::vector<std::vector<double>>& sibling_posts,
                          const std::vector<double>& deltas,
                          const std::vector<double>& host_outs,
                          const CandidateSettings& settings);

struct CandidateTrainResult {
    // scores[neuron][candidate][epoch]
    std::vector<std::vector<std::vector<double>>> scores;
    std::vector<double> epoch_loss;      // network loss per candidate epoch
    std::vector<double> epoch_accuracy;  // argmax accuracy (CE loss only)
    int epochs = 0;
};

// Cascade-correlation training of the whole pool against a frozen network.
CandidateTrainResult train_candidates(CandidatePool& pool, const Network& net,
                                      const Tensor& inputs, const LossTarget& target,
                                      const CandidateSettings& settings,
                                      std::uint64_t seed);

struct PromotionRecord {
    std::size_t layer = 0, unit = 0;
    std::size_t chosen_index = 0;
    double score = 0.0;
};

enum class OutputInit { Zero, Random };

// Converts each neuron's best candidate into a permanent DendriteNode.
std::vector<PromotionRecord> promote_best(CandidatePool& pool, Network& net,
                                          int birth_cycle, OutputInit output_init,
                                          std::uint64_t seed,
                                          bool freeze_inputs = true);

}  // namespace pbnn

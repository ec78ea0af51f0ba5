#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pbnn/data.hpp"
#include "pbnn/dendrite.hpp"
#include "pbnn/grad.hpp"
#include "pbnn/network.hpp"
#include "pbnn/store.hpp"

namespace pbnn {

enum class AblationMode {
    FullPb,
    OnlyHead,
    OnlyBackbone,
    CcNoPerforation,
    GdDendrites,
    BaselineNoDendrites
};
std::string ablation_name(AblationMode m);
AblationMode ablation_from_name(const std::string& s);

enum class Metric { Accuracy, Auc };

struct OptimizerSettings {
    enum class Kind { Sgd, Adam };
    Kind kind = Kind::Adam;
    double learning_rate = 1e-3;
    double momentum = 0.0;  // sgd
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // adam
};

class Optimizer {
  public:
    Optimizer(const OptimizerSettings& settings, std::size_t param_count);
    void step(const std::vector<double*>& params, const std::vector<double>& grads);
    std::vector<double> flat_state() const;

  private:
    OptimizerSettings settings_;
    std::vector<double> m_, v_;
    long t_ = 0;
};

struct ExperimentConfig {
    std::vector<std::size_t> input_shape;
    std::vector<LayerSpec> architecture;
    AblationMode ablation = AblationMode::FullPb;
    int patience = 25;
    int fixed_epochs = 0;  // > 0 switches cycles to a fixed epoch count
    int max_epochs_per_cycle = 10000;
    int max_dendrite_rounds = 3;
    OptimizerSettings optimizer;
    std::size_t batch_size = 32;
    LossKind loss = LossKind::CrossEntropySoftmax;
    Metric metric = Metric::Accuracy;
    std::uint64_t seed = 0;
    bool eval_test_each_epoch = true;
    CandidateSettings candidate;
    OutputInit dendrite_output_init = OutputInit::Zero;
    std::string run_dir;        // empty = no files written
    std::string experiment_id;  // tags metrics records
};

struct CycleRecord {
    int cycle_index = 0;
    enum class Kind { Neuron, Dendrite } kind = Kind::Neuron;
    std::vector<double> train_scores, val_scores, test_scores;  // test NaN if skipped
    int best_val_epoch = 0;  // 0-based
    double cycle_val_score = 0.0;
    double cycle_test_score = 0.0;
    std::string checkpoint_id;
    double seconds = 0.0;
};

struct ExperimentReport {
    std::vector<CycleRecord> cycles;
    double first_cycle_test = 0.0;
    double max_val_test = 0.0;
    double error_reduction_pct = 0.0;
    int dendrites_added = 0;
    double final_val_score = 0.0;
    std::string final_checkpoint_id;
};

LossTarget make_target(LossKind loss, const std::vector<int>& labels,
                       std::size_t out_width);
double evaluate_score(const Network& net, const Dataset& ds, LossKind loss,
                      Metric metric, std::size_t batch_size = 256);

BackpropMode backprop_mode_for(AblationMode ablation, bool has_dendrites);
HostFilter host_filter_for(AblationMode ablation);

// Trains neuron weights, biases and dendrite output weights (plus unfrozen
// dendrite inputs) until val stops improving for `patience` epochs, then
// restores the best-val parameters.
CycleRecord run_neuron_cycle(Network& net, const Splits& splits,
                             const ExperimentConfig& config, int cycle_index);

struct DendriteCycleResult {
    CycleRecord record;
    std::vector<PromotionRecord> promotions;
    std::vector<std::vector<std::vector<double>>> candidate_scores;
};
DendriteCycleResult run_dendrite_cycle(Network& net, const Splits& splits,
                                       const ExperimentConfig& config,
                                       int cycle_index);

ExperimentReport run_experiment(const ExperimentConfig& config, const Splits& splits);

// (max_val_test, error_reduction_pct) over a completed record sequence.
std::pair<double, double> experiment_score(const std::vector<CycleRecord>& records);

std::string report_to_json(const ExperimentReport& report, bool include_timing);

// Nearest-rank method: the p-quantile is the value at rank ceil(p * n).
struct Quartiles {
    double min = 0, q1 = 0, q3 = 0, max = 0;
};
Quartiles nearest_rank_quartiles(std::vector<double> values);

}  // namespace pbnn

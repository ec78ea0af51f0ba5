#pragma once

#include <vector>

#include "pbnn/network.hpp"

namespace pbnn {

// How deltas treat dendrite connections during the backward pass.
//   Standard        - plain backprop; the network must be dendrite-free.
//   Perforated      - neuron deltas use neuron-to-neuron connections only;
//                     dendrite output weights still get gradients (path
//                     length 1), dendrite input weights get none.
//   CcNoPerforation - dendrite connections are ordinary weighted edges for
//                     delta propagation; dendrite input weights stay frozen.
//   GdDendrites     - perforated neuron deltas, but dendrite input and
//                     sibling weights receive gradients through the
//                     dendrite's own output connection.
enum class BackpropMode { Standard, Perforated, CcNoPerforation, GdDendrites };

struct DendriteGrad {
    double output_weight = 0.0;
    Tensor input_weights;  // allocated only when input grads exist
    std::vector<double> sibling_weights;
    double bias = 0.0;
    bool has_input_grads = false;
};

struct LayerGrad {
    Tensor weights, bias;  // same shapes as the layer's parameters
    Tensor delta;          // pre-activation deltas [batch, out...]
    std::vector<std::vector<DendriteGrad>> dendrites;
};

struct GradBuffer {
    std::vector<LayerGrad> layers;
};

// output_grad is dL/d(network output post-activations), [batch, out...].
GradBuffer backprop(const Network& net, const ForwardCache& cache,
                    const Tensor& output_grad, BackpropMode mode);

inline GradBuffer backprop_standard(const Network& net, const ForwardCache& cache,
                                    const Tensor& output_grad) {
    return backprop(net, cache, output_grad, BackpropMode::Standard);
}
inline GradBuffer backprop_perforated(const Network& net, const ForwardCache& cache,
                                      const Tensor& output_grad) {
    return backprop(net, cache, output_grad, BackpropMode::Perforated);
}

enum class LossKind { CrossEntropySoftmax, Mse };

// Classification labels or regression targets, depending on the loss.
struct LossTarget {
    LossKind kind = LossKind::Mse;
    std::vector<int> labels;  // cross_entropy_softmax
    Tensor targets;           // mse, [batch, out]
};

struct LossResult {
    double value = 0.0;
    Tensor output_grad;  // dL/d(outputs), batch-mean convention
};

LossResult loss_and_grad(const LossTarget& target, const Tensor& outputs);
double loss_value(const LossTarget& target, const Tensor& outputs);

// Compares analytic gradients against central finite differences of the
// loss; with detach_dendrites the dendrite activations are held constant at
// their base values (the graph perforated backprop differentiates).
// Returns the worst relative error over all checked parameters.
double finite_diff_check(const Network& net, const LossTarget& target,
                         const Tensor& batch, bool detach_dendrites, double eps);

}  // namespace pbnn

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "pbnn/activation.hpp"
#include "pbnn/tensor.hpp"

namespace pbnn {

enum class LayerKind { Dense, Conv2d, MaxPool2d, Dropout, Flatten };

struct LayerSpec {
    LayerKind kind = LayerKind::Dense;
    Activation activation = Activation::Identity;  // dense/conv only
    std::size_t out_width = 0;                     // dense
    std::size_t out_channels = 0;                  // conv
    std::size_t kernel_h = 0, kernel_w = 0;        // conv
    std::size_t stride = 1, padding = 0;           // conv
    std::size_t pool_k = 2;                        // maxpool
    double drop_rate = 0.0;                        // dropout

    static LayerSpec dense(std::size_t out, Activation act) {
        LayerSpec s;
        s.kind = LayerKind::Dense;
        s.out_width = out;
        s.activation = act;
        return s;
    }
    static LayerSpec conv2d(std::size_t out_c, std::size_t kh, std::size_t kw,
                            std::size_t stride, std::size_t padding, Activation act) {
        LayerSpec s;
        s.kind = LayerKind::Conv2d;
        s.out_channels = out_c;
        s.kernel_h = kh;
        s.kernel_w = kw;
        s.stride = stride;
        s.padding = padding;
        s.activation = act;
        return s;
    }
    static LayerSpec maxpool2d(std::size_t k) {
        LayerSpec s;
        s.kind = LayerKind::MaxPool2d;
        s.pool_k = k;
        return s;
    }
    static LayerSpec dropout(double rate) {
        LayerSpec s;
        s.kind = LayerKind::Dropout;
        s.drop_rate = rate;
        return s;
    }
    static LayerSpec flatten() {
        LayerSpec s;
        s.kind = LayerKind::Flatten;
        return s;
    }
};

// Auxiliary unit attached to one neuron (dense output unit or conv output
// channel). Receives the host's presynaptic inputs plus earlier siblings,
// and feeds one weighted connection into the host's pre-activation.
struct DendriteNode {
    Tensor input_weights;                 // shaped like one host unit's input weights
    std::vector<double> sibling_weights;  // one per earlier sibling, by sibling index
    double bias = 0.0;
    bool has_bias = false;
    double output_weight = 0.0;
    Activation activation = Activation::Identity;
    int birth_cycle = 0;
    bool input_frozen = true;  // false only in the gd_dendrites ablation
};

struct Layer {
    LayerSpec spec;
    Tensor weights;  // dense: [out,in]; conv: [out_c,in_c,kh,kw]
    Tensor bias;     // [out] / [out_c]
    // dendrites[unit] is the ordered sibling list for that neuron/channel
    std::vector<std::vector<DendriteNode>> dendrites;
    std::vector<std::size_t> in_shape, out_shape;  // per-sample shapes

    bool hosts_dendrites() const {
        return spec.kind == LayerKind::Dense || spec.kind == LayerKind::Conv2d;
    }
    std::size_t unit_count() const {
        return spec.kind == LayerKind::Dense ? spec.out_width : spec.out_channels;
    }
    // Input weight count of one unit (what a dendrite's input_weights mirror).
    std::size_t unit_fan_in() const {
        return weights.size() / unit_count();
    }
};

struct Network {
    std::vector<std::size_t> input_shape;  // per-sample
    std::vector<Layer> layers;

    std::size_t output_width() const { return Tensor::count(layers.back().out_shape); }
    // Index of the last dendrite-hosting layer (the "head").
    std::size_t head_layer() const;
    bool has_dendrites() const;
};

struct LayerCache {
    Tensor pre;   // [batch, out...] (dense/conv only)
    Tensor post;  // layer output [batch, out...]
    Tensor dropout_mask;
    std::vector<std::size_t> pool_argmax;  // flat input index per output element
    // per unit, per sibling: [batch] (dense) or [batch, oh, ow] (conv)
    std::vector<std::vector<Tensor>> dendrite_pre, dendrite_post;
};

struct ForwardCache {
    std::size_t batch = 0;
    Tensor input;  // [batch, input...]
    std::vector<LayerCache> layers;
    const Tensor& output() const { return layers.back().post; }
};

enum class RunMode { Train, Eval };

// Builds a network with inferred per-layer shapes and zeroed parameters.
Network build_network(const std::vector<std::size_t>& input_shape,
                      const std::vector<LayerSpec>& specs);

// Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] init for weights, zero biases.
void init_params(Network& net, std::uint64_t seed);

// Full batched forward pass. `frozen_dendrites`, when given, substitutes the
// dendrite activations recorded in that cache instead of recomputing them
// (the dendrite-detached graph used by gradient verification).
Tensor forward(const Network& net, const Tensor& batch, RunMode mode,
               std::uint64_t rng_seed, ForwardCache* cache = nullptr,
               const ForwardCache* frozen_dendrites = nullptr);

// Single-plane cross-correlation: input [in_c,h,w], kernel [in_c,kh,kw] -> [oh,ow].
Tensor conv2d_eval(const Tensor& input, const Tensor& kernel, double bias,
                   std::size_t stride, std::size_t padding);

struct ParamCount {
    std::size_t neuron_params = 0;
    std::size_t dendrite_params = 0;
    std::size_t dendrite_output_weights = 0;  // itemization of the +1s
    std::size_t dendrite_biases = 0;
};
ParamCount param_count(const Network& net);

}  // namespace pbnn

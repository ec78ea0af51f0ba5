#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pbnn/tensor.hpp"

namespace pbnn {

// splitmix64-style mixing for deriving independent seed streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL + b * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                              std::uint64_t d) {
    return mix_seed(mix_seed(a, b, c), d);
}

struct Dataset {
    Tensor inputs;  // [n, feature dims...]
    std::vector<int> labels;
    int class_count = 0;
    std::string name;

    std::size_t size() const { return labels.size(); }
    std::vector<std::size_t> sample_shape() const {
        return {inputs.shape.begin() + 1, inputs.shape.end()};
    }
};

struct SplitSpec {
    double train = 0.8, val = 0.1, test = 0.1;
    std::uint64_t seed = 0;
    bool stratified = false;
};

struct Splits {
    Dataset train, val, test;
};

// IDX image/label pair (MNIST layout, big-endian, magic 2051/2049).
// Pixels are scaled to [0,1]; transpose swaps H/W per image (EMNIST quirk).
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 bool transpose = false);

// CSV with a header row; the label column maps to dense class ids in
// first-appearance order, every other listed (or remaining) column is a
// numeric feature.
Dataset load_csv(const std::string& path, const std::string& label_column,
                 const std::vector<std::string>& feature_columns = {});
void save_csv(const Dataset& ds, const std::string& path,
              const std::string& label_column = "label");

Dataset gen_two_spirals(std::size_t n_per_class, double noise, std::uint64_t seed);

// 2-D points labeled by quadrant parity (class 1 where x*y > 0); not
// linearly separable. A small margin keeps points off the axes.
Dataset gen_quadrant_xor(std::size_t n_points, std::uint64_t seed,
                         double margin = 0.1);

Splits split(const Dataset& ds, const SplitSpec& spec);

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices);

// All samples exactly once; final short batch kept; order deterministic per
// shuffle seed (nullopt = dataset order).
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::optional<std::uint64_t> shuffle_seed);

// Gathers rows of ds.inputs into a batch tensor [k, dims...].
Tensor gather_inputs(const Dataset& ds, const std::vector<std::size_t>& indices);

}  // namespace pbnn

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pbnn/network.hpp"

namespace pbnn {

std::string sha256_hex(const std::vector<unsigned char>& bytes);

// Full restorable training state. Checkpoints are content-addressed: the
// id is the SHA-256 of the payload, and the payload carries its own digest
// so corruption is detected on load.
struct Checkpoint {
    static constexpr std::uint32_t kFormatVersion = 1;
    Network net;
    std::vector<double> optimizer_state;
    std::string rng_state;
    int cycle_index = 0;
};

std::vector<unsigned char> checkpoint_bytes(const Checkpoint& ck);
Checkpoint checkpoint_from_bytes(const std::vector<unsigned char>& bytes);

// Writes <dir>/<digest>.ckpt and returns the digest id.
std::string save_checkpoint(const Checkpoint& ck, const std::string& dir);
Checkpoint load_checkpoint(const std::string& dir, const std::string& id);

// Digests for the freeze invariants. The dendrite digest covers frozen
// input weights only; unfrozen inputs are trainable by design.
std::string neuron_params_digest(const Network& net);
std::string dendrite_input_digest(const Network& net);

// One self-describing JSON record per line, append-only.
void append_metrics(const std::string& path, const std::string& json_line);

}  // namespace pbnn

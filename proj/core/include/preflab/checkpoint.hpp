#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "preflab/model.hpp"

namespace preflab {

// Self-describing JSON checkpoint: config, parameter tensors, adapter spec if
// present, training seed and RNG state. Round-trips bit-exactly.
struct Checkpoint {
    ToyLm model;
    std::uint64_t seed = 0;
    std::int64_t step = 0;
    std::array<std::uint64_t, 4> rng_state{};
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const std::string& text);

}  // namespace preflab

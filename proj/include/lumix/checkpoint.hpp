#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

#include "lumix/config.hpp"
#include "lumix/diffusion.hpp"
#include "lumix/tensor.hpp"

namespace lumix::checkpoint {

constexpr std::uint32_t kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/**
 * Model state in the LMX1 container.
 *
 * Layout (little-endian): "LMX1", u32 version, u32 config length, canonical
 * config text, u32 record count, then per record in name order: u32 name
 * length, name bytes, u32 rank, u64 extents, f32 values. Scalars are stored
 * as 32-bit floats, so values round through float once on save.
 */
struct Checkpoint {
    config::RunConfig config;
    std::map<std::string, Tensor> tensors;
};

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::string_view bytes);

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);

Checkpoint from_model(const diffusion::Model& model, const diffusion::TrainConfig& train);
/// Rebuilds the model, checking every parameter name and shape against the config.
diffusion::Model to_model(const Checkpoint& ckpt);

}  // namespace lumix::checkpoint

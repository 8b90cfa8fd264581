#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmlora/encoder.hpp"

namespace ssmlora {

// Binary container for the trainable set: little-endian throughout,
// 64-bit floats, named matrices with shape headers, plus a manifest
// tying the weights back to the run that produced them.
struct CheckpointMeta {
    std::string plan;
    std::string task_kind;
    ModelDims dims;
    std::size_t rank = 0;
    std::uint64_t model_seed = 0;
    std::uint64_t adapter_seed = 0;
    std::uint64_t train_seed = 0;
};

struct TensorBlob {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct LoadedCheckpoint {
    CheckpointMeta meta;
    std::vector<TensorBlob> tensors;
};

void save_checkpoint(const std::string& path, const FrozenEncoder& model,
                     const CheckpointMeta& meta);

LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies every blob into the model's trainable tensor of the same name.
// Name or shape mismatches in either direction raise IoError.
void restore_checkpoint(FrozenEncoder& model, const LoadedCheckpoint& loaded);

}  // namespace ssmlora

#pragma once

#include <cstdint>

#include "ssmlora/tensor.hpp"

namespace ssmlora {

struct AdapterConfig {
    std::size_t rank = 8;
    double alpha = 16.0;
    double epsilon = 1e-5;     // stabilizer inside normalize_state
    double init_sigma = -1.0;  // negative -> 1/sqrt(d_in); zero is honored
    double dropout = 0.1;      // adapter input path only
};

// Throws ConfigError unless 1 <= rank <= d, epsilon > 0, alpha > 0,
// and dropout in [0, 1).
void validate_adapter_config(const AdapterConfig& cfg, std::size_t d);

// One adapter unit: a low-rank bottleneck whose rank-wide hidden state is
// combined with the previous unit's state before projecting back up.
//   down:    d_in x r
//   up:      r x d_out
//   state:   r x r     (mixes the incoming state)
//   control: r x r     (mixes the projected input into the state)
struct TimeModule {
    Tensor down;
    Tensor up;
    Tensor state;
    Tensor control;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::size_t rank = 0;
    std::size_t position = 0;  // index along its chain
};

// down ~ Gaussian(0, sigma^2) with sigma = cfg.init_sigma or 1/sqrt(d_in);
// up, state, control start at exactly zero, so a fresh module contributes
// nothing to the host output. All four matrices are trainable.
TimeModule init_time_module(std::size_t d_in, std::size_t d_out, const AdapterConfig& cfg,
                            std::size_t position, std::uint64_t seed);

// Plain low-rank pair for the baseline method: delta = (alpha/r) * x*down*up.
struct LoraModule {
    Tensor down;  // d_in x r
    Tensor up;    // r x d_out
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::size_t rank = 0;
};

LoraModule init_lora_module(std::size_t d_in, std::size_t d_out, const AdapterConfig& cfg,
                            std::uint64_t seed);

// x [batch, seq, d_in] -> x * down [batch, seq, r]. When training, dropout
// is applied to x on this path first (the host path never sees it).
Tensor project_down(const Tensor& x, const TimeModule& m, const AdapterConfig& cfg,
                    bool training = false, Rng* rng = nullptr);

// h_next = h * state + x_new * control + h.
Tensor state_update(const Tensor& h, const Tensor& x_new, const TimeModule& m);

// Per position, over the rank axis: (h - min) / (max - min + epsilon).
Tensor normalize_state(const Tensor& h_next, double epsilon);

struct ModuleOut {
    Tensor delta;  // same leading shape as x, last extent d_out
    Tensor h_out;  // gradient-stopped state handed to the next module
};

// delta = (alpha/r) * (x*down + normalize_state(h_next)) * up, where
// h_next = state_update(h_in, x*down). h_out carries h_next's values but
// is detached, so later modules never backpropagate into this one.
ModuleOut module_forward(const Tensor& x, const Tensor& h_in, const TimeModule& m,
                         const AdapterConfig& cfg, bool training = false, Rng* rng = nullptr);

Tensor lora_forward(const Tensor& x, const LoraModule& m, const AdapterConfig& cfg,
                    bool training = false, Rng* rng = nullptr);

}  // namespace ssmlora

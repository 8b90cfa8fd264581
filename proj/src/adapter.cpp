#include "ssmlora/adapter.hpp"

#include <cmath>

namespace ssmlora {

void validate_adapter_config(const AdapterConfig& cfg, std::size_t d) {
    if (cfg.rank < 1 || cfg.rank > d)
        throw ConfigError("adapter rank " + std::to_string(cfg.rank) +
                          " outside [1, " + std::to_string(d) + "]");
    if (cfg.epsilon <= 0.0) throw ConfigError("adapter epsilon must be positive");
    if (cfg.alpha <= 0.0) throw ConfigError("adapter alpha must be positive");
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
        throw ConfigError("adapter dropout must be in [0, 1)");
}

namespace {

double sigma_for(const AdapterConfig& cfg, std::size_t d_in) {
    return cfg.init_sigma >= 0.0 ? cfg.init_sigma : 1.0 / std::sqrt(double(d_in));
}

}  // namespace

TimeModule init_time_module(std::size_t d_in, std::size_t d_out, const AdapterConfig& cfg,
                            std::size_t position, std::uint64_t seed) {
    validate_adapter_config(cfg, d_in);
    Rng rng(seed);
    TimeModule m;
    m.d_in = d_in;
    m.d_out = d_out;
    m.rank = cfg.rank;
    m.position = position;
    m.down = Tensor::randn({d_in, cfg.rank}, rng, sigma_for(cfg, d_in)).set_trainable();
    m.up = Tensor::zeros({cfg.rank, d_out}).set_trainable();
    m.state = Tensor::zeros({cfg.rank, cfg.rank}).set_trainable();
    m.control = Tensor::zeros({cfg.rank, cfg.rank}).set_trainable();
    return m;
}

LoraModule init_lora_module(std::size_t d_in, std::size_t d_out, const AdapterConfig& cfg,
                            std::uint64_t seed) {
    validate_adapter_config(cfg, d_in);
    Rng rng(seed);
    LoraModule m;
    m.d_in = d_in;
    m.d_out = d_out;
    m.rank = cfg.rank;
    m.down = Tensor::randn({d_in, cfg.rank}, rng, sigma_for(cfg, d_in)).set_trainable();
    m.up = Tensor::zeros({cfg.rank, d_out}).set_trainable();
    return m;
}

namespace {

Tensor adapter_input(const Tensor& x, std::size_t d_in, double rate, bool training, Rng* rng) {
    if (x.shape().empty() || x.shape().back() != d_in)
        throw ShapeError("adapter input " + shape_to_string(x.shape()) + " does not end in width " +
                         std::to_string(d_in));
    if (!training || rate == 0.0) return x;
    if (!rng) throw ConfigError("adapter dropout requires a generator in training mode");
    return dropout(x, rate, *rng, true);
}

}  // namespace

Tensor project_down(const Tensor& x, const TimeModule& m, const AdapterConfig& cfg,
                    bool training, Rng* rng) {
    return matmul(adapter_input(x, m.d_in, cfg.dropout, training, rng), m.down);
}

Tensor state_update(const Tensor& h, const Tensor& x_new, const TimeModule& m) {
    if (h.shape() != x_new.shape())
        throw ShapeError("state " + shape_to_string(h.shape()) + " vs projected input " +
                         shape_to_string(x_new.shape()));
    return add(add(matmul(h, m.state), matmul(x_new, m.control)), h);
}

Tensor normalize_state(const Tensor& h_next, double epsilon) {
    const double* p = h_next.data();
    for (std::size_t i = 0; i < h_next.numel(); ++i)
        if (!std::isfinite(p[i])) throw NumericError("normalize_state: non-finite state");
    return range_normalize(h_next, epsilon);
}

ModuleOut module_forward(const Tensor& x, const Tensor& h_in, const TimeModule& m,
                         const AdapterConfig& cfg, bool training, Rng* rng) {
    Tensor x_new = project_down(x, m, cfg, training, rng);
    Tensor h_next = state_update(h_in, x_new, m);
    Tensor mixed = add(x_new, normalize_state(h_next, cfg.epsilon));
    ModuleOut out;
    out.delta = scale(matmul(mixed, m.up), cfg.alpha / double(cfg.rank));
    out.h_out = stop_gradient(h_next);
    return out;
}

Tensor lora_forward(const Tensor& x, const LoraModule& m, const AdapterConfig& cfg,
                    bool training, Rng* rng) {
    Tensor in = adapter_input(x, m.d_in, cfg.dropout, training, rng);
    return scale(matmul(matmul(in, m.down), m.up), cfg.alpha / double(cfg.rank));
}

}  // namespace ssmlora

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ssmlora/insertion.hpp"

namespace ssmlora {

struct EncoderConfig {
    std::size_t layers = 2;
    std::size_t width = 32;
    std::size_t heads = 2;
    std::size_t ffn_width = 64;
    std::size_t vocab = 16;
    std::size_t max_seq = 32;
    std::size_t classes = 2;
    bool fused_qkv = false;  // single [width, 3*width] attention projection
};

void validate_encoder_config(const EncoderConfig& cfg);
ModelDims dims_of(const EncoderConfig& cfg);

struct LayerWeights {
    Tensor wq, wk, wv;  // unfused host
    Tensor w_qkv;       // fused host
    Tensor wo;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor ff1, ff2;
};

// One adapted (layer, kind) slot. Chained adapters live in the model's
// chains and are addressed by (chain_index, position); baseline pairs are
// stored inline.
struct AdapterSite {
    std::size_t layer = 0;
    MatrixKind kind = MatrixKind::query;
    Method method = Method::lora;
    std::size_t chain_index = 0;
    std::size_t position = 0;
    LoraModule lora;
};

// Transformer encoder with frozen base weights. Post-norm blocks, learned
// positions, mean pooling into a trainable classifier head. Only adapters
// and the head ever carry gradients.
struct FrozenEncoder {
    EncoderConfig cfg;
    std::uint64_t seed = 0;
    Tensor tok_emb, pos_emb, emb_ln_g, emb_ln_b;
    std::vector<LayerWeights> blocks;
    Tensor head_w, head_b;
    AdapterConfig adapter_cfg;
    InsertionPlan plan;
    std::vector<Chain> chains;
    std::vector<AdapterSite> sites;

    const AdapterSite* site_at(std::size_t layer, MatrixKind kind) const;
};

FrozenEncoder build_encoder(const EncoderConfig& cfg, std::uint64_t seed);

// Instantiates adapters per the plan: chained entries are grouped by kind
// into chains (positions in layer order), baseline entries become inline
// pairs. Deterministic under seed. Fails on slots the host cannot carry,
// duplicates, or a second attachment.
void attach_adapters(FrozenEncoder& model, const InsertionPlan& plan, const AdapterConfig& cfg,
                     std::uint64_t seed);

struct SiteDelta {
    std::size_t layer = 0;
    MatrixKind kind = MatrixKind::query;
    Tensor delta;
};

struct ForwardOptions {
    bool training = false;
    Rng* rng = nullptr;                     // required when training with dropout
    StateTrace* record = nullptr;           // capture chain states
    const StateTrace* pins = nullptr;       // replay chain states (truncated function)
    std::vector<Tensor>* attn_probs = nullptr;  // one [batch, heads, seq, seq] per layer
    std::vector<SiteDelta>* deltas = nullptr;   // every adapter delta of the pass
};

// tokens holds batch*seq ids row-major. Returns logits [batch, classes].
// One state pass spans the whole call; every adapted projection adds its
// delta to the frozen product.
Tensor encoder_forward(const FrozenEncoder& model, const std::vector<int>& tokens,
                       std::size_t batch, std::size_t seq, const ForwardOptions& opts = {});

using NamedParam = std::pair<std::string, Tensor>;

// Adapter matrices and head, with stable report/checkpoint names.
std::vector<NamedParam> named_trainable(const FrozenEncoder& model);

std::size_t adapter_param_count(const FrozenEncoder& model);
std::size_t trainable_param_count(const FrozenEncoder& model);

// Fills every adapter matrix (head untouched) with N(0, sigma) draws;
// gives gradient checks a configuration where all paths carry signal.
void randomize_adapters(FrozenEncoder& model, double sigma, std::uint64_t seed);

// FNV-1a over every frozen weight byte; adapters and head excluded.
std::uint64_t base_hash(const FrozenEncoder& model);

}  // namespace ssmlora

#include "ssmlora/encoder.hpp"

#include <cmath>
#include <cstring>

namespace ssmlora {

namespace {
constexpr double kLnEps = 1e-5;
}

void validate_encoder_config(const EncoderConfig& cfg) {
    if (cfg.layers < 1 || cfg.width < 1 || cfg.heads < 1 || cfg.ffn_width < 1 ||
        cfg.vocab < 2 || cfg.max_seq < 1 || cfg.classes < 2)
        throw ConfigError("encoder config has a zero or degenerate extent");
    if (cfg.width % cfg.heads != 0)
        throw ConfigError("width " + std::to_string(cfg.width) + " not divisible by " +
                          std::to_string(cfg.heads) + " heads");
}

ModelDims dims_of(const EncoderConfig& cfg) {
    ModelDims dims;
    dims.layers = cfg.layers;
    dims.width = cfg.width;
    dims.fused_out = cfg.fused_qkv ? 3 * cfg.width : 0;
    dims.ffn_out = cfg.ffn_width;
    return dims;
}

const AdapterSite* FrozenEncoder::site_at(std::size_t layer, MatrixKind kind) const {
    for (const AdapterSite& s : sites)
        if (s.layer == layer && s.kind == kind) return &s;
    return nullptr;
}

FrozenEncoder build_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
    validate_encoder_config(cfg);
    Rng rng(seed);
    double proj_sigma = 1.0 / std::sqrt(double(cfg.width));

    FrozenEncoder m;
    m.cfg = cfg;
    m.seed = seed;
    m.tok_emb = Tensor::randn({cfg.vocab, cfg.width}, rng);
    m.pos_emb = Tensor::randn({cfg.max_seq, cfg.width}, rng);
    m.emb_ln_g = Tensor::full({cfg.width}, 1.0);
    m.emb_ln_b = Tensor::zeros({cfg.width});

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LayerWeights w;
        if (cfg.fused_qkv) {
            w.w_qkv = Tensor::randn({cfg.width, 3 * cfg.width}, rng, proj_sigma);
        } else {
            w.wq = Tensor::randn({cfg.width, cfg.width}, rng, proj_sigma);
            w.wk = Tensor::randn({cfg.width, cfg.width}, rng, proj_sigma);
            w.wv = Tensor::randn({cfg.width, cfg.width}, rng, proj_sigma);
        }
        w.wo = Tensor::randn({cfg.width, cfg.width}, rng, proj_sigma);
        w.ln1_g = Tensor::full({cfg.width}, 1.0);
        w.ln1_b = Tensor::zeros({cfg.width});
        w.ff1 = Tensor::randn({cfg.width, cfg.ffn_width}, rng, proj_sigma);
        w.ff2 = Tensor::randn({cfg.ffn_width, cfg.width}, rng,
                              1.0 / std::sqrt(double(cfg.ffn_width)));
        w.ln2_g = Tensor::full({cfg.width}, 1.0);
        w.ln2_b = Tensor::zeros({cfg.width});
        m.blocks.push_back(std::move(w));
    }

    m.head_w = Tensor::randn({cfg.width, cfg.classes}, rng, proj_sigma).set_trainable();
    m.head_b = Tensor::zeros({cfg.classes}).set_trainable();
    return m;
}

void attach_adapters(FrozenEncoder& model, const InsertionPlan& plan, const AdapterConfig& cfg,
                     std::uint64_t seed) {
    if (!model.sites.empty() || !model.chains.empty())
        throw PlanError("adapters already attached to this model");
    ModelDims dims = dims_of(model.cfg);
    validate_plan(plan, dims);
    validate_adapter_config(cfg, model.cfg.width);
    for (const PlanEntry& e : plan.entries) {
        bool fused_slot = e.kind == MatrixKind::fused_qkv;
        if (fused_slot != model.cfg.fused_qkv)
            throw PlanError(std::string("plan kind ") + kind_name(e.kind) +
                            (fused_slot ? " needs a fused host" : " needs an unfused host"));
    }

    model.plan = plan;
    model.adapter_cfg = cfg;
    Rng seeds(seed);

    // Chained entries first, grouped by kind, positions in layer order.
    for (auto& [kind, layers] : group_by_kind(plan)) {
        std::vector<std::size_t> chained;
        for (std::size_t layer : layers) {
            for (const PlanEntry& e : plan.entries)
                if (e.layer == layer && e.kind == kind && e.method == Method::ssmlora)
                    chained.push_back(layer);
        }
        if (chained.empty()) continue;
        Chain chain;
        chain.kind = kind;
        chain.cfg = cfg;
        auto [d_in, d_out] = entry_dims(kind, dims);
        for (std::size_t t = 0; t < chained.size(); ++t) {
            chain.modules.push_back(init_time_module(d_in, d_out, cfg, t, seeds.next_u64()));
            AdapterSite site;
            site.layer = chained[t];
            site.kind = kind;
            site.method = Method::ssmlora;
            site.chain_index = model.chains.size();
            site.position = t;
            model.sites.push_back(site);
        }
        model.chains.push_back(std::move(chain));
    }

    for (const PlanEntry& e : plan.entries) {
        if (e.method != Method::lora) continue;
        auto [d_in, d_out] = entry_dims(e.kind, dims);
        AdapterSite site;
        site.layer = e.layer;
        site.kind = e.kind;
        site.method = Method::lora;
        site.lora = init_lora_module(d_in, d_out, cfg, seeds.next_u64());
        model.sites.push_back(site);
    }
}

namespace {

// Frozen constant holding the first `seq` position rows.
Tensor position_rows(const Tensor& pos_emb, std::size_t seq, std::size_t width) {
    return Tensor::from_data({seq, width},
                             std::vector<double>(pos_emb.data(), pos_emb.data() + seq * width));
}

}  // namespace

Tensor encoder_forward(const FrozenEncoder& model, const std::vector<int>& tokens,
                       std::size_t batch, std::size_t seq, const ForwardOptions& opts) {
    const EncoderConfig& cfg = model.cfg;
    if (batch < 1 || seq < 1)
        throw InputError("encoder_forward: batch and seq must be at least 1");
    if (seq > cfg.max_seq)
        throw InputError("sequence length " + std::to_string(seq) + " exceeds maximum " +
                         std::to_string(cfg.max_seq));
    if (tokens.size() != batch * seq)
        throw InputError("encoder_forward: expected " + std::to_string(batch * seq) +
                         " tokens, got " + std::to_string(tokens.size()));

    PassState pass = begin_pass(model.chains, batch, seq);
    pass.training = opts.training;
    pass.rng = opts.rng;
    pass.record = opts.record;
    pass.pins = opts.pins;

    auto site_delta = [&](const AdapterSite* site, const Tensor& x) {
        Tensor delta;
        if (site->method == Method::ssmlora)
            delta = chain_step(pass, model.chains[site->chain_index], site->position, x);
        else
            delta = lora_forward(x, site->lora, model.adapter_cfg, opts.training, opts.rng);
        if (opts.deltas) opts.deltas->push_back({site->layer, site->kind, delta});
        return delta;
    };
    auto maybe_adapt = [&](Tensor y, std::size_t layer, MatrixKind kind, const Tensor& x) {
        const AdapterSite* site = model.site_at(layer, kind);
        return site ? add(y, site_delta(site, x)) : y;
    };

    std::size_t width = cfg.width;
    std::size_t hd = width / cfg.heads;

    Tensor x = embedding_lookup(model.tok_emb, tokens, batch, seq);
    x = add(x, position_rows(model.pos_emb, seq, width));
    x = layer_norm(x, model.emb_ln_g, model.emb_ln_b, kLnEps);

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const LayerWeights& w = model.blocks[l];
        Tensor q, k, v;
        if (cfg.fused_qkv) {
            Tensor qkv = maybe_adapt(matmul(x, w.w_qkv), l, MatrixKind::fused_qkv, x);
            q = slice_last(qkv, 0, width);
            k = slice_last(qkv, width, width);
            v = slice_last(qkv, 2 * width, width);
        } else {
            q = maybe_adapt(matmul(x, w.wq), l, MatrixKind::query, x);
            k = maybe_adapt(matmul(x, w.wk), l, MatrixKind::key, x);
            v = maybe_adapt(matmul(x, w.wv), l, MatrixKind::value, x);
        }

        Tensor qh = swap_axes(reshape(q, {batch, seq, cfg.heads, hd}), 1, 2);
        Tensor kh = swap_axes(reshape(k, {batch, seq, cfg.heads, hd}), 1, 2);
        Tensor vh = swap_axes(reshape(v, {batch, seq, cfg.heads, hd}), 1, 2);
        Tensor scores = scale(matmul(qh, swap_axes(kh, 2, 3)), 1.0 / std::sqrt(double(hd)));
        Tensor probs = softmax_last(scores);
        if (opts.attn_probs) opts.attn_probs->push_back(probs);
        Tensor ctx = reshape(swap_axes(matmul(probs, vh), 1, 2), {batch, seq, width});
        Tensor attn = matmul(ctx, w.wo);
        x = layer_norm(add(x, attn), w.ln1_g, w.ln1_b, kLnEps);

        Tensor f = maybe_adapt(matmul(x, w.ff1), l, MatrixKind::ffn_in, x);
        Tensor f2 = matmul(gelu(f), w.ff2);
        x = layer_norm(add(x, f2), w.ln2_g, w.ln2_b, kLnEps);
    }

    Tensor pooled = mean_axis(x, 1);
    return add(matmul(pooled, model.head_w), model.head_b);
}

std::vector<std::pair<std::string, Tensor>> named_trainable(const FrozenEncoder& model) {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const Chain& chain : model.chains) {
        for (std::size_t t = 0; t < chain.modules.size(); ++t) {
            const TimeModule& m = chain.modules[t];
            std::string base =
                std::string("chain.") + kind_name(chain.kind) + "." + std::to_string(t) + ".";
            out.emplace_back(base + "down", m.down);
            out.emplace_back(base + "up", m.up);
            out.emplace_back(base + "state", m.state);
            out.emplace_back(base + "control", m.control);
        }
    }
    for (const AdapterSite& s : model.sites) {
        if (s.method != Method::lora) continue;
        std::string base =
            "lora." + std::to_string(s.layer) + "." + kind_name(s.kind) + ".";
        out.emplace_back(base + "down", s.lora.down);
        out.emplace_back(base + "up", s.lora.up);
    }
    out.emplace_back("head.weight", model.head_w);
    out.emplace_back("head.bias", model.head_b);
    return out;
}

std::size_t adapter_param_count(const FrozenEncoder& model) {
    std::size_t n = 0;
    for (const auto& [name, t] : named_trainable(model))
        if (name.rfind("head.", 0) != 0) n += t.numel();
    return n;
}

std::size_t trainable_param_count(const FrozenEncoder& model) {
    std::size_t n = 0;
    for (const auto& [name, t] : named_trainable(model)) n += t.numel();
    return n;
}

void randomize_adapters(FrozenEncoder& model, double sigma, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : named_trainable(model)) {
        if (name.rfind("head.", 0) == 0) continue;
        double* p = t.data();
        for (std::size_t i = 0; i < t.numel(); ++i) p[i] = rng.normal(0.0, sigma);
    }
}

namespace {

void hash_tensor(std::uint64_t& h, const Tensor& t) {
    if (!t.defined()) return;
    const double* p = t.data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &p[i], sizeof(bits));
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xff;
            h *= 0x100000001b3ull;
        }
    }
}

}  // namespace

std::uint64_t base_hash(const FrozenEncoder& model) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    hash_tensor(h, model.tok_emb);
    hash_tensor(h, model.pos_emb);
    hash_tensor(h, model.emb_ln_g);
    hash_tensor(h, model.emb_ln_b);
    for (const LayerWeights& w : model.blocks) {
        hash_tensor(h, w.wq);
        hash_tensor(h, w.wk);
        hash_tensor(h, w.wv);
        hash_tensor(h, w.w_qkv);
        hash_tensor(h, w.wo);
        hash_tensor(h, w.ln1_g);
        hash_tensor(h, w.ln1_b);
        hash_tensor(h, w.ff1);
        hash_tensor(h, w.ff2);
        hash_tensor(h, w.ln2_g);
        hash_tensor(h, w.ln2_b);
    }
    return h;
}

}  // namespace ssmlora

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "ssmlora/encoder.hpp"

using namespace ssmlora;

namespace {

EncoderConfig small_cfg() {
    EncoderConfig cfg;
    cfg.layers = 4;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.ffn_width = 32;
    cfg.vocab = 11;
    cfg.max_seq = 12;
    cfg.classes = 3;
    return cfg;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
    std::vector<int> ids(n);
    for (int& id : ids) id = int(rng.below(vocab));
    return ids;
}

AdapterConfig quiet_adapter() {
    AdapterConfig cfg;
    cfg.rank = 4;
    cfg.dropout = 0.0;
    return cfg;
}

// Fills every adapter matrix (including the zero-initialized ones) so all
// paths carry signal.
void energize(FrozenEncoder& model, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : named_trainable(model)) {
        if (name.rfind("head.", 0) == 0) continue;
        for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, 0.25);
    }
}

}  // namespace

TEST_CASE("encoder config validation") {
    EncoderConfig cfg = small_cfg();
    cfg.width = 15;
    CHECK_THROWS_AS(build_encoder(cfg, 1), ConfigError);
    cfg = small_cfg();
    cfg.layers = 0;
    CHECK_THROWS_AS(build_encoder(cfg, 1), ConfigError);
    cfg = small_cfg();
    cfg.vocab = 1;
    CHECK_THROWS_AS(build_encoder(cfg, 1), ConfigError);
}

TEST_CASE("same seed builds a bit-identical frozen base") {
    FrozenEncoder a = build_encoder(small_cfg(), 42);
    FrozenEncoder b = build_encoder(small_cfg(), 42);
    CHECK(base_hash(a) == base_hash(b));
    CHECK(Tensor::max_abs_diff(a.tok_emb, b.tok_emb) == 0.0);
    CHECK(Tensor::max_abs_diff(a.blocks[2].ff1, b.blocks[2].ff1) == 0.0);
    FrozenEncoder c = build_encoder(small_cfg(), 43);
    CHECK(base_hash(a) != base_hash(c));
}

TEST_CASE("forward emits finite class logits of the right shape") {
    FrozenEncoder model = build_encoder(small_cfg(), 7);
    std::vector<int> zeros(3 * 10, 0);
    Tensor logits = encoder_forward(model, zeros, 3, 10);
    REQUIRE(logits.shape() == Shape{3, 3});
    for (std::size_t i = 0; i < logits.numel(); ++i) CHECK(std::isfinite(logits[i]));
}

TEST_CASE("input validation names the offending extent") {
    FrozenEncoder model = build_encoder(small_cfg(), 7);
    std::vector<int> ids(2 * 13, 0);
    CHECK_THROWS_AS(encoder_forward(model, ids, 2, 13), InputError);  // seq > max_seq
    CHECK_THROWS_AS(encoder_forward(model, ids, 3, 5), InputError);   // count mismatch
    std::vector<int> bad(2 * 4, 0);
    bad[3] = 11;  // vocab is 11, so id 11 is out of range
    CHECK_THROWS_AS(encoder_forward(model, bad, 2, 4), InputError);
}

TEST_CASE("fresh adapters leave the logits untouched on 100 random batches") {
    FrozenEncoder base = build_encoder(small_cfg(), 9);
    FrozenEncoder adapted = build_encoder(small_cfg(), 9);
    attach_adapters(adapted, plan_alternating(4), quiet_adapter(), 77);

    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t batch = 1 + rng.below(3);
        std::size_t seq = 1 + rng.below(12);
        std::vector<int> ids = random_tokens(batch * seq, 11, rng);
        Tensor a = encoder_forward(base, ids, batch, seq);
        Tensor b = encoder_forward(adapted, ids, batch, seq);
        REQUIRE(Tensor::max_abs_diff(a, b) == 0.0);
    }
}

TEST_CASE("attachment registers chains grouped by kind") {
    FrozenEncoder model = build_encoder(small_cfg(), 11);
    attach_adapters(model, plan_alternating(4), quiet_adapter(), 78);
    REQUIRE(model.chains.size() == 2);
    for (const Chain& chain : model.chains) REQUIRE(chain.modules.size() == 2);
    CHECK(model.site_at(0, MatrixKind::query) != nullptr);
    CHECK(model.site_at(0, MatrixKind::value) == nullptr);
    CHECK(model.site_at(1, MatrixKind::value) != nullptr);
    CHECK(model.site_at(3, MatrixKind::value)->position == 1);

    ModelDims dims = dims_of(small_cfg());
    CHECK(adapter_param_count(model) ==
          count_params(plan_alternating(4), dims, 4, Method::ssmlora));
    CHECK(trainable_param_count(model) ==
          adapter_param_count(model) + model.head_w.numel() + model.head_b.numel());

    CHECK_THROWS_AS(attach_adapters(model, plan_alternating(4), quiet_adapter(), 79), PlanError);

    FrozenEncoder oob = build_encoder(small_cfg(), 12);
    CHECK_THROWS_AS(attach_adapters(oob, plan_alternating(6), quiet_adapter(), 80), PlanError);
    CHECK_THROWS_AS(attach_adapters(oob, plan_skip_one(4), quiet_adapter(), 81), PlanError);
}

TEST_CASE("dense baseline attachment uses inline pairs, no chains") {
    FrozenEncoder model = build_encoder(small_cfg(), 13);
    attach_adapters(model, plan_dense(4, {MatrixKind::query, MatrixKind::value}),
                    quiet_adapter(), 82);
    CHECK(model.chains.empty());
    CHECK(model.sites.size() == 8);
    ModelDims dims = dims_of(small_cfg());
    CHECK(adapter_param_count(model) ==
          count_params(plan_dense(4, {MatrixKind::query, MatrixKind::value}), dims, 4,
                       Method::lora));
}

TEST_CASE("attention rows are proper distributions") {
    FrozenEncoder model = build_encoder(small_cfg(), 14);
    Rng rng(15);
    std::vector<int> ids = random_tokens(2 * 8, 11, rng);
    std::vector<Tensor> probs;
    ForwardOptions opts;
    opts.attn_probs = &probs;
    encoder_forward(model, ids, 2, 8, opts);
    REQUIRE(probs.size() == 4);
    for (const Tensor& p : probs) {
        REQUIRE(p.shape() == Shape{2, 2, 8, 8});
        for (std::size_t row = 0; row < 2 * 2 * 8; ++row) {
            double total = 0.0;
            for (std::size_t j = 0; j < 8; ++j) total += p[row * 8 + j];
            CHECK(std::abs(total - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("energized adapters change the logits and report their deltas") {
    FrozenEncoder base = build_encoder(small_cfg(), 16);
    FrozenEncoder adapted = build_encoder(small_cfg(), 16);
    attach_adapters(adapted, plan_alternating(4), quiet_adapter(), 83);
    energize(adapted, 84);

    Rng rng(17);
    std::vector<int> ids = random_tokens(2 * 8, 11, rng);
    std::vector<SiteDelta> deltas;
    ForwardOptions opts;
    opts.deltas = &deltas;
    Tensor got = encoder_forward(adapted, ids, 2, 8, opts);
    Tensor ref = encoder_forward(base, ids, 2, 8);
    CHECK(Tensor::max_abs_diff(got, ref) > 0.0);
    REQUIRE(deltas.size() == 4);
    for (const SiteDelta& d : deltas) {
        REQUIRE(d.delta.shape() == Shape{2, 8, 16});
        double energy = 0.0;
        for (std::size_t i = 0; i < d.delta.numel(); ++i) energy += std::abs(d.delta[i]);
        CHECK(energy > 0.0);
    }
}

TEST_CASE("evaluation is deterministic and training dropout is seeded") {
    FrozenEncoder model = build_encoder(small_cfg(), 18);
    AdapterConfig cfg = quiet_adapter();
    cfg.dropout = 0.3;
    attach_adapters(model, plan_alternating(4), cfg, 85);
    energize(model, 86);

    Rng rng(19);
    std::vector<int> ids = random_tokens(2 * 6, 11, rng);
    Tensor a = encoder_forward(model, ids, 2, 6);
    Tensor b = encoder_forward(model, ids, 2, 6);
    CHECK(Tensor::max_abs_diff(a, b) == 0.0);

    ForwardOptions train1;
    Rng r1(5);
    train1.training = true;
    train1.rng = &r1;
    Tensor t1 = encoder_forward(model, ids, 2, 6, train1);
    ForwardOptions train2;
    Rng r2(5);
    train2.training = true;
    train2.rng = &r2;
    Tensor t2 = encoder_forward(model, ids, 2, 6, train2);
    CHECK(Tensor::max_abs_diff(t1, t2) == 0.0);
    CHECK(Tensor::max_abs_diff(a, t1) > 0.0);
}

TEST_CASE("fused host carries skip-one chains and stays transparent at init") {
    EncoderConfig cfg = small_cfg();
    cfg.fused_qkv = true;
    FrozenEncoder base = build_encoder(cfg, 20);
    FrozenEncoder adapted = build_encoder(cfg, 20);
    attach_adapters(adapted, plan_skip_one(4), quiet_adapter(), 87);
    REQUIRE(adapted.chains.size() == 1);
    REQUIRE(adapted.chains[0].modules.size() == 2);
    CHECK(adapted.chains[0].modules[0].d_out == 48);

    Rng rng(21);
    std::vector<int> ids = random_tokens(2 * 7, 11, rng);
    CHECK(Tensor::max_abs_diff(encoder_forward(base, ids, 2, 7),
                               encoder_forward(adapted, ids, 2, 7)) == 0.0);

    ModelDims dims = dims_of(cfg);
    CHECK(adapter_param_count(adapted) ==
          count_params(plan_skip_one(4), dims, 4, Method::ssmlora));

    energize(adapted, 88);
    CHECK(Tensor::max_abs_diff(encoder_forward(base, ids, 2, 7),
                               encoder_forward(adapted, ids, 2, 7)) > 0.0);

    FrozenEncoder wrong = build_encoder(cfg, 22);
    CHECK_THROWS_AS(attach_adapters(wrong, plan_alternating(4), quiet_adapter(), 89), PlanError);
}

TEST_CASE("feed-forward sites adapt the widening projection") {
    FrozenEncoder base = build_encoder(small_cfg(), 23);
    FrozenEncoder adapted = build_encoder(small_cfg(), 23);
    InsertionPlan plan;
    for (std::size_t l = 0; l < 4; ++l)
        plan.entries.push_back({l, MatrixKind::ffn_in, Method::ssmlora});
    attach_adapters(adapted, plan, quiet_adapter(), 90);
    REQUIRE(adapted.chains.size() == 1);
    CHECK(adapted.chains[0].modules[0].d_out == 32);

    Rng rng(24);
    std::vector<int> ids = random_tokens(2 * 5, 11, rng);
    CHECK(Tensor::max_abs_diff(encoder_forward(base, ids, 2, 5),
                               encoder_forward(adapted, ids, 2, 5)) == 0.0);
    energize(adapted, 91);
    CHECK(Tensor::max_abs_diff(encoder_forward(base, ids, 2, 5),
                               encoder_forward(adapted, ids, 2, 5)) > 0.0);
}

TEST_CASE("base weights never receive gradients") {
    FrozenEncoder model = build_encoder(small_cfg(), 25);
    attach_adapters(model, plan_alternating(4), quiet_adapter(), 92);
    energize(model, 93);
    Rng rng(26);
    std::vector<int> ids = random_tokens(2 * 6, 11, rng);

    std::uint64_t before = base_hash(model);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor logits = encoder_forward(model, ids, 2, 6);
        tape.backward(cross_entropy(logits, {0, 2}));
    }
    CHECK(!model.tok_emb.has_grad());
    CHECK(!model.blocks[0].wq.has_grad());
    CHECK(!model.blocks[0].ff1.has_grad());
    CHECK(model.head_w.has_grad());
    bool any_adapter_grad = false;
    for (auto& [name, t] : named_trainable(model))
        if (t.has_grad()) any_adapter_grad = true;
    CHECK(any_adapter_grad);
    CHECK(base_hash(model) == before);
}

TEST_CASE("recorded states replay bit-exactly through the encoder") {
    FrozenEncoder model = build_encoder(small_cfg(), 27);
    attach_adapters(model, plan_alternating(4), quiet_adapter(), 94);
    energize(model, 95);
    Rng rng(28);
    std::vector<int> ids = random_tokens(2 * 6, 11, rng);

    StateTrace trace;
    ForwardOptions rec;
    rec.record = &trace;
    Tensor base = encoder_forward(model, ids, 2, 6, rec);
    REQUIRE(trace.size() == 2);

    ForwardOptions pin;
    pin.pins = &trace;
    Tensor replay = encoder_forward(model, ids, 2, 6, pin);
    CHECK(Tensor::max_abs_diff(base, replay) == 0.0);
}

TEST_CASE("adapter gradients through the whole encoder match pinned differences") {
    FrozenEncoder model = build_encoder(small_cfg(), 29);
    attach_adapters(model, plan_alternating(4), quiet_adapter(), 96);
    energize(model, 97);
    Rng rng(30);
    std::vector<int> ids = random_tokens(2 * 5, 11, rng);
    std::vector<int> labels{1, 2};

    StateTrace trace;
    {
        ForwardOptions rec;
        rec.record = &trace;
        encoder_forward(model, ids, 2, 5, rec);
    }
    auto live_loss = [&] {
        return cross_entropy(encoder_forward(model, ids, 2, 5), labels);
    };
    auto pinned_value = [&](const Tensor&) {
        ForwardOptions pin;
        pin.pins = &trace;
        return cross_entropy(encoder_forward(model, ids, 2, 5, pin), labels)[0];
    };

    Chain& chain = model.chains[0];
    for (Tensor* p : {&chain.modules[0].state, &chain.modules[1].control,
                      &chain.modules[1].up, &chain.modules[0].down}) {
        std::vector<double> ad = oracle::autodiff_grad(live_loss, *p);
        std::vector<double> fd = finite_diff(pinned_value, *p, 1e-5);
        for (std::size_t i = 0; i < ad.size(); ++i)
            CHECK(oracle::rel_err(ad[i], fd[i]) < 1e-5);
    }
    std::vector<double> ad = oracle::autodiff_grad(live_loss, model.head_w);
    std::vector<double> fd = finite_diff(pinned_value, model.head_w, 1e-5);
    for (std::size_t i = 0; i < ad.size(); ++i) CHECK(oracle::rel_err(ad[i], fd[i]) < 1e-5);
}

#include "ssmlora/chain.hpp"

#include <algorithm>

namespace ssmlora {

const char* kind_name(MatrixKind kind) {
    switch (kind) {
        case MatrixKind::query: return "query";
        case MatrixKind::key: return "key";
        case MatrixKind::value: return "value";
        case MatrixKind::ffn_in: return "ffn_in";
        case MatrixKind::fused_qkv: return "fused_qkv";
    }
    return "?";
}

MatrixKind kind_from_name(const std::string& name) {
    for (MatrixKind k : {MatrixKind::query, MatrixKind::key, MatrixKind::value,
                         MatrixKind::ffn_in, MatrixKind::fused_qkv})
        if (name == kind_name(k)) return k;
    throw ConfigError("unknown matrix kind '" + name + "'");
}

void validate_chain(const Chain& chain) {
    for (std::size_t t = 0; t < chain.modules.size(); ++t) {
        const TimeModule& m = chain.modules[t];
        if (m.position != t)
            throw PlanError(std::string("chain ") + kind_name(chain.kind) + ": module at index " +
                            std::to_string(t) + " claims position " + std::to_string(m.position));
        if (m.rank != chain.cfg.rank)
            throw PlanError(std::string("chain ") + kind_name(chain.kind) +
                            ": mixed ranks along one chain");
    }
}

PassState begin_pass(const std::vector<Chain>& chains, std::size_t batch, std::size_t seq) {
    if (batch < 1 || seq < 1)
        throw InputError("begin_pass: batch and seq must be at least 1");
    PassState pass;
    pass.batch = batch;
    pass.seq = seq;
    for (const Chain& chain : chains) {
        validate_chain(chain);
        if (pass.cursors.count(chain.kind))
            throw PlanError(std::string("duplicate chain of kind ") + kind_name(chain.kind));
        ChainCursor cur;
        cur.h = Tensor::zeros({batch, seq, chain.cfg.rank});
        pass.cursors.emplace(chain.kind, std::move(cur));
    }
    return pass;
}

Tensor chain_step(PassState& pass, const Chain& chain, std::size_t position, const Tensor& x) {
    auto it = pass.cursors.find(chain.kind);
    if (it == pass.cursors.end())
        throw SequenceError(std::string("chain ") + kind_name(chain.kind) +
                            " was not registered at pass start");
    ChainCursor& cur = it->second;
    if (position != cur.next)
        throw SequenceError(std::string("chain ") + kind_name(chain.kind) + ": expected position " +
                            std::to_string(cur.next) + ", got " + std::to_string(position));
    if (position >= chain.modules.size())
        throw SequenceError(std::string("chain ") + kind_name(chain.kind) + " exhausted: position " +
                            std::to_string(position) + " of " + std::to_string(chain.modules.size()));
    const TimeModule& m = chain.modules[position];
    if (x.shape() != Shape{pass.batch, pass.seq, m.d_in})
        throw ShapeError(std::string("chain ") + kind_name(chain.kind) + " step " +
                         std::to_string(position) + ": input " + shape_to_string(x.shape()) +
                         " does not match pass shape [" + std::to_string(pass.batch) + ", " +
                         std::to_string(pass.seq) + ", " + std::to_string(m.d_in) + "]");

    Tensor h_in = cur.h;
    if (pass.pins && position > 0) {
        auto pinned = pass.pins->find(chain.kind);
        if (pinned == pass.pins->end() || pinned->second.size() < position)
            throw SequenceError(std::string("no pinned state for chain ") + kind_name(chain.kind) +
                                " position " + std::to_string(position));
        h_in = Tensor::from_data({pass.batch, pass.seq, m.rank}, pinned->second[position - 1]);
    }

    ModuleOut out = module_forward(x, h_in, m, chain.cfg, pass.training, pass.rng);
    cur.h = out.h_out;
    cur.next = position + 1;
    if (pass.record) {
        auto& trace = (*pass.record)[chain.kind];
        trace.resize(std::max(trace.size(), position + 1));
        trace[position].assign(out.h_out.data(), out.h_out.data() + out.h_out.numel());
    }
    return out.delta;
}

std::vector<OracleStep> run_chain_oracle(const Chain& chain, const std::vector<Tensor>& xs) {
    validate_chain(chain);
    if (xs.size() != chain.modules.size())
        throw InputError("run_chain_oracle: " + std::to_string(xs.size()) + " inputs for " +
                         std::to_string(chain.modules.size()) + " modules");
    std::vector<OracleStep> steps;
    if (xs.empty()) return steps;

    std::size_t r = chain.cfg.rank;
    std::size_t positions = xs[0].numel() / xs[0].shape().back();
    std::vector<double> h(positions * r, 0.0);
    double gain = chain.cfg.alpha / double(r);

    for (std::size_t t = 0; t < xs.size(); ++t) {
        const TimeModule& m = chain.modules[t];
        const Tensor& x = xs[t];
        if (x.shape().empty() || x.shape().back() != m.d_in ||
            x.numel() / x.shape().back() != positions)
            throw ShapeError("run_chain_oracle: input " + std::to_string(t) + " has shape " +
                             shape_to_string(x.shape()));
        std::size_t d_in = m.d_in;
        std::size_t d_out = m.d_out;

        std::vector<double> x_new(positions * r, 0.0);
        for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t j = 0; j < r; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < d_in; ++i)
                    acc += x.data()[p * d_in + i] * m.down.data()[i * r + j];
                x_new[p * r + j] = acc;
            }

        std::vector<double> h_next(positions * r, 0.0);
        for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t j = 0; j < r; ++j) {
                double acc = h[p * r + j];
                for (std::size_t i = 0; i < r; ++i) {
                    acc += h[p * r + i] * m.state.data()[i * r + j];
                    acc += x_new[p * r + i] * m.control.data()[i * r + j];
                }
                h_next[p * r + j] = acc;
            }

        std::vector<double> mixed(positions * r);
        for (std::size_t p = 0; p < positions; ++p) {
            double lo = h_next[p * r], hi = h_next[p * r];
            for (std::size_t j = 1; j < r; ++j) {
                lo = std::min(lo, h_next[p * r + j]);
                hi = std::max(hi, h_next[p * r + j]);
            }
            double den = hi - lo + chain.cfg.epsilon;
            for (std::size_t j = 0; j < r; ++j)
                mixed[p * r + j] = x_new[p * r + j] + (h_next[p * r + j] - lo) / den;
        }

        OracleStep step;
        step.delta.assign(positions * d_out, 0.0);
        for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t o = 0; o < d_out; ++o) {
                double acc = 0.0;
                for (std::size_t j = 0; j < r; ++j)
                    acc += mixed[p * r + j] * m.up.data()[j * d_out + o];
                step.delta[p * d_out + o] = gain * acc;
            }
        step.h = h_next;
        h = std::move(h_next);
        steps.push_back(std::move(step));
    }
    return steps;
}

}  // namespace ssmlora

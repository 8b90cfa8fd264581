#pragma once

#include <map>
#include <vector>

#include "ssmlora/adapter.hpp"

namespace ssmlora {

enum class MatrixKind { query, key, value, ffn_in, fused_qkv };

const char* kind_name(MatrixKind kind);
MatrixKind kind_from_name(const std::string& name);

// Ordered modules of one matrix kind; hidden state flows through them in
// position order during a single forward pass.
struct Chain {
    MatrixKind kind = MatrixKind::query;
    AdapterConfig cfg;
    std::vector<TimeModule> modules;
};

// Positions must run 0..n-1 and every module must share the chain's rank.
void validate_chain(const Chain& chain);

// Recorded per-position state values of one pass, keyed by chain kind.
// Entry [kind][t] holds the state emitted by position t.
using StateTrace = std::map<MatrixKind, std::vector<std::vector<double>>>;

struct ChainCursor {
    Tensor h;
    std::size_t next = 0;
};

// Per-pass bookkeeping. States start at exactly zero and die with the
// pass; nothing carries over between passes.
struct PassState {
    std::size_t batch = 0;
    std::size_t seq = 0;
    bool training = false;
    Rng* rng = nullptr;
    // When set, every state handed to position t is replayed from the
    // trace instead of the live recurrence. This evaluates the truncated
    // function that the gradient-stop defines, which is what finite
    // differences must see to match reverse mode.
    const StateTrace* pins = nullptr;
    StateTrace* record = nullptr;  // when set, emitted states are captured
    std::map<MatrixKind, ChainCursor> cursors;
};

PassState begin_pass(const std::vector<Chain>& chains, std::size_t batch, std::size_t seq);

// Advances the chain by one module and returns its output delta. Steps
// must arrive in ascending position order; the position argument is the
// caller's claim of which module it is driving.
Tensor chain_step(PassState& pass, const Chain& chain, std::size_t position, const Tensor& x);

struct OracleStep {
    std::vector<double> delta;
    std::vector<double> h;
};

// Straight-line reference for the whole recurrence: plain loops, no tensor
// ops, no gradients, no dropout. xs holds one input per chain position.
std::vector<OracleStep> run_chain_oracle(const Chain& chain, const std::vector<Tensor>& xs);

}  // namespace ssmlora

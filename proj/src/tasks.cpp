#include "ssmlora/tasks.hpp"

#include "ssmlora/rng.hpp"

namespace ssmlora {

namespace {

constexpr std::uint64_t kEvalStream = 0x7f4a7c15u;

std::size_t min_vocab(const std::string& kind) {
    if (kind == "parity") return 2;
    if (kind == "copy_classify") return 2;
    if (kind == "needle") return 3;
    throw ConfigError("unknown task kind: " + kind);
}

std::size_t min_seq(const std::string& kind) {
    if (kind == "parity") return 1;
    return 2;
}

Example gen_parity(std::size_t seq_len, std::size_t vocab, Rng& rng) {
    Example ex;
    ex.tokens.resize(seq_len);
    int acc = 0;
    for (std::size_t t = 0; t < seq_len; ++t) {
        int id = static_cast<int>(rng.below(vocab));
        ex.tokens[t] = id;
        acc ^= id & 1;
    }
    ex.label = acc;
    return ex;
}

Example gen_copy(std::size_t seq_len, std::size_t vocab, Rng& rng) {
    Example ex;
    ex.tokens.resize(seq_len);
    int key = static_cast<int>(rng.below(vocab));
    ex.tokens[0] = key;
    for (std::size_t t = 1; t < seq_len; ++t)
        ex.tokens[t] = static_cast<int>(rng.below(vocab));
    std::size_t echo = 1 + rng.below(seq_len - 1);
    ex.tokens[echo] = key;
    ex.label = key;
    return ex;
}

Example gen_needle(std::size_t seq_len, std::size_t vocab, Rng& rng) {
    Example ex;
    ex.tokens.resize(seq_len);
    int marker = static_cast<int>(vocab) - 1;
    for (std::size_t t = 0; t < seq_len; ++t)
        ex.tokens[t] = static_cast<int>(rng.below(vocab - 1));
    std::size_t at = rng.below(seq_len - 1);
    ex.tokens[at] = marker;
    ex.label = ex.tokens[at + 1];
    return ex;
}

Dataset gen_count(const TaskSpec& spec, std::size_t count, std::size_t seq_len,
                  std::uint64_t seed) {
    Dataset ds;
    ds.classes = task_classes(spec);
    ds.vocab = spec.vocab;
    ds.examples.reserve(count);
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        if (spec.kind == "parity")
            ds.examples.push_back(gen_parity(seq_len, spec.vocab, rng));
        else if (spec.kind == "copy_classify")
            ds.examples.push_back(gen_copy(seq_len, spec.vocab, rng));
        else
            ds.examples.push_back(gen_needle(seq_len, spec.vocab, rng));
    }
    return ds;
}

}  // namespace

void validate_task_spec(const TaskSpec& spec) {
    std::size_t need = min_vocab(spec.kind);
    if (spec.vocab < need)
        throw ConfigError("task " + spec.kind + " needs vocab >= " + std::to_string(need) +
                          ", got " + std::to_string(spec.vocab));
    if (spec.seq_len < min_seq(spec.kind))
        throw ConfigError("task " + spec.kind + " needs seq_len >= " +
                          std::to_string(min_seq(spec.kind)) + ", got " +
                          std::to_string(spec.seq_len));
}

std::size_t task_classes(const TaskSpec& spec) {
    validate_task_spec(spec);
    if (spec.kind == "parity") return 2;
    if (spec.kind == "copy_classify") return spec.vocab;
    return spec.vocab - 1;
}

Dataset gen_task(const TaskSpec& spec) {
    return gen_count(spec, spec.n_train, spec.seq_len, spec.seed);
}

Dataset gen_task_eval(const TaskSpec& spec) {
    return gen_count(spec, spec.n_eval, spec.seq_len, spec.seed ^ kEvalStream);
}

Dataset gen_task_at(const TaskSpec& spec, std::size_t count, std::size_t seq_len,
                    std::uint64_t seed) {
    if (seq_len < min_seq(spec.kind))
        throw ConfigError("task " + spec.kind + " needs seq_len >= " +
                          std::to_string(min_seq(spec.kind)));
    return gen_count(spec, count, seq_len, seed);
}

Dataset gen_task_lengths(const TaskSpec& spec, const std::vector<std::size_t>& lengths,
                         std::size_t count_per) {
    if (lengths.empty()) throw InputError("gen_task_lengths: no lengths given");
    Dataset all;
    all.classes = task_classes(spec);
    all.vocab = spec.vocab;
    std::uint64_t stream = spec.seed ^ kEvalStream;
    for (std::size_t len : lengths) {
        Dataset part = gen_task_at(spec, count_per, len, stream ^ (0x9e3779b97f4a7c15ull * len));
        all.examples.insert(all.examples.end(), part.examples.begin(), part.examples.end());
    }
    return all;
}

}  // namespace ssmlora

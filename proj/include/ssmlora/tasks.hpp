#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmlora/errors.hpp"

namespace ssmlora {

// Synthetic sequence-classification tasks.
//   parity:        label = XOR of the low bit of every token id
//   copy_classify: label = the token at position 0, which also appears
//                  at least once later in the sequence
//   needle:        a marker token (the top vocab id) occurs exactly once;
//                  label = the token right after it
struct TaskSpec {
    std::string kind = "parity";
    std::size_t seq_len = 16;
    std::size_t n_train = 256;
    std::size_t n_eval = 256;
    std::size_t vocab = 16;
    std::uint64_t seed = 1;
};

struct Example {
    std::vector<int> tokens;
    int label = 0;
};

struct Dataset {
    std::vector<Example> examples;
    std::size_t classes = 2;
    std::size_t vocab = 0;
};

void validate_task_spec(const TaskSpec& spec);
std::size_t task_classes(const TaskSpec& spec);

// The training split: spec.n_train examples drawn from spec.seed.
Dataset gen_task(const TaskSpec& spec);

// The held-out split: spec.n_eval examples from an independent stream.
Dataset gen_task_eval(const TaskSpec& spec);

// Fixed-count split at an explicit length and seed; building block for
// mixed-length (binned) evaluation sets.
Dataset gen_task_at(const TaskSpec& spec, std::size_t count, std::size_t seq_len,
                    std::uint64_t seed);

// count_per examples of every requested length, concatenated.
Dataset gen_task_lengths(const TaskSpec& spec, const std::vector<std::size_t>& lengths,
                         std::size_t count_per);

}  // namespace ssmlora

#pragma once

#include <string>
#include <vector>

#include "ssmlora/adapter.hpp"
#include "ssmlora/encoder.hpp"
#include "ssmlora/tasks.hpp"
#include "ssmlora/train.hpp"

namespace ssmlora {

// One file fully determines a run. Flat sections, `key = value` lines,
// `#` comments. Unknown keys are rejected by name.
struct RunConfig {
    EncoderConfig encoder;
    AdapterConfig adapter;
    std::string plan = "alternating";  // alternating | skip-one | dense-lora | none
    std::vector<std::size_t> plan_ranks = {1, 2, 4, 8, 16};
    TaskSpec task;
    TrainOptions train;

    std::size_t gradcheck_coords = 64;
    double gradcheck_delta = 1e-5;
    double gradcheck_tolerance = 1e-5;
    std::size_t gradcheck_batch = 4;
    bool gradcheck_energize = true;

    std::vector<std::size_t> eval_lengths;  // empty -> just task.seq_len
    std::size_t eval_per_length = 0;        // 0 -> task.n_eval

    std::vector<std::size_t> bench_seq_lens = {8, 16, 32};
    std::size_t bench_batch = 8;
    std::size_t bench_repeats = 3;

    std::string out_dir = "out";
    std::string format = "csv";  // csv | json; picks the stdout rendering
    std::uint64_t model_seed = 7;
};

RunConfig parse_run_config_text(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Cross-field consistency: rank <= width, seq_len <= max_seq, the task
// vocabulary fits the embedding table, and the head width matches the
// task's class count.
void validate_run_config(const RunConfig& cfg);

// The insertion plan a config names, sized to its encoder.
InsertionPlan plan_from_config(const RunConfig& cfg);

// Dense query+value adapters, the budget baseline.
InsertionPlan baseline_plan(std::size_t layers);

}  // namespace ssmlora

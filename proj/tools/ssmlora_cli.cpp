#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ssmlora/checkpoint.hpp"
#include "ssmlora/config.hpp"
#include "ssmlora/report.hpp"

namespace fs = std::filesystem;
using namespace ssmlora;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    std::string format_override;
    std::int64_t seed_override = -1;
    bool seed_given = false;
};

RunConfig load_and_finalize(const CommonArgs& args) {
    RunConfig cfg = load_run_config(args.config_path);
    if (!args.out_override.empty()) cfg.out_dir = args.out_override;
    if (!args.format_override.empty()) cfg.format = args.format_override;
    if (args.seed_given) {
        if (args.seed_override < 0) throw ConfigError("--seed must be non-negative");
        cfg.task.seed = static_cast<std::uint64_t>(args.seed_override);
        cfg.train.seed = static_cast<std::uint64_t>(args.seed_override);
    }
    validate_run_config(cfg);
    fs::create_directories(cfg.out_dir);
    return cfg;
}

std::string out_path(const RunConfig& cfg, const std::string& file) {
    return (fs::path(cfg.out_dir) / file).string();
}

// Every report lands in both renderings; format picks the stdout echo.
void emit(const RunConfig& cfg, const Report& report, const std::string& stem,
          bool echo = false) {
    write_text_file(out_path(cfg, stem + ".csv"), render_csv(report));
    write_text_file(out_path(cfg, stem + ".json"), render_json(report));
    if (echo) std::cout << (cfg.format == "json" ? render_json(report) : render_csv(report));
}

FrozenEncoder build_model(const RunConfig& cfg) {
    FrozenEncoder model = build_encoder(cfg.encoder, cfg.model_seed);
    InsertionPlan plan = plan_from_config(cfg);
    if (!plan.entries.empty()) attach_adapters(model, plan, cfg.adapter, cfg.model_seed + 1);
    return model;
}

std::string plan_method(const RunConfig& cfg) {
    if (cfg.plan == "none") return "none";
    return cfg.plan == "dense-lora" ? "lora" : "ssmlora";
}

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

int cmd_plan(const RunConfig& cfg) {
    const ModelDims dims = dims_of(cfg.encoder);
    std::vector<std::pair<std::string, InsertionPlan>> plans;
    if (cfg.plan == "none") {
        plans.emplace_back("none", InsertionPlan{});
    } else {
        plans.emplace_back("lora_dense_qv", baseline_plan(cfg.encoder.layers));
        if (cfg.plan == "alternating")
            plans.emplace_back("ssmlora_alternating", plan_alternating(cfg.encoder.layers));
        else if (cfg.plan == "skip-one")
            plans.emplace_back("ssmlora_skip_one", plan_skip_one(cfg.encoder.layers));
    }
    emit(cfg, budget_to_report(budget_report(plans, dims, cfg.plan_ranks)), "budget", true);
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    FrozenEncoder model = build_model(cfg);
    if (model.sites.empty()) throw ConfigError("train needs a plan with adapters (plan.kind != none)");
    Metrics metrics = train(model, cfg.task, cfg.train);

    CheckpointMeta meta;
    meta.plan = cfg.plan;
    meta.task_kind = cfg.task.kind;
    meta.dims = dims_of(cfg.encoder);
    meta.rank = cfg.adapter.rank;
    meta.model_seed = cfg.model_seed;
    meta.adapter_seed = cfg.model_seed + 1;
    meta.train_seed = cfg.train.seed;
    save_checkpoint(out_path(cfg, "checkpoint.bin"), model, meta);

    write_text_file(out_path(cfg, "metrics.jsonl"), render_jsonl(epochs_to_report(metrics)));
    emit(cfg, epochs_to_report(metrics), "metrics");
    emit(cfg, timing_to_report(metrics), "timing");
    emit(cfg, summary_to_report(cfg.task.kind, cfg.plan, plan_method(cfg), cfg.adapter.rank,
                                metrics),
         "summary", true);
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    FrozenEncoder model = build_model(cfg);
    const std::string ckpt = out_path(cfg, "checkpoint.bin");
    if (fs::exists(ckpt)) restore_checkpoint(model, load_checkpoint(ckpt));

    std::vector<std::size_t> lengths = cfg.eval_lengths;
    if (lengths.empty()) lengths.push_back(cfg.task.seq_len);
    const std::size_t per = cfg.eval_per_length ? cfg.eval_per_length : cfg.task.n_eval;
    Dataset data = gen_task_lengths(cfg.task, lengths, per);
    emit(cfg, eval_to_report(evaluate(model, data, cfg.train.batch_size)), "eval", true);
    return 0;
}

int cmd_gradcheck(const RunConfig& cfg) {
    FrozenEncoder model = build_model(cfg);
    if (model.sites.empty())
        throw ConfigError("gradcheck needs a plan with adapters (plan.kind != none)");
    if (cfg.gradcheck_energize) randomize_adapters(model, 0.2, cfg.model_seed + 2);

    Dataset data = gen_task(cfg.task);
    GradcheckReport report = gradcheck(model, data, cfg.gradcheck_coords, cfg.gradcheck_delta,
                                       cfg.train.seed, cfg.gradcheck_batch);
    emit(cfg, gradcheck_to_report(report), "gradcheck", true);

    const bool pass = report.max_rel_err < cfg.gradcheck_tolerance;
    std::cout << "gradcheck " << (pass ? "pass" : "FAIL") << ": max_rel_err "
              << format_cell(report.max_rel_err) << " vs tolerance "
              << format_cell(cfg.gradcheck_tolerance) << " (worst " << report.worst.name << "["
              << report.worst.coord << "])\n";
    return pass ? 0 : 4;
}

int cmd_bench(const RunConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> variants;  // (plan kind, row name)
    if (cfg.plan == "none") {
        variants.emplace_back("none", "none");
    } else {
        variants.emplace_back(cfg.plan, cfg.plan);
        if (cfg.plan != "dense-lora") variants.emplace_back("dense-lora", "dense-lora");
    }

    std::vector<BenchRow> rows;
    for (std::size_t seq_len : cfg.bench_seq_lens) {
        for (const auto& [plan_kind, row_name] : variants) {
            RunConfig variant = cfg;
            variant.plan = plan_kind;
            FrozenEncoder model = build_model(variant);
            Dataset data = gen_task_at(cfg.task, cfg.bench_batch, seq_len, cfg.task.seed);
            std::vector<int> tokens;
            std::vector<int> labels;
            for (const Example& ex : data.examples) {
                tokens.insert(tokens.end(), ex.tokens.begin(), ex.tokens.end());
                labels.push_back(ex.label);
            }

            BenchRow row;
            row.seq_len = seq_len;
            row.plan = row_name;
            row.method = plan_method(variant);
            row.adapter_params = adapter_param_count(model);
            row.adapter_bytes = row.adapter_params * sizeof(double);

            reset_peak_tensor_bytes();
            double fwd_best = 0.0;
            double bwd_best = 0.0;
            for (std::size_t rep = 0; rep < cfg.bench_repeats; ++rep) {
                double t0 = now_s();
                encoder_forward(model, tokens, cfg.bench_batch, seq_len);
                double fwd = now_s() - t0;

                t0 = now_s();
                Tape tape;
                {
                    TapeScope scope(tape);
                    Tensor logits = encoder_forward(model, tokens, cfg.bench_batch, seq_len);
                    Tensor loss = cross_entropy(logits, labels);
                    tape.backward(loss);
                }
                double bwd = now_s() - t0;
                for (auto& [name, t] : named_trainable(model)) {
                    (void)name;
                    t.zero_grad();
                }
                if (rep == 0 || fwd < fwd_best) fwd_best = fwd;
                if (rep == 0 || bwd < bwd_best) bwd_best = bwd;
            }
            row.forward_seconds = fwd_best;
            row.backward_seconds = bwd_best;
            row.peak_bytes = peak_tensor_bytes();
            rows.push_back(row);
        }
    }
    emit(cfg, bench_to_report(rows), "bench", true);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SSMLoRA: chained low-rank adapters on a frozen encoder"};
    app.require_subcommand(1);

    CommonArgs args;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", args.config_path, "run configuration file")->required();
        cmd->add_option("--out", args.out_override, "output directory (overrides config)");
        cmd->add_option("--seed", args.seed_override,
                        "task and training seed (overrides config)");
        cmd->add_option("--format", args.format_override, "stdout rendering: csv or json");
        return cmd;
    };
    CLI::App* plan = add_common(app.add_subcommand("plan", "parameter budget table"));
    CLI::App* train = add_common(app.add_subcommand("train", "fit adapters and head"));
    CLI::App* eval = add_common(app.add_subcommand("eval", "accuracy by sequence length"));
    CLI::App* gradcheck =
        add_common(app.add_subcommand("gradcheck", "analytic vs numeric gradients"));
    CLI::App* bench = add_common(app.add_subcommand("bench", "runtime and allocation profile"));

    CLI11_PARSE(app, argc, argv);
    args.seed_given = app.get_subcommands().front()->count("--seed") > 0;

    try {
        RunConfig cfg = load_and_finalize(args);
        if (plan->parsed()) return cmd_plan(cfg);
        if (train->parsed()) return cmd_train(cfg);
        if (eval->parsed()) return cmd_eval(cfg);
        if (gradcheck->parsed()) return cmd_gradcheck(cfg);
        if (bench->parsed()) return cmd_bench(cfg);
        std::cerr << "no subcommand\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const PlanError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const InputError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const TrainError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
}

// Acceptance gate: one line per criterion, PASS/FAIL, nonzero exit on any FAIL.
// argv[1] (optional) points at the CLI binary for the determinism criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ssmlora/config.hpp"
#include "ssmlora/tasks.hpp"
#include "ssmlora/train.hpp"

namespace fs = std::filesystem;
using namespace ssmlora;

namespace {

int g_failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << " :: " << detail << "\n";
    if (!ok) ++g_failures;
}

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(10);
    ss << v;
    return ss.str();
}

// ---- criterion 1: exact parameter counts at L=24, d=1024 ----

void check_param_counts() {
    const double t0 = now_s();
    const ModelDims dims{24, 1024, 0, 0};
    const std::vector<std::size_t> ranks = {1, 2, 4, 8, 16};
    const std::vector<std::size_t> lora_expected = {98304, 196608, 393216, 786432, 1572864};
    const std::vector<std::size_t> ssm_expected = {49200, 98496, 197376, 396288, 798720};

    const InsertionPlan dense = plan_dense(24, {MatrixKind::query, MatrixKind::value});
    const InsertionPlan alternating = plan_alternating(24);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        if (count_params(dense, dims, ranks[i], Method::lora) == lora_expected[i]) ++hits;
        if (count_params(alternating, dims, ranks[i], Method::ssmlora) == ssm_expected[i]) ++hits;
    }
    const double dt = now_s() - t0;
    report("param-counts-exact", hits == 10 && dt < 1.0,
           std::to_string(hits) + "/10 pairs integer-exact at L=24 d=1024, " + fmt(dt) + "s (< 1s)");
}

// ---- criterion 2: ratio == 1/2 + r/(2d) exactly ----

void check_ratio() {
    std::size_t checked = 0;
    std::size_t exact = 0;
    for (std::size_t d : {64, 128, 256, 512, 1024}) {
        for (std::size_t r : {1, 2, 4, 8, 16}) {
            const ModelDims dims{8, d, 0, 0};
            const double lora =
                double(count_params(plan_dense(8, {MatrixKind::query, MatrixKind::value}), dims, r,
                                    Method::lora));
            const double ssm = double(count_params(plan_alternating(8), dims, r, Method::ssmlora));
            ++checked;
            if (ssm / lora == 0.5 + double(r) / (2.0 * double(d))) ++exact;
        }
    }
    report("param-ratio-exact", exact == checked,
           std::to_string(exact) + "/" + std::to_string(checked) +
               " (d, r) pairs equal 1/2 + r/(2d) bit-exactly");
}

// ---- criterion 3: fresh adapters leave logits untouched ----

std::vector<int> random_tokens(Rng& rng, std::size_t count, std::size_t vocab) {
    std::vector<int> ids(count);
    for (int& id : ids) id = static_cast<int>(rng.below(vocab));
    return ids;
}

void check_transparency() {
    const double t0 = now_s();
    EncoderConfig cfg;
    cfg.layers = 4;
    cfg.width = 32;
    cfg.heads = 4;
    cfg.ffn_width = 64;
    cfg.vocab = 19;
    cfg.max_seq = 12;
    cfg.classes = 3;

    AdapterConfig acfg;
    acfg.rank = 8;

    double worst = 0.0;
    std::size_t batches = 0;
    Rng rng(404);
    auto drive = [&](bool fused, const InsertionPlan& plan) {
        EncoderConfig host = cfg;
        host.fused_qkv = fused;
        FrozenEncoder base = build_encoder(host, 90);
        FrozenEncoder adapted = build_encoder(host, 90);
        attach_adapters(adapted, plan, acfg, 91);
        for (std::size_t trial = 0; trial < 100; ++trial) {
            const std::size_t batch = 1 + rng.below(4);
            const std::size_t seq = 1 + rng.below(host.max_seq);
            std::vector<int> ids = random_tokens(rng, batch * seq, host.vocab);
            Tensor want = encoder_forward(base, ids, batch, seq);
            Tensor got = encoder_forward(adapted, ids, batch, seq);
            worst = std::max(worst, Tensor::max_abs_diff(want, got));
            ++batches;
        }
    };
    drive(false, plan_alternating(cfg.layers));
    drive(false, plan_dense(cfg.layers, {MatrixKind::query, MatrixKind::value}));
    drive(true, plan_skip_one(cfg.layers));

    const double dt = now_s() - t0;
    report("zero-init-transparency", worst == 0.0 && dt < 10.0,
           "max |delta-logit| " + fmt(worst) + " over " + std::to_string(batches) +
               " random batches x 3 plans, " + fmt(dt) + "s (< 10s)");
}

// ---- criterion 4: chain steps match the straight-line reference ----

void check_recurrence_oracle() {
    Rng master(2026);
    double worst = 0.0;
    for (std::size_t c = 0; c < 50; ++c) {
        const std::size_t length = 1 + master.below(8);
        const std::size_t d = 1 + master.below(64);
        const std::size_t r = 1 + master.below(std::min<std::size_t>(16, d));
        const std::size_t batch = 1 + master.below(3);
        const std::size_t seq = 1 + master.below(4);

        Chain chain;
        chain.kind = MatrixKind::query;
        chain.cfg.rank = r;
        chain.cfg.dropout = 0.0;
        for (std::size_t t = 0; t < length; ++t) {
            TimeModule m = init_time_module(d, d, chain.cfg, t, master.next_u64());
            for (Tensor* w : {&m.up, &m.state, &m.control})
                for (std::size_t i = 0; i < w->numel(); ++i)
                    w->data()[i] = master.normal(0.0, 0.4);
            chain.modules.push_back(std::move(m));
        }
        std::vector<Tensor> xs;
        for (std::size_t t = 0; t < length; ++t)
            xs.push_back(Tensor::randn({batch, seq, d}, master));

        std::vector<OracleStep> want = run_chain_oracle(chain, xs);
        PassState pass = begin_pass({chain}, batch, seq);
        StateTrace trace;
        pass.record = &trace;
        for (std::size_t t = 0; t < length; ++t) {
            Tensor delta = chain_step(pass, chain, t, xs[t]);
            for (std::size_t i = 0; i < delta.numel(); ++i)
                worst = std::max(worst, std::abs(delta[i] - want[t].delta[i]));
            const std::vector<double>& h = trace.at(MatrixKind::query)[t];
            for (std::size_t i = 0; i < h.size(); ++i)
                worst = std::max(worst, std::abs(h[i] - want[t].h[i]));
        }
    }
    report("recurrence-oracle", worst < 1e-10,
           "50 seeded chains (len<=8, r<=16, d<=64): worst |live - reference| " + fmt(worst) +
               " (< 1e-10)");
}

// ---- criteria 5 and 6a: sampled gradients vs finite differences ----

FrozenEncoder gradcheck_model() {
    EncoderConfig cfg;
    cfg.layers = 4;
    cfg.width = 32;
    cfg.heads = 4;
    cfg.ffn_width = 64;
    cfg.vocab = 8;
    cfg.max_seq = 8;
    cfg.classes = 8;
    FrozenEncoder model = build_encoder(cfg, 70);
    AdapterConfig acfg;
    acfg.rank = 8;
    attach_adapters(model, plan_alternating(cfg.layers), acfg, 71);
    randomize_adapters(model, 0.2, 72);
    return model;
}

void check_gradients() {
    const double t0 = now_s();
    FrozenEncoder model = gradcheck_model();
    TaskSpec spec;
    spec.kind = "copy_classify";
    spec.vocab = 8;
    spec.seq_len = 8;
    spec.n_train = 4;
    spec.seed = 73;
    GradcheckReport rep = gradcheck(model, gen_task(spec), 64, 1e-5, 74, 4);
    const double dt = now_s() - t0;

    // 4 modules x 4 matrices, 64 sampled coordinates each
    const bool coords_ok = rep.coords_checked == 1024 && rep.per_matrix.size() == 16;
    report("gradient-check", rep.max_rel_err < 1e-5 && coords_ok && dt < 120.0,
           std::to_string(rep.coords_checked) + " coords (64/matrix), max rel err " +
               fmt(rep.max_rel_err) + " (< 1e-5), " + fmt(dt) + "s (< 2min)");

    double state_worst = 0.0;
    std::size_t state_entries = 0;
    for (const CoordCheck& entry : rep.per_matrix) {
        const bool is_state = entry.name.find(".state") != std::string::npos ||
                              entry.name.find(".control") != std::string::npos;
        if (!is_state) continue;
        ++state_entries;
        state_worst = std::max(state_worst, entry.rel_err);
    }

    // hand-off freezing: the numeric side of the check holds downstream
    // state constant, so agreement to 1e-6 verifies the detach contract
    const bool stop_ok = state_entries == 8 && state_worst < 1e-6;

    FrozenEncoder trainee = build_encoder(model.cfg, 75);
    AdapterConfig acfg;
    acfg.rank = 4;
    attach_adapters(trainee, plan_alternating(model.cfg.layers), acfg, 76);
    const std::uint64_t hash_before = base_hash(trainee);
    TaskSpec tiny;
    tiny.kind = "copy_classify";
    tiny.vocab = 8;
    tiny.seq_len = 8;
    tiny.n_train = 32;
    tiny.n_eval = 16;
    tiny.seed = 77;
    TrainOptions opts;
    opts.lr = 0.01;
    opts.batch_size = 16;
    opts.max_epochs = 3;
    opts.patience = 3;
    train(trainee, tiny, opts);
    const std::uint64_t hash_after = base_hash(trainee);

    report("gradient-stop-and-frozen-base", stop_ok && hash_before == hash_after,
           "state/control rel err " + fmt(state_worst) + " (< 1e-6) across " +
               std::to_string(state_entries) + " matrices under frozen hand-offs; base hash " +
               (hash_before == hash_after ? "bit-identical" : "CHANGED") + " across training");
}

// ---- criterion 7: state normalization range ----

void check_normalization() {
    Rng rng(505);
    bool in_range = true;
    std::size_t vectors = 0;
    for (std::size_t i = 0; i < 10000; ++i) {
        const std::size_t r = 1 + rng.below(16);
        const double scale = std::exp(rng.normal(0.0, 2.0));
        Tensor h = Tensor::randn({1, 1, r}, rng, scale);
        Tensor out = normalize_state(h, 1e-5);
        for (std::size_t k = 0; k < out.numel(); ++k)
            if (!(out[k] >= 0.0 && out[k] < 1.0)) in_range = false;
        ++vectors;
    }

    bool constants_zero = true;
    for (std::size_t i = 0; i < 500; ++i) {
        const std::size_t r = 1 + rng.below(16);
        Tensor h = Tensor::full({1, 1, r}, rng.normal(0.0, 5.0));
        Tensor out = normalize_state(h, 1e-5);
        for (std::size_t k = 0; k < out.numel(); ++k)
            if (out[k] != 0.0) constants_zero = false;
    }

    report("state-normalization", in_range && constants_zero,
           std::to_string(vectors) + " random vectors in [0, 1); constant vectors map to exact 0");
}

// ---- criterion 8: matched-budget comparison at desk scale ----

struct RunOutcome {
    double train_acc = 0.0;
    double eval_acc = 0.0;
    std::size_t adapter_params = 0;
    std::size_t epochs = 0;
    double seconds = 0.0;
};

RunOutcome comparative_run(const std::string& plan_kind, const TaskSpec& task,
                           const TrainOptions& opts, std::size_t classes, std::size_t max_seq) {
    EncoderConfig cfg;
    cfg.layers = 4;
    cfg.width = 64;
    cfg.heads = 4;
    cfg.ffn_width = 128;
    cfg.vocab = 16;
    cfg.max_seq = max_seq;
    cfg.classes = classes;

    FrozenEncoder model = build_encoder(cfg, 7);
    AdapterConfig acfg;
    acfg.rank = 8;
    acfg.alpha = 16.0;
    acfg.dropout = 0.0;
    const InsertionPlan plan =
        plan_kind == "alternating" ? plan_alternating(cfg.layers) : baseline_plan(cfg.layers);
    attach_adapters(model, plan, acfg, 8);

    RunOutcome out;
    const double t0 = now_s();
    Metrics metrics = train(model, task, opts);
    Dataset full_eval = gen_task_lengths(task, {task.seq_len}, task.n_eval);
    out.eval_acc = evaluate(model, full_eval, opts.batch_size).accuracy;
    out.seconds = now_s() - t0;
    out.train_acc = metrics.final_train_acc;
    out.adapter_params = adapter_param_count(model);
    out.epochs = metrics.epochs.size();
    return out;
}

void check_comparative() {
    TaskSpec parity;
    parity.kind = "parity";
    parity.seq_len = 64;
    parity.n_train = 64;
    parity.n_eval = 512;
    parity.vocab = 16;
    parity.seed = 1;
    TrainOptions popts;
    popts.lr = 0.01;
    popts.batch_size = 32;
    popts.max_epochs = 200;
    popts.patience = 200;
    popts.seed = 1;
    popts.eval_subset = 32;
    popts.stop_train_acc = 0.95;

    TaskSpec copy;
    copy.kind = "copy_classify";
    copy.seq_len = 32;
    copy.n_train = 256;
    copy.n_eval = 512;
    copy.vocab = 16;
    copy.seed = 1;
    TrainOptions copts;
    copts.lr = 0.01;
    copts.batch_size = 32;
    copts.max_epochs = 12;
    copts.patience = 12;
    copts.seed = 1;
    copts.eval_subset = 64;

    RunOutcome p_ssm = comparative_run("alternating", parity, popts, 2, 64);
    RunOutcome p_lora = comparative_run("dense", parity, popts, 2, 64);
    RunOutcome c_ssm = comparative_run("alternating", copy, copts, 16, 32);
    RunOutcome c_lora = comparative_run("dense", copy, copts, 16, 32);

    const double parity_gap = std::abs(p_ssm.eval_acc - p_lora.eval_acc);
    const double copy_gap = std::abs(c_ssm.eval_acc - c_lora.eval_acc);
    const double ratio = double(p_ssm.adapter_params) / double(p_lora.adapter_params);

    // measured once and pinned: parity 0.494140625 vs 0.4765625 after both
    // memorize to 0.953125; copy-classify 1.0 vs 1.0. The exact parameter
    // ratio at d=64, r=8 is 1/2 + r/(2d) = 0.5625.
    const bool parity_ok = p_ssm.train_acc >= 0.95 && p_lora.train_acc >= 0.95 &&
                           parity_gap <= 0.02 && p_ssm.eval_acc >= 0.47 && p_ssm.eval_acc <= 0.52;
    const bool copy_ok = copy_gap <= 0.02 && c_ssm.eval_acc >= 0.99 && c_lora.eval_acc >= 0.99;
    const bool params_ok = p_ssm.adapter_params == 4608 && p_lora.adapter_params == 8192 &&
                           ratio == 0.5625;
    const bool time_ok = p_ssm.seconds < 300 && p_lora.seconds < 300 && c_ssm.seconds < 300 &&
                         c_lora.seconds < 300;

    report("comparative-training", parity_ok && copy_ok && params_ok && time_ok,
           "parity eval " + fmt(p_ssm.eval_acc) + " vs " + fmt(p_lora.eval_acc) + " (gap " +
               fmt(parity_gap) + " <= 0.02, both memorize >= 0.95); copy eval " +
               fmt(c_ssm.eval_acc) + " vs " + fmt(c_lora.eval_acc) + " (gap " + fmt(copy_gap) +
               "); adapter params 4608/8192 = " + fmt(ratio) +
               " (exact 1/2 + r/(2d)); slowest run " +
               fmt(std::max(std::max(p_ssm.seconds, p_lora.seconds),
                            std::max(c_ssm.seconds, c_lora.seconds))) +
               "s (< 300s)");
}

// ---- criterion 9: CLI reruns are byte-identical ----

const char* kCliConfig = R"([encoder]
layers = 2
width = 16
heads = 2
ffn_width = 32
vocab = 8
max_seq = 16
classes = 8

[adapter]
rank = 4
alpha = 8
dropout = 0.1

[plan]
kind = alternating

[task]
kind = copy_classify
seq_len = 8
n_train = 32
n_eval = 16
vocab = 8
seed = 1

[train]
lr = 0.005
batch_size = 16
max_epochs = 2
patience = 2
seed = 1

[gradcheck]
coords = 8

[bench]
seq_lens = 4
batch = 2
repeats = 1
)";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool same_bytes(const fs::path& a, const fs::path& b) {
    return fs::exists(a) && fs::exists(b) && slurp(a) == slurp(b);
}

// bench rows carry wallclock; compare everything except the two time columns
bool same_bench(const fs::path& a, const fs::path& b) {
    std::stringstream sa(slurp(a)), sb(slurp(b));
    std::string la, lb;
    while (true) {
        const bool ga = static_cast<bool>(std::getline(sa, la));
        const bool gb = static_cast<bool>(std::getline(sb, lb));
        if (ga != gb) return false;
        if (!ga) return true;
        auto split = [](const std::string& s) {
            std::vector<std::string> cells;
            std::stringstream ls(s);
            std::string c;
            while (std::getline(ls, c, ',')) cells.push_back(c);
            return cells;
        };
        std::vector<std::string> ca = split(la), cb = split(lb);
        if (ca.size() != cb.size()) return false;
        for (std::size_t i = 0; i < ca.size(); ++i) {
            if (i == 6 || i == 7) continue;  // forward_seconds, backward_seconds
            if (ca[i] != cb[i]) return false;
        }
    }
}

void check_cli_determinism(const std::string& cli) {
    if (cli.empty()) {
        report("cli-determinism", false, "no CLI binary path supplied");
        return;
    }
    const fs::path root = fs::temp_directory_path() / "ssmlora_acceptance_cli";
    fs::remove_all(root);
    fs::create_directories(root);
    const fs::path cfg = root / "run.cfg";
    std::ofstream(cfg) << kCliConfig;

    auto run = [&](const std::string& sub, const fs::path& out) {
        const std::string cmd = "\"" + cli + "\" " + sub + " --config \"" + cfg.string() +
                                "\" --out \"" + out.string() + "\" > /dev/null 2>&1";
        return std::system(cmd.c_str()) == 0;
    };

    bool ran = true;
    for (const char* sub : {"plan", "train", "eval", "gradcheck", "bench"}) {
        ran = ran && run(sub, root / (std::string(sub) + "_a"));
        ran = ran && run(sub, root / (std::string(sub) + "_b"));
    }

    std::vector<std::string> mismatches;
    auto expect_same = [&](const std::string& sub, const std::string& file) {
        if (!same_bytes(root / (sub + "_a") / file, root / (sub + "_b") / file))
            mismatches.push_back(sub + "/" + file);
    };
    expect_same("plan", "budget.csv");
    expect_same("plan", "budget.json");
    expect_same("train", "checkpoint.bin");
    expect_same("train", "metrics.jsonl");
    expect_same("train", "metrics.csv");
    expect_same("train", "metrics.json");
    expect_same("train", "summary.csv");
    expect_same("train", "summary.json");
    expect_same("eval", "eval.csv");
    expect_same("eval", "eval.json");
    expect_same("gradcheck", "gradcheck.csv");
    expect_same("gradcheck", "gradcheck.json");
    if (!same_bench(root / "bench_a" / "bench.csv", root / "bench_b" / "bench.csv"))
        mismatches.push_back("bench/bench.csv (non-time columns)");

    std::string detail;
    if (!ran) {
        detail = "a CLI invocation exited nonzero";
    } else if (mismatches.empty()) {
        detail = "plan/train/eval/gradcheck reruns byte-identical; bench identical off the "
                 "wallclock columns";
    } else {
        detail = "mismatch in";
        for (const std::string& m : mismatches) detail += " " + m;
    }
    report("cli-determinism", ran && mismatches.empty(), detail);
}

}  // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "";
    check_param_counts();
    check_ratio();
    check_transparency();
    check_recurrence_oracle();
    check_gradients();
    check_normalization();
    check_comparative();
    check_cli_determinism(cli);
    if (g_failures > 0) {
        std::cout << g_failures << " criteria failed\n";
        return 1;
    }
    std::cout << "all criteria passed\n";
    return 0;
}

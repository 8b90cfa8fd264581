#include "ssmlora/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace ssmlora {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
    throw ConfigError("bad value '" + value + "' for key '" + key + "'");
}

double to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        double v = std::stod(value, &used);
        if (used != value.size()) bad_value(key, value);
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        bad_value(key, value);
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value);
    return v;
}

std::size_t to_size(const std::string& key, const std::string& value) {
    return static_cast<std::size_t>(to_u64(key, value));
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    bad_value(key, value);
}

std::vector<std::size_t> to_size_list(const std::string& key, const std::string& value) {
    std::vector<std::size_t> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) bad_value(key, value);
        out.push_back(to_size(key, item));
    }
    if (out.empty()) bad_value(key, value);
    return out;
}

void apply(RunConfig& cfg, const std::string& section, const std::string& key,
           const std::string& value) {
    const std::string full = section.empty() ? key : section + "." + key;
    if (section == "encoder") {
        if (key == "layers") cfg.encoder.layers = to_size(full, value);
        else if (key == "width") cfg.encoder.width = to_size(full, value);
        else if (key == "heads") cfg.encoder.heads = to_size(full, value);
        else if (key == "ffn_width") cfg.encoder.ffn_width = to_size(full, value);
        else if (key == "vocab") cfg.encoder.vocab = to_size(full, value);
        else if (key == "max_seq") cfg.encoder.max_seq = to_size(full, value);
        else if (key == "classes") cfg.encoder.classes = to_size(full, value);
        else if (key == "fused_qkv") cfg.encoder.fused_qkv = to_bool(full, value);
        else throw ConfigError("unknown key '" + full + "'");
    } else if (section == "adapter") {
        if (key == "rank") cfg.adapter.rank = to_size(full, value);
        else if (key == "alpha") cfg.adapter.alpha = to_double(full, value);
        else if (key == "epsilon") cfg.adapter.epsilon = to_double(full, value);
        else if (key == "init_sigma") cfg.adapter.init_sigma = to_double(full, value);
        else if (key == "dropout") cfg.adapter.dropout = to_double(full, value);
        else throw ConfigError("unknown key '" + full + "'");
    } else if (section == "plan") {
        if (key == "kind") cfg.plan = value;
        else if (key == "ranks") cfg.plan_ranks = to_size_list(full, value);
        else throw ConfigError("unknown key '" + full + "'");
    } else if (section == "task") {
        if (key == "kind") cfg.task.kind = value;
        else if (key == "seq_len") cfg.task.seq_len = to_size(full, value);
        else if (key == "n_train") cfg.task.n_train = to_size(full, value);
        else if (key == "n_eval") cfg.task.n_eval = to_size(full, value);
        else if (key == "vocab") cfg.task.vocab = to_size(full, value);
        else if (key == "seed") cfg.task.seed = to_u64(full, value);
        else throw ConfigError("unknown key '" + full + "'");
    } else if (section == "train") {
        if (key == "lr") cfg.train.lr = to_double(full, value);
        else if (key == "batch_size") cfg.train.batch_size = to_size(full, value);
        else if (key == "max_epochs") cfg.train.max_epochs = to_size(full, value);
        else if (key == "patience") cfg.train.patience = to_size(full, value);
        else if (key == "seed") cfg.train.seed = to_u64(full, value);
        else if (key == "eval_subset") cfg.train.eval_subset = to_size(full, value);
        else if (key == "stop_train_acc") cfg.train.stop_train_acc = to_double(full, value);
        else throw ConfigError("unknown key '" + full + "'");
    } else if (section == "gradcheck") {
        if (key == "coords") cfg.gradcheck_coords = to_size(full, value);
        else if (key == "delta") cfg.gradcheck_delta = to_double(full, value);
        else if (key == "tolerance") cfg.gradcheck_tolerance = to_double(full, value);
        else if (key == "batch") cfg.gradcheck_batch = to_size(full, value);
        else if (key == "energize") cfg.gradcheck_energize = to_bool(full, value);
        else throw ConfigError("unknown key '" + full + "'");
    } else if (section == "eval") {
        if (key == "lengths") cfg.eval_lengths = to_size_list(full, value);
        else if (key == "per_length") cfg.eval_per_length = to_size(full, value);
        else throw ConfigError("unknown key '" + full + "'");
    } else if (section == "bench") {
        if (key == "seq_lens") cfg.bench_seq_lens = to_size_list(full, value);
        else if (key == "batch") cfg.bench_batch = to_size(full, value);
        else if (key == "repeats") cfg.bench_repeats = to_size(full, value);
        else throw ConfigError("unknown key '" + full + "'");
    } else if (section == "run") {
        if (key == "out") cfg.out_dir = value;
        else if (key == "format") cfg.format = value;
        else if (key == "model_seed") cfg.model_seed = to_u64(full, value);
        else throw ConfigError("unknown key '" + full + "'");
    } else {
        throw ConfigError("unknown section '" + section + "' (key '" + full + "')");
    }
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
    RunConfig cfg;
    std::stringstream ss(text);
    std::string raw;
    std::string section;
    std::size_t line_no = 0;
    while (std::getline(ss, raw)) {
        ++line_no;
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(line_no) + ": unterminated section");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no) + ": expected key = value, got '" +
                              line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("line " + std::to_string(line_no) + ": empty key");
        apply(cfg, section, key, value);
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config_text(ss.str());
}

void validate_run_config(const RunConfig& cfg) {
    validate_encoder_config(cfg.encoder);
    validate_adapter_config(cfg.adapter, cfg.encoder.width);
    validate_task_spec(cfg.task);
    validate_train_options(cfg.train);
    if (cfg.plan != "alternating" && cfg.plan != "skip-one" && cfg.plan != "dense-lora" &&
        cfg.plan != "none")
        throw ConfigError("unknown plan kind '" + cfg.plan + "' for key 'plan.kind'");
    if (cfg.format != "csv" && cfg.format != "json")
        throw ConfigError("bad value '" + cfg.format + "' for key 'run.format'");
    if (cfg.plan_ranks.empty()) throw ConfigError("key 'plan.ranks' must list at least one rank");
    if (cfg.plan == "skip-one" && !cfg.encoder.fused_qkv)
        throw ConfigError("plan.kind skip-one needs encoder.fused_qkv = true");
    if (cfg.adapter.rank > cfg.encoder.width)
        throw ConfigError("adapter.rank exceeds encoder.width");
    if (cfg.task.seq_len > cfg.encoder.max_seq)
        throw ConfigError("task.seq_len exceeds encoder.max_seq");
    if (cfg.task.vocab > cfg.encoder.vocab)
        throw ConfigError("task.vocab exceeds encoder.vocab");
    if (task_classes(cfg.task) != cfg.encoder.classes)
        throw ConfigError("encoder.classes must equal the task's class count (" +
                          std::to_string(task_classes(cfg.task)) + ")");
    for (std::size_t len : cfg.eval_lengths)
        if (len > cfg.encoder.max_seq)
            throw ConfigError("eval.lengths entry exceeds encoder.max_seq");
    for (std::size_t len : cfg.bench_seq_lens)
        if (len > cfg.encoder.max_seq)
            throw ConfigError("bench.seq_lens entry exceeds encoder.max_seq");
    if (cfg.bench_repeats == 0) throw ConfigError("bench.repeats must be positive");
}

InsertionPlan plan_from_config(const RunConfig& cfg) {
    if (cfg.plan == "alternating") return plan_alternating(cfg.encoder.layers);
    if (cfg.plan == "skip-one") return plan_skip_one(cfg.encoder.layers);
    if (cfg.plan == "dense-lora") return baseline_plan(cfg.encoder.layers);
    if (cfg.plan == "none") return InsertionPlan{};
    throw ConfigError("unknown plan kind '" + cfg.plan + "' for key 'plan.kind'");
}

InsertionPlan baseline_plan(std::size_t layers) {
    return plan_dense(layers, {MatrixKind::query, MatrixKind::value});
}

}  // namespace ssmlora

#include "ssmlora/report.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace ssmlora {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string double_text(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

ordered_json cell_json(const Cell& cell) {
    ordered_json j;
    std::visit([&](const auto& v) { j = v; }, cell);
    return j;
}

ordered_json row_json(const Report& report, const std::vector<Cell>& row) {
    ordered_json obj;
    obj["schema_version"] = kSchemaVersion;
    for (std::size_t c = 0; c < report.columns.size(); ++c)
        obj[report.columns[c]] = cell_json(row[c]);
    return obj;
}

void check_rows(const Report& report) {
    for (const auto& row : report.rows)
        if (row.size() != report.columns.size())
            throw InputError("report '" + report.name + "': row width mismatch");
}

}  // namespace

std::string format_cell(const Cell& cell) {
    if (std::holds_alternative<std::string>(cell)) return std::get<std::string>(cell);
    if (std::holds_alternative<double>(cell)) return double_text(std::get<double>(cell));
    if (std::holds_alternative<std::int64_t>(cell))
        return std::to_string(std::get<std::int64_t>(cell));
    if (std::holds_alternative<std::uint64_t>(cell))
        return std::to_string(std::get<std::uint64_t>(cell));
    return std::get<bool>(cell) ? "true" : "false";
}

std::string render_csv(const Report& report) {
    check_rows(report);
    std::string out = "schema_version";
    for (const std::string& col : report.columns) {
        out += ',';
        out += csv_escape(col);
    }
    out += '\n';
    for (const auto& row : report.rows) {
        out += kSchemaVersion;
        for (const Cell& cell : row) {
            out += ',';
            out += csv_escape(format_cell(cell));
        }
        out += '\n';
    }
    return out;
}

std::string render_json(const Report& report) {
    check_rows(report);
    ordered_json doc;
    doc["schema_version"] = kSchemaVersion;
    doc["report"] = report.name;
    doc["rows"] = ordered_json::array();
    for (const auto& row : report.rows) doc["rows"].push_back(row_json(report, row));
    return doc.dump(2) + "\n";
}

std::string render_jsonl(const Report& report) {
    check_rows(report);
    std::string out;
    for (const auto& row : report.rows) {
        out += row_json(report, row).dump();
        out += '\n';
    }
    return out;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Report budget_to_report(const BudgetReport& budget) {
    Report rep;
    rep.name = "budget";
    rep.columns = {"plan", "method", "r", "params", "ratio"};
    for (const BudgetRow& row : budget.rows)
        rep.rows.push_back({row.plan_name, std::string(method_name(row.method)),
                            static_cast<std::uint64_t>(row.r),
                            static_cast<std::uint64_t>(row.params), row.ratio});
    return rep;
}

Report epochs_to_report(const Metrics& metrics) {
    Report rep;
    rep.name = "epochs";
    rep.columns = {"epoch", "train_loss", "train_acc", "eval_acc"};
    for (const EpochRecord& e : metrics.epochs)
        rep.rows.push_back({static_cast<std::uint64_t>(e.epoch), e.train_loss, e.train_acc,
                            e.eval_acc});
    return rep;
}

Report timing_to_report(const Metrics& metrics) {
    Report rep;
    rep.name = "timing";
    rep.columns = {"epoch", "seconds"};
    for (const EpochRecord& e : metrics.epochs)
        rep.rows.push_back({static_cast<std::uint64_t>(e.epoch), e.seconds});
    return rep;
}

Report summary_to_report(const std::string& task, const std::string& plan,
                         const std::string& method, std::size_t rank, const Metrics& metrics) {
    Report rep;
    rep.name = "summary";
    rep.columns = {"task",        "plan",          "method",        "rank",
                   "epochs",      "best_eval_acc", "best_epoch",    "final_train_acc",
                   "early_stopped", "trainable_params"};
    rep.rows.push_back({task, plan, method, static_cast<std::uint64_t>(rank),
                        static_cast<std::uint64_t>(metrics.epochs.size()), metrics.best_eval_acc,
                        static_cast<std::uint64_t>(metrics.best_epoch), metrics.final_train_acc,
                        metrics.early_stopped,
                        static_cast<std::uint64_t>(metrics.trainable_params)});
    return rep;
}

Report eval_to_report(const EvalResult& result) {
    Report rep;
    rep.name = "eval";
    rep.columns = {"scope", "seq_len", "count", "accuracy"};
    for (const LengthBin& bin : result.by_length)
        rep.rows.push_back({std::string("bin"), static_cast<std::uint64_t>(bin.seq_len),
                            static_cast<std::uint64_t>(bin.count), bin.accuracy});
    rep.rows.push_back({std::string("overall"), static_cast<std::uint64_t>(0),
                        static_cast<std::uint64_t>(result.count), result.accuracy});
    return rep;
}

Report gradcheck_to_report(const GradcheckReport& report) {
    Report rep;
    rep.name = "gradcheck";
    rep.columns = {"matrix", "coord", "analytic", "numeric", "rel_err"};
    for (const CoordCheck& c : report.per_matrix)
        rep.rows.push_back({c.name, static_cast<std::uint64_t>(c.coord), c.analytic, c.numeric,
                            c.rel_err});
    rep.rows.push_back({std::string("overall"), static_cast<std::uint64_t>(report.worst.coord),
                        report.worst.analytic, report.worst.numeric, report.max_rel_err});
    return rep;
}

Report bench_to_report(const std::vector<BenchRow>& rows) {
    Report rep;
    rep.name = "bench";
    rep.columns = {"seq_len",       "plan",          "method",           "adapter_params",
                   "adapter_bytes", "forward_seconds", "backward_seconds", "peak_bytes"};
    for (const BenchRow& row : rows)
        rep.rows.push_back({static_cast<std::uint64_t>(row.seq_len), row.plan, row.method,
                            static_cast<std::uint64_t>(row.adapter_params),
                            static_cast<std::uint64_t>(row.adapter_bytes), row.forward_seconds,
                            row.backward_seconds, static_cast<std::uint64_t>(row.peak_bytes)});
    return rep;
}

}  // namespace ssmlora

#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "ssmlora/insertion.hpp"
#include "ssmlora/train.hpp"

namespace ssmlora {

// Bumped whenever any emitted file changes shape, so golden files fail
// loudly rather than silently drifting.
inline constexpr const char* kSchemaVersion = "1";

using Cell = std::variant<std::string, double, std::int64_t, std::uint64_t, bool>;

struct Report {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> rows;
};

// Canonical text for one cell; doubles use shortest round-trip form.
std::string format_cell(const Cell& cell);

// Header row plus one line per row; schema_version is the first column.
std::string render_csv(const Report& report);

// {"schema_version": ..., "report": ..., "rows": [{column: value, ...}]}
std::string render_json(const Report& report);

// One JSON object per line, each carrying schema_version.
std::string render_jsonl(const Report& report);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

Report budget_to_report(const BudgetReport& budget);
Report epochs_to_report(const Metrics& metrics);   // deterministic: no wallclock
Report timing_to_report(const Metrics& metrics);   // wallclock per epoch
Report summary_to_report(const std::string& task, const std::string& plan,
                         const std::string& method, std::size_t rank, const Metrics& metrics);
Report eval_to_report(const EvalResult& result);
Report gradcheck_to_report(const GradcheckReport& report);

struct BenchRow {
    std::size_t seq_len = 0;
    std::string plan;
    std::string method;
    std::size_t adapter_params = 0;
    std::size_t adapter_bytes = 0;
    double forward_seconds = 0.0;
    double backward_seconds = 0.0;
    std::size_t peak_bytes = 0;
};

Report bench_to_report(const std::vector<BenchRow>& rows);

}  // namespace ssmlora

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ssmlora/chain.hpp"

namespace ssmlora {

enum class Method { lora, ssmlora };

const char* method_name(Method method);
Method method_from_name(const std::string& name);

struct ModelDims {
    std::size_t layers = 0;
    std::size_t width = 0;
    std::size_t fused_out = 0;  // output width of a fused attention projection
    std::size_t ffn_out = 0;    // 0 -> treated as width
};

struct PlanEntry {
    std::size_t layer = 0;
    MatrixKind kind = MatrixKind::query;
    Method method = Method::ssmlora;
};

struct InsertionPlan {
    std::vector<PlanEntry> entries;
};

// Even layers adapt the query projection, odd layers the value projection,
// one entry per layer.
InsertionPlan plan_alternating(std::size_t layers);

// Even layers only, on the fused attention projection; no two adjacent.
InsertionPlan plan_skip_one(std::size_t layers);

// Every layer x every requested kind; the baseline method.
InsertionPlan plan_dense(std::size_t layers, const std::vector<MatrixKind>& kinds);

// (input width, output width) of the host matrix a given kind adapts.
std::pair<std::size_t, std::size_t> entry_dims(MatrixKind kind, const ModelDims& dims);

// Trainable parameters if every entry used `method` at rank r:
// lora contributes d_in*r + r*d_out per entry, the chained method adds 2r^2
// for its two rank-square mixing matrices.
std::size_t count_params(const InsertionPlan& plan, const ModelDims& dims, std::size_t r,
                         Method method);

// Entries grouped by kind, layers ascending; chain positions follow from
// the order within each group.
std::vector<std::pair<MatrixKind, std::vector<std::size_t>>> group_by_kind(
    const InsertionPlan& plan);

// Throws PlanError on out-of-range layers, duplicate (layer, kind) slots,
// or kinds the host dimensions cannot carry.
void validate_plan(const InsertionPlan& plan, const ModelDims& dims);

struct BudgetRow {
    std::string plan_name;
    Method method = Method::lora;
    std::size_t r = 0;
    std::size_t params = 0;
    double ratio = 0.0;  // params / first lora-plan params at the same r; 0 if undefined
};

struct BudgetReport {
    std::vector<BudgetRow> rows;
};

BudgetReport budget_report(const std::vector<std::pair<std::string, InsertionPlan>>& plans,
                           const ModelDims& dims, const std::vector<std::size_t>& r_values);

}  // namespace ssmlora

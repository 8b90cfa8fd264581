#include "ssmlora/insertion.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace ssmlora {

const char* method_name(Method method) {
    return method == Method::lora ? "lora" : "ssmlora";
}

Method method_from_name(const std::string& name) {
    if (name == "lora") return Method::lora;
    if (name == "ssmlora") return Method::ssmlora;
    throw ConfigError("unknown method '" + name + "'");
}

InsertionPlan plan_alternating(std::size_t layers) {
    if (layers < 1) throw PlanError("plan_alternating: need at least one layer");
    InsertionPlan plan;
    for (std::size_t l = 0; l < layers; ++l)
        plan.entries.push_back(
            {l, l % 2 == 0 ? MatrixKind::query : MatrixKind::value, Method::ssmlora});
    return plan;
}

InsertionPlan plan_skip_one(std::size_t layers) {
    if (layers < 1) throw PlanError("plan_skip_one: need at least one layer");
    InsertionPlan plan;
    for (std::size_t l = 0; l < layers; l += 2)
        plan.entries.push_back({l, MatrixKind::fused_qkv, Method::ssmlora});
    return plan;
}

InsertionPlan plan_dense(std::size_t layers, const std::vector<MatrixKind>& kinds) {
    if (layers < 1) throw PlanError("plan_dense: need at least one layer");
    InsertionPlan plan;
    for (std::size_t l = 0; l < layers; ++l)
        for (MatrixKind k : kinds) plan.entries.push_back({l, k, Method::lora});
    return plan;
}

std::pair<std::size_t, std::size_t> entry_dims(MatrixKind kind, const ModelDims& dims) {
    switch (kind) {
        case MatrixKind::query:
        case MatrixKind::key:
        case MatrixKind::value:
            return {dims.width, dims.width};
        case MatrixKind::ffn_in:
            return {dims.width, dims.ffn_out ? dims.ffn_out : dims.width};
        case MatrixKind::fused_qkv:
            if (dims.fused_out == 0)
                throw PlanError("plan adapts a fused projection but the host has none");
            return {dims.width, dims.fused_out};
    }
    throw PlanError("unknown matrix kind");
}

std::size_t count_params(const InsertionPlan& plan, const ModelDims& dims, std::size_t r,
                         Method method) {
    if (r < 1) throw ConfigError("count_params: rank must be at least 1");
    std::size_t total = 0;
    for (const PlanEntry& e : plan.entries) {
        auto [d_in, d_out] = entry_dims(e.kind, dims);
        total += d_in * r + r * d_out;
        if (method == Method::ssmlora) total += 2 * r * r;
    }
    return total;
}

std::vector<std::pair<MatrixKind, std::vector<std::size_t>>> group_by_kind(
    const InsertionPlan& plan) {
    std::map<MatrixKind, std::vector<std::size_t>> groups;
    for (const PlanEntry& e : plan.entries) groups[e.kind].push_back(e.layer);
    std::vector<std::pair<MatrixKind, std::vector<std::size_t>>> out;
    for (auto& [kind, layers] : groups) {
        std::sort(layers.begin(), layers.end());
        out.emplace_back(kind, std::move(layers));
    }
    return out;
}

void validate_plan(const InsertionPlan& plan, const ModelDims& dims) {
    std::set<std::pair<std::size_t, int>> seen;
    for (const PlanEntry& e : plan.entries) {
        if (e.layer >= dims.layers)
            throw PlanError("plan entry at layer " + std::to_string(e.layer) + " but host has " +
                            std::to_string(dims.layers));
        entry_dims(e.kind, dims);
        if (!seen.insert({e.layer, int(e.kind)}).second)
            throw PlanError("duplicate plan entry at layer " + std::to_string(e.layer) + ", kind " +
                            kind_name(e.kind));
    }
}

BudgetReport budget_report(const std::vector<std::pair<std::string, InsertionPlan>>& plans,
                           const ModelDims& dims, const std::vector<std::size_t>& r_values) {
    if (plans.empty() || r_values.empty())
        throw InputError("budget_report: need at least one plan and one rank");
    auto plan_method = [](const InsertionPlan& plan) {
        return plan.entries.empty() ? Method::lora : plan.entries.front().method;
    };
    BudgetReport report;
    for (std::size_t r : r_values) {
        std::size_t baseline = 0;
        for (const auto& [name, plan] : plans)
            if (baseline == 0 && plan_method(plan) == Method::lora)
                baseline = count_params(plan, dims, r, Method::lora);
        for (const auto& [name, plan] : plans) {
            Method method = plan_method(plan);
            std::size_t params = count_params(plan, dims, r, method);
            BudgetRow row;
            row.plan_name = name;
            row.method = method;
            row.r = r;
            row.params = params;
            row.ratio = baseline ? double(params) / double(baseline) : 0.0;
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

}  // namespace ssmlora

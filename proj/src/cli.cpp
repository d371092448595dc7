// SPDX-License-Identifier: Apache-2.0
#include "bspde/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>

#include <CLI11.hpp>

#include "bspde/backward_bspde.hpp"
#include "bspde/errors.hpp"
#include "bspde/fem.hpp"
#include "bspde/lq_control.hpp"
#include "bspde/parallel.hpp"

namespace bspde::cli {

#ifndef BSPDE_VERSION
#define BSPDE_VERSION "0.0.0"
#endif
const char* const kVersion = BSPDE_VERSION;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

// ---- schema ---------------------------------------------------------------

enum class Type { Int, Uint, Number, Bool, String, IntList, NumberList };

struct Field {
    std::string name;
    Type type;
    Json fallback;
    // Returns an error message for a well-typed value, or "" when valid.
    std::function<std::string(const Json&)> check;
    std::vector<std::string> choices;  // for Type::String
};

std::function<std::string(const Json&)> at_least(double lo) {
    return [lo](const Json& v) {
        std::ostringstream os;
        os.imbue(std::locale::classic());
        os << "must be >= " << lo;
        return v.get<double>() >= lo ? std::string() : os.str();
    };
}

std::function<std::string(const Json&)> positive() {
    return [](const Json& v) { return v.get<double>() > 0.0 ? std::string() : std::string("must be positive"); };
}

std::function<std::string(const Json&)> each_at_least(double lo) {
    return [lo](const Json& v) {
        if (v.empty()) return std::string("must not be empty");
        for (const auto& x : v) {
            if (x.get<double>() < lo) return "entries must be >= " + std::to_string(static_cast<long long>(lo));
        }
        return std::string();
    };
}

std::vector<Field> common_fields(const std::string& kind) {
    return {{"kind", Type::String, kind, nullptr, experiment_kinds()},
            {"out_dir", Type::String, "results/" + kind, nullptr, {}}};
}

std::vector<Field> lq_fields() {
    return {
        {"T", Type::Number, 0.2, positive(), {}},
        {"J", Type::Int, 50, at_least(2), {}},
        {"nu", Type::Number, 1e-2, positive(), {}},
        {"alpha", Type::NumberList, Json::array({1.0, 1.0, 1.0, 0.1}),
         [](const Json& v) { return v.size() == 4 ? std::string() : std::string("needs 4 entries (alpha0..alpha3)"); },
         {}},
        {"target", Type::String, "singular", nullptr, {"singular", "noisy-singular", "constant"}},
        {"target_value", Type::Number, 1.0, nullptr, {}},
        {"hidden", Type::IntList, Json::array({32, 32, 32, 32}), each_at_least(1), {}},
        {"precision", Type::String, "double", nullptr, {"double", "single"}},
        {"scale_noise", Type::Bool, true, nullptr, {}},
        {"iterations", Type::Int, 2000, at_least(1), {}},
        {"batch_size", Type::Int, 128, at_least(1), {}},
        {"lr", Type::Number, 1e-3, positive(), {}},
        {"beta1", Type::Number, 0.9, at_least(0.0), {}},
        {"beta2", Type::Number, 0.999, at_least(0.0), {}},
        {"eps", Type::Number, 1e-8, positive(), {}},
        {"seed", Type::Uint, 1, nullptr, {}},
        {"init_seed", Type::Uint, 11, nullptr, {}},
    };
}

std::vector<Field> schema_for(const std::string& kind) {
    std::vector<Field> f = common_fields(kind);
    const auto add = [&f](std::vector<Field> more) { f.insert(f.end(), more.begin(), more.end()); };
    if (kind == "fem-selftest") {
        add({{"n_cells", Type::Int, 8, at_least(2), {}}});
    } else if (kind == "manufactured-convergence") {
        add({{"cells", Type::IntList, Json::array({8, 16, 32}), each_at_least(2), {}},
             {"T", Type::Number, 1.0, positive(), {}},
             {"J", Type::Int, 256, at_least(1), {}},
             {"beta", Type::Number, 1.0, nullptr, {}},
             {"amplitude", Type::String, "linear", nullptr, {"linear", "heat-decay"}},
             {"degree", Type::Int, 4, at_least(0), {}},
             {"ridge", Type::Number, 1e-10, at_least(0.0), {}},
             {"z_estimator", Type::String, "joint", nullptr, {"joint", "plain"}},
             {"paths", Type::Int, 20000, at_least(2), {}},
             {"seed", Type::Uint, 1, nullptr, {}},
             {"picard_tol", Type::Number, 1e-12, positive(), {}},
             {"picard_max_iters", Type::Int, 100, at_least(1), {}}});
    } else if (kind == "lq-train") {
        add(lq_fields());
        add({{"cells", Type::Int, 8, at_least(2), {}},
             {"residual_paths", Type::Int, 4000, at_least(16), {}},
             {"residual_seed", Type::Uint, 77, nullptr, {}},
             {"degree", Type::Int, 4, at_least(0), {}}});
    } else if (kind == "lq-convergence") {
        add(lq_fields());
        add({{"cells", Type::IntList, Json::array({4, 8, 16}), each_at_least(2), {}},
             {"reference_cells", Type::Int, 32, at_least(2), {}},
             {"eval_paths", Type::Int, 100000, at_least(2), {}},
             {"eval_seed", Type::Uint, 2024, nullptr, {}},
             {"eval_chunk", Type::Int, 2048, at_least(1), {}}});
    } else if (kind == "duality-check") {
        add({{"cells", Type::Int, 8, at_least(2), {}},
             {"T", Type::Number, 0.2, positive(), {}},
             {"J", Type::IntList, Json::array({50, 100, 200}), each_at_least(2), {}},
             {"alpha", Type::NumberList, Json::array({1.0, 1.0, 1.0, 0.1}),
              [](const Json& v) { return v.size() == 4 ? std::string() : std::string("needs 4 entries"); },
              {}},
             {"setting", Type::String, "stochastic", nullptr, {"stochastic", "deterministic"}},
             {"paths", Type::Int, 2000, at_least(2), {}},
             {"seed", Type::Uint, 1, nullptr, {}},
             {"degree", Type::Int, 4, at_least(0), {}}});
    }
    return f;
}

const char* type_name(Type t) {
    switch (t) {
        case Type::Int: return "an integer";
        case Type::Uint: return "a non-negative integer";
        case Type::Number: return "a finite number";
        case Type::Bool: return "a boolean";
        case Type::String: return "a string";
        case Type::IntList: return "an array of integers";
        case Type::NumberList: return "an array of finite numbers";
    }
    return "?";
}

bool finite_number(const Json& v) { return v.is_number() && std::isfinite(v.get<double>()); }

bool type_ok(Type t, const Json& v) {
    switch (t) {
        case Type::Int: return v.is_number_integer();
        case Type::Uint: return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
        case Type::Number: return finite_number(v);
        case Type::Bool: return v.is_boolean();
        case Type::String: return v.is_string();
        case Type::IntList:
            return v.is_array() && std::all_of(v.begin(), v.end(), [](const Json& x) { return x.is_number_integer(); });
        case Type::NumberList:
            return v.is_array() && std::all_of(v.begin(), v.end(), finite_number);
    }
    return false;
}

[[noreturn]] void field_error(const std::string& field, const std::string& message) {
    throw InvalidArgument("config field /" + field + ": " + message);
}

// ---- helpers --------------------------------------------------------------

std::string format_number(double x) {
    if (!std::isfinite(x)) return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::scientific, 6);
    return std::string(buf, res.ptr);
}

std::string format_fixed(double x, int digits) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::fixed, digits);
    return std::string(buf, res.ptr);
}

std::string format_cell(const Json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    if (v.is_number()) return format_number(v.get<double>());
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
}

Json order_cell(const std::vector<double>& orders, std::size_t row) {
    if (row == 0 || row - 1 >= orders.size()) return "--";
    return orders[row - 1];
}

std::vector<double> to_vector(const Json& a) { return a.get<std::vector<double>>(); }

DesiredState target_from(const Json& c) {
    const std::string t = c["target"];
    if (t == "singular") return singular_target();
    if (t == "noisy-singular") return noisy_singular_target();
    return constant_target(c["target_value"].get<double>());
}

LinearSpdeCoeffs coeffs_from(const Json& c, int J) {
    const std::vector<double> a = to_vector(c["alpha"]);
    return LinearSpdeCoeffs::constant(J, a[0], a[1], a[2], a[3]);
}

PolicyOptions policy_from(const Json& c) {
    PolicyOptions p;
    p.hidden = c["hidden"].get<std::vector<int>>();
    p.precision = c["precision"] == "single" ? Precision::Single : Precision::Double;
    p.scale_noise = c["scale_noise"];
    p.init_seed = c["init_seed"];
    return p;
}

TrainConfig train_from(const Json& c) {
    TrainConfig t;
    t.iterations = c["iterations"];
    t.batch_size = c["batch_size"];
    t.seed = c["seed"];
    t.adam.lr = c["lr"];
    t.adam.beta1 = c["beta1"];
    t.adam.beta2 = c["beta2"];
    t.adam.eps = c["eps"];
    return t;
}

std::string h_label(int cells) { return "1/" + std::to_string(cells); }

// ---- experiments ----------------------------------------------------------

void run_fem_selftest(const Json& c, Json& rec) {
    const auto start = Clock::now();
    const int cells = c["n_cells"];
    const FemSystem fem = assemble(build_mesh(cells));
    const SpectralDecomp spec = spectral(fem);
    double worst = 0.0;
    Json rows = Json::array();
    for (int k = 0; k < fem.dofs(); ++k) {
        const double exact = p1_dirichlet_eigenvalue(fem.h(), k + 1);
        const double rel = std::abs(spec.eigenvalues(k) - exact) / exact;
        worst = std::max(worst, rel);
        rows.push_back({k + 1, spec.eigenvalues(k), exact, rel});
    }
    // Q_h is the identity on V_h; P1 integrands are exact with 4-point Gauss.
    Vector u(fem.dofs());
    for (int i = 0; i < fem.dofs(); ++i) u(i) = std::sin(1.0 + 3.0 * i);
    const Vector qu = l2_project(fem, [&](double x) { return evaluate(fem.mesh(), u, x); });
    const SpatialProfile sine = sine_profile(fem);
    rec["results"] = {
        {"n_cells", cells},
        {"dofs", fem.dofs()},
        {"eigenvalue_max_rel_error", worst},
        {"eigen_residual", spec.max_residual},
        {"orthonormality_error", spec.orthonormality_error},
        {"projection_idempotence_error", (qu - u).cwiseAbs().maxCoeff()},
        {"sine_projection_l2_error", std::sqrt(std::max(0.0, sine.l2_sq - sine.projection.dot(sine.load)))},
    };
    rec["table"] = {{"columns", {"k", "lambda_h", "closed_form", "rel_error"}}, {"rows", rows}};
    rec["timings"]["total"] = seconds_since(start);
}

void run_manufactured(const Json& c, Json& rec) {
    const auto start = Clock::now();
    const TimeGrid grid = make_time_grid(c["T"].get<double>(), c["J"].get<int>());
    const double T = grid.T;
    const TimeFunction amp = c["amplitude"] == "linear"
                                 ? TimeFunction{[](double t) { return 1.0 + 0.5 * t; }, [](double) { return 0.5; }}
                                 : TimeFunction{[T](double t) { return std::exp(std::numbers::pi * std::numbers::pi * (t - T)); },
                                                [T](double t) {
                                                    const double k = std::numbers::pi * std::numbers::pi;
                                                    return k * std::exp(k * (t - T));
                                                }};
    RegressionBasis basis;
    basis.degree = c["degree"];
    basis.ridge = c["ridge"];
    basis.z_estimator = c["z_estimator"] == "joint" ? ZEstimator::Joint : ZEstimator::Plain;
    PicardOptions picard;
    picard.tol = c["picard_tol"];
    picard.max_iters = c["picard_max_iters"];

    const auto t0 = Clock::now();
    const BrownianBatch batch = sample_brownian(grid, c["paths"].get<int>(), c["seed"].get<std::uint64_t>());
    rec["timings"]["sampling"] = seconds_since(t0);

    std::vector<double> sup, h1, zz;
    Json rows = Json::array();
    for (int cells : c["cells"].get<std::vector<int>>()) {
        const auto tm = Clock::now();
        const FemSystem fem = assemble(build_mesh(cells));
        const ManufacturedCase mc = manufactured_problem(amp, c["beta"].get<double>(), fem, grid);
        ErrorAccumulator acc(fem, grid, batch, mc.p_exact, mc.z_exact);
        BackwardOptions opt;
        opt.store_fields = false;
        opt.observers.push_back(acc.observer());
        const BackwardSolution sol = solve_backward(mc.problem, fem, batch, basis, picard, opt);
        const ErrorNorms e = acc.result();
        sup.push_back(e.p_sup_l2);
        h1.push_back(e.p_l2_h1);
        zz.push_back(e.z_l2_l2);
        const int max_it = sol.picard_iterations.empty()
                               ? 0
                               : *std::max_element(sol.picard_iterations.begin(), sol.picard_iterations.end());
        const double max_cond = sol.condition_numbers.empty()
                                    ? 1.0
                                    : *std::max_element(sol.condition_numbers.begin(), sol.condition_numbers.end());
        rows.push_back({{"n_cells", cells},
                        {"h", 1.0 / cells},
                        {"p_sup_l2", e.p_sup_l2},
                        {"p_sup_l2_se", e.p_sup_l2_se},
                        {"p_l2_h1", e.p_l2_h1},
                        {"p_l2_h1_se", e.p_l2_h1_se},
                        {"z_l2_l2", e.z_l2_l2},
                        {"z_l2_l2_se", e.z_l2_l2_se},
                        {"picard_max_iterations", max_it},
                        {"picard_converged", sol.picard_converged},
                        {"max_condition_number", max_cond}});
        rec["timings"]["solve_h_" + h_label(cells)] = seconds_since(tm);
    }
    const auto o_sup = observed_orders(sup), o_h1 = observed_orders(h1), o_z = observed_orders(zz);
    rec["results"] = {{"rows", rows}, {"orders", {{"p_sup_l2", o_sup}, {"p_l2_h1", o_h1}, {"z_l2_l2", o_z}}}};
    Json trows = Json::array();
    for (std::size_t k = 0; k < rows.size(); ++k) {
        trows.push_back({h_label(rows[k]["n_cells"]), sup[k], order_cell(o_sup, k), h1[k], order_cell(o_h1, k), zz[k],
                         order_cell(o_z, k)});
    }
    rec["table"] = {{"columns", {"h", "p_sup_l2", "order", "p_l2_h1", "order", "z_l2_l2", "order"}}, {"rows", trows}};
    rec["timings"]["total"] = seconds_since(start);
}

void run_lq_train(const Json& c, Json& rec) {
    const auto start = Clock::now();
    const TimeGrid grid = make_time_grid(c["T"].get<double>(), c["J"].get<int>());
    const LqProblem problem = make_lq_problem(c["cells"], grid, c["nu"], coeffs_from(c, grid.J), target_from(c));
    const PolicyOptions po = policy_from(c);
    PolicyStack stack = make_policy_stack(grid.J, po.hidden, po.init_seed, po.precision, po.scale_noise);
    const TrainResult tr = train(problem, stack, train_from(c));
    rec["timings"]["train"] = tr.seconds;

    const auto tr0 = Clock::now();
    const BrownianBatch batch = sample_brownian(grid, c["residual_paths"], c["residual_seed"].get<std::uint64_t>());
    const PathSeries u = eval_policy(stack, *problem.fem, batch);
    RegressionBasis basis;
    basis.degree = c["degree"];
    const OptimalityResidual res = optimality_residual(problem, u, batch, basis);
    rec["timings"]["residual"] = seconds_since(tr0);

    const auto& trace = tr.loss_trace;
    const std::size_t tail = std::min<std::size_t>(100, trace.size());
    double tail_mean = 0.0;
    for (std::size_t i = trace.size() - tail; i < trace.size(); ++i) tail_mean += trace[i] / tail;
    rec["results"] = {{"first_loss", trace.front()},
                      {"final_loss", tail_mean},
                      {"eval_loss", loss(problem, u, batch)},
                      {"control_norm", res.control_norm},
                      {"optimality_residual", res.residual},
                      {"optimality_residual_relative", res.relative()}};
    Json rows = Json::array();
    const std::size_t stride = std::max<std::size_t>(1, trace.size() / 20);
    for (std::size_t i = 0; i < trace.size(); i += stride) rows.push_back({static_cast<long long>(i), trace[i]});
    if ((trace.size() - 1) % stride != 0) rows.push_back({static_cast<long long>(trace.size() - 1), trace.back()});
    rec["table"] = {{"columns", {"iteration", "batch_loss"}}, {"rows", rows}};
    rec["timings"]["total"] = seconds_since(start);
}

void run_lq_convergence(const Json& c, Json& rec) {
    const auto start = Clock::now();
    LqTemplate setup;
    setup.grid = make_time_grid(c["T"].get<double>(), c["J"].get<int>());
    setup.nu = c["nu"];
    setup.coeffs = coeffs_from(c, setup.grid.J);
    setup.y_d = target_from(c);
    StudyConfig sc;
    sc.mesh_cells = c["cells"].get<std::vector<int>>();
    sc.reference_cells = c["reference_cells"];
    sc.train = train_from(c);
    sc.policy = policy_from(c);
    sc.eval_paths = c["eval_paths"];
    sc.eval_seed = c["eval_seed"];
    sc.eval_chunk = c["eval_chunk"];
    const ConvergenceReport r = convergence_study(setup, sc);

    Json rows = Json::array();
    Json trows = Json::array();
    for (std::size_t k = 0; k < r.rows.size(); ++k) {
        const MeshResult& m = r.rows[k];
        rows.push_back({{"n_cells", m.n_cells},
                        {"h", 1.0 / m.n_cells},
                        {"u_error", m.u_error},
                        {"u_error_se", m.u_error_se},
                        {"y_error", m.y_error},
                        {"y_error_se", m.y_error_se},
                        {"final_loss", m.final_loss}});
        rec["timings"]["train_h_" + h_label(m.n_cells)] = m.train_seconds;
        trows.push_back({h_label(m.n_cells), m.u_error, order_cell(r.u_orders, k), m.y_error, order_cell(r.y_orders, k)});
    }
    rec["timings"]["train_reference"] = r.reference_train_seconds;
    rec["timings"]["evaluation"] = r.eval_seconds;
    rec["results"] = {{"rows", rows},
                      {"u_orders", r.u_orders},
                      {"y_orders", r.y_orders},
                      {"u_monotone", r.u_monotone},
                      {"y_monotone", r.y_monotone},
                      {"reference_cells", r.reference_cells},
                      {"eval_paths", r.eval_paths}};
    rec["table"] = {{"columns", {"h", "u_error", "order", "y_error", "order"}}, {"rows", trows}};
    rec["timings"]["total"] = seconds_since(start);
}

void run_duality(const Json& c, Json& rec) {
    const auto start = Clock::now();
    const FemSystem fem = assemble(build_mesh(c["cells"]));
    const bool stochastic = c["setting"] == "stochastic";
    const DualityInputs in = duality_inputs(fem, stochastic);
    RegressionBasis basis;
    basis.degree = c["degree"];
    Json rows = Json::array();
    Json trows = Json::array();
    std::vector<double> gaps;
    for (int J : c["J"].get<std::vector<int>>()) {
        const TimeGrid grid = make_time_grid(c["T"].get<double>(), J);
        const BrownianBatch batch = sample_brownian(grid, c["paths"], c["seed"].get<std::uint64_t>());
        const DualityGap d = duality_check(fem, grid, coeffs_from(c, J), in.g, in.v, batch, basis);
        gaps.push_back(d.gap);
        rows.push_back({{"J", J}, {"lhs", d.lhs}, {"rhs", d.rhs}, {"gap", d.gap}});
        trows.push_back({J, d.lhs, d.rhs, d.gap});
    }
    bool decreasing = true;
    for (std::size_t k = 1; k < gaps.size(); ++k) decreasing = decreasing && gaps[k] < gaps[k - 1];
    rec["results"] = {{"rows", rows}, {"gap_decreasing", decreasing}};
    rec["table"] = {{"columns", {"J", "lhs", "rhs", "gap"}}, {"rows", trows}};
    rec["timings"]["total"] = seconds_since(start);
}

Json seeds_of(const Json& c) {
    Json s = Json::object();
    for (const char* key : {"seed", "init_seed", "eval_seed", "residual_seed"}) {
        if (c.contains(key)) s[key] = c[key];
    }
    return s;
}

std::string divergence_walk(const Json& a, const Json& b, const std::string& path) {
    if (a.type() != b.type()) {
        // Integers may round-trip as unsigned.
        if (!(a.is_number() && b.is_number())) return path.empty() ? "/" : path;
    }
    if (a.is_object()) {
        for (auto it = a.begin(); it != a.end(); ++it) {
            if (it.key() == "timings" || it.key() == "threads") continue;
            if (!b.contains(it.key())) return path + "/" + it.key();
            const std::string d = divergence_walk(it.value(), b[it.key()], path + "/" + it.key());
            if (!d.empty()) return d;
        }
        for (auto it = b.begin(); it != b.end(); ++it) {
            if (it.key() == "timings" || it.key() == "threads") continue;
            if (!a.contains(it.key())) return path + "/" + it.key();
        }
        return "";
    }
    if (a.is_array()) {
        for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
            const std::string d = divergence_walk(a[i], b[i], path + "/" + std::to_string(i));
            if (!d.empty()) return d;
        }
        return a.size() == b.size() ? "" : path + "/" + std::to_string(std::min(a.size(), b.size()));
    }
    if (a.is_number_float() || b.is_number_float()) {
        const double x = a.get<double>(), y = b.get<double>();
        const bool same = (std::isnan(x) && std::isnan(y)) || x == y;
        return same ? "" : (path.empty() ? "/" : path);
    }
    return a == b ? "" : (path.empty() ? "/" : path);
}

Json read_record(const std::string& path) {
    const Json r = load_json_file(path);
    require(r.is_object() && r.contains("kind") && r.contains("config") && r.contains("results"),
            path + ": not a run record (needs kind, config and results)");
    return r;
}

}  // namespace

const std::vector<std::string>& experiment_kinds() {
    static const std::vector<std::string> kinds{"fem-selftest", "manufactured-convergence", "lq-train",
                                                "lq-convergence", "duality-check"};
    return kinds;
}

Json parse_json(const std::string& text, const std::string& source) {
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        // e.what() carries the line and column.
        throw InvalidArgument(source + ": invalid JSON: " + e.what());
    }
}

Json load_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), path + ": cannot open file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_json(ss.str(), path);
}

Json validate_config(const Json& raw) {
    require(raw.is_object(), "config: top level must be a JSON object");
    require(raw.contains("kind"), "config field /kind: required");
    require(raw["kind"].is_string(), "config field /kind: must be a string");
    const std::string kind = raw["kind"];
    const auto& kinds = experiment_kinds();
    if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) {
        std::string list;
        for (const auto& k : kinds) list += (list.empty() ? "" : ", ") + k;
        field_error("kind", "unknown experiment kind '" + kind + "' (expected one of " + list + ")");
    }
    const std::vector<Field> schema = schema_for(kind);
    for (auto it = raw.begin(); it != raw.end(); ++it) {
        const bool known = std::any_of(schema.begin(), schema.end(), [&](const Field& f) { return f.name == it.key(); });
        if (!known) field_error(it.key(), "unknown key for kind '" + kind + "'");
    }
    Json out = Json::object();
    for (const Field& f : schema) {
        const Json v = raw.contains(f.name) ? raw[f.name] : f.fallback;
        if (!type_ok(f.type, v)) field_error(f.name, std::string("must be ") + type_name(f.type));
        if (f.type == Type::String && !f.choices.empty() &&
            std::find(f.choices.begin(), f.choices.end(), v.get<std::string>()) == f.choices.end()) {
            std::string list;
            for (const auto& k : f.choices) list += (list.empty() ? "" : ", ") + k;
            field_error(f.name, "must be one of " + list);
        }
        if (f.check) {
            const std::string msg = f.check(v);
            if (!msg.empty()) field_error(f.name, msg);
        }
        out[f.name] = v;
    }
    // Cross-field rules.
    if (kind == "lq-convergence") {
        const int ref = out["reference_cells"];
        for (int cells : out["cells"].get<std::vector<int>>()) {
            if (cells >= ref || ref % cells != 0) {
                field_error("reference_cells", "must be a strict multiple of every entry of /cells");
            }
        }
    }
    if (kind == "lq-train" || kind == "lq-convergence") {
        if (out["beta1"].get<double>() >= 1.0) field_error("beta1", "must be < 1");
        if (out["beta2"].get<double>() >= 1.0) field_error("beta2", "must be < 1");
    }
    if (kind == "duality-check" && out["setting"] == "deterministic") {
        const auto a = out["alpha"].get<std::vector<double>>();
        if (a[2] != 0.0 || a[3] != 0.0) field_error("alpha", "deterministic setting needs alpha2 = alpha3 = 0");
    }
    return out;
}

Json execute(const Json& config, int threads, bool reproducible) {
    const Json c = validate_config(config);
    require(threads >= 1, "execute: thread count must be positive");
    ExecutionPolicy& policy = execution_policy();
    const ExecutionPolicy saved = policy;
    policy.threads = threads;
    policy.reproducible = reproducible;

    Json rec = Json::object();
    rec["artifact"] = "bspde";
    rec["version"] = kVersion;
    rec["kind"] = c["kind"];
    rec["config"] = c;
    rec["seeds"] = seeds_of(c);
    rec["reproducible"] = reproducible;
    rec["threads"] = threads;
    rec["timings"] = Json::object();
    const std::string kind = c["kind"];
    try {
        if (kind == "fem-selftest") run_fem_selftest(c, rec);
        else if (kind == "manufactured-convergence") run_manufactured(c, rec);
        else if (kind == "lq-train") run_lq_train(c, rec);
        else if (kind == "lq-convergence") run_lq_convergence(c, rec);
        else run_duality(c, rec);
    } catch (...) {
        policy = saved;
        throw;
    }
    policy = saved;
    return rec;
}

std::string table_csv(const Json& record) {
    const Json& t = record.at("table");
    std::string out;
    const auto& cols = t.at("columns");
    for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i].get<std::string>();
    out += "\n";
    for (const auto& row : t.at("rows")) {
        for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + format_cell(row[i]);
        out += "\n";
    }
    return out;
}

std::string table_markdown(const Json& record) {
    const Json& t = record.at("table");
    std::string out = "|";
    for (const auto& c : t.at("columns")) out += " " + c.get<std::string>() + " |";
    out += "\n|";
    for (std::size_t i = 0; i < t.at("columns").size(); ++i) out += "---|";
    out += "\n";
    for (const auto& row : t.at("rows")) {
        out += "|";
        for (const auto& v : row) out += " " + format_cell(v) + " |";
        out += "\n";
    }
    return out;
}

void write_outputs(const Json& record, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const auto write = [&](const std::string& name, const std::string& content) {
        std::ofstream f(fs::path(out_dir) / name, std::ios::binary);
        f << content;
        if (!f) throw InvalidState("write_outputs: cannot write " + (fs::path(out_dir) / name).string());
    };
    write("record.json", record.dump(2) + "\n");
    write("table.csv", table_csv(record));
    write("table.md", table_markdown(record));
}

Json run(const Json& raw_config, const RunOptions& options) {
    Json config = validate_config(raw_config);
    if (options.out_dir) config["out_dir"] = *options.out_dir;
    if (options.seed) {
        require(config.contains("seed"), "--seed: kind '" + config["kind"].get<std::string>() + "' has no seed");
        config["seed"] = *options.seed;
    }
    const int threads = options.threads.value_or(default_thread_count());
    const Json record = execute(config, threads, options.reproducible);
    write_outputs(record, config["out_dir"]);
    return record;
}

std::string report(const std::vector<Json>& records) {
    require(!records.empty(), "report: no records given");
    const std::string kind = records.front().at("kind");
    for (const auto& r : records) {
        require(r.at("kind") == kind, "report: mixed experiment kinds ('" + kind + "' and '" +
                                          r.at("kind").get<std::string>() + "')");
    }
    std::vector<std::string> keys, titles;
    if (kind == "lq-convergence") {
        keys = {"u_error", "y_error"};
        titles = {"‖Ū − U*‖", "‖Ȳ − Y*‖"};
    } else if (kind == "manufactured-convergence") {
        keys = {"p_sup_l2", "p_l2_h1", "z_l2_l2"};
        titles = {"sup ‖p − p_h‖", "‖p − p_h‖_{L2(H1)}", "‖z − z_h‖"};
    } else {
        throw InvalidArgument("report: kind '" + kind + "' has no convergence table");
    }
    std::vector<Json> rows;
    for (const auto& r : records) {
        for (const auto& row : r.at("results").at("rows")) rows.push_back(row);
    }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const Json& a, const Json& b) { return a.at("n_cells").get<int>() < b.at("n_cells").get<int>(); });

    std::string out = "| h |";
    for (const auto& t : titles) out += " " + t + " | order |";
    out += "\n|---|";
    for (std::size_t i = 0; i < titles.size(); ++i) out += "---|---|";
    out += "\n";
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const int cells = rows[k].at("n_cells");
        out += "| " + h_label(cells) + " |";
        for (const auto& key : keys) {
            const double e = rows[k].at(key);
            std::string order = "--";
            if (k > 0) {
                const double e_prev = rows[k - 1].at(key);
                const int prev_cells = rows[k - 1].at("n_cells");
                if (prev_cells != cells) {
                    order = format_fixed(std::log(e_prev / e) / std::log(static_cast<double>(cells) / prev_cells), 2);
                }
            }
            char buf[32];
            const auto res = std::to_chars(buf, buf + sizeof(buf), e, std::chars_format::scientific, 2);
            out += " " + std::string(buf, res.ptr) + " | " + order + " |";
        }
        out += "\n";
    }
    return out;
}

std::string first_divergence(const Json& expected, const Json& actual) {
    return divergence_walk(expected, actual, "");
}

ReplayResult replay(const Json& record, std::optional<int> threads) {
    require(record.contains("config") && record.contains("results"), "replay: record lacks config or results");
    const int n = threads.value_or(record.value("threads", 1));
    const bool reproducible = record.value("reproducible", true);
    ReplayResult out;
    out.record = execute(record.at("config"), n, reproducible);
    out.divergence = first_divergence(record, out.record);
    return out;
}

int main_entry(int argc, const char* const* argv) {
    CLI::App app{"Finite element / Monte Carlo solver for backward stochastic parabolic equations"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    std::string config_path;
    RunOptions opts;
    std::string out_dir;
    std::uint64_t seed = 0;
    int threads = 0;
    auto* run_cmd = app.add_subcommand("run", "Run an experiment from a JSON config");
    run_cmd->add_option("config", config_path, "Experiment config (JSON)")->required();
    auto* out_opt = run_cmd->add_option("--out", out_dir, "Output directory (overrides out_dir)");
    auto* seed_opt = run_cmd->add_option("--seed", seed, "Override the config seed");
    auto* threads_opt = run_cmd->add_option("--threads", threads, "Worker threads (default: $BSPDE_THREADS or 1)")
                            ->check(CLI::PositiveNumber);
    run_cmd->add_flag("--reproducible", opts.reproducible, "Thread-count independent reductions");

    std::vector<std::string> record_paths;
    auto* report_cmd = app.add_subcommand("report", "Markdown convergence table from run records");
    report_cmd->add_option("records", record_paths, "record.json files")->required();

    std::string replay_path;
    int replay_threads = 0;
    auto* replay_cmd = app.add_subcommand("replay", "Re-execute a record and compare results bit for bit");
    replay_cmd->add_option("record", replay_path, "record.json")->required();
    auto* replay_threads_opt =
        replay_cmd->add_option("--threads", replay_threads, "Worker threads")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*run_cmd) {
            if (*out_opt) opts.out_dir = out_dir;
            if (*seed_opt) opts.seed = seed;
            if (*threads_opt) opts.threads = threads;
            const Json record = run(load_json_file(config_path), opts);
            std::cout << table_markdown(record);
            std::cout << "record: "
                      << (std::filesystem::path(record["config"]["out_dir"].get<std::string>()) / "record.json").string()
                      << "\n";
            return 0;
        }
        if (*report_cmd) {
            std::vector<Json> records;
            for (const auto& p : record_paths) records.push_back(read_record(p));
            std::cout << report(records);
            return 0;
        }
        const Json record = read_record(replay_path);
        const ReplayResult r =
            replay(record, *replay_threads_opt ? std::optional<int>(replay_threads) : std::nullopt);
        if (!r.divergence.empty()) {
            std::cerr << "replay mismatch at " << r.divergence << "\n";
            return 4;
        }
        std::cout << "replay identical\n";
        return 0;
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericFailure& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace bspde::cli

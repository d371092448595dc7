// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace bspde::cli {

using Json = nlohmann::ordered_json;

extern const char* const kVersion;

/// Experiment kinds accepted in the "kind" field.
const std::vector<std::string>& experiment_kinds();

/// Parses JSON text; syntax errors become InvalidArgument with line and column.
Json parse_json(const std::string& text, const std::string& source);
Json load_json_file(const std::string& path);

/// Checks a raw config against the schema of its kind and fills defaults.
/// Unknown keys, wrong types and out-of-range values throw InvalidArgument
/// naming the offending field as a JSON pointer.
Json validate_config(const Json& raw);

struct RunOptions {
    std::optional<std::string> out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    bool reproducible = false;
};

/// Runs a validated config and returns its record without touching the disk.
Json execute(const Json& config, int threads, bool reproducible);

/// Writes record.json, table.csv and table.md into out_dir (created if needed).
void write_outputs(const Json& record, const std::string& out_dir);

/// validate + overrides + execute + write_outputs.
Json run(const Json& raw_config, const RunOptions& options);

/// Markdown convergence table over the rows of all records, coarsest mesh
/// first, with observed orders between successive rows ("--" on the first).
std::string report(const std::vector<Json>& records);

/// CSV rendering of a record's table, '.' decimal separator regardless of locale.
std::string table_csv(const Json& record);
std::string table_markdown(const Json& record);

/// JSON pointer of the first difference between two records, ignoring
/// "timings"; empty when the records agree.
std::string first_divergence(const Json& expected, const Json& actual);

struct ReplayResult {
    Json record;
    std::string divergence;  // empty when bit-identical
};

ReplayResult replay(const Json& record, std::optional<int> threads = std::nullopt);

/// Command-line entry point: run / report / replay. Returns the exit status.
int main_entry(int argc, const char* const* argv);

}  // namespace bspde::cli

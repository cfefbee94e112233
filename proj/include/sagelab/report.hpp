// CSV / JSON serialization of experiment tables and their metadata sidecar.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "sagelab/experiments.hpp"

namespace sagelab {

using Cell = std::variant<std::string, double, std::uint64_t>;

struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> rows;
};

enum class OutputFormat { csv, json };

OutputFormat parse_format(std::string_view text);

/// 6 significant digits; "inf" / "-inf" / "nan" for non-finite values.
std::string format_real(double v);

Table to_table(const std::vector<ResultRow>& rows);
Table to_table(const BoundSummary& summary, const ExperimentConfig& cfg);

/// RFC 4180 quoting; header row first.
std::string to_csv(const Table& t);
/// Array of row objects keyed by column name. Reals are rounded to 6
/// significant digits; non-finite reals become strings.
std::string to_json(const Table& t);
std::string render(const Table& t, OutputFormat fmt);

/// Resolved config, RNG algorithm, lab version, and experiment name.
std::string metadata_json(std::string_view experiment, const ExperimentConfig& cfg);

/// Writes the table to path and the metadata to path + ".meta.json".
void write_outputs(const std::string& path, const Table& t, OutputFormat fmt, std::string_view experiment,
                   const ExperimentConfig& cfg);

}  // namespace sagelab

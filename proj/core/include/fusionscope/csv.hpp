#pragma once

#include <string>
#include <vector>

namespace fusionscope::csvio {

using Row = std::vector<std::string>;

/// Quotes a field when it contains commas, quotes, or newlines.
std::string escape(const std::string& field);

std::string format_row(const Row& row);

/// Reads a whole CSV file, honoring quoted fields (including embedded
/// newlines and doubled quotes). Returns one Row per record.
std::vector<Row> read_csv(const std::string& path);

std::vector<Row> parse_csv_text(const std::string& text);

void write_csv(const std::string& path, const Row& header, const std::vector<Row>& rows);

} // namespace fusionscope::csvio

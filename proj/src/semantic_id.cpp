#include "mmq/semantic_id.hpp"

#include "mmq/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <string>

namespace mmq {

void write_semantic_ids(const SemanticIdTable& table, const std::filesystem::path& path) {
  if (table.item_ids.size() != table.ids.size()) throw std::invalid_argument("semantic id table: ids/items size mismatch");
  const std::size_t len = table.ids.empty() ? 0 : table.ids.front().length();
  std::string out = "item_id";
  for (std::size_t j = 1; j <= len; ++j) out += "\tc_" + std::to_string(j);
  out += '\n';
  for (std::size_t i = 0; i < table.ids.size(); ++i) {
    if (table.ids[i].length() != len) throw std::invalid_argument("semantic id table: ragged id lengths");
    out += std::to_string(table.item_ids[i]);
    for (auto c : table.ids[i].codes) out += '\t' + std::to_string(c);
    out += '\n';
  }
  binio::write_file(path, out);
}

SemanticIdTable read_semantic_ids(const std::filesystem::path& path) {
  std::istringstream in(binio::read_file(path));
  std::string line;
  if (!std::getline(in, line) || line.rfind("item_id", 0) != 0)
    throw FormatError(path.string() + ": missing semantic id header", 0);
  std::size_t len = 0;
  for (char ch : line) len += ch == '\t';
  SemanticIdTable table;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(row, field, '\t')) fields.push_back(field);
    if (fields.size() != len + 1)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(len + 1) + " columns", 0);
    try {
      table.item_ids.push_back(std::stoull(fields[0]));
      SemanticId id;
      for (std::size_t j = 1; j < fields.size(); ++j) id.codes.push_back(static_cast<std::uint32_t>(std::stoul(fields[j])));
      table.ids.push_back(std::move(id));
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed row", 0);
    }
  }
  return table;
}

}  // namespace mmq

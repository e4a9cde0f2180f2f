#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace mmq {

/// Slot-ordered code indices for one item.
struct SemanticId {
  std::vector<std::uint32_t> codes;

  std::size_t length() const { return codes.size(); }
  bool operator==(const SemanticId&) const = default;
};

struct SemanticIdTable {
  std::vector<std::uint64_t> item_ids;
  std::vector<SemanticId> ids;
};

/// TSV with header "item_id\tc_1\t...\tc_l".
void write_semantic_ids(const SemanticIdTable& table, const std::filesystem::path& path);
SemanticIdTable read_semantic_ids(const std::filesystem::path& path);

}  // namespace mmq

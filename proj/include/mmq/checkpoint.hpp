#pragma once

#include "mmq/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mmq {

/// Raised on malformed binary files; `offset` is the byte position where
/// decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  MatrixF value;
};

/// Binary layout (little-endian):
///   "MMQW" u32 version=1 u32 count
///   count x { u16 name_len, name, u32 rows, u32 cols, rows*cols f32 }
///   optional trailer: "MMQM" u32 len, len bytes of UTF-8 JSON metadata
struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::string metadata_json;

  const NamedTensor* find(const std::string& name) const;
  const MatrixF& at(const std::string& name) const;

  bool operator==(const Checkpoint& o) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Little-endian helpers shared by the binary formats.
namespace binio {

void put_u16(std::string& out, std::uint16_t v);
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f32(std::string& out, float v);

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  void f32_block(float* dst, std::size_t n);
  std::string raw(std::size_t n);
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n);
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace binio

}  // namespace mmq

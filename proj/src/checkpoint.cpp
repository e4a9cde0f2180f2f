#include "mmq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace mmq {

namespace binio {

void put_u16(std::string& out, std::uint16_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); }
void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); }
void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); }
void put_f32(std::string& out, float v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); }

void Reader::need(std::size_t n) {
  if (remaining() < n) throw FormatError("truncated input: need " + std::to_string(n) + " bytes", pos_);
}

std::uint16_t Reader::u16() {
  need(2);
  std::uint16_t v;
  std::memcpy(&v, bytes_.data() + pos_, 2);
  pos_ += 2;
  return v;
}

std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v;
  std::memcpy(&v, bytes_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

std::uint64_t Reader::u64() {
  need(8);
  std::uint64_t v;
  std::memcpy(&v, bytes_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

float Reader::f32() {
  need(4);
  float v;
  std::memcpy(&v, bytes_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

void Reader::f32_block(float* dst, std::size_t n) {
  need(n * 4);
  std::memcpy(dst, bytes_.data() + pos_, n * 4);
  pos_ += n * 4;
}

std::string Reader::raw(std::size_t n) {
  need(n);
  std::string s = bytes_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace binio

namespace {
constexpr char kMagic[4] = {'M', 'M', 'Q', 'W'};
constexpr char kMetaMagic[4] = {'M', 'M', 'Q', 'M'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const MatrixF& Checkpoint::at(const std::string& name) const {
  const auto* t = find(name);
  if (!t) throw std::out_of_range("checkpoint has no tensor '" + name + "'");
  return t->value;
}

bool Checkpoint::operator==(const Checkpoint& o) const {
  if (metadata_json != o.metadata_json || tensors.size() != o.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& a = tensors[i];
    const auto& b = o.tensors[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
    if (std::memcmp(a.value.data(), b.value.data(), sizeof(float) * static_cast<std::size_t>(a.value.size())) != 0)
      return false;
  }
  return true;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  binio::put_u32(out, kVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) throw std::length_error("tensor name too long");
    binio::put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    binio::put_u32(out, static_cast<std::uint32_t>(t.value.rows()));
    binio::put_u32(out, static_cast<std::uint32_t>(t.value.cols()));
    out.append(reinterpret_cast<const char*>(t.value.data()), sizeof(float) * static_cast<std::size_t>(t.value.size()));
  }
  if (!ckpt.metadata_json.empty()) {
    out.append(kMetaMagic, 4);
    binio::put_u32(out, static_cast<std::uint32_t>(ckpt.metadata_json.size()));
    out += ckpt.metadata_json;
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  binio::Reader r(bytes);
  if (r.raw(4) != std::string(kMagic, 4)) throw FormatError("bad checkpoint magic", 0);
  const auto ver_at = r.offset();
  if (r.u32() != kVersion) throw FormatError("unsupported checkpoint version", ver_at);
  const auto count = r.u32();
  Checkpoint ckpt;
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.u16();
    t.name = r.raw(len);
    const auto rows = r.u32();
    const auto cols = r.u32();
    const auto shape_at = r.offset();
    const std::uint64_t n = static_cast<std::uint64_t>(rows) * cols;
    if (n * 4 > r.remaining()) throw FormatError("tensor '" + t.name + "' truncated", shape_at);
    t.value.resize(rows, cols);
    r.f32_block(t.value.data(), n);
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) {
    const auto at = r.offset();
    if (r.raw(4) != std::string(kMetaMagic, 4)) throw FormatError("unexpected trailing bytes", at);
    const auto len = r.u32();
    ckpt.metadata_json = r.raw(len);
    if (!r.at_end()) throw FormatError("unexpected trailing bytes", r.offset());
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  binio::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(binio::read_file(path)); }

}  // namespace mmq

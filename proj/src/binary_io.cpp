/*
 Copyright 2026 The diffmpc Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#include "diffmpc/binary_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace diffmpc {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for large buffers.
  const auto* data = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t left = bytes.size();
  while (left > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    left -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string hex_digest(std::string_view text) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc32_of(text);
  return os.str();
}

void ByteWriter::put_u32(std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buffer_.append(b, 4);
}

void ByteWriter::put_u64(std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  buffer_.append(b, 8);
}

void ByteWriter::put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::put_string(std::string_view s) {
  put_u32(static_cast<std::uint32_t>(s.size()));
  buffer_.append(s);
}

std::string_view ByteReader::get_bytes(std::size_t n) {
  if (remaining() < n) throw FormatError("truncated file");
  auto out = bytes_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint8_t ByteReader::get_u8() { return static_cast<std::uint8_t>(get_bytes(1)[0]); }

std::uint32_t ByteReader::get_u32() {
  std::uint32_t v;
  std::memcpy(&v, get_bytes(4).data(), 4);
  return v;
}

std::uint64_t ByteReader::get_u64() {
  std::uint64_t v;
  std::memcpy(&v, get_bytes(8).data(), 8);
  return v;
}

double ByteReader::get_f64() { return std::bit_cast<double>(get_u64()); }

std::string ByteReader::get_string() {
  const auto n = get_u32();
  return std::string(get_bytes(n));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

void write_checksummed(const std::string& path, const std::string& payload) {
  ByteWriter trailer;
  trailer.put_u32(crc32_of(payload));
  write_file(path, payload + trailer.bytes());
}

std::string read_checksummed(const std::string& path) {
  std::string bytes = read_file(path);
  if (bytes.size() < 4) throw FormatError("'" + path + "' is truncated");
  const std::string_view body(bytes.data(), bytes.size() - 4);
  ByteReader trailer(std::string_view(bytes).substr(bytes.size() - 4));
  if (trailer.get_u32() != crc32_of(body)) throw FormatError("checksum mismatch in '" + path + "'");
  bytes.resize(bytes.size() - 4);
  return bytes;
}

}  // namespace diffmpc

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

#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "diffmpc/types.hpp"

namespace diffmpc {

/// CRC-32 (zlib polynomial) of a byte range.
std::uint32_t crc32_of(std::string_view bytes);

/// Short hex digest of a canonical text description.
std::string hex_digest(std::string_view text);

/// Appends little-endian primitives to an in-memory buffer.
class ByteWriter {
 public:
  void put_u8(std::uint8_t v) { buffer_.push_back(static_cast<char>(v)); }
  void put_u32(std::uint32_t v);
  void put_u64(std::uint64_t v);
  void put_f64(double v);
  void put_bytes(std::string_view bytes) { buffer_.append(bytes); }
  void put_string(std::string_view s);  // u32 length prefix

  const std::string& bytes() const { return buffer_; }

 private:
  std::string buffer_;
};

/// Bounds-checked little-endian reader; throws FormatError on truncation.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint8_t get_u8();
  std::uint32_t get_u32();
  std::uint64_t get_u64();
  double get_f64();
  std::string_view get_bytes(std::size_t n);
  std::string get_string();

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

/// Appends a CRC-32 trailer to `payload` and writes it.
void write_checksummed(const std::string& path, const std::string& payload);

/// Reads a file written by write_checksummed, verifies and strips the trailer.
std::string read_checksummed(const std::string& path);

}  // namespace diffmpc

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
#include <map>
#include <string>
#include <vector>

namespace diffmpc::cli {

/// Sectioned key-value settings ("section.key" -> raw text) with a fixed key whitelist.
class Settings {
 public:
  static Settings from_file(const std::string& path);
  static Settings from_text(const std::string& text);

  /// `assignment` is "section.key=value".
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string text(const std::string& key, const std::string& fallback) const;
  double number(const std::string& key, double fallback) const;
  int integer(const std::string& key, int fallback) const;
  std::uint64_t unsigned_integer(const std::string& key, std::uint64_t fallback) const;
  bool flag(const std::string& key, bool fallback) const;
  std::vector<double> numbers(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<std::string> words(const std::string& key, const std::vector<std::string>& fallback) const;
  double required_number(const std::string& key) const;

  /// Canonical "key=value" lines, sorted.
  std::string canonical() const;
  std::string digest() const;

  static const std::vector<std::string>& known_keys();

 private:
  std::map<std::string, std::string> values_;
};

int cli_main(int argc, const char* const* argv);

}  // namespace diffmpc::cli

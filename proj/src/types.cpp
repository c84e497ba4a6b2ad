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

#include "diffmpc/types.hpp"

namespace diffmpc {

void InputBox::validate() const {
  if (lower.size() != upper.size() || lower.size() == 0) throw ConfigError("input box bounds must share a nonzero width");
  if (!lower.allFinite() || !upper.allFinite()) throw ConfigError("input box bounds must be finite");
  if (!(lower.array() < upper.array()).all()) throw ConfigError("input box requires lower < upper componentwise");
}

bool InputBox::contains(const Input& u) const {
  return u.size() == lower.size() && (u.array() >= lower.array()).all() && (u.array() <= upper.array()).all();
}

bool InputBox::contains(const ControlSequence& u) const {
  if (u.input_dim() != dim()) return false;
  for (int i = 0; i < u.horizon(); ++i) {
    auto ui = u.input(i);
    if ((ui.array() < lower.array()).any() || (ui.array() > upper.array()).any()) return false;
  }
  return true;
}

double sequence_distance(const ControlSequence& a, const ControlSequence& b) {
  if (a.flat().size() != b.flat().size()) throw DimensionError("sequence_distance: length mismatch");
  return (a.flat() - b.flat()).norm();
}

}  // namespace diffmpc

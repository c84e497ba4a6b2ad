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

#include "diffmpc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace diffmpc {

double default_mode_threshold(const InputBox& box, int horizon) {
  const double width = (box.upper - box.lower).maxCoeff();
  return 0.25 * width * std::sqrt(static_cast<double>(horizon) * box.dim());
}

std::vector<int> threshold_cluster_labels(const std::vector<ControlSequence>& sequences, double tau) {
  const std::size_t n = sequences.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (sequence_distance(sequences[i], sequences[j]) <= tau) {
        const std::size_t a = find(i), b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
    }
  }
  std::vector<int> labels(n, -1);
  std::vector<int> root_label(n, -1);
  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = find(i);
    if (root_label[r] < 0) root_label[r] = next++;
    labels[i] = root_label[r];
  }
  return labels;
}

int threshold_cluster_count(const std::vector<ControlSequence>& sequences, double tau) {
  const auto labels = threshold_cluster_labels(sequences, tau);
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

bool has_separated_pair(const std::vector<ControlSequence>& sequences, double tau) {
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    for (std::size_t j = i + 1; j < sequences.size(); ++j) {
      if (sequence_distance(sequences[i], sequences[j]) > tau) return true;
    }
  }
  return false;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

}  // namespace diffmpc

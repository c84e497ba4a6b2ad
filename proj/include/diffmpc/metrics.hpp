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

#include <vector>

#include "diffmpc/types.hpp"

namespace diffmpc {

/// Mode-separation threshold scaled to the problem:
/// 0.25 * (box width) * sqrt(H * n_u). Uses the widest input dimension.
double default_mode_threshold(const InputBox& box, int horizon);

/// Number of single-linkage clusters when sequences closer than or equal to
/// `tau` are joined.
int threshold_cluster_count(const std::vector<ControlSequence>& sequences, double tau);

/// Cluster label per sequence (labels 0..k-1 in order of first appearance).
std::vector<int> threshold_cluster_labels(const std::vector<ControlSequence>& sequences, double tau);

/// True if some pair of sequences is farther apart than `tau`.
bool has_separated_pair(const std::vector<ControlSequence>& sequences, double tau);

double median(std::vector<double> values);
double quantile(std::vector<double> values, double q);  // linear interpolation, q in [0, 1]

}  // namespace diffmpc

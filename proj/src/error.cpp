// Copyright 2026 The lidarcal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "lidarcal/error.hpp"

namespace lidarcal {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kInvalidConfig: return "invalid-config";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kFilterDivergence: return "filter-divergence";
    case ErrorCode::kOutOfCoverage: return "out-of-coverage";
    case ErrorCode::kNoPlaneFound: return "no-plane-found";
    case ErrorCode::kInsufficientPoints: return "insufficient-points";
    case ErrorCode::kMissingPose: return "missing-pose";
    case ErrorCode::kDegenerateGeometry: return "degenerate-geometry";
    case ErrorCode::kCoplanarInput: return "coplanar-input";
    case ErrorCode::kUnknownObservation: return "unknown-observation";
  }
  return "unknown";
}

}  // namespace lidarcal

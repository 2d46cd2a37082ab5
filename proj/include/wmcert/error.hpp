/* Copyright 2026 The wmcert Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef WMCERT_ERROR_HPP_
#define WMCERT_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace wmcert {

/// Error categories surfaced by the library. The CLI maps them to exit codes.
enum class ErrorKind {
  kInvalidArgument,
  kDomain,
  kDegenerate,
  kSingularGeometry,
  kInsufficientSamples,
  kInfeasibleThreshold,
  kNumeric,
  kTrainingFailure,
  kAttackFailure,
  kInvalidConfiguration,
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  bool numeric() const noexcept {
    return kind_ == ErrorKind::kNumeric || kind_ == ErrorKind::kDomain ||
           kind_ == ErrorKind::kSingularGeometry ||
           kind_ == ErrorKind::kTrainingFailure ||
           kind_ == ErrorKind::kInfeasibleThreshold;
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, const std::string& what,
                    ErrorKind kind = ErrorKind::kInvalidArgument) {
  if (!cond) fail(kind, what);
}

}  // namespace wmcert

#endif  // WMCERT_ERROR_HPP_

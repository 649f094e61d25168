// Copyright 2026 The selfdistill Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

#include <stdexcept>
#include <string>

namespace selfdistill {

// Two families of failures: bad data (files, records, caller contracts)
// and a misbehaving detector plugin. The CLI maps them to exit codes 2 and 3.

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public DataError {
 public:
  using DataError::DataError;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

class ReferentialError : public DataError {
 public:
  using DataError::DataError;
};

class ContractViolation : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class PluginError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Wire-level violation: non-JSON line, oversize frame, id mismatch.
class ProtocolError : public PluginError {
 public:
  using PluginError::PluginError;
};

class VersionMismatch : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

class PluginTimeout : public PluginError {
 public:
  using PluginError::PluginError;
};

/// The plugin answered with status "error".
class PluginReportedError : public PluginError {
 public:
  using PluginError::PluginError;
};

/// The plugin reported success but its output file is missing or invalid.
class PluginOutputError : public PluginError {
 public:
  using PluginError::PluginError;
};

/// Child process could not be started or exited mid-session.
class PluginCrashed : public PluginError {
 public:
  using PluginError::PluginError;
};

}  // namespace selfdistill

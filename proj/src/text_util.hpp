// Copyright 2026 The IoRT Arm Authors
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

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace iort::detail {

/// Fixed notation with at most six fractional digits, trailing zeros and a
/// bare "-0" stripped. Caller guarantees `v` is finite.
std::string format_fixed6(double v);

/// Shortest representation that parses back to the same double.
std::string format_shortest(double v);

/// Appends `s` as a JSON string literal (quotes included).
void append_json_string(std::string& out, std::string_view s);

class NonFiniteNumber : public std::domain_error {
public:
    explicit NonFiniteNumber(const std::string& key)
        : std::domain_error("non-finite value for '" + key + "'") {}
};

/// Streams one JSON object with keys in call order.
class ObjectWriter {
public:
    explicit ObjectWriter(std::string& out) : out_(out) { out_.push_back('{'); }

    /// Throws NonFiniteNumber for NaN/inf.
    ObjectWriter& num(std::string_view key, double v);
    ObjectWriter& i64(std::string_view key, std::int64_t v);
    ObjectWriter& u64(std::string_view key, std::uint64_t v);
    ObjectWriter& str(std::string_view key, std::string_view v);
    ObjectWriter& boolean(std::string_view key, bool v);
    ObjectWriter& null(std::string_view key);
    ObjectWriter& raw(std::string_view key, std::string_view json_text);
    void close() { out_.push_back('}'); }

private:
    void key(std::string_view k);

    std::string& out_;
    bool first_ = true;
};

/// Writes via a sibling temp file and rename so readers never see a torn file.
void write_file_atomic(const std::string& path, std::string_view content);
std::string read_file(const std::string& path);

std::vector<std::string_view> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);

}  // namespace iort::detail
